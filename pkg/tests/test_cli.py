import json
import os

import numpy as np
import pytest

from meshfield.cameras import camera_at, spherical_position
from meshfield.cli import (
    build_pipeline_config,
    load_dataset,
    load_png,
    main,
    make_reference_edit,
    parse_config_file,
    save_dataset,
    save_png,
    SceneDataset,
)
from meshfield.distill import sphere_scene, teacher_render_view
from meshfield.errors import ConfigError, DataError
from meshfield.field import load_field
from meshfield.geometry import load_obj
from meshfield.locate import load_region
from tests.test_field import small_field
from tests.test_edit import region_on


SMALL_CONFIG = """
# desk-scale mock pipeline
seed = 3
out_dir = {out}
prompt = give the sphere a painted cap
keyword = cap
dtype = float32

teacher.kind = sphere
teacher.grid_res = 24

field.feature_dim = 8
field.geo_hidden = 16
field.color_hidden = 16
field.k_neighbors = 8
field.render_samples = 8
field.window_fraction = 0.3

scope.radius = 2.2
scope.elevation = 0, 45
scope.azimuth = 0, 315

distill.iterations = 40
distill.lr = 0.002
distill.rays_per_batch = 64
distill.samples_per_ray = 8
distill.log_every = 20

locate.step = 45
locate.agg_resolution = 48
locate.render_resolution = 16
locate.render_samples = 8
locate.mock_gt = top

edit.iterations = 4
edit.lr = 0.002
edit.resolution_start = 16
edit.resolution_end = 24
edit.n_samples = 6

oracle.kind = mock
render.resolution = 24
render.views = 2
"""


def write_config(tmp_path, text=None):
    cfg_path = tmp_path / "run.cfg"
    out = tmp_path / "out"
    cfg_path.write_text((text or SMALL_CONFIG).format(out=out))
    return str(cfg_path), str(out)


# ---------------------------------------------------------------------------
# config parsing

def test_parse_config_round_trip(tmp_path):
    path, out = write_config(tmp_path)
    raw = parse_config_file(path)
    assert raw["teacher.kind"] == "sphere"
    assert raw["seed"] == "3"
    cfg = build_pipeline_config(raw)
    assert cfg.distill.iterations == 40
    assert cfg.locate.tau == 0.75
    assert cfg.edit.resolution_end == 24
    assert cfg.scope.azimuth_range == (0.0, 315.0)
    assert len(cfg.config_hash) == 64


def test_config_hash_changes_with_content_and_seed(tmp_path):
    path, _ = write_config(tmp_path)
    raw = parse_config_file(path)
    a = build_pipeline_config(raw).config_hash
    b = build_pipeline_config(raw, seed_override=99).config_hash
    assert a != b
    raw2 = dict(raw)
    raw2["edit.lr"] = "0.5"
    assert build_pipeline_config(raw2).config_hash != a


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("this line has no equals sign\n")
    with pytest.raises(ConfigError):
        parse_config_file(str(bad))
    with pytest.raises(ConfigError):
        build_pipeline_config({"dtype": "float16"})


def test_keyword_not_in_prompt_warns(tmp_path, capsys):
    build_pipeline_config({"prompt": "a dog", "keyword": "hat"})
    assert "keyword" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# dataset

def synthetic_dataset(tmp_path, n_frames=3, size=24):
    teacher = sphere_scene(0.5)
    images, cameras = [], []
    for i in range(n_frames):
        cam = camera_at(spherical_position(2.0, 15.0, 120.0 * i),
                        width=size, height=size)
        images.append(teacher_render_view(teacher, cam, n_samples=48))
        cameras.append(cam)
    ds = SceneDataset(images=images, cameras=cameras, normalized=False,
                      transform=np.eye(4))
    path = tmp_path / "scene"
    save_dataset(ds, str(path))
    return str(path), teacher


def test_dataset_round_trip(tmp_path):
    path, _ = synthetic_dataset(tmp_path)
    ds = load_dataset(path)
    assert len(ds.images) == 3 and len(ds.cameras) == 3
    assert not ds.normalized
    # 8-bit png quantization only
    first = load_png(os.path.join(path, "images", "frame_0000.png"))
    np.testing.assert_allclose(ds.images[0], first, atol=1e-12)


def test_dataset_identity_pose_center_pixel_ray():
    cam = camera_at(np.array([0.0, 0.0, 2.0]), width=32, height=32)
    o, d = cam.ray_through(cam.cx, cam.cy)
    np.testing.assert_allclose(d, cam.optical_axis, atol=1e-9)


def test_dataset_normalization_applied_once(tmp_path):
    path, _ = synthetic_dataset(tmp_path)
    bbox = [[-0.2, -0.1, -0.3], [0.6, 0.7, 0.5]]
    ds = load_dataset(path, object_bbox=bbox)
    assert ds.normalized
    np.testing.assert_allclose(ds.transform[:3, 3], [-0.2, -0.3, -0.1])


def test_dataset_rerender_self_consistency(tmp_path):
    path, teacher = synthetic_dataset(tmp_path, n_frames=2, size=32)
    ds = load_dataset(path)
    for img, cam in zip(ds.images, ds.cameras):
        re = teacher_render_view(teacher, cam, n_samples=48)
        mse = float(np.mean((img - re) ** 2))
        psnr = 10 * np.log10(1.0 / max(mse, 1e-12))
        assert psnr >= 30.0, f"re-render PSNR {psnr}"


def test_dataset_missing_files_rejected(tmp_path):
    with pytest.raises(DataError):
        load_dataset(str(tmp_path / "nope"))
    path, _ = synthetic_dataset(tmp_path)
    meta = json.load(open(os.path.join(path, "poses.json")))
    meta["frames"][0]["camera_to_world"][0] = 5.0  # break orthonormality
    json.dump(meta, open(os.path.join(path, "poses.json"), "w"))
    with pytest.raises(DataError):
        load_dataset(path)


# ---------------------------------------------------------------------------
# stages

def test_stage_ordering_enforced(tmp_path):
    cfg_path, out = write_config(tmp_path)
    assert main(["edit", "--config", cfg_path]) == 1
    assert main(["locate", "--config", cfg_path]) == 1
    assert main(["render", "--config", cfg_path]) == 1


def test_full_mock_pipeline_and_artifacts(tmp_path):
    import time
    t0 = time.time()
    cfg_path, out = write_config(tmp_path)
    assert main(["distill", "--config", cfg_path]) == 0
    assert os.path.exists(os.path.join(out, "field.ckpt"))
    assert main(["locate", "--config", cfg_path]) == 0
    assert os.path.exists(os.path.join(out, "region.txt"))
    assert os.path.exists(os.path.join(out, "masks", "view_000.png"))
    # pre-edit OBJ for the frozen-region file-level check
    assert main(["export-mesh", "--config", cfg_path]) == 0
    pre = load_obj(os.path.join(out, "mesh.obj"))
    assert main(["edit", "--config", cfg_path]) == 0
    assert os.path.exists(os.path.join(out, "edited.ckpt"))
    metrics = open(os.path.join(out, "metrics.csv")).read().splitlines()
    assert metrics[0] == "iter,sds_proxy,lap,arap,max_disp,res"
    assert len(metrics) == 5
    assert main(["render", "--config", cfg_path]) == 0
    assert os.path.exists(os.path.join(out, "turntable", "az_000.png"))
    assert main(["export-mesh", "--config", cfg_path]) == 0
    post = load_obj(os.path.join(out, "mesh.obj"))
    # frozen-region invariant surfaced at file level
    field, _ = load_field(os.path.join(out, "field.ckpt"))
    region, _ = load_region(os.path.join(out, "region.txt"), field.mesh)
    outside = np.ones(field.mesh.n_vertices, dtype=bool)
    outside[region.vertex_ids] = False
    np.testing.assert_array_equal(pre.vertices[outside], post.vertices[outside])
    np.testing.assert_array_equal(pre.faces, post.faces)
    moved = np.abs(pre.vertices[~outside] - post.vertices[~outside]).max()
    assert moved > 0
    # soft CI bound: the whole mock pipeline stays inside the CPU budget
    assert time.time() - t0 < 600


def test_hash_mismatch_refused_without_force(tmp_path):
    cfg_path, out = write_config(tmp_path)
    assert main(["distill", "--config", cfg_path]) == 0
    # change the config: locate must refuse the stale checkpoint
    text = SMALL_CONFIG.format(out=out).replace("distill.lr = 0.002",
                                                "distill.lr = 0.001")
    (os.path.exists(cfg_path))
    with open(cfg_path, "w") as fh:
        fh.write(text)
    assert main(["locate", "--config", cfg_path]) == 2
    assert main(["locate", "--config", cfg_path, "--force"]) == 0


def test_unknown_stage_usage_error(tmp_path):
    cfg_path, _ = write_config(tmp_path)
    assert main(["explode", "--config", cfg_path]) == 1


def test_export_mesh_isosurface_reextraction(tmp_path):
    text = SMALL_CONFIG + "\nexport.marching_cubes_res = 20\n"
    cfg_path, out = write_config(tmp_path, text)
    assert main(["distill", "--config", cfg_path]) == 0
    assert main(["export-mesh", "--config", cfg_path]) == 0
    iso = load_obj(os.path.join(out, "mesh_isosurface.obj"))
    # a 40-iteration field is barely trained; just check the level set is a
    # real surface in the scene (quality is the distillation criterion's job)
    r = np.linalg.norm(iso.vertices, axis=1)
    assert iso.n_faces > 50
    assert np.isfinite(iso.vertices).all()
    assert 0.15 < np.median(r) < 0.9


def test_reference_edit_moves_only_region():
    f = small_field(seed=70, subdiv=2)
    region = region_on(f, lambda c: c[:, 1] > 0.3)
    ref = make_reference_edit(f, region, bump=0.1, color_delta=0.5, seed=1)
    outside = np.ones(f.mesh.n_vertices, dtype=bool)
    outside[region.vertex_ids] = False
    np.testing.assert_array_equal(ref.mesh.vertices[outside],
                                  f.mesh.vertices[outside])
    np.testing.assert_array_equal(ref.f_c[outside], f.f_c[outside])
    assert np.abs(ref.mesh.vertices[~outside] - f.mesh.vertices[~outside]).max() > 0.05
