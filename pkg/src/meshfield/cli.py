"""Operator-facing pipeline: distill -> locate -> edit -> render/export.

Config files are flat `key = value` text with dotted keys (full key table in
the README). Every stage writes artifacts stamped with the config hash and
refuses inputs stamped by a different config unless --force. Exit codes:
1 usage/config, 2 data, 3 numeric divergence, 4 oracle.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from .cameras import Camera, CameraScope, camera_at, spherical_position
from .distill import DistillConfig, distill_train, extract_teacher_mesh, make_teacher
from .edit import EditConfig, edit_loop, save_metrics
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    NoRegionFoundError,
    OracleError,
)
from .field import build_field, load_field, render_view, save_field
from .geometry import marching_cubes, save_obj
from .guidance import MockAttentionOracle, MockTargetOracle, remote_oracle
from .locate import LocateConfig, locate_editing_region, save_region, load_region

STAGES = ("distill", "locate", "edit", "render", "export-mesh")

__all__ = ["main", "run_stage", "parse_config_file", "PipelineConfig",
           "load_dataset", "SceneDataset", "make_reference_edit",
           "save_png", "load_png"]


# ---------------------------------------------------------------------------
# images


def save_png(path, image):
    """Float image in [0,1] (HxW grayscale or HxWx3) -> 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# config


def parse_config_file(path):
    """Flat dotted-key config text -> dict of strings."""
    out = {}
    try:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, val = line.split("=", 1)
                out[key.strip()] = val.strip()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return out


def _get(cfg, key, default, cast=str):
    if key not in cfg or cfg[key] == "":
        return default
    try:
        if cast is bool:
            return cfg[key].lower() in ("1", "true", "yes", "on")
        return cast(cfg[key])
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {cfg[key]!r}") from err


def _floats(cfg, key, default):
    if key not in cfg or cfg[key] == "":
        return default
    return tuple(float(p) for p in cfg[key].split(","))


@dataclass
class PipelineConfig:
    raw: dict
    seed: int
    out_dir: str
    prompt: str
    keyword: str
    dtype: object
    teacher_kind: str
    teacher_path: str
    grid_res: int
    field_kw: dict
    scope: CameraScope
    distill: DistillConfig
    locate: LocateConfig
    edit: EditConfig
    oracle_kind: str
    oracle_url: str
    mock_gt: str
    mock_bump: float
    mock_color_delta: float
    render_resolution: int
    render_views: int
    config_hash: str = ""


def build_pipeline_config(raw, seed_override=None):
    seed = seed_override if seed_override is not None else _get(raw, "seed", 0, int)
    scope = CameraScope(
        radius=_get(raw, "scope.radius", 2.2, float),
        elevation_range=_floats(raw, "scope.elevation", (0.0, 45.0)),
        azimuth_range=_floats(raw, "scope.azimuth", (0.0, 315.0)),
    )
    prompt = _get(raw, "prompt", "", str)
    keyword = _get(raw, "keyword", "", str)
    if keyword and keyword not in prompt:
        print(f"warning: keyword {keyword!r} does not appear in the prompt",
              file=sys.stderr)
    dtype = {"float32": np.float32, "float64": np.float64}.get(
        _get(raw, "dtype", "float32", str))
    if dtype is None:
        raise ConfigError("dtype must be float32 or float64")
    field_kw = dict(
        feature_dim=_get(raw, "field.feature_dim", 32, int),
        geo_hidden=tuple(int(x) for x in
                         str(_get(raw, "field.geo_hidden", "32", str)).split(",")),
        color_hidden=tuple(int(x) for x in
                           str(_get(raw, "field.color_hidden", "32", str)).split(",")),
        k_neighbors=_get(raw, "field.k_neighbors", 8, int),
        n_freq_dir=_get(raw, "field.n_freq_dir", 4, int),
        render_samples=_get(raw, "field.render_samples", 16, int),
        window_fraction=_get(raw, "field.window_fraction", 0.22, float),
    )
    distill = DistillConfig(
        iterations=_get(raw, "distill.iterations", 100_000, int),
        lr=_get(raw, "distill.lr", 1e-4, float),
        rays_per_batch=_get(raw, "distill.rays_per_batch", 256, int),
        samples_per_ray=_get(raw, "distill.samples_per_ray", 12, int),
        lambda_reg=_get(raw, "distill.lambda_reg", 0.01, float),
        scope=scope, seed=seed,
        log_every=_get(raw, "distill.log_every", 500, int),
    )
    locate = LocateConfig(
        tau=_get(raw, "locate.tau", 0.75, float),
        traversal_step=_get(raw, "locate.step", 45.0, float),
        discard_fraction=_get(raw, "locate.discard_fraction", 0.10, float),
        agg_resolution=_get(raw, "locate.agg_resolution", 128, int),
        render_resolution=_get(raw, "locate.render_resolution", 256, int),
        render_samples=_get(raw, "locate.render_samples", 16, int),
        steps=_get(raw, "locate.steps", 3, int),
        aggregation=_get(raw, "locate.aggregation", "mean", str),
        scope=scope,
    )
    edit = EditConfig(
        iterations=_get(raw, "edit.iterations", 2000, int),
        lr=_get(raw, "edit.lr", 1e-2, float),
        lambda_lap=_get(raw, "edit.lambda_lap", 1e-4, float),
        lambda_arap=_get(raw, "edit.lambda_arap", 1e-4, float),
        resolution_start=_get(raw, "edit.resolution_start", 96, int),
        resolution_mid=_get(raw, "edit.resolution_mid", 0, int),
        resolution_end=_get(raw, "edit.resolution_end", 192, int),
        n_samples=_get(raw, "edit.n_samples", 12, int),
        scope=scope, seed=seed, prompt=prompt,
        guidance_scale=_get(raw, "edit.guidance_scale", 7.5, float),
        camera_pool=_get(raw, "edit.camera_pool", 0, int),
        use_view_cache=_get(raw, "edit.use_view_cache", False, bool),
    )
    oracle_url = os.environ.get("MESHFIELD_ORACLE_URL",
                                _get(raw, "oracle.url", "", str))
    canon = "\n".join(f"{k} = {raw[k]}" for k in sorted(raw)) + f"\nseed = {seed}"
    cfg_hash = hashlib.sha256(canon.encode()).hexdigest()
    return PipelineConfig(
        raw=raw, seed=seed, out_dir=_get(raw, "out_dir", "runs/out", str),
        prompt=prompt, keyword=keyword, dtype=dtype,
        teacher_kind=_get(raw, "teacher.kind", "sphere", str),
        teacher_path=_get(raw, "teacher.grid_path", "", str),
        grid_res=_get(raw, "teacher.grid_res", 48, int),
        field_kw=field_kw, scope=scope, distill=distill, locate=locate,
        edit=edit,
        oracle_kind=_get(raw, "oracle.kind", "mock", str),
        oracle_url=oracle_url,
        mock_gt=_get(raw, "locate.mock_gt", "top", str),
        mock_bump=_get(raw, "edit.mock_bump", 0.08, float),
        mock_color_delta=_get(raw, "edit.mock_color_delta", 0.6, float),
        render_resolution=_get(raw, "render.resolution", 192, int),
        render_views=_get(raw, "render.views", 8, int),
        config_hash=cfg_hash,
    )


def _write_meta(path, cfg, extra=None):
    meta = {"config_hash": cfg.config_hash, "seed": cfg.seed}
    meta.update(extra or {})
    with open(str(path) + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def _check_meta(path, cfg, force):
    meta_path = str(path) + ".meta.json"
    if not os.path.exists(meta_path):
        return
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("config_hash") != cfg.config_hash and not force:
        raise DataError(
            f"{path} was produced by a different config "
            f"({meta.get('config_hash', '?')[:12]}..); rerun or pass --force")


# ---------------------------------------------------------------------------
# dataset


@dataclass
class SceneDataset:
    images: list
    cameras: list
    normalized: bool
    transform: np.ndarray


def load_dataset(path, object_bbox=None):
    """Directory with images/ and poses.json. poses.json:
    {"intrinsics": {fx, fy, cx, cy, width, height},
     "frames": [{"file": ..., "camera_to_world": [16 row-major floats]}]}.
    object_bbox (two corners) recenters the object at the origin."""
    poses_path = os.path.join(path, "poses.json")
    if not os.path.exists(poses_path):
        raise DataError(f"missing {poses_path}")
    with open(poses_path) as fh:
        meta = json.load(fh)
    intr = meta.get("intrinsics")
    frames = meta.get("frames")
    if not intr or frames is None:
        raise DataError("poses.json needs intrinsics and frames")
    images, cameras = [], []
    shift = np.zeros(3)
    if object_bbox is not None:
        bb = np.asarray(object_bbox, dtype=np.float64).reshape(2, 3)
        shift = -(bb[0] + bb[1]) / 2.0
    transform = np.eye(4)
    transform[:3, 3] = shift
    for fr in frames:
        img_path = os.path.join(path, "images", fr["file"])
        if not os.path.exists(img_path):
            raise DataError(f"missing image {img_path}")
        images.append(load_png(img_path))
        c2w = np.asarray(fr["camera_to_world"], dtype=np.float64).reshape(4, 4)
        R = c2w[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-3:
            raise DataError(f"non-orthonormal rotation in frame {fr['file']}")
        c2w = c2w.copy()
        c2w[:3, 3] += shift
        try:
            cameras.append(Camera(fx=float(intr["fx"]), fy=float(intr["fy"]),
                                  cx=float(intr["cx"]), cy=float(intr["cy"]),
                                  camera_to_world=c2w,
                                  width=int(intr["width"]),
                                  height=int(intr["height"])))
        except ValueError as err:
            raise DataError(f"bad camera for {fr['file']}: {err}") from err
    if len(images) != len(cameras):
        raise DataError("image/camera count mismatch")
    return SceneDataset(images=images, cameras=cameras,
                        normalized=object_bbox is not None, transform=transform)


def save_dataset(dataset, path):
    """Fixture writer (tests and docs): inverse of load_dataset."""
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    cam0 = dataset.cameras[0]
    frames = []
    for i, (img, cam) in enumerate(zip(dataset.images, dataset.cameras)):
        name = f"frame_{i:04d}.png"
        save_png(os.path.join(path, "images", name), img)
        frames.append({"file": name,
                       "camera_to_world": cam.camera_to_world.reshape(-1).tolist()})
    meta = {"intrinsics": {"fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx,
                           "cy": cam0.cy, "width": cam0.width,
                           "height": cam0.height},
            "frames": frames}
    with open(os.path.join(path, "poses.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


# ---------------------------------------------------------------------------
# mock reference scenes


def make_reference_edit(field, region, bump=0.08, color_delta=0.6, seed=0):
    """The ground-truth 'edited' field for mock-target runs: region vertices
    pushed along their normals and recolored in feature space."""
    ref = field.clone()
    ids = region.vertex_ids
    ref.mesh.vertices[ids] += bump * ref.mesh.vertex_normals[ids]
    rng = np.random.default_rng(seed)
    delta = color_delta * (1.0 + 0.2 * rng.standard_normal(ref.f_c[ids].shape))
    ref.f_c[ids] = ref.f_c[ids] + delta.astype(ref.dtype)
    ref.mesh.recompute_normals()
    ref.refresh_geometry()
    return ref


def _gt_faces(mesh, spec):
    cen = mesh.face_centroids()
    if spec == "top":
        return set(np.nonzero(cen[:, 1] > 0.0)[0].tolist())
    if spec.startswith("ypos:"):
        thresh = float(spec.split(":", 1)[1])
        return set(np.nonzero(cen[:, 1] > thresh)[0].tolist())
    raise ConfigError(f"unknown locate.mock_gt {spec!r}")


def _make_oracle(cfg, field=None, region=None):
    if cfg.oracle_kind == "remote":
        if not cfg.oracle_url:
            raise ConfigError("oracle.kind = remote needs oracle.url or "
                              "MESHFIELD_ORACLE_URL")
        return remote_oracle(cfg.oracle_url)
    if cfg.oracle_kind == "mock":
        if region is not None:
            ref = make_reference_edit(field, region, bump=cfg.mock_bump,
                                      color_delta=cfg.mock_color_delta,
                                      seed=cfg.seed)

            def provider(camera, view_id):
                # same jitter stream as the student render of this view, so
                # the pixel residual vanishes at the reference parameters
                seed = cfg.edit.seed * 1_000_003 + int(view_id or 0)
                return render_view(ref, camera, seed=seed,
                                   n_samples=cfg.edit.n_samples).image

            return MockTargetOracle(provider=provider)
        if field is not None:
            return MockAttentionOracle(field.mesh, _gt_faces(field.mesh, cfg.mock_gt),
                                       seed=cfg.seed)
        raise ConfigError("mock oracle needs a field")
    raise ConfigError(f"unknown oracle.kind {cfg.oracle_kind!r}")


# ---------------------------------------------------------------------------
# stages


def _field_path(cfg):
    return os.path.join(cfg.out_dir, "field.ckpt")


def _region_path(cfg):
    return os.path.join(cfg.out_dir, "region.txt")


def _edited_path(cfg):
    return os.path.join(cfg.out_dir, "edited.ckpt")


def stage_distill(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    teacher = make_teacher(cfg.teacher_kind, cfg.teacher_path or None)
    mesh = extract_teacher_mesh(teacher, grid_res=cfg.grid_res)
    rng = np.random.default_rng(cfg.seed)
    field = build_field(mesh, rng=rng, dtype=cfg.dtype, **cfg.field_kw)
    _, history = distill_train(teacher, field, cfg.distill,
                               progress=lambda h: print(
                                   f"distill iter {h['iter']}: loss {h['loss']:.4f}"))
    save_field(field, _field_path(cfg), config_hash=cfg.config_hash)
    _write_meta(_field_path(cfg), cfg, {"stage": "distill",
                                        "final_loss": history[-1]["loss"]
                                        if history else None})
    print(f"wrote {_field_path(cfg)}")
    return 0


def stage_locate(cfg, force=False):
    ckpt = _field_path(cfg)
    if not os.path.exists(ckpt):
        raise ConfigError(f"missing {ckpt}: run the distill stage first")
    _check_meta(ckpt, cfg, force)
    field, _ = load_field(ckpt, dtype=cfg.dtype)
    oracle = _make_oracle(cfg, field=field)
    result = locate_editing_region(field, oracle, cfg.prompt, cfg.keyword,
                                   cfg.locate)
    save_region(result.region, _region_path(cfg), config_hash=cfg.config_hash,
                low_confidence=result.low_confidence)
    _write_meta(_region_path(cfg), cfg,
                {"stage": "locate", "faces": int(result.region.n_faces),
                 "low_confidence": bool(result.low_confidence)})
    masks_dir = os.path.join(cfg.out_dir, "masks")
    os.makedirs(masks_dir, exist_ok=True)
    for i, mask in enumerate(result.masks):
        save_png(os.path.join(masks_dir, f"view_{i:03d}.png"),
                 mask.astype(np.float64))
    if result.low_confidence:
        print("warning: low-confidence region (selected area below 1% of "
              "visible faces)", file=sys.stderr)
    print(f"wrote {_region_path(cfg)} with {result.region.n_faces} faces")
    return 0


def stage_edit(cfg, force=False):
    ckpt = _field_path(cfg)
    rpath = _region_path(cfg)
    if not os.path.exists(ckpt):
        raise ConfigError(f"missing {ckpt}: run the distill stage first")
    if not os.path.exists(rpath):
        raise ConfigError(f"missing {rpath}: run the locate stage first")
    _check_meta(ckpt, cfg, force)
    _check_meta(rpath, cfg, force)
    field, _ = load_field(ckpt, dtype=cfg.dtype)
    region, _ = load_region(rpath, field.mesh)
    oracle = _make_oracle(cfg, field=field, region=region)
    _, metrics = edit_loop(field, region, oracle, cfg.edit)
    save_field(field, _edited_path(cfg), config_hash=cfg.config_hash)
    _write_meta(_edited_path(cfg), cfg, {"stage": "edit"})
    mpath = os.path.join(cfg.out_dir, "metrics.csv")
    save_metrics(metrics, mpath)
    _write_meta(mpath, cfg, {"stage": "edit"})
    print(f"wrote {_edited_path(cfg)} and {mpath}")
    return 0


def stage_render(cfg, force=False):
    src = _edited_path(cfg) if os.path.exists(_edited_path(cfg)) else _field_path(cfg)
    if not os.path.exists(src):
        raise ConfigError("no checkpoint to render: run distill (or edit) first")
    _check_meta(src, cfg, force)
    field, _ = load_field(src, dtype=cfg.dtype)
    out = os.path.join(cfg.out_dir, "turntable")
    os.makedirs(out, exist_ok=True)
    for i in range(cfg.render_views):
        az = 360.0 * i / cfg.render_views
        cam = camera_at(spherical_position(cfg.scope.radius, 20.0, az),
                        width=cfg.render_resolution,
                        height=cfg.render_resolution)
        view = render_view(field, cam, seed=cfg.seed)
        path = os.path.join(out, f"az_{int(az):03d}.png")
        save_png(path, np.asarray(view.image, dtype=np.float64))
    print(f"wrote {cfg.render_views} views under {out}")
    return 0


def stage_export_mesh(cfg, force=False):
    src = _edited_path(cfg) if os.path.exists(_edited_path(cfg)) else _field_path(cfg)
    if not os.path.exists(src):
        raise ConfigError("no checkpoint to export: run distill (or edit) first")
    _check_meta(src, cfg, force)
    field, _ = load_field(src, dtype=cfg.dtype)
    obj_path = os.path.join(cfg.out_dir, "mesh.obj")
    save_obj(field.mesh, obj_path)
    _write_meta(obj_path, cfg, {"stage": "export-mesh"})
    print(f"wrote {obj_path}")
    res = _get(cfg.raw, "export.marching_cubes_res", 0, int)
    if res:
        from .field import eval_points
        extent = field.scene_bound
        xs = np.linspace(-extent, extent, res)
        X, Y, Z = np.meshgrid(xs, xs, xs, indexing="ij")
        P = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        s = np.empty(len(P))
        for lo in range(0, len(P), 65536):
            sl = slice(lo, lo + 65536)
            s[sl] = eval_points(field, P[sl], np.array([0.0, 0.0, 1.0])).s
        iso_mesh = marching_cubes(s.reshape(res, res, res),
                                  origin=(-extent,) * 3,
                                  spacing=(2 * extent / (res - 1),) * 3)
        iso_path = os.path.join(cfg.out_dir, "mesh_isosurface.obj")
        save_obj(iso_mesh, iso_path)
        _write_meta(iso_path, cfg, {"stage": "export-mesh"})
        print(f"wrote {iso_path}")
    return 0


def run_stage(stage, cfg, force=False):
    if stage == "distill":
        return stage_distill(cfg)
    if stage == "locate":
        return stage_locate(cfg, force)
    if stage == "edit":
        return stage_edit(cfg, force)
    if stage == "render":
        return stage_render(cfg, force)
    if stage == "export-mesh":
        return stage_export_mesh(cfg, force)
    raise ConfigError(f"unknown stage {stage!r}")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="meshfield",
        description="mesh-anchored implicit field pipeline")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", required=True)
    parser.add_argument("--force", action="store_true",
                        help="accept artifacts stamped by a different config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 1 if err.code not in (0, None) else 0
    try:
        raw = parse_config_file(args.config)
        cfg = build_pipeline_config(raw, seed_override=args.seed)
        return run_stage(args.stage, cfg, force=args.force)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except DivergenceError as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return 3
    except (OracleError, NoRegionFoundError) as err:
        print(f"oracle error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
