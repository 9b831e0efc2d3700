"""Teacher-to-student distillation.

A Teacher answers (s, color) point queries and renders rays with the same
logistic-CDF compositing as the student, so per-point and per-ray outputs
are directly comparable at shared sample positions. The student's features,
decoders and kappa train against the teacher; mesh vertices stay frozen.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import CameraScope, camera_at, pixel_rays, spherical_position
from .errors import DivergenceError
from .field import neus_weights, render_backward, render_rays
from .geometry import intersect_rays, marching_cubes
from .numerics import AdamState, adam_step

GRID_TEACHER_MAGIC = b"MBGT"

__all__ = [
    "Teacher",
    "AnalyticTeacher",
    "GridTeacher",
    "DistillConfig",
    "sphere_scene",
    "box_scene",
    "composite_scene",
    "make_teacher",
    "distill_loss",
    "eikonal_loss",
    "distill_train",
    "extract_teacher_mesh",
    "teacher_render_view",
    "bake_grid_teacher",
    "save_grid_teacher",
    "load_grid_teacher",
]


class Teacher:
    """Interface: query(X, D) -> (s, c); render_along(o, d, t) -> (C, s, c)."""

    bound_radius = 1.0
    kappa = 80.0

    def query(self, X, D=None):
        raise NotImplementedError

    def query_sdf(self, X):
        return self.query(X)[0]

    def render_along(self, origins, dirs, t):
        m, n = t.shape
        X = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
        D = np.repeat(dirs, n, axis=0)
        s, c = self.query(X.reshape(-1, 3), D)
        s = s.reshape(m, n)
        c = c.reshape(m, n, 3)
        _, _, weights = neus_weights(s, self.kappa)
        colors = np.einsum("mi,mic->mc", weights, c[:, :-1, :])
        return colors, s, c


class AnalyticTeacher(Teacher):
    """Closed-form SDF + albedo. The SDF is metric (|grad| = 1), so it doubles
    as ground truth for eikonal diagnostics."""

    def __init__(self, sdf_fn, albedo_fn, kappa=80.0, bound_radius=1.0):
        self.sdf = sdf_fn
        self.albedo = albedo_fn
        self.kappa = float(kappa)
        self.bound_radius = float(bound_radius)

    def query(self, X, D=None):
        X = np.atleast_2d(X)
        s = self.sdf(X)
        c = np.clip(self.albedo(X), 0.0, 1.0)
        return s, c

    def query_sdf(self, X):
        return self.sdf(np.atleast_2d(X))


def sphere_scene(radius=0.5):
    def sdf(X):
        return np.linalg.norm(X, axis=1) - radius

    def albedo(X):
        return 0.5 + 0.45 * np.stack([
            np.sin(4.0 * X[:, 0] + 0.3),
            np.sin(4.0 * X[:, 1] + 1.1),
            np.sin(4.0 * X[:, 2] + 2.0),
        ], axis=1)

    return AnalyticTeacher(sdf, albedo, bound_radius=radius * 1.7)


def box_scene(half=(0.42, 0.3, 0.36)):
    half_arr = np.asarray(half)

    def sdf(X):
        q = np.abs(X) - half_arr
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def albedo(X):
        return 0.5 + 0.45 * np.stack([
            np.cos(5.0 * X[:, 0]),
            np.cos(3.0 * X[:, 1] + 0.5),
            np.sin(4.0 * X[:, 2] + 1.0),
        ], axis=1)

    return AnalyticTeacher(sdf, albedo, bound_radius=float(np.linalg.norm(half_arr)) * 1.6)


def composite_scene():
    """Union of a sphere and an offset box (min of SDFs)."""
    sph = sphere_scene(0.35)
    box = box_scene((0.35, 0.18, 0.2))
    shift = np.array([0.25, -0.1, 0.0])

    def sdf(X):
        return np.minimum(sph.sdf(X), box.sdf(X - shift))

    def albedo(X):
        use_box = box.sdf(X - shift) < sph.sdf(X)
        return np.where(use_box[:, None], box.albedo(X - shift), sph.albedo(X))

    return AnalyticTeacher(sdf, albedo, bound_radius=0.95)


def make_teacher(kind, path=None):
    if kind == "sphere":
        return sphere_scene()
    if kind == "box":
        return box_scene()
    if kind == "composite":
        return composite_scene()
    if kind == "grid":
        if path is None:
            raise ValueError("grid teacher needs a file path")
        return load_grid_teacher(path)
    raise ValueError(f"unknown teacher kind {kind!r}")


# ---------------------------------------------------------------------------
# grid teacher (trilinear over baked voxel grids)


def _trilinear(grid, origin, spacing, X):
    idx = (X - origin) / spacing
    dims = np.array(grid.shape[:3])
    idx = np.clip(idx, 0.0, dims - 1.000001)
    i0 = np.floor(idx).astype(np.int64)
    i0 = np.minimum(i0, dims - 2)
    f = idx - i0
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wgt = (np.where(dx, f[:, 0], 1 - f[:, 0])
                       * np.where(dy, f[:, 1], 1 - f[:, 1])
                       * np.where(dz, f[:, 2], 1 - f[:, 2]))
                vals = grid[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out = out + (wgt[:, None] * vals if vals.ndim == 2 else wgt * vals)
    return out


class GridTeacher(Teacher):
    def __init__(self, s_grid, rgb_grid, origin, spacing, kappa=80.0,
                 bound_radius=1.0):
        self.s_grid = np.asarray(s_grid, dtype=np.float64)
        self.rgb_grid = np.asarray(rgb_grid, dtype=np.float64)
        if self.rgb_grid.shape[:3] != self.s_grid.shape:
            raise ValueError("s and rgb grid dims disagree")
        self.origin = np.asarray(origin, dtype=np.float64)
        self.spacing = np.asarray(spacing, dtype=np.float64)
        self.kappa = float(kappa)
        self.bound_radius = float(bound_radius)

    def query(self, X, D=None):
        X = np.atleast_2d(X)
        s = _trilinear(self.s_grid, self.origin, self.spacing, X)
        c = np.clip(_trilinear(self.rgb_grid, self.origin, self.spacing, X), 0, 1)
        return s, c


def bake_grid_teacher(teacher, dims=64, extent=None):
    """Sample an analytic teacher onto voxel grids."""
    extent = float(extent if extent is not None else teacher.bound_radius)
    xs = np.linspace(-extent, extent, dims)
    spacing = np.full(3, 2 * extent / (dims - 1))
    X, Y, Z = np.meshgrid(xs, xs, xs, indexing="ij")
    P = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    s, c = teacher.query(P)
    return GridTeacher(s.reshape(dims, dims, dims),
                       c.reshape(dims, dims, dims, 3),
                       origin=np.full(3, -extent), spacing=spacing,
                       kappa=teacher.kappa, bound_radius=teacher.bound_radius)


def save_grid_teacher(teacher, path):
    """Same container discipline as the field checkpoint: magic, version,
    dims + transform, then little-endian f32 grids."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", GRID_TEACHER_MAGIC, 1))
        fh.write(struct.pack("<3I", *teacher.s_grid.shape))
        fh.write(np.asarray(teacher.origin, dtype="<f8").tobytes())
        fh.write(np.asarray(teacher.spacing, dtype="<f8").tobytes())
        fh.write(struct.pack("<dd", teacher.kappa, teacher.bound_radius))
        fh.write(np.ascontiguousarray(teacher.s_grid, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(teacher.rgb_grid, dtype="<f4").tobytes())


def load_grid_teacher(path):
    with open(path, "rb") as fh:
        magic, version = struct.unpack("<4sI", fh.read(8))
        if magic != GRID_TEACHER_MAGIC or version != 1:
            raise ValueError("not a grid-teacher file")
        nx, ny, nz = struct.unpack("<3I", fh.read(12))
        origin = np.frombuffer(fh.read(24), dtype="<f8").copy()
        spacing = np.frombuffer(fh.read(24), dtype="<f8").copy()
        kappa, bound = struct.unpack("<dd", fh.read(16))
        s = np.frombuffer(fh.read(4 * nx * ny * nz), dtype="<f4").reshape(nx, ny, nz)
        c = np.frombuffer(fh.read(4 * nx * ny * nz * 3), dtype="<f4").reshape(nx, ny, nz, 3)
    return GridTeacher(s.astype(np.float64), c.astype(np.float64), origin,
                       spacing, kappa=kappa, bound_radius=bound)


def extract_teacher_mesh(teacher, grid_res=64, extent=None):
    """Marching cubes on the teacher's s field at iso 0 (the student mesh)."""
    extent = float(extent if extent is not None else teacher.bound_radius)
    xs = np.linspace(-extent, extent, grid_res)
    X, Y, Z = np.meshgrid(xs, xs, xs, indexing="ij")
    P = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    s, _ = teacher.query(P)
    spacing = (2 * extent / (grid_res - 1),) * 3
    mesh = marching_cubes(s.reshape(grid_res, grid_res, grid_res),
                          origin=(-extent, -extent, -extent), spacing=spacing)
    # field lifecycle uses area-weighted normals throughout
    mesh.recompute_normals()
    return mesh


# ---------------------------------------------------------------------------
# losses


def distill_loss(hat_s, hat_c, hat_C, s, c, C):
    """Per-point L1 on s and color plus per-ray squared L2 on pixel colors.

    Returns (value, d_s, d_c, d_C): the adjoints of the loss w.r.t. the
    student outputs (teacher side is ground truth).
    """
    hat_s, s = np.asarray(hat_s), np.asarray(s)
    hat_c, c = np.asarray(hat_c), np.asarray(c)
    hat_C, C = np.asarray(hat_C), np.asarray(C)
    if hat_s.shape != s.shape or hat_c.shape != c.shape or hat_C.shape != C.shape:
        raise ValueError("teacher/student sample counts disagree")
    value = (np.abs(hat_s - s).sum() + np.abs(hat_c - c).sum()
             + ((hat_C - C) ** 2).sum())
    d_s = np.sign(s - hat_s)
    d_c = np.sign(c - hat_c)
    d_C = 2.0 * (C - hat_C)
    return float(value), d_s, d_c, d_C


def eikonal_value_and_adjoint(grad_s):
    """sum over points of (||grad_s|| - 1)^2 and its adjoint on grad_s."""
    norms = np.linalg.norm(grad_s, axis=-1)
    value = float(((norms - 1.0) ** 2).sum())
    safe = np.maximum(norms, 1e-12)
    d = (2.0 * (norms - 1.0) / safe)[..., None] * grad_s
    return value, d


def eikonal_loss(field, points):
    """Standalone op: L = sum (||grad_x s|| - 1)^2 over the points, with
    gradients to features and decoder parameters."""
    from .field import eval_backward, eval_points

    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.all(np.isfinite(X)):
        raise ValueError("points must be finite")
    tape = eval_points(field, X, np.array([0.0, 0.0, 1.0]))
    value, dgrad = eikonal_value_and_adjoint(tape.grad_s)
    grads = eval_backward(field, tape, dgrad_s=dgrad)
    return value, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class DistillConfig:
    iterations: int = 100_000
    lr: float = 1e-4
    rays_per_batch: int = 256
    samples_per_ray: int = 32
    lambda_reg: float = 0.01
    scope: CameraScope = dc_field(default_factory=CameraScope)
    seed: int = 0
    image_size: int = 96
    log_every: int = 100

    def __post_init__(self):
        if min(self.iterations, self.rays_per_batch, self.samples_per_ray) < 0:
            raise ValueError("counts must be non-negative")
        if self.lr <= 0 or self.lambda_reg < 0:
            raise ValueError("bad lr / lambda_reg")


def sphere_trace(teacher, origins, dirs, t0, t_max, steps=32, tol=1e-3):
    """Vectorized sphere tracing of the teacher SDF. Returns (t, hit)."""
    t = t0.copy()
    alive = np.ones(len(t), dtype=bool)
    hit = np.zeros(len(t), dtype=bool)
    for _ in range(steps):
        if not alive.any():
            break
        x = origins[alive] + t[alive, None] * dirs[alive]
        s = teacher.query_sdf(x)
        done = np.abs(s) < tol
        idx = np.nonzero(alive)[0]
        hit[idx[done]] = True
        t[idx] += np.clip(s, -0.5, None) * 0.9
        overshoot = t[idx] > t_max[idx]
        alive[idx[done | overshoot]] = False
    return t, hit


def _sample_hit_rays(teacher, field, scope, rng, count, image_size):
    """Rays through random pixels of a random in-scope camera whose teacher
    surface crossing exists; windows straddle the crossing."""
    from .field import _ray_sphere_window

    lo_e, hi_e = scope.elevation_range
    lo_a, hi_a = scope.azimuth_range
    window = field.sample_window
    origins = np.zeros((0, 3))
    dirs = np.zeros((0, 3))
    t_hit = np.zeros(0)
    attempts = 0
    while len(origins) < count and attempts < 20:
        attempts += 1
        el = rng.uniform(lo_e, hi_e)
        az = rng.uniform(lo_a, hi_a)
        cam = camera_at(spherical_position(scope.radius, el, az),
                        width=image_size, height=image_size)
        o_all, d_all = pixel_rays(cam)
        pick = rng.choice(len(o_all), size=min(count * 2, len(o_all)), replace=False)
        o, d = o_all[pick], d_all[pick]
        near, far, in_bound = _ray_sphere_window(o, d, teacher.bound_radius)
        o, d, near, far = o[in_bound], d[in_bound], near[in_bound], far[in_bound]
        t, hit = sphere_trace(teacher, o, d, near, far)
        origins = np.concatenate([origins, o[hit]])
        dirs = np.concatenate([dirs, d[hit]])
        t_hit = np.concatenate([t_hit, t[hit]])
    origins, dirs, t_hit = origins[:count], dirs[:count], t_hit[:count]
    near = np.maximum(t_hit - window, 1e-4)
    far = t_hit + window
    return origins, dirs, near, far


def distill_train(teacher, field, cfg, progress=None):
    """Optimize features, decoders and kappa against the teacher. Mesh
    vertices and faces are never touched. Returns (field, history)."""
    rng = np.random.default_rng(cfg.seed)
    params = field.params()
    trainable = {k: v for k, v in params.items() if k != "vertices"}
    opt = AdamState(lr=cfg.lr)
    history = []
    for it in range(cfg.iterations):
        o, d, near, far = _sample_hit_rays(teacher, field, cfg.scope, rng,
                                           cfg.rays_per_batch, cfg.image_size)
        if len(o) == 0:
            raise DivergenceError("no rays hit the mesh; check the camera scope")
        jitter = rng.random((len(o), cfg.samples_per_ray))
        rt = render_rays(field, o, d, near, far,
                         n_samples=cfg.samples_per_ray, jitter=jitter)
        hat_C, hat_s, hat_c = teacher.render_along(o, d, rt.t)
        dis_val, d_s, d_c, d_C = distill_loss(hat_s, hat_c, hat_C,
                                              rt.s, rt.c, rt.colors)
        eik_val, d_g = eikonal_value_and_adjoint(
            rt.eval_tape.grad_s.reshape(rt.s.shape + (3,)))
        total = dis_val + cfg.lambda_reg * eik_val
        if not np.isfinite(total):
            raise DivergenceError(
                f"non-finite loss at iteration {it}: dis={dis_val}, eik={eik_val}")
        grads = render_backward(field, rt, d_C, ds_extra=d_s, dc_extra=d_c,
                                dgrad_s_extra=cfg.lambda_reg * d_g)
        adam_step(opt, trainable, {k: grads[k] for k in trainable})
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.append({"iter": it, "loss": total, "dis": dis_val,
                            "eik": eik_val})
            if progress is not None:
                progress(history[-1])
    return field, history


def teacher_render_view(teacher, camera, resolution=None, n_samples=96):
    """Reference render of the teacher: dense midpoint samples across the
    ray's chord through the teacher's bounding sphere; misses are black."""
    from .field import _ray_sphere_window, _stratified_t

    cam = camera if resolution is None else camera.scaled_to(resolution, resolution)
    o, d = pixel_rays(cam)
    near, far, hit = _ray_sphere_window(o, d, teacher.bound_radius)
    image = np.zeros((len(o), 3))
    rows = np.nonzero(hit)[0]
    if len(rows):
        t = _stratified_t(near[rows], far[rows], n_samples,
                          np.full((len(rows), n_samples), 0.5))
        C, _, _ = teacher.render_along(o[rows], d[rows], t)
        image[rows] = C
    return image.reshape(cam.height, cam.width, 3)
