"""Region-constrained editing: guidance-driven steps on the region's
features and vertex positions, alternated 1:1 with mesh-regularization
steps on the positions alone.

Everything outside the region is frozen hard: gradients are masked to the
region's rows, the decoders and kappa never update, and a checksum over the
untouched state is verified when the loop ends.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .cameras import CameraScope, camera_at, pixel_rays, spherical_position
from .errors import FrozenRegionError, OracleError
from .field import ViewRender, render_pixel_rows, render_view, render_view_backward
from .geometry import camera_hit_buffer, mesh_topology_hash
from .numerics import AdamState, adam_step

log = logging.getLogger(__name__)

METRICS_HEADER = "iter,sds_proxy,lap,arap,max_disp,res"

__all__ = [
    "EditConfig",
    "EditState",
    "laplacian_loss",
    "arap_loss",
    "sds_step",
    "regularization_step",
    "edit_loop",
    "make_edit_state",
    "frozen_checksum",
    "save_metrics",
]


@dataclass
class EditConfig:
    iterations: int = 2000
    lr: float = 1e-2
    lambda_lap: float = 1e-4
    lambda_arap: float = 1e-4
    resolution_start: int = 96
    resolution_mid: int = 0     # optional middle phase (0: two phases)
    resolution_end: int = 192
    n_samples: int = 12
    scope: CameraScope = dc_field(default_factory=CameraScope)
    seed: int = 0
    prompt: str = ""
    t_range: tuple = (0.02, 0.98)
    guidance_scale: float = 7.5
    freeze_decoders: bool = True
    max_oracle_failures: int = 3
    sampling: str = "surface"   # "bound" keeps sample windows fixed
    guard_samples: int = None   # None: renderer default; 0: window only
    camera_pool: int = 0        # >0: cycle a pre-drawn pool of random views
                                # (lets per-view oracle targets be reused)
    use_view_cache: bool = False  # incremental bit-exact revisit rendering
                                  # (needs camera_pool > 0)

    def __post_init__(self):
        if self.iterations < 0 or self.lr <= 0:
            raise ValueError("bad iterations / lr")
        if self.lambda_lap < 0 or self.lambda_arap < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.resolution_end < self.resolution_start:
            raise ValueError("resolution schedule must be non-decreasing")
        if self.resolution_mid and not (self.resolution_start
                                        <= self.resolution_mid
                                        <= self.resolution_end):
            raise ValueError("resolution_mid must sit between start and end")

    def resolution_at(self, it):
        """Stepwise non-decreasing schedule from start to end resolution.
        Two phases split at the midpoint; with resolution_mid set, three
        phases split 50/30/20. Iteration 0 renders at start, the final
        iteration at end."""
        if self.iterations <= 1:
            return self.resolution_start if it == 0 else self.resolution_end
        if self.resolution_mid:
            if it < self.iterations // 2:
                return self.resolution_start
            if it < (8 * self.iterations) // 10:
                return self.resolution_mid
            return self.resolution_end
        return self.resolution_start if it < self.iterations // 2 \
            else self.resolution_end


@dataclass
class EditState:
    field: object
    region: object
    vertex_mask: np.ndarray        # (V,) bool, True inside the region
    prev_positions: np.ndarray     # full (V,3) snapshot from last iteration
    sds_opt: AdamState
    reg_opt: AdamState
    checksum: str
    oracle_failures: int = 0


def frozen_checksum(field, vertex_mask):
    """Digest of everything editing must not touch: non-region features and
    positions, faces, decoders, kappa."""
    h = hashlib.sha256()
    keep = ~vertex_mask
    h.update(np.ascontiguousarray(field.f_g[keep]).tobytes())
    h.update(np.ascontiguousarray(field.f_c[keep]).tobytes())
    h.update(np.ascontiguousarray(field.mesh.vertices[keep]).tobytes())
    h.update(np.ascontiguousarray(field.mesh.faces).tobytes())
    for net in (field.geo_decoder, field.color_decoder):
        for w, b in zip(net.weights, net.biases):
            h.update(np.ascontiguousarray(w).tobytes())
            h.update(np.ascontiguousarray(b).tobytes())
    h.update(np.asarray(field.log_kappa).tobytes())
    return h.hexdigest()


def make_edit_state(field, region, cfg):
    if region.mesh_hash and region.mesh_hash != mesh_topology_hash(field.mesh):
        raise ValueError("region was located on a different mesh")
    if region.n_faces == 0:
        raise ValueError("empty editing region")
    mask = np.zeros(field.mesh.n_vertices, dtype=bool)
    mask[region.vertex_ids] = True
    return EditState(field=field, region=region, vertex_mask=mask,
                     prev_positions=field.mesh.vertices.copy(),
                     sds_opt=AdamState(lr=cfg.lr), reg_opt=AdamState(lr=cfg.lr),
                     checksum=frozen_checksum(field, mask))


# ---------------------------------------------------------------------------
# incremental view rendering for pooled cameras


class ViewCache:
    """Bit-exact incremental re-rendering of pooled views.

    A cached pixel can only change when some sample's K-nearest vertex set
    can admit a region vertex. For every rendered ray we keep the margin
    min over samples of (distance to the nearest region vertex minus the
    K-th-neighbor distance among the frozen non-region vertices); while the
    region's accumulated displacement since caching stays below that margin
    the neighbor sets, sample windows and occlusion for the ray are provably
    unchanged, so the stored color is the exact render. Rasters split the
    same way: non-region faces are static per (view, resolution), region
    faces re-rasterize each call and z-merge.
    """

    def __init__(self, field, region):
        self.region_verts = np.asarray(region.vertex_ids, dtype=np.int64)
        mask = np.zeros(field.mesh.n_vertices, dtype=bool)
        mask[self.region_verts] = True
        self.nonregion_verts = np.nonzero(~mask)[0]
        self._frozen_tree = cKDTree(field.mesh.vertices[self.nonregion_verts])
        self._k = min(field.k_neighbors, len(self.nonregion_verts))
        # any face touching a region vertex moves when the region moves;
        # only corner-disjoint faces are truly static
        dynamic = mask[field.mesh.faces].any(axis=1)
        self.dynamic_faces = np.nonzero(dynamic)[0]
        self.static_faces = np.nonzero(~dynamic)[0]
        self.delta_cum = 0.0
        self.entries = {}

    def note_displacement(self, d):
        self.delta_cum += float(d)

    def _margins(self, field, tapes, skip_rows):
        """Per-ray safety margin for rendered rays, ordered per tape. Rays in
        skip_rows (raster-stale every iteration) get -inf without the
        neighbor queries they would never benefit from."""
        region_tree = cKDTree(field.mesh.vertices[self.region_verts])
        out = []
        for rows, tape in tapes:
            margin = np.full(len(rows), -np.inf)
            keep = ~np.isin(rows, skip_rows, assume_unique=False)
            if keep.any():
                n = tape.s.shape[1]
                idx = (np.nonzero(keep)[0][:, None] * n + np.arange(n)).ravel()
                X = np.asarray(tape.eval_tape.X[idx], dtype=np.float64)
                d_region, _ = region_tree.query(X, k=1)
                r_non, _ = self._frozen_tree.query(X, k=self._k)
                r_non = r_non[:, -1] if self._k > 1 else r_non
                margin[keep] = (d_region - r_non).reshape(-1, n).min(axis=1)
            out.append((rows, margin))
        return out

    def render(self, field, camera, view_id, seed, n_samples, guard_samples):
        key = (view_id, camera.width)
        h, w = camera.height, camera.width
        entry = self.entries.get(key)
        if entry is None:
            sf, st, origins, dirs = camera_hit_buffer(
                field.mesh, camera, cull_backfaces=field.closed_surface,
                face_ids=self.static_faces)
            entry = {"static_face": sf.reshape(-1), "static_t": st.reshape(-1),
                     "origins": origins, "dirs": dirs,
                     "colors": np.zeros((h * w, 3), dtype=field.dtype),
                     "margin": np.full(h * w, -np.inf),
                     "delta_at": np.zeros(h * w),
                     "merged_face": np.full(h * w, -2, dtype=np.int64),
                     "merged_t": np.full(h * w, -1.0)}
            self.entries[key] = entry
        df, dt_, _, _ = camera_hit_buffer(
            field.mesh, camera, cull_backfaces=field.closed_surface,
            face_ids=self.dynamic_faces)
        df = df.reshape(-1)
        dt_ = dt_.reshape(-1)
        take_dyn = (dt_ < entry["static_t"]) | (
            (dt_ == entry["static_t"]) & (df >= 0) & (df < entry["static_face"]))
        face_flat = np.where(take_dyn, df, entry["static_face"])
        t_flat = np.where(take_dyn, dt_, entry["static_t"])

        # stale when the neighbor-set margin is used up OR when the merged
        # raster changed (occlusion / window placement moved)
        stale = entry["margin"] <= (self.delta_cum - entry["delta_at"])
        stale |= face_flat != entry["merged_face"]
        stale |= t_flat != entry["merged_t"]
        rows = np.nonzero(stale)[0]
        colors, tapes = render_pixel_rows(
            field, camera, rows, face_flat, t_flat,
            entry["origins"], entry["dirs"], seed=seed,
            n_samples=n_samples, guard_samples=guard_samples)
        entry["colors"][rows] = colors
        # rows outside the (static) scene bound can never change: permanent.
        # rendered rows get a real margin below.
        entry["margin"][rows] = np.inf
        entry["delta_at"][rows] = self.delta_cum
        dyn_rows = np.nonzero(take_dyn)[0]
        for rows_t, margin in self._margins(field, tapes, dyn_rows):
            entry["margin"][rows_t] = margin
        entry["merged_face"] = face_flat
        entry["merged_t"] = t_flat
        view = ViewRender(image=entry["colors"].copy().reshape(h, w, 3),
                          hit_mask=(face_flat >= 0).reshape(h, w),
                          face_buffer=face_flat.reshape(h, w),
                          hit_rows=np.concatenate([r for r, _ in tapes])
                          if tapes else np.zeros(0, dtype=np.int64),
                          tapes=tapes)
        return view


# ---------------------------------------------------------------------------
# regularizers (values and gradients w.r.t. region vertex positions)


def laplacian_loss(mesh, region_vertex_ids):
    """(1/E) * sum over region vertices of ||v_i - mean(one-ring)||^2.
    Neighbors outside the region contribute positions but get no gradient.
    Region vertices with an empty one-ring contribute zero (logged)."""
    ids = np.asarray(region_vertex_ids, dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("region is empty")
    v = mesh.vertices
    offsets, nbrs = mesh.ring_arrays()
    deg = np.diff(offsets)
    grad = np.zeros_like(v)
    lonely = ids[deg[ids] == 0]
    if len(lonely):
        log.warning("laplacian: %d region vertices have no one-ring", len(lonely))
    ids_c = ids[deg[ids] > 0]
    if len(ids_c) == 0:
        return 0.0, grad
    e_count = len(ids)
    sums = np.add.reduceat(v[nbrs], offsets[:-1], axis=0) if len(nbrs) else \
        np.zeros_like(v)
    means = sums[ids_c] / deg[ids_c, None]
    resid = v[ids_c] - means
    value = float((resid**2).sum() / e_count)
    grad[ids_c] += (2.0 / e_count) * resid
    # neighbor term: -(2/E) * resid_i / deg_i onto each j in ring(i)
    contrib = np.repeat(-(2.0 / e_count) * resid / deg[ids_c, None],
                        deg[ids_c], axis=0)
    cols = np.concatenate([nbrs[offsets[i]:offsets[i + 1]] for i in ids_c])
    np.add.at(grad, cols, contrib)
    # only region vertices receive gradient
    mask = np.zeros(len(v), dtype=bool)
    mask[ids] = True
    grad[~mask] = 0.0
    return value, grad


def arap_loss(mesh, region_vertex_ids, prev_positions):
    """sum_i sum_{j in ring(i)} | ||v_i-v_j|| - ||v'_i-v'_j|| | over region
    vertices i. Subgradient 0 at the kink; degenerate current edges
    (length < 1e-12) contribute no gradient."""
    ids = np.asarray(region_vertex_ids, dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("region is empty")
    v = mesh.vertices
    vp = np.asarray(prev_positions)
    offsets, nbrs = mesh.ring_arrays()
    deg = np.diff(offsets)
    ids_c = ids[deg[ids] > 0]
    grad = np.zeros_like(v)
    if len(ids_c) == 0:
        return 0.0, grad
    rows = np.repeat(ids_c, deg[ids_c])
    cols = np.concatenate([nbrs[offsets[i]:offsets[i + 1]] for i in ids_c])
    d_now_vec = v[rows] - v[cols]
    d_now = np.linalg.norm(d_now_vec, axis=1)
    d_prev = np.linalg.norm(vp[rows] - vp[cols], axis=1)
    diff = d_now - d_prev
    value = float(np.abs(diff).sum())
    sign = np.sign(diff)
    ok = d_now > 1e-12
    unit = np.zeros_like(d_now_vec)
    unit[ok] = d_now_vec[ok] / d_now[ok, None]
    pair_grad = sign[:, None] * unit
    np.add.at(grad, rows, pair_grad)
    np.add.at(grad, cols, -pair_grad)
    mask = np.zeros(len(v), dtype=bool)
    mask[ids] = True
    grad[~mask] = 0.0
    return value, grad


# ---------------------------------------------------------------------------
# steps


def _mask_region_grads(state, grads):
    keep = state.vertex_mask
    out = {}
    for key in ("f_g", "f_c", "vertices"):
        g = grads[key].copy()
        g[~keep] = 0.0
        out[key] = g
    return out


def sds_step(state, camera, oracle, resolution, cfg, view_id=0, seed=0,
             view_cache=None):
    """One guidance step: render, fetch the pixel gradient, backpropagate
    into the region's features and positions, Adam. Oracle failures skip
    the iteration; cfg.max_oracle_failures consecutive failures abort."""
    field = state.field
    if view_cache is not None and cfg.sampling == "surface":
        cam = camera if resolution is None else camera.scaled_to(resolution,
                                                                 resolution)
        view = view_cache.render(field, cam, view_id, seed,
                                 cfg.n_samples, cfg.guard_samples)
    else:
        view = render_view(field, camera, resolution=resolution, seed=seed,
                           n_samples=cfg.n_samples, with_tape=True,
                           sampling=cfg.sampling,
                           guard_samples=cfg.guard_samples)
    try:
        g_pix = oracle.sds_pixel_grad(view.image, cfg.prompt,
                                      t_range=cfg.t_range,
                                      guidance_scale=cfg.guidance_scale,
                                      seed=seed, camera=camera, view_id=view_id)
        g_pix = np.asarray(g_pix, dtype=np.float64)
        if g_pix.shape != view.image.shape or not np.all(np.isfinite(g_pix)):
            raise OracleError(f"bad gradient shape/values {g_pix.shape}")
    except OracleError as err:
        state.oracle_failures += 1
        log.warning("oracle failure %d: %s", state.oracle_failures, err)
        if state.oracle_failures >= cfg.max_oracle_failures:
            raise
        return None
    state.oracle_failures = 0
    grads = render_view_backward(field, view, g_pix)
    masked = _mask_region_grads(state, grads)
    params = {"f_g": field.f_g, "f_c": field.f_c,
              "vertices": field.mesh.vertices}
    if not cfg.freeze_decoders:
        params.update(field.geo_decoder.param_dict("geo."))
        params.update(field.color_decoder.param_dict("col."))
        for k in list(params):
            if k.startswith(("geo.", "col.")):
                masked[k] = grads[k]
    adam_step(state.sds_opt, params, masked)
    field.refresh_geometry(recompute_normals=True)
    return 0.5 * float((g_pix**2).sum())


def regularization_step(state, cfg):
    """One Adam step of the region vertex positions on the weighted
    Laplacian + ARAP energy; features untouched; the previous-position
    snapshot refreshes after the update."""
    field = state.field
    ids = state.region.vertex_ids
    lap_v, lap_g = laplacian_loss(field.mesh, ids)
    arap_v, arap_g = arap_loss(field.mesh, ids, state.prev_positions)
    g = cfg.lambda_lap * lap_g + cfg.lambda_arap * arap_g
    adam_step(state.reg_opt, {"vertices": field.mesh.vertices},
              {"vertices": g})
    state.prev_positions = field.mesh.vertices.copy()
    field.refresh_geometry(recompute_normals=True)
    return lap_v, arap_v


def edit_loop(field, region, oracle, cfg):
    """Alternate sds_step and regularization_step over randomly sampled
    in-scope views with the two-phase resolution schedule. Returns
    (field, metrics rows). Verifies the frozen checksum at the end."""
    state = make_edit_state(field, region, cfg)
    rng = np.random.default_rng(cfg.seed)
    pool = None
    if cfg.camera_pool > 0:
        pool = [(rng.uniform(*cfg.scope.elevation_range),
                 rng.uniform(*cfg.scope.azimuth_range))
                for _ in range(cfg.camera_pool)]
    cache = ViewCache(field, region) if (cfg.use_view_cache and pool) else None
    metrics = []
    for it in range(cfg.iterations):
        if pool is not None:
            view_id = it % len(pool)
            el, az = pool[view_id]
        else:
            view_id = it
            el = rng.uniform(*cfg.scope.elevation_range)
            az = rng.uniform(*cfg.scope.azimuth_range)
        res = cfg.resolution_at(it)
        cam = camera_at(spherical_position(cfg.scope.radius, el, az),
                        width=res, height=res)
        before = field.mesh.vertices[state.vertex_mask].copy()
        sds_proxy = sds_step(state, cam, oracle, res, cfg, view_id=view_id,
                             seed=cfg.seed * 1_000_003 + view_id,
                             view_cache=cache)
        lap_v, arap_v = regularization_step(state, cfg)
        disp = 0.0
        if len(before):
            disp = float(np.linalg.norm(
                field.mesh.vertices[state.vertex_mask] - before, axis=1).max())
        if cache is not None:
            cache.note_displacement(disp)
        metrics.append({"iter": it,
                        "sds_proxy": float("nan") if sds_proxy is None else sds_proxy,
                        "lap": lap_v, "arap": arap_v,
                        "max_disp": disp, "res": res})
    if frozen_checksum(field, state.vertex_mask) != state.checksum:
        raise FrozenRegionError("non-region parameters changed during editing")
    return field, metrics


def save_metrics(rows, path):
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(f"{r['iter']},{r['sds_proxy']:.9g},{r['lap']:.9g},"
                     f"{r['arap']:.9g},{r['max_disp']:.9g},{r['res']}\n")
