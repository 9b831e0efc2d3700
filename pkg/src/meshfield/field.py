"""Mesh-anchored local implicit field.

Per-vertex geometry/color features are interpolated at query points with
inverse-distance weights over the K nearest vertices, together with a signed
projected distance; small decoders map these to an s-density and a color,
and rays composite NeuS-style through the logistic CDF of s.

Everything needed for training is hand-differentiated: eval_backward
propagates adjoints on (s, color, grad_x s) back to features, vertex
positions and decoder parameters, including the second-order path through
grad_x s (the color decoder consumes it, and the eikonal penalty
differentiates it again). Vertex normals and K-NN sets are treated as data,
refreshed explicitly after vertex updates, never differentiated through.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .cameras import Camera, CameraScope, pixel_rays, sample_spherical_cameras  # noqa: F401
from .geometry import SpatialIndex, camera_hit_buffer
from .numerics import (
    Mlp,
    mlp_backward,
    mlp_forward,
    mlp_grad_input_backward,
    mlp_init,
    mlp_input_gradient,
    positional_encode,
)

WEIGHT_EPS = 1e-8          # inverse-distance clamp of the interpolation
CHECKPOINT_MAGIC = b"MBNF"
CHECKPOINT_VERSION = 1

__all__ = [
    "MeshField",
    "PointSample",
    "build_field",
    "interpolate",
    "eval_point",
    "eval_points",
    "eval_backward",
    "render_ray",
    "render_rays",
    "render_backward",
    "render_view",
    "render_view_backward",
    "sample_spherical_cameras",
    "save_field",
    "load_field",
    "neus_weights",
]


@dataclass
class PointSample:
    position: np.ndarray
    f_g: np.ndarray
    f_c: np.ndarray
    h: float
    s: float
    color: np.ndarray
    grad_s: np.ndarray


class MeshField:
    """mesh + per-vertex features + decoders + global sharpness kappa."""

    def __init__(self, mesh, f_g, f_c, geo_decoder, color_decoder,
                 log_kappa=None, k_neighbors=8, n_freq_dir=4,
                 dtype=np.float64, render_samples=64, window_fraction=0.25):
        self.mesh = mesh
        self.dtype = np.dtype(dtype)
        self.f_g = np.ascontiguousarray(f_g, dtype=self.dtype)
        self.f_c = np.ascontiguousarray(f_c, dtype=self.dtype)
        if len(self.f_g) != mesh.n_vertices or len(self.f_c) != mesh.n_vertices:
            raise ValueError("feature count must match vertex count")
        self.geo_decoder = geo_decoder.astype(self.dtype)
        self.color_decoder = color_decoder.astype(self.dtype)
        if log_kappa is None:
            log_kappa = np.log(20.0)
        self.log_kappa = np.array(float(log_kappa), dtype=self.dtype)
        self.k_neighbors = int(k_neighbors)
        self.n_freq_dir = int(n_freq_dir)
        self.render_samples = int(render_samples)
        self.mesh.vertices = self.mesh.vertices.astype(np.float64)
        self.scene_bound = 1.3 * max(mesh.bounding_radius(), 1e-6)
        self.window_fraction = float(window_fraction)
        # watertight scaffolds admit exact backface culling in view renders
        self.closed_surface = len(mesh.boundary_faces()) == 0 if mesh.n_faces \
            else False
        self.index = None
        self._tree = None
        self.refresh_geometry()

    # -- bookkeeping ---------------------------------------------------------

    @property
    def kappa(self):
        return float(np.exp(self.log_kappa))

    @property
    def feature_dim_g(self):
        return self.f_g.shape[1]

    @property
    def feature_dim_c(self):
        return self.f_c.shape[1]

    @property
    def sample_window(self):
        return self.window_fraction * self.scene_bound

    def refresh_geometry(self, recompute_normals=False):
        """Rebuild the spatial structures after vertex motion."""
        if recompute_normals:
            self.mesh.recompute_normals()
        self.index = SpatialIndex(self.mesh.vertices)
        self._tree = cKDTree(self.mesh.vertices)
        self._verts_dt = self.mesh.vertices.astype(self.dtype)
        self._normals_dt = self.mesh.vertex_normals.astype(self.dtype)

    def params(self):
        out = {
            "f_g": self.f_g,
            "f_c": self.f_c,
            "vertices": self.mesh.vertices,
            "log_kappa": self.log_kappa,
        }
        out.update(self.geo_decoder.param_dict("geo."))
        out.update(self.color_decoder.param_dict("col."))
        return out

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params().items()}

    def clone(self):
        return MeshField(self.mesh.copy(), self.f_g.copy(), self.f_c.copy(),
                         self.geo_decoder.astype(self.dtype),
                         self.color_decoder.astype(self.dtype),
                         log_kappa=float(self.log_kappa),
                         k_neighbors=self.k_neighbors,
                         n_freq_dir=self.n_freq_dir, dtype=self.dtype,
                         render_samples=self.render_samples,
                         window_fraction=self.window_fraction)

    def knn(self, X):
        """(ids, dist) of the K nearest vertices per row of X, ascending
        distance. Exact-tie order follows the tree (generic inputs have no
        ties; the contract-level tie-break lives in SpatialIndex.query)."""
        k = min(self.k_neighbors, self.mesh.n_vertices)
        d, i = self._tree.query(np.asarray(X, dtype=np.float64), k=k)
        if k == 1:
            d, i = d[:, None], i[:, None]
        return i.astype(np.int64), d


def build_field(mesh, feature_dim=32, geo_hidden=(48,), color_hidden=(48,),
                k_neighbors=8, n_freq_dir=4, feature_scale=0.05,
                log_kappa=None, rng=None, dtype=np.float64,
                render_samples=64, window_fraction=0.25):
    """Fresh field on a mesh: small random features, Glorot decoders.

    The geometry decoder is softplus-activated (grad_x s needs a smooth s);
    the color decoder is relu-activated with a sigmoid output.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    d_g = d_c = int(feature_dim)
    f_g = (feature_scale * rng.standard_normal((mesh.n_vertices, d_g))).astype(dtype)
    f_c = (feature_scale * rng.standard_normal((mesh.n_vertices, d_c))).astype(dtype)
    geo = mlp_init([d_g + 1, *geo_hidden, 1], activation="softplus",
                   output_activation="linear", rng=rng, dtype=dtype)
    pe_dim = 3 * (1 + 2 * n_freq_dir)
    col = mlp_init([d_c + 1 + pe_dim + 3, *color_hidden, 3], activation="relu",
                   output_activation="sigmoid", rng=rng, dtype=dtype)
    return MeshField(mesh, f_g, f_c, geo, col, log_kappa=log_kappa,
                     k_neighbors=k_neighbors, n_freq_dir=n_freq_dir, dtype=dtype,
                     render_samples=render_samples, window_fraction=window_fraction)


# ---------------------------------------------------------------------------
# interpolation and point evaluation


@dataclass
class EvalTape:
    X: np.ndarray
    ids: np.ndarray          # (M,K)
    delta: np.ndarray        # (M,K,3) x - v_k
    dist: np.ndarray         # (M,K)
    clamped: np.ndarray      # (M,K) bool
    unit: np.ndarray         # (M,K,3) delta/dist (0 where degenerate)
    w: np.ndarray            # (M,K)
    S: np.ndarray            # (M,)
    wbar: np.ndarray         # (M,K)
    h: np.ndarray            # (M,K)
    c_vec: np.ndarray        # (M,K,3) dw/dx
    C_sum: np.ndarray        # (M,3)
    g: np.ndarray            # (M,K,3) dwbar/dx
    fg_tilde: np.ndarray
    fc_tilde: np.ndarray
    htilde: np.ndarray
    m: np.ndarray            # (M, Dg+1) grad of s wrt geo input
    geo_tape: object
    col_tape: object
    s: np.ndarray            # (M,)
    grad_s: np.ndarray       # (M,3)
    color: np.ndarray        # (M,3)


def _interp_core(field, X):
    ids, _ = field.knn(X)
    dt = field.dtype
    Xd = np.asarray(X, dtype=dt)
    v = field._verts_dt[ids]
    delta = Xd[:, None, :] - v
    dist = np.sqrt(np.einsum("mkc,mkc->mk", delta, delta))
    clamped = dist < WEIGHT_EPS
    dhat = np.maximum(dist, dt.type(WEIGHT_EPS))
    w = 1.0 / dhat
    S = w.sum(axis=1)
    wbar = w / S[:, None]
    safe = np.maximum(dist, dt.type(1e-30))
    unit = delta / safe[:, :, None]
    unit[clamped] = 0.0
    n = field._normals_dt[ids]
    h = np.einsum("mkc,mkc->mk", delta, n)
    c_vec = -(w * w)[:, :, None] * unit
    c_vec[clamped] = 0.0
    C_sum = c_vec.sum(axis=1)
    g = (c_vec - wbar[:, :, None] * C_sum[:, None, :]) / S[:, None, None]
    fg_tilde = np.einsum("mk,mkd->md", wbar, field.f_g[ids])
    fc_tilde = np.einsum("mk,mkd->md", wbar, field.f_c[ids])
    htilde = np.einsum("mk,mk->m", wbar, h)
    return ids, delta, dist, clamped, unit, w, S, wbar, h, c_vec, C_sum, g, \
        fg_tilde, fc_tilde, htilde, n


def interpolate(field, x, k=None):
    """Inverse-distance interpolation at one point.

    Returns (fg_tilde, fc_tilde, htilde, weights, neighbor_ids); the weights
    are the normalized (sum to one) inverse-distance weights.
    """
    if k is not None and k != field.k_neighbors:
        saved = field.k_neighbors
        field.k_neighbors = k
        try:
            return interpolate(field, x)
        finally:
            field.k_neighbors = saved
    X = np.asarray(x, dtype=np.float64).reshape(1, 3)
    (ids, _, _, _, _, _, _, wbar, _, _, _, _,
     fg_t, fc_t, ht, _) = _interp_core(field, X)
    return fg_t[0], fc_t[0], float(ht[0]), wbar[0], ids[0]


def eval_points(field, X, D):
    """Evaluate (s, color, grad_x s) at a batch of points with view dirs.
    Returns an EvalTape; the forward values live on it."""
    X = np.atleast_2d(X)
    D = np.broadcast_to(np.asarray(D, dtype=field.dtype), X.shape)
    (ids, delta, dist, clamped, unit, w, S, wbar, h, c_vec, C_sum, g,
     fg_tilde, fc_tilde, htilde, _) = _interp_core(field, X)
    d_g = field.feature_dim_g

    u_geo = np.concatenate([fg_tilde, htilde[:, None]], axis=1)
    s_out, geo_tape = mlp_forward(field.geo_decoder, u_geo)
    s = s_out[:, 0]
    m = mlp_input_gradient(field.geo_decoder, geo_tape)

    phi = np.einsum("md,mkd->mk", m[:, :d_g], field.f_g[ids]) + m[:, d_g:] * h
    n = field._normals_dt[ids]
    nbar = np.einsum("mk,mkc->mc", wbar, n)
    grad_s = np.einsum("mk,mkc->mc", phi, g) + m[:, d_g:] * nbar

    pe = positional_encode(D, field.n_freq_dir)
    u_col = np.concatenate([fc_tilde, htilde[:, None], pe, grad_s], axis=1)
    color, col_tape = mlp_forward(field.color_decoder, u_col)

    return EvalTape(X=X, ids=ids, delta=delta, dist=dist, clamped=clamped,
                    unit=unit, w=w, S=S, wbar=wbar, h=h, c_vec=c_vec,
                    C_sum=C_sum, g=g, fg_tilde=fg_tilde, fc_tilde=fc_tilde,
                    htilde=htilde, m=m, geo_tape=geo_tape, col_tape=col_tape,
                    s=s, grad_s=grad_s, color=color)


def eval_point(field, x, d):
    """Spec-shaped single-point evaluation."""
    d = np.asarray(d, dtype=np.float64)
    nd = np.linalg.norm(d)
    if abs(nd - 1.0) > 1e-6:
        raise ValueError("view direction must be unit length")
    tape = eval_points(field, np.asarray(x, dtype=np.float64).reshape(1, 3), d)
    return PointSample(position=np.asarray(x, dtype=np.float64),
                       f_g=tape.fg_tilde[0], f_c=tape.fc_tilde[0],
                       h=float(tape.htilde[0]), s=float(tape.s[0]),
                       color=tape.color[0].astype(np.float64),
                       grad_s=tape.grad_s[0].astype(np.float64))


def _scatter_rows(out, idx, vals):
    """out[idx] += vals with idx (N,), vals (N, D): sort + segment reduce."""
    if len(idx) == 0:
        return
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    svals = vals[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(sidx))[0] + 1])
    sums = np.add.reduceat(svals, starts, axis=0)
    out[sidx[starts]] += sums


def _scatter_rows_multi(outs, idx, vals_list):
    """Segment-reduce several per-row value blocks with one shared sort,
    realized as a sparse gather-matmul (faster than add.reduceat here)."""
    if len(idx) == 0:
        return
    from scipy.sparse import csr_matrix

    widths = [v.shape[1] for v in vals_list]
    stacked = np.concatenate(vals_list, axis=1)
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(sidx))[0] + 1,
                             [len(sidx)]])
    rows = sidx[starts[:-1]]
    gather = csr_matrix(
        (np.ones(len(idx), dtype=stacked.dtype), order, starts),
        shape=(len(rows), len(idx)))
    sums = gather @ stacked
    ofs = 0
    for out, width in zip(outs, widths):
        out[rows] += sums[:, ofs:ofs + width]
        ofs += width


def eval_backward(field, tape, ds=None, dc=None, dgrad_s=None, grads=None):
    """Adjoints (ds on s, dc on color, dgrad_s on grad_x s) back to every
    trainable leaf. Accumulates into (and returns) a grads dict."""
    if grads is None:
        grads = field.zero_grads()
    M, K = tape.ids.shape
    d_g = field.feature_dim_g
    d_c = field.feature_dim_c
    dt = field.dtype
    zero = dt.type(0)

    bar_fc_tilde = np.zeros((M, d_c), dtype=dt)
    bar_htilde = np.zeros(M, dtype=dt)
    q = np.zeros((M, 3), dtype=dt)
    if dc is not None:
        dc = np.asarray(dc, dtype=dt)
        ig_c, pg_c = mlp_backward(field.color_decoder, tape.col_tape, dc)
        for li, (dW, db) in enumerate(pg_c):
            grads[f"col.W{li}"] += dW
            grads[f"col.b{li}"] += db
        bar_fc_tilde += ig_c[:, :d_c]
        bar_htilde += ig_c[:, d_c]
        q += ig_c[:, -3:]
    if dgrad_s is not None:
        q += np.asarray(dgrad_s, dtype=dt)

    bar_fg_tilde = np.zeros((M, d_g), dtype=dt)
    if ds is not None:
        ds = np.asarray(ds, dtype=dt)
        ig_g, pg_g = mlp_backward(field.geo_decoder, tape.geo_tape, ds[:, None])
        for li, (dW, db) in enumerate(pg_g):
            grads[f"geo.W{li}"] += dW
            grads[f"geo.b{li}"] += db
        bar_fg_tilde += ig_g[:, :d_g]
        bar_htilde += ig_g[:, d_g]

    grad_path = bool(np.any(q))
    f_g_n = field.f_g[tape.ids]
    n = field._normals_dt[tape.ids]

    bar_wbar = np.zeros((M, K), dtype=dt)
    bar_h = np.zeros((M, K), dtype=dt)
    bar_fgk = np.zeros((M, K, d_g), dtype=dt)
    bar_g = None
    if grad_path:
        # route through grad_s = sum_k phi_k g_k + m_h sum_k wbar_k n_k
        G_k = np.einsum("mkc,mc->mk", tape.g, q)
        Nq = np.einsum("mkc,mc->mk", n, q)
        m_g = tape.m[:, :d_g]
        m_h = tape.m[:, d_g]
        phi = np.einsum("md,mkd->mk", m_g, f_g_n) + m_h[:, None] * tape.h
        p = np.concatenate([
            np.einsum("mk,mkd->md", G_k, f_g_n),
            (G_k * tape.h + tape.wbar * Nq).sum(axis=1)[:, None],
        ], axis=1)
        bar_u2, pg2 = mlp_grad_input_backward(field.geo_decoder, tape.geo_tape, p)
        for li, (dW, db) in enumerate(pg2):
            grads[f"geo.W{li}"] += dW
            grads[f"geo.b{li}"] += db
        bar_fg_tilde += bar_u2[:, :d_g]
        bar_htilde += bar_u2[:, d_g]
        bar_fgk += G_k[:, :, None] * m_g[:, None, :]
        bar_h += m_h[:, None] * G_k
        bar_wbar += m_h[:, None] * Nq
        bar_g = phi[:, :, None] * q[:, None, :]

    # interpolated means
    bar_fgk += tape.wbar[:, :, None] * bar_fg_tilde[:, None, :]
    bar_fck = tape.wbar[:, :, None] * bar_fc_tilde[:, None, :]
    bar_h += tape.wbar * bar_htilde[:, None]
    bar_wbar += (np.einsum("mkd,md->mk", f_g_n, bar_fg_tilde)
                 + np.einsum("mkd,md->mk", field.f_c[tape.ids], bar_fc_tilde)
                 + tape.h * bar_htilde[:, None])

    # wbar = w / S
    bar_w = (bar_wbar - (bar_wbar * tape.wbar).sum(axis=1, keepdims=True)) \
        / tape.S[:, None]

    bar_delta = bar_h[:, :, None] * n
    if grad_path:
        # g_k = c_k / S - w_k C / S^2
        B = np.einsum("mk,mkc->mc", tape.wbar, bar_g)
        bar_cvec = (bar_g - B[:, None, :]) / tape.S[:, None, None]
        T1 = np.einsum("mkc,mkc->m", bar_g, tape.c_vec)
        bar_w += -np.einsum("mkc,mc->mk", bar_g, tape.C_sum) / (tape.S**2)[:, None]
        bar_S = (-T1 + 2.0 * np.einsum("mc,mc->m", B, tape.C_sum)) / tape.S**2
        bar_w += bar_S[:, None]
        # c_k = -w_k^2 u_k (zero and constant where clamped)
        bar_cvec = np.where(tape.clamped[:, :, None], zero, bar_cvec)
        bar_w += -2.0 * tape.w * np.einsum("mkc,mkc->mk", tape.unit, bar_cvec)
        bar_u = -(tape.w**2)[:, :, None] * bar_cvec
        # u_k = delta_k / d_k
        safe_d = np.maximum(tape.dist, dt.type(1e-30))
        bar_delta += bar_u / safe_d[:, :, None]
        bar_d = -np.einsum("mkc,mkc->mk", tape.unit, bar_u) / safe_d
    else:
        bar_d = np.zeros((M, K), dtype=dt)

    # w_k = 1/d_k when unclamped (constant when clamped)
    bar_d += np.where(tape.clamped, zero, -bar_w * tape.w**2)
    bar_delta += (bar_d[:, :, None] * tape.unit)

    bar_v = -bar_delta

    idx = tape.ids.reshape(-1)
    _scatter_rows_multi(
        [grads["f_g"], grads["f_c"], grads["vertices"]], idx,
        [bar_fgk.reshape(-1, d_g), bar_fck.reshape(-1, d_c),
         bar_v.reshape(-1, 3)])
    return grads


# ---------------------------------------------------------------------------
# NeuS-style compositing


def _log_sigmoid(x):
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                    x - np.log1p(np.exp(-np.abs(x))))


def neus_weights(s, kappa):
    """Alpha compositing weights from per-sample s values (M, n).

    alpha_i = max((Phi(s_i) - Phi(s_{i+1})) / Phi(s_i), 0) with
    Phi(u) = sigmoid(kappa * u), computed in log space for stability.
    Returns (alphas (M,n-1), trans (M,n-1), weights (M,n-1))."""
    ls = _log_sigmoid(kappa * s)
    ratio = np.exp(np.minimum(ls[:, 1:] - ls[:, :-1], 0.0))
    alphas = 1.0 - ratio
    one_minus = np.clip(1.0 - alphas, 0.0, 1.0)
    trans = np.cumprod(one_minus, axis=1)
    trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    return alphas, trans, trans * alphas


@dataclass
class RenderTape:
    origins: np.ndarray
    dirs: np.ndarray
    t: np.ndarray            # (M,n)
    eval_tape: EvalTape
    s: np.ndarray            # (M,n)
    c: np.ndarray            # (M,n,3)
    alphas: np.ndarray
    trans: np.ndarray
    weights: np.ndarray
    colors: np.ndarray       # (M,3)


def _stratified_t(near, far, n, jitter):
    frac = (np.arange(n) + jitter) / n
    return near[:, None] + (far - near)[:, None] * frac


def render_rays(field, origins, dirs, near, far, n_samples=None, jitter=None,
                rng=None):
    """Render a batch of rays; returns a RenderTape (colors on .colors)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    m = len(origins)
    n = int(n_samples if n_samples is not None else field.render_samples)
    if n < 2:
        raise ValueError("n_samples must be >= 2")
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (m,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (m,))
    if jitter is None:
        jitter = (rng.random((m, n)) if rng is not None
                  else np.full((m, n), 0.5))
    t = _stratified_t(near, far, n, jitter)
    X = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    D = np.repeat(dirs, n, axis=0)
    tape = eval_points(field, X.reshape(-1, 3), D)
    s = tape.s.reshape(m, n)
    c = tape.color.reshape(m, n, 3)
    alphas, trans, weights = neus_weights(s, field.kappa)
    colors = np.einsum("mi,mic->mc", weights, c[:, :-1, :])
    return RenderTape(origins=origins, dirs=dirs, t=t, eval_tape=tape, s=s,
                      c=c, alphas=alphas, trans=trans, weights=weights,
                      colors=colors)


def render_ray(field, ray, n_samples=None, seed=0):
    """Spec-shaped single-ray render: (pixel color, per-sample s, c, weights).
    seed=None uses deterministic midpoint samples instead of jitter."""
    rng = np.random.default_rng(seed) if seed is not None else None
    rt = render_rays(field, ray.origin[None], ray.direction[None],
                     ray.near, ray.far, n_samples=n_samples, rng=rng)
    return rt.colors[0], rt.s[0], rt.c[0], rt.weights[0]


def render_backward(field, rtape, d_colors, ds_extra=None, dc_extra=None,
                    dgrad_s_extra=None, grads=None):
    """Backward of render_rays: pixel-color adjoints (M,3) plus optional
    per-sample adjoints on s, c, and grad_x s, into a parameter grads dict."""
    if grads is None:
        grads = field.zero_grads()
    dt = field.dtype
    m, n = rtape.s.shape
    d_colors = np.asarray(d_colors, dtype=dt)

    rho = np.einsum("mic,mc->mi", rtape.c[:, :-1, :], d_colors)
    bar_c = np.zeros((m, n, 3), dtype=dt)
    bar_c[:, :-1, :] = rtape.weights[:, :, None] * d_colors[:, None, :]

    # bar alpha_k = T_k (rho_k - D_k), D via reverse recurrence
    nb = n - 1
    D = np.zeros((m, nb), dtype=dt)
    for k in range(nb - 2, -1, -1):
        D[:, k] = rho[:, k + 1] * rtape.alphas[:, k + 1] \
            + (1.0 - rtape.alphas[:, k + 1]) * D[:, k + 1]
    bar_alpha = rtape.trans * (rho - D)

    # alpha = 1 - exp(lb - la) clamped at 0
    kappa = dt.type(field.kappa)
    ks = kappa * rtape.s
    phi = 1.0 / (1.0 + np.exp(-np.abs(ks)))
    phi = np.where(ks >= 0, phi, 1.0 - phi)  # sigmoid(kappa s)
    ratio = 1.0 - rtape.alphas
    active = rtape.alphas > 0
    bar_la = np.where(active, bar_alpha * ratio, 0.0)
    dla_ds = kappa * (1.0 - phi)
    dla_dk = rtape.s * (1.0 - phi)
    bar_s = np.zeros((m, n), dtype=dt)
    bar_s[:, :-1] += bar_la * dla_ds[:, :-1]
    bar_s[:, 1:] += -bar_la * dla_ds[:, 1:]
    bar_kappa = (bar_la * (dla_dk[:, :-1] - dla_dk[:, 1:])).sum()
    grads["log_kappa"] += kappa * bar_kappa

    if ds_extra is not None:
        bar_s += np.asarray(ds_extra, dtype=dt)
    if dc_extra is not None:
        bar_c += np.asarray(dc_extra, dtype=dt)
    dgs = None
    if dgrad_s_extra is not None:
        dgs = np.asarray(dgrad_s_extra, dtype=dt).reshape(-1, 3)

    eval_backward(field, rtape.eval_tape, ds=bar_s.reshape(-1),
                  dc=bar_c.reshape(-1, 3), dgrad_s=dgs, grads=grads)
    return grads


# ---------------------------------------------------------------------------
# whole-view rendering


@dataclass
class ViewRender:
    image: np.ndarray          # (H,W,3)
    hit_mask: np.ndarray       # (H,W) bool
    face_buffer: np.ndarray    # (H,W) int, -1 misses
    hit_rows: np.ndarray = None
    tapes: list = dc_field(default=None)   # [(flat pixel rows, RenderTape)]


def _ray_sphere_window(origins, dirs, radius):
    """(near, far, hit) of ray vs origin-centered sphere; only forward
    intersections count (a sphere entirely behind the origin is a miss)."""
    b = np.einsum("mc,mc->m", origins, dirs)
    c = np.einsum("mc,mc->m", origins, origins) - radius**2
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    far = -b + sq
    near = np.maximum(-b - sq, 1e-4)
    hit = (disc > 0) & (far > near)
    return near, far, hit


def _render_ray_group(field, origins, dirs, rows, t_matrix):
    X = (origins[rows, None, :]
         + t_matrix[:, :, None] * dirs[rows, None, :])
    n = t_matrix.shape[1]
    D = np.repeat(dirs[rows], n, axis=0)
    tape = eval_points(field, X.reshape(-1, 3), D)
    s = tape.s.reshape(len(rows), n)
    c = tape.color.reshape(len(rows), n, 3)
    alphas, trans, weights = neus_weights(s, field.kappa)
    colors = np.einsum("mi,mic->mc", weights, c[:, :-1, :])
    return RenderTape(origins=origins[rows], dirs=dirs[rows], t=t_matrix,
                      eval_tape=tape, s=s, c=c, alphas=alphas, trans=trans,
                      weights=weights, colors=colors)


def render_view(field, camera, resolution=None, seed=0, n_samples=None,
                with_tape=False, sampling="surface", guard_samples=None):
    """Render every pixel of the camera. Misses are black (zero radiance).

    sampling="surface": stratify inside a window around the rasterized
    first surface crossing, plus a few coarse guard samples across the whole
    scene-bound chord (the logistic-CDF alphas are spacing-free, so mixed
    sampling composites exactly). Rays that miss the mesh but cross the
    bound get guard samples only; without them, geometry could never grow
    past the current silhouette nor recover once it left a tracking window.
    sampling="bound": stratify across the chord alone; sample positions are
    then independent of vertex positions (well-posed finite differences).
    """
    if resolution is not None:
        if np.isscalar(resolution):
            resolution = (int(resolution), int(resolution))
        camera = camera.scaled_to(resolution[0], resolution[1])
    if camera.width < 8 or camera.height < 8:
        raise ValueError("resolution must be at least 8x8")
    h, w = camera.height, camera.width
    face_buf, t_hit, origins, dirs = camera_hit_buffer(
        field.mesh, camera, cull_backfaces=field.closed_surface)
    flat_face = face_buf.reshape(-1)
    n = int(n_samples if n_samples is not None else field.render_samples)
    image = np.zeros((h * w, 3), dtype=field.dtype)
    tapes = []

    if sampling == "surface":
        g = guard_samples if guard_samples is not None else max(4, n // 3)
        near_b, far_b, in_bound = _ray_sphere_window(origins, dirs,
                                                     field.scene_bound)
        hit = flat_face >= 0
        rows_hit = np.nonzero(hit & in_bound)[0]
        rows_guard = np.nonzero(~hit & in_bound)[0] if g > 0 else np.zeros(0, int)
        jitter = np.random.default_rng(
            np.random.SeedSequence([seed])).random((h * w, n + g))
        if len(rows_hit):
            window = field.sample_window
            th = t_hit.reshape(-1)[rows_hit]
            t_win = _stratified_t(np.maximum(th - window, 1e-4), th + window,
                                  n, jitter[rows_hit, :n])
            if g > 0:
                t_chord = _stratified_t(near_b[rows_hit], far_b[rows_hit], g,
                                        jitter[rows_hit, n:])
                t_all = np.sort(np.concatenate([t_win, t_chord], axis=1), axis=1)
            else:
                t_all = t_win
            tapes.append((rows_hit,
                          _render_ray_group(field, origins, dirs, rows_hit, t_all)))
        if len(rows_guard) and g > 0:
            t_chord = _stratified_t(near_b[rows_guard], far_b[rows_guard], g,
                                    jitter[rows_guard, n:])
            tapes.append((rows_guard,
                          _render_ray_group(field, origins, dirs, rows_guard,
                                            t_chord)))
    elif sampling == "bound":
        near, far, in_bound = _ray_sphere_window(origins, dirs, field.scene_bound)
        rows = np.nonzero(in_bound)[0]
        if len(rows):
            jitter = np.random.default_rng(
                np.random.SeedSequence([seed])).random((h * w, n))[rows]
            t = _stratified_t(near[rows], far[rows], n, jitter)
            tapes.append((rows, _render_ray_group(field, origins, dirs, rows, t)))
    else:
        raise ValueError(f"unknown sampling mode {sampling!r}")

    for rows, tape in tapes:
        image[rows] = tape.colors
    view = ViewRender(image=image.reshape(h, w, 3),
                      hit_mask=(flat_face >= 0).reshape(h, w),
                      face_buffer=face_buf,
                      hit_rows=np.concatenate([r for r, _ in tapes])
                      if tapes else np.zeros(0, dtype=np.int64),
                      tapes=tapes if with_tape else None)
    return view


def render_pixel_rows(field, camera, rows, face_flat, t_flat, origins, dirs,
                      seed=0, n_samples=None, guard_samples=None):
    """Surface-mode render of a pixel subset, given the frame's hit buffer.

    Per-pixel jitter comes from the seed alone, so rendering a subset gives
    bit-identical colors to the same pixels of a full render. Returns
    (colors (len(rows),3), tapes [(rows_subset, RenderTape)]).
    """
    n = int(n_samples if n_samples is not None else field.render_samples)
    g = guard_samples if guard_samples is not None else max(4, n // 3)
    h, w = camera.height, camera.width
    rows = np.asarray(rows, dtype=np.int64)
    colors = np.zeros((len(rows), 3), dtype=field.dtype)
    if len(rows) == 0:
        return colors, []
    near_b, far_b, in_bound = _ray_sphere_window(origins[rows], dirs[rows],
                                                 field.scene_bound)
    jitter = np.random.default_rng(
        np.random.SeedSequence([seed])).random((h * w, n + g))
    hit = face_flat[rows] >= 0
    tapes = []
    sel_hit = np.nonzero(hit & in_bound)[0]
    if len(sel_hit):
        rh = rows[sel_hit]
        th = t_flat[rh]
        window = field.sample_window
        t_win = _stratified_t(np.maximum(th - window, 1e-4), th + window,
                              n, jitter[rh, :n])
        if g > 0:
            t_chord = _stratified_t(near_b[sel_hit], far_b[sel_hit], g,
                                    jitter[rh, n:])
            t_all = np.sort(np.concatenate([t_win, t_chord], axis=1), axis=1)
        else:
            t_all = t_win
        tape = _render_ray_group(field, origins, dirs, rh, t_all)
        colors[sel_hit] = tape.colors
        tapes.append((rh, tape))
    sel_guard = np.nonzero(~hit & in_bound)[0]
    if len(sel_guard) and g > 0:
        rg = rows[sel_guard]
        t_chord = _stratified_t(near_b[sel_guard], far_b[sel_guard], g,
                                jitter[rg, n:])
        tape = _render_ray_group(field, origins, dirs, rg, t_chord)
        colors[sel_guard] = tape.colors
        tapes.append((rg, tape))
    return colors, tapes


def render_view_backward(field, view, d_image, grads=None):
    """Backward through a with_tape render. Rays whose pixel adjoint is zero
    are skipped (their subgraphs contribute nothing)."""
    if view.tapes is None:
        raise ValueError("render_view was not called with with_tape=True")
    if grads is None:
        grads = field.zero_grads()
    d_flat = np.asarray(d_image, dtype=field.dtype).reshape(-1, 3)
    for rows, tape in view.tapes:
        d_rows = d_flat[rows]
        live = np.any(d_rows != 0, axis=1)
        if not np.any(live):
            continue
        sub = _slice_render_tape(field, tape, np.nonzero(live)[0])
        render_backward(field, sub, d_rows[live], grads=grads)
    return grads


def _slice_mlp_tape(tape, rows):
    from .numerics import MlpTape

    return MlpTape(a=[a[rows] for a in tape.a], z=[z[rows] for z in tape.z],
                   single=False,
                   dact=None if tape.dact is None else
                   [d[rows] for d in tape.dact])


def _slice_render_tape(field, rtape, rows):
    """Row subset of a recorded render forward (pure indexing, no re-eval)."""
    m, n = rtape.s.shape
    if len(rows) == m:
        return rtape
    er = (np.asarray(rows)[:, None] * n + np.arange(n)).reshape(-1)
    et = rtape.eval_tape
    sub_eval = EvalTape(
        X=et.X[er], ids=et.ids[er], delta=et.delta[er], dist=et.dist[er],
        clamped=et.clamped[er], unit=et.unit[er], w=et.w[er], S=et.S[er],
        wbar=et.wbar[er], h=et.h[er], c_vec=et.c_vec[er], C_sum=et.C_sum[er],
        g=et.g[er], fg_tilde=et.fg_tilde[er], fc_tilde=et.fc_tilde[er],
        htilde=et.htilde[er], m=et.m[er],
        geo_tape=_slice_mlp_tape(et.geo_tape, er),
        col_tape=_slice_mlp_tape(et.col_tape, er),
        s=et.s[er], grad_s=et.grad_s[er], color=et.color[er])
    return RenderTape(origins=rtape.origins[rows], dirs=rtape.dirs[rows],
                      t=rtape.t[rows], eval_tape=sub_eval, s=rtape.s[rows],
                      c=rtape.c[rows], alphas=rtape.alphas[rows],
                      trans=rtape.trans[rows], weights=rtape.weights[rows],
                      colors=rtape.colors[rows])


# ---------------------------------------------------------------------------
# checkpoint io (little-endian, f32 payload)


def _pack_mlp(net):
    spec = [len(net.layer_widths)] + list(net.layer_widths)
    blobs = []
    for wmat, bvec in zip(net.weights, net.biases):
        blobs.append(np.ascontiguousarray(wmat, dtype="<f4").tobytes())
        blobs.append(np.ascontiguousarray(bvec, dtype="<f4").tobytes())
    act = {"relu": 0, "softplus": 1, "linear": 2, "sigmoid": 3}
    spec += [act[net.activation], act[net.output_activation]]
    return spec, b"".join(blobs)


def save_field(field, path, config_hash=b"\x00" * 32):
    """Binary checkpoint: magic MBNF, version, config hash, counts and
    decoder layout, then f32 arrays in declared order. Bit-exact round trip."""
    if isinstance(config_hash, str):
        config_hash = bytes.fromhex(config_hash)
    if len(config_hash) != 32:
        raise ValueError("config_hash must be 32 bytes")
    mesh = field.mesh
    gspec, gblob = _pack_mlp(field.geo_decoder)
    cspec, cblob = _pack_mlp(field.color_decoder)
    header = struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    counts = [mesh.n_vertices, mesh.n_faces, field.feature_dim_g,
              field.feature_dim_c, field.k_neighbors, field.n_freq_dir,
              field.render_samples, len(gspec)] + gspec + [len(cspec)] + cspec
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(config_hash)
        fh.write(struct.pack(f"<{len(counts)}I", *counts))
        fh.write(struct.pack("<d", field.window_fraction))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(mesh.faces, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(field.f_g, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(field.f_c, dtype="<f4").tobytes())
        fh.write(gblob)
        fh.write(cblob)
        fh.write(np.asarray(field.log_kappa, dtype="<f4").tobytes())


def load_field(path, dtype=np.float64):
    """Load a checkpoint; returns (field, config_hash_hex). Normals are
    recomputed (area-weighted), matching the in-memory lifecycle."""
    from .geometry import TriMesh

    with open(path, "rb") as fh:
        magic, version = struct.unpack("<4sI", fh.read(8))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a field checkpoint (magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config_hash = fh.read(32)

        def read_u32(count):
            return struct.unpack(f"<{count}I", fh.read(4 * count))

        n_v, n_f, d_g, d_c, k, n_freq, rsamp, glen = read_u32(8)
        gspec = read_u32(glen)
        (clen,) = read_u32(1)
        cspec = read_u32(clen)
        (window_fraction,) = struct.unpack("<d", fh.read(8))

        def read_arr(shape):
            n = int(np.prod(shape))
            # frombuffer views are read-only; training mutates these
            return np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape).copy()

        verts = read_arr((n_v, 3)).astype(np.float64)
        faces = np.frombuffer(fh.read(4 * n_f * 3), dtype="<u4").reshape(n_f, 3)
        f_g = read_arr((n_v, d_g))
        f_c = read_arr((n_v, d_c))

        def read_mlp(spec):
            nl = spec[0]
            widths = list(spec[1:1 + nl])
            act_tags = {0: "relu", 1: "softplus", 2: "linear", 3: "sigmoid"}
            act = act_tags[spec[1 + nl]]
            out_act = act_tags[spec[2 + nl]]
            ws, bs = [], []
            for a, b in zip(widths[:-1], widths[1:]):
                ws.append(read_arr((b, a)).astype(dtype))
                bs.append(read_arr((b,)).astype(dtype))
            return Mlp(widths, ws, bs, act, out_act)

        geo = read_mlp(gspec)
        col = read_mlp(cspec)
        log_kappa = np.frombuffer(fh.read(4), dtype="<f4")[0]

    mesh = TriMesh(verts, faces.astype(np.int32))
    fld = MeshField(mesh, f_g, f_c, geo, col, log_kappa=float(log_kappa),
                    k_neighbors=int(k), n_freq_dir=int(n_freq), dtype=dtype,
                    render_samples=int(rsamp), window_fraction=window_fraction)
    return fld, config_hash.hex()
