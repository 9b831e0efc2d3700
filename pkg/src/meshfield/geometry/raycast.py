"""Ray-triangle intersection (Moller-Trumbore) against whole meshes.

Three entry points with identical hit semantics (nearest positive t within
[near, far], ties broken by the lower face id):
  - ray_mesh_intersect: one ray, contract-shaped result
  - intersect_rays: a batch of arbitrary rays, chunked dense tests
  - camera_hit_buffer: all pixel rays of a camera, pruned by projected
    triangle bounding boxes (a z-buffer rasterizer with exact hit tests)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DET_EPS = 1e-9

__all__ = ["Ray", "RayHit", "ray_mesh_intersect", "intersect_rays",
           "camera_hit_buffer"]


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float = 0.0
    far: float = np.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"direction must be unit length, |d|={n}")
        if not (0 <= self.near < self.far):
            raise ValueError(f"need 0 <= near < far, got [{self.near}, {self.far}]")


@dataclass
class RayHit:
    face: int
    t: float
    point: np.ndarray
    barycentric: np.ndarray  # (w0, w1, w2) over the face's three corners


def _mt_batch(origins, dirs, v0, e1, e2):
    """Moller-Trumbore for M rays against F triangles; returns (M,F) t with
    inf misses, plus (u, v) barycentrics."""
    p = np.cross(dirs[:, None, :], e2[None, :, :])          # (M,F,3)
    det = np.einsum("fk,mfk->mf", e1, p)
    ok = np.abs(det) > DET_EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = origins[:, None, :] - v0[None, :, :]
    u = np.einsum("mfk,mfk->mf", tv, p) * inv
    q = np.cross(tv, e1[None, :, :])
    v = np.einsum("mk,mfk->mf", dirs, q) * inv
    t = np.einsum("fk,mfk->mf", e2, q) * inv
    ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
    return np.where(ok, t, np.inf), u, v


def intersect_rays(mesh, origins, dirs, near=0.0, far=np.inf, chunk=2048):
    """Nearest hits for a ray batch. Returns (face (M,), t (M,), bary (M,3));
    misses have face -1 and t = inf. near/far may be scalars or (M,) arrays."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    m = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (m,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (m,))
    face = np.full(m, -1, dtype=np.int64)
    t_best = np.full(m, np.inf)
    bary = np.zeros((m, 3))
    if mesh.n_faces == 0:
        return face, t_best, bary
    tri = mesh.vertices[mesh.faces]
    v0 = tri[:, 0]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    for s in range(0, m, chunk):
        sl = slice(s, min(s + chunk, m))
        t, u, v = _mt_batch(origins[sl], dirs[sl], v0, e1, e2)
        t = np.where((t >= near[sl, None]) & (t <= far[sl, None]), t, np.inf)
        # nearest t; np.argmin takes the first (lowest face id) among ties
        fi = np.argmin(t, axis=1)
        rows = np.arange(t.shape[0])
        tm = t[rows, fi]
        hit = np.isfinite(tm)
        face[sl] = np.where(hit, fi, -1)
        t_best[sl] = tm
        uu = u[rows, fi]
        vv = v[rows, fi]
        bary[sl] = np.stack([1.0 - uu - vv, uu, vv], axis=1)
        bary[sl][~hit] = 0.0
    return face, t_best, bary


def ray_mesh_intersect(mesh, ray):
    """Nearest hit of one ray, or None on a miss."""
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces")
    face, t, bary = intersect_rays(mesh, ray.origin[None], ray.direction[None],
                                   near=ray.near, far=ray.far)
    if face[0] < 0:
        return None
    return RayHit(face=int(face[0]), t=float(t[0]),
                  point=ray.origin + t[0] * ray.direction,
                  barycentric=bary[0])


def _cross_rows(a, b):
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def camera_hit_buffer(mesh, camera, width=None, height=None,
                      cull_backfaces=False, face_ids=None):
    """Per-pixel nearest face ids and t for all pixel-center rays.

    Equivalent to intersect_rays over pixel_rays but prunes with projected
    triangle bounds, so cost scales with covered pixels instead of
    pixels x faces. cull_backfaces skips faces oriented away from the
    camera, which is exact for watertight meshes seen from outside.
    face_ids optionally restricts the test to a face subset (reported ids
    stay in the original numbering). Returns (face (H,W), t (H,W),
    origins, dirs).
    """
    from ..cameras import pixel_rays

    cam = camera if width is None else camera.scaled_to(width, height)
    w, h = cam.width, cam.height
    origins, dirs = pixel_rays(cam)
    face = np.full(h * w, -1, dtype=np.int64)
    t_best = np.full(h * w, np.inf)
    if mesh.n_faces == 0:
        return face.reshape(h, w), t_best.reshape(h, w), origins, dirs

    w2c = np.linalg.inv(cam.camera_to_world)
    vtx_cam = mesh.vertices @ w2c[:3, :3].T + w2c[:3, 3]
    z = -vtx_cam[:, 2]
    behind = z <= 1e-9
    zs = np.where(behind, 1.0, z)
    px = vtx_cam[:, 0] / zs * cam.fx + cam.cx
    py = -vtx_cam[:, 1] / zs * cam.fy + cam.cy

    subset = np.arange(mesh.n_faces, dtype=np.int64) if face_ids is None \
        else np.asarray(face_ids, dtype=np.int64)
    if len(subset) == 0:
        return face.reshape(h, w), t_best.reshape(h, w), origins, dirs
    tri = mesh.vertices[mesh.faces[subset]]
    v0 = tri[:, 0]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]

    f = mesh.faces[subset]
    any_behind = behind[f].any(axis=1)
    rxmin = np.floor(px[f].min(axis=1))
    rxmax = np.ceil(px[f].max(axis=1))
    rymin = np.floor(py[f].min(axis=1))
    rymax = np.ceil(py[f].max(axis=1))
    off_frame = ((rxmax < 0) | (rxmin > w - 1) | (rymax < 0) | (rymin > h - 1)) \
        & ~any_behind
    if cull_backfaces:
        n = _cross_rows(e1, e2)
        to_face = tri.mean(axis=1) - cam.position
        off_frame |= np.einsum("fk,fk->f", n, to_face) >= 0.0
    xmin = np.clip(rxmin, 0, w - 1).astype(np.int64)
    xmax = np.clip(rxmax, 0, w - 1).astype(np.int64)
    ymin = np.clip(rymin, 0, h - 1).astype(np.int64)
    ymax = np.clip(rymax, 0, h - 1).astype(np.int64)
    # faces with a vertex behind the camera have no valid screen bound
    xmin[any_behind] = 0
    xmax[any_behind] = w - 1
    ymin[any_behind] = 0
    ymax[any_behind] = h - 1

    # flat (face, pixel) candidate pairs across all bbox spans
    bw = np.where(off_frame, 0, xmax - xmin + 1)
    bh = np.where(off_frame, 0, ymax - ymin + 1)
    areas = bw * bh
    n_pairs = int(areas.sum())
    if n_pairs == 0:
        return face.reshape(h, w), t_best.reshape(h, w), origins, dirs
    face_rep = np.repeat(np.arange(len(subset)), areas)
    offsets = np.concatenate([[0], np.cumsum(areas)[:-1]])
    within = np.arange(n_pairs) - np.repeat(offsets, areas)
    bw_rep = np.repeat(bw, areas)
    pix = ((np.repeat(ymin, areas) + within // bw_rep) * w
           + np.repeat(xmin, areas) + within % bw_rep)

    t_pairs = np.empty(n_pairs)
    for s in range(0, n_pairs, 262144):
        sl = slice(s, min(s + 262144, n_pairs))
        fr = face_rep[sl]
        o = origins[pix[sl]]
        d = dirs[pix[sl]]
        p = _cross_rows(d, e2[fr])
        e1r = e1[fr]
        det = np.einsum("mk,mk->m", e1r, p)
        ok = np.abs(det) > DET_EPS
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tv = o - v0[fr]
        u = np.einsum("mk,mk->m", tv, p) * inv
        q = _cross_rows(tv, e1r)
        v = np.einsum("mk,mk->m", d, q) * inv
        t = np.einsum("mk,mk->m", e2[fr], q) * inv
        ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
        t_pairs[sl] = np.where(ok, t, np.inf)

    hit_pairs = np.isfinite(t_pairs)
    if hit_pairs.any():
        hp = np.nonzero(hit_pairs)[0]
        # nearest t per pixel, ties to the lower face id
        order = np.lexsort((subset[face_rep[hp]], t_pairs[hp], pix[hp]))
        sel = hp[order]
        first = np.concatenate([[True], np.diff(pix[sel]) != 0])
        winners = sel[first]
        face[pix[winners]] = subset[face_rep[winners]]
        t_best[pix[winners]] = t_pairs[winners]
    return face.reshape(h, w), t_best.reshape(h, w), origins, dirs
