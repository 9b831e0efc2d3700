"""Marching cubes over a regular scalar grid.

Vertices are created on grid edges whose endpoint values straddle the iso
level, positioned by exact linear interpolation, and welded globally (one
vertex per crossed grid edge) so the output connectivity is manifold where
the field is well behaved. Vertex normals come from the central-difference
gradient of the grid, oriented toward increasing field values.
"""

from __future__ import annotations

import numpy as np

from .mc_tables import EDGE_TABLE, TRI_TABLE
from .trimesh import TriMesh

__all__ = ["marching_cubes"]

# corner offsets in (ix, iy, iz), classic bottom-loop/top-loop ordering
_CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
], dtype=np.int64)

# the 12 cube edges as corner pairs
_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)


def _grid_gradient(grid, idx, spacing):
    """Central-difference gradient at integer grid coordinates (M,3)."""
    g = np.empty((len(idx), 3))
    dims = grid.shape
    for axis in range(3):
        hi = np.minimum(idx[:, axis] + 1, dims[axis] - 1)
        lo = np.maximum(idx[:, axis] - 1, 0)
        sel_hi = [idx[:, 0], idx[:, 1], idx[:, 2]]
        sel_lo = [idx[:, 0], idx[:, 1], idx[:, 2]]
        sel_hi[axis] = hi
        sel_lo[axis] = lo
        denom = (hi - lo).astype(np.float64) * spacing[axis]
        denom = np.maximum(denom, 1e-30)
        g[:, axis] = (grid[tuple(sel_hi)] - grid[tuple(sel_lo)]) / denom
    return g


def marching_cubes(scalar_grid, origin=(0.0, 0.0, 0.0), spacing=(1.0, 1.0, 1.0),
                   iso_level=0.0):
    """Extract the iso_level surface of scalar_grid (nx,ny,nz).

    origin/spacing define the grid-to-world map: world = origin + index*spacing.
    A grid with no sign change yields an empty mesh. Faces are wound so their
    normals point toward the positive side of the field (outward for an SDF).
    """
    grid = np.asarray(scalar_grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 2:
        raise ValueError(f"grid must be 3-D with dims >= 2, got {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid contains non-finite values")
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)

    inside = grid < iso_level
    nx, ny, nz = grid.shape
    # cube case index from the 8 corner signs, vectorized over all cubes
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for bit, (cx, cy, cz) in enumerate(_CORNERS):
        case |= inside[cx:nx - 1 + cx, cy:ny - 1 + cy, cz:nz - 1 + cz].astype(np.int32) << bit
    active = np.argwhere((case != 0) & (case != 255))
    if len(active) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32),
                       vertex_normals=np.zeros((0, 3)), validate=False)

    edge_vertex = {}   # (axis, ix, iy, iz) of the edge's low corner -> vertex id
    positions = []
    grad_at = []       # (low corner idx, high corner idx, t) for normal interp
    faces = []

    edge_axis = []
    for (a, b) in _EDGES:
        d = _CORNERS[b] - _CORNERS[a]
        edge_axis.append(int(np.nonzero(d)[0][0]))

    for ix, iy, iz in active:
        c = case[ix, iy, iz]
        crossed = EDGE_TABLE[c]
        local = [-1] * 12
        base = np.array((ix, iy, iz), dtype=np.int64)
        for e in range(12):
            if not (crossed >> e) & 1:
                continue
            ca, cb = _EDGES[e]
            la = base + _CORNERS[ca]
            lb = base + _CORNERS[cb]
            axis = edge_axis[e]
            low = la if la[axis] <= lb[axis] else lb
            key = (axis, int(low[0]), int(low[1]), int(low[2]))
            vid = edge_vertex.get(key)
            if vid is None:
                va = grid[tuple(la)]
                vb = grid[tuple(lb)]
                t = (iso_level - va) / (vb - va)
                pos = origin + (la + t * (lb - la)) * spacing
                vid = len(positions)
                edge_vertex[key] = vid
                positions.append(pos)
                grad_at.append((la, lb, t))
            local[e] = vid
        tri = TRI_TABLE[c]
        for k in range(0, len(tri), 3):
            # table winding assumes inside=negative with inward normals;
            # swap to make right-hand normals point to the positive side
            faces.append((local[tri[k]], local[tri[k + 2]], local[tri[k + 1]]))

    positions = np.array(positions)
    faces = np.array(faces, dtype=np.int32)
    # drop index-degenerate faces (arise when a corner sits exactly on iso)
    good = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
            & (faces[:, 0] != faces[:, 2]))
    faces = faces[good]

    la = np.array([g[0] for g in grad_at])
    lb = np.array([g[1] for g in grad_at])
    tt = np.array([g[2] for g in grad_at])[:, None]
    grad = (1.0 - tt) * _grid_gradient(grid, la, spacing) + tt * _grid_gradient(grid, lb, spacing)
    lens = np.linalg.norm(grad, axis=1, keepdims=True)
    bad = lens[:, 0] < 1e-30
    grad[bad] = (0.0, 1.0, 0.0)
    lens[bad] = 1.0
    normals = grad / lens

    return TriMesh(positions, faces, vertex_normals=normals, validate=True)
