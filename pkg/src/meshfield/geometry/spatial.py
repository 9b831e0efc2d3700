"""Uniform-grid spatial index for exact K-nearest-vertex queries.

Cells bucket vertex ids over the bounding box; a query expands Chebyshev
rings of cells until the K-th candidate distance is covered by the ring
radius, which makes results provably identical to brute force. The index is
immutable; rebuild from scratch after vertex motion.
"""

from __future__ import annotations

import numpy as np

__all__ = ["SpatialIndex", "knn_vertices"]


class SpatialIndex:
    def __init__(self, points, cell_size=None):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N,3), got {pts.shape}")
        self.points = pts
        if len(pts) == 0:
            raise ValueError("empty index")
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        diag = float(np.linalg.norm(hi - lo))
        if cell_size is None:
            cell_size = diag / 64.0 if diag > 0 else 1.0
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        self.origin = lo
        self.dims = np.maximum(
            np.ceil((hi - lo) / self.cell_size).astype(np.int64) + 1, 1)
        cells = self.cell_of(pts)
        flat = (cells[:, 0] * self.dims[1] + cells[:, 1]) * self.dims[2] + cells[:, 2]
        self.order = np.argsort(flat, kind="stable").astype(np.int64)
        self.sorted_cells = flat[self.order]

    @property
    def n_points(self):
        return len(self.points)

    def cell_of(self, x):
        c = np.floor((np.atleast_2d(x) - self.origin) / self.cell_size).astype(np.int64)
        return np.clip(c, 0, self.dims - 1)

    def _bucket(self, cx, cy, cz):
        flat = (cx * self.dims[1] + cy) * self.dims[2] + cz
        lo = np.searchsorted(self.sorted_cells, flat, side="left")
        hi = np.searchsorted(self.sorted_cells, flat, side="right")
        return self.order[lo:hi]

    def query(self, x, k):
        """Exact K nearest vertex ids with distances, sorted by (distance,
        id). Returns min(k, n_points) pairs."""
        if k < 1:
            raise ValueError("k must be >= 1")
        x = np.asarray(x, dtype=np.float64).reshape(3)
        k_eff = min(k, self.n_points)
        center = self.cell_of(x)[0]
        best = []  # list of (dist, vid), kept sorted
        r = 0
        while True:
            ids = self._ring_candidates(center, r)
            if len(ids):
                d = np.linalg.norm(self.points[ids] - x, axis=1)
                best.extend(zip(d.tolist(), ids.tolist()))
                best.sort()
                best = best[: k_eff]
            covered = r * self.cell_size
            if len(best) == k_eff and best[-1][0] <= covered:
                break
            # once the ring has swallowed the whole grid this IS brute force
            if (center - r <= 0).all() and (center + r >= self.dims - 1).all():
                break
            r += 1
        return [(int(v), float(d)) for d, v in best]

    def _ring_candidates(self, center, r):
        """Vertex ids in cells at Chebyshev distance exactly r from center
        (clipped to the grid)."""
        lo = np.maximum(center - r, 0)
        hi = np.minimum(center + r, self.dims - 1)
        out = []
        for cx in range(lo[0], hi[0] + 1):
            for cy in range(lo[1], hi[1] + 1):
                for cz in range(lo[2], hi[2] + 1):
                    if max(abs(cx - center[0]), abs(cy - center[1]),
                           abs(cz - center[2])) != r:
                        continue
                    b = self._bucket(cx, cy, cz)
                    if len(b):
                        out.append(b)
        if not out:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(out)


def knn_vertices(index, x, k):
    """Spec-shaped K-NN query: [(vertex_id, distance), ...] ascending."""
    return index.query(x, k)
