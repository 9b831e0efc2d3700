"""Triangle mesh scaffolding: normals, adjacency, connected components,
one-rings, OBJ round-trip. Topology is immutable after construction; vertex
positions may move (callers must recompute_normals afterwards)."""

from __future__ import annotations

import hashlib
from collections import deque

import numpy as np

__all__ = [
    "TriMesh",
    "one_ring",
    "face_components",
    "mesh_topology_hash",
    "save_obj",
    "load_obj",
    "icosphere",
    "grid_patch",
]


class TriMesh:
    def __init__(self, vertices, faces, vertex_normals=None, validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V,3), got {self.vertices.shape}")
        if self.faces.size and (self.faces.ndim != 2 or self.faces.shape[1] != 3):
            raise ValueError(f"faces must be (F,3), got {self.faces.shape}")
        if self.faces.size == 0:
            self.faces = self.faces.reshape(0, 3)
        if validate and self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")
        self._ring = None
        self._face_adj = None
        self._boundary_faces = None
        if vertex_normals is not None:
            self.vertex_normals = np.ascontiguousarray(vertex_normals, dtype=np.float64)
        else:
            self.vertex_normals = None
            self.recompute_normals()

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def copy(self):
        m = TriMesh(self.vertices.copy(), self.faces.copy(),
                    vertex_normals=self.vertex_normals.copy(), validate=False)
        return m

    # -- geometry ----------------------------------------------------------

    def face_normals(self, normalized=True):
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalized:
            lp = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.maximum(lp, 1e-30)
        return n

    def face_areas(self):
        raw = np.cross(self.vertices[self.faces[:, 1]] - self.vertices[self.faces[:, 0]],
                       self.vertices[self.faces[:, 2]] - self.vertices[self.faces[:, 0]])
        return 0.5 * np.linalg.norm(raw, axis=1)

    def face_centroids(self):
        return self.vertices[self.faces].mean(axis=1)

    def recompute_normals(self):
        """Area-weighted average of incident face normals, unit length.
        Isolated vertices get an arbitrary unit normal (+y)."""
        acc = np.zeros_like(self.vertices)
        if self.n_faces:
            fn = self.face_normals(normalized=False)  # magnitude = 2*area
            for c in range(3):
                np.add.at(acc, self.faces[:, c], fn)
        lens = np.linalg.norm(acc, axis=1, keepdims=True)
        degenerate = lens[:, 0] < 1e-30
        acc[degenerate] = (0.0, 1.0, 0.0)
        lens[degenerate] = 1.0
        self.vertex_normals = acc / lens
        return self.vertex_normals

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bounding_radius(self):
        return float(np.linalg.norm(self.vertices, axis=1).max()) if self.n_vertices else 0.0

    # -- topology (cached; faces never change) ------------------------------

    def _ring_csr(self):
        if self._ring is None:
            f = self.faces
            edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
            und = np.concatenate([edges, edges[:, ::-1]], axis=0)
            und = np.unique(und, axis=0) if len(und) else und.reshape(0, 2)
            counts = np.bincount(und[:, 0], minlength=self.n_vertices) if len(und) else \
                np.zeros(self.n_vertices, dtype=np.int64)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._ring = (offsets, und[:, 1].astype(np.int32) if len(und) else
                          np.zeros(0, dtype=np.int32))
        return self._ring

    def one_ring(self, vid):
        if not (0 <= vid < self.n_vertices):
            raise IndexError(f"vertex id {vid} out of range")
        offsets, ids = self._ring_csr()
        return set(int(i) for i in ids[offsets[vid]:offsets[vid + 1]])

    def ring_arrays(self):
        """(offsets, neighbor_ids) CSR over all vertices."""
        return self._ring_csr()

    def face_adjacency(self):
        """(F,3) array: neighbor face across each edge (v0v1, v1v2, v2v0); -1
        for boundary edges. Assumes at most two faces per edge."""
        if self._face_adj is None:
            f = self.faces
            adj = np.full((self.n_faces, 3), -1, dtype=np.int64)
            edge_map = {}
            for fi in range(self.n_faces):
                for e in range(3):
                    a, b = int(f[fi, e]), int(f[fi, (e + 1) % 3])
                    key = (a, b) if a < b else (b, a)
                    if key in edge_map:
                        fj, ej = edge_map.pop(key)
                        adj[fi, e] = fj
                        adj[fj, ej] = fi
                    else:
                        edge_map[key] = (fi, e)
            self._face_adj = adj
            self._boundary_faces = np.unique(
                np.nonzero((adj == -1).any(axis=1))[0])
        return self._face_adj

    def boundary_faces(self):
        self.face_adjacency()
        return self._boundary_faces

    def validate_orientation(self):
        """True iff no directed edge repeats: adjacent faces with consistent
        winding traverse their shared edge in opposite directions."""
        f = self.faces
        directed = set()
        for fi in range(self.n_faces):
            for e in range(3):
                key = (int(f[fi, e]), int(f[fi, (e + 1) % 3]))
                if key in directed:
                    return False
                directed.add(key)
        return True


def one_ring(mesh, vid):
    """Vertices sharing an edge with vid; empty for isolated vertices."""
    return mesh.one_ring(vid)


def face_components(mesh, face_subset):
    """Connected components of a face subset under shared-edge adjacency.
    Returns a list of sorted int arrays partitioning the subset."""
    subset = np.asarray(sorted(set(int(i) for i in face_subset)), dtype=np.int64)
    if subset.size == 0:
        return []
    if subset.min() < 0 or subset.max() >= mesh.n_faces:
        raise IndexError("face id out of range")
    adj = mesh.face_adjacency()
    in_subset = np.zeros(mesh.n_faces, dtype=bool)
    in_subset[subset] = True
    seen = np.zeros(mesh.n_faces, dtype=bool)
    components = []
    for start in subset:
        if seen[start]:
            continue
        comp = []
        queue = deque([int(start)])
        seen[start] = True
        while queue:
            fi = queue.popleft()
            comp.append(fi)
            for nb in adj[fi]:
                if nb >= 0 and in_subset[nb] and not seen[nb]:
                    seen[nb] = True
                    queue.append(int(nb))
        components.append(np.array(sorted(comp), dtype=np.int64))
    return components


def mesh_topology_hash(mesh):
    """Identity of the connectivity (faces + vertex count). Stable across
    vertex motion, which editing is allowed to do."""
    h = hashlib.sha256()
    h.update(np.int64(mesh.n_vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.faces, dtype=np.int64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# OBJ round-trip (ascii v/f, 1-based)


def save_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int32).reshape(-1, 3))


# ---------------------------------------------------------------------------
# procedural meshes for fixtures and scenes


def icosphere(subdivisions=2, radius=1.0):
    """Geodesic sphere from a subdivided icosahedron; watertight and
    consistently oriented (outward)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []
        verts_list = list(verts)

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = np.array(verts_list[i]) + np.array(verts_list[j])
                m /= np.linalg.norm(m)
                cache[key] = len(verts_list)
                verts_list.append(tuple(m))
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts, faces = verts_list, new_faces
    v = np.array(verts, dtype=np.float64) * radius
    return TriMesh(v, np.array(faces, dtype=np.int32))


def grid_patch(nx=5, ny=5, size=1.0, z=0.0):
    """Planar triangulated grid in the z=const plane, standard diagonal split.
    Interior vertices have 6 one-ring neighbours."""
    xs = np.linspace(-size / 2, size / 2, nx)
    ys = np.linspace(-size / 2, size / 2, ny)
    verts = np.array([[x, y, z] for y in ys for x in xs])
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b = a + 1
            c = a + nx
            d = c + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return TriMesh(verts, np.array(faces, dtype=np.int32))
