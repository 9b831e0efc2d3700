"""Explicit mesh machinery: marching cubes extraction, spatial indexing,
ray casting, adjacency and components."""

from .marching import marching_cubes
from .raycast import Ray, RayHit, camera_hit_buffer, intersect_rays, ray_mesh_intersect
from .spatial import SpatialIndex, knn_vertices
from .trimesh import (
    TriMesh,
    face_components,
    grid_patch,
    icosphere,
    load_obj,
    mesh_topology_hash,
    one_ring,
    save_obj,
)

__all__ = [
    "TriMesh",
    "SpatialIndex",
    "Ray",
    "RayHit",
    "marching_cubes",
    "knn_vertices",
    "ray_mesh_intersect",
    "intersect_rays",
    "camera_hit_buffer",
    "face_components",
    "one_ring",
    "mesh_topology_hash",
    "save_obj",
    "load_obj",
    "icosphere",
    "grid_patch",
]
