"""Locating the 3D editing region from per-view keyword attention.

Per traversed view: aggregate the attention stack to one normalized map,
threshold it, back-project the masked pixels onto the mesh, union the face
sets across views, then refine with Discard (drop small components) and
Fill (absorb enclosed unselected pockets).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import CameraScope, sample_spherical_cameras
from .errors import NoRegionFoundError
from .geometry import camera_hit_buffer, face_components, mesh_topology_hash

__all__ = [
    "AttentionEntry",
    "AttentionStack",
    "EditRegion",
    "LocateConfig",
    "LocateResult",
    "bilinear_resize",
    "aggregate_attention",
    "binarize",
    "backproject_mask",
    "refine_region",
    "locate_editing_region",
    "save_region",
    "load_region",
]


@dataclass
class AttentionEntry:
    t: int
    l: int
    h: int
    map: np.ndarray  # (h, w), non-negative

    def __post_init__(self):
        self.map = np.asarray(self.map, dtype=np.float64)
        if self.map.ndim != 2:
            raise ValueError("attention map must be 2-D")
        if self.map.size and self.map.min() < 0:
            raise ValueError("attention map must be non-negative")


@dataclass
class AttentionStack:
    entries: list
    keyword: str = ""
    view_id: object = None

    def __post_init__(self):
        if not self.entries:
            raise ValueError("attention stack needs at least one entry")


@dataclass
class EditRegion:
    face_ids: np.ndarray
    vertex_ids: np.ndarray
    mesh_hash: str

    @classmethod
    def from_faces(cls, mesh, face_ids):
        faces = np.unique(np.asarray(sorted(face_ids), dtype=np.int64))
        if faces.size and (faces[0] < 0 or faces[-1] >= mesh.n_faces):
            raise ValueError("face id out of range")
        verts = np.unique(mesh.faces[faces].reshape(-1)).astype(np.int64) \
            if faces.size else np.zeros(0, dtype=np.int64)
        return cls(face_ids=faces, vertex_ids=verts,
                   mesh_hash=mesh_topology_hash(mesh))

    @property
    def n_faces(self):
        return len(self.face_ids)


@dataclass
class LocateConfig:
    tau: float = 0.75
    traversal_step: float = 45.0
    discard_fraction: float = 0.10
    agg_resolution: int = 128
    render_resolution: int = 256
    render_samples: int = 24
    steps: int = 3
    aggregation: str = "mean"   # or "max"
    min_region_fraction: float = 0.01
    scope: CameraScope = dc_field(default_factory=CameraScope)

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ValueError("tau must be in (0,1)")
        if self.traversal_step <= 0:
            raise ValueError("traversal step must be positive")
        if self.aggregation not in ("mean", "max"):
            raise ValueError("aggregation must be mean or max")


@dataclass
class LocateResult:
    region: EditRegion
    low_confidence: bool
    selected_raw: np.ndarray      # union before refinement
    visible_faces: np.ndarray
    masks: list                   # per-view binarized masks (debug dumps)


def bilinear_resize(img, out_h, out_w):
    """Separable bilinear resize, corner-aligned (source corners map to
    destination corners exactly)."""
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def axis_coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out), np.zeros(n_out, dtype=np.int64)
        x = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.minimum(np.floor(x).astype(np.int64), n_in - 2)
        return x - i0, i0

    fy, y0 = axis_coords(in_h, out_h)
    fx, x0 = axis_coords(in_w, out_w)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def aggregate_attention(stack, resolution, mode="mean"):
    """Resize every entry map to resolution, combine, min-max normalize to
    [0,1]. A constant combined map normalizes to all zeros."""
    res = int(resolution)
    acc = None
    for entry in stack.entries:
        m = bilinear_resize(entry.map, res, res)
        if acc is None:
            acc = m
        elif mode == "mean":
            acc += m
        else:
            np.maximum(acc, m, out=acc)
    if mode == "mean":
        acc /= len(stack.entries)
    lo, hi = acc.min(), acc.max()
    if hi - lo < 1e-12:
        return np.zeros_like(acc)
    return (acc - lo) / (hi - lo)


def binarize(agg_map, tau):
    agg_map = np.asarray(agg_map)
    return agg_map >= tau


def backproject_mask(mesh, camera, mask):
    """Faces hit by pinhole rays through the mask's true pixels."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (camera.height, camera.width):
        raise ValueError(
            f"mask {mask.shape} does not match camera "
            f"{(camera.height, camera.width)}")
    face, _, _, _ = camera_hit_buffer(mesh, camera)
    return _faces_from_buffer(face, mask)


def _faces_from_buffer(face_buffer, mask):
    sel = face_buffer[mask & (face_buffer >= 0)]
    return set(int(f) for f in np.unique(sel))


def _fill_once(mesh, selected_mask):
    """Add unselected components that cannot reach the outside: components
    touching a mesh boundary are outside; on watertight meshes the largest
    unselected component(s) play that role."""
    unselected = np.nonzero(~selected_mask)[0]
    if len(unselected) == 0:
        return selected_mask, False
    comps = face_components(mesh, unselected)
    boundary = set(mesh.boundary_faces().tolist())
    outside = [c for c in comps if boundary.intersection(c.tolist())]
    if not outside:
        biggest = max(len(c) for c in comps)
        outside = [c for c in comps if len(c) == biggest]
    outside_ids = {id(c) for c in outside}
    changed = False
    for c in comps:
        if id(c) not in outside_ids:
            selected_mask[c] = True
            changed = True
    return selected_mask, changed


def refine_region(mesh, face_ids, cfg=None):
    """Discard small components, then Fill enclosed holes, iterated to a
    fixpoint (idempotence by construction; one round in practice)."""
    if cfg is None:
        cfg = LocateConfig()
    selected = np.zeros(mesh.n_faces, dtype=bool)
    ids = np.asarray(sorted(set(int(i) for i in face_ids)), dtype=np.int64)
    selected[ids] = True
    for _ in range(8):
        changed = False
        chosen = np.nonzero(selected)[0]
        if len(chosen):
            comps = face_components(mesh, chosen)
            total = len(chosen)
            for c in comps:
                if len(c) < cfg.discard_fraction * total:
                    selected[c] = False
                    changed = True
        if selected.any():
            selected, filled = _fill_once(mesh, selected)
            changed = changed or filled
        if not changed:
            break
    return EditRegion.from_faces(mesh, np.nonzero(selected)[0])


def locate_editing_region(field, oracle, prompt, keyword, cfg=None):
    """Traverse the scope lattice, union per-view back-projections, refine
    once. Raises NoRegionFoundError when nothing is selected; flags (never
    alters) a region smaller than min_region_fraction of the visible faces."""
    from .field import render_view

    if cfg is None:
        cfg = LocateConfig()
    mesh = field.mesh
    cams = sample_spherical_cameras(cfg.scope, cfg.traversal_step,
                                    width=cfg.render_resolution,
                                    height=cfg.render_resolution)
    selected = set()
    visible = set()
    masks = []
    for view_id, cam in enumerate(cams):
        view = render_view(field, cam, seed=view_id,
                           n_samples=cfg.render_samples)
        stack = oracle.attention(view.image, prompt, keyword, steps=cfg.steps,
                                 camera=cam, view_id=view_id)
        agg = aggregate_attention(stack, cfg.agg_resolution, mode=cfg.aggregation)
        mask = binarize(agg, cfg.tau)
        acam = cam.scaled_to(cfg.agg_resolution, cfg.agg_resolution)
        face_buf, _, _, _ = camera_hit_buffer(mesh, acam)
        selected |= _faces_from_buffer(face_buf, mask)
        visible |= set(int(f) for f in np.unique(face_buf[face_buf >= 0]))
        masks.append(mask)
    if not selected:
        raise NoRegionFoundError(
            f"no faces selected for keyword {keyword!r} across {len(cams)} views")
    region = refine_region(mesh, selected, cfg)
    low_confidence = len(selected) < cfg.min_region_fraction * max(len(visible), 1)
    return LocateResult(region=region, low_confidence=low_confidence,
                        selected_raw=np.asarray(sorted(selected), dtype=np.int64),
                        visible_faces=np.asarray(sorted(visible), dtype=np.int64),
                        masks=masks)


# ---------------------------------------------------------------------------
# region file (text: header lines then one face id per line)


def save_region(region, path, config_hash="0" * 64, low_confidence=False):
    with open(path, "w") as fh:
        fh.write("# meshfield-region v1\n")
        fh.write(f"# mesh_hash: {region.mesh_hash}\n")
        fh.write(f"# config_hash: {config_hash}\n")
        fh.write(f"# low_confidence: {int(low_confidence)}\n")
        fh.write(f"# faces: {region.n_faces}\n")
        for fid in region.face_ids:
            fh.write(f"{int(fid)}\n")


def load_region(path, mesh=None):
    """Returns (region, header dict). With a mesh, validates the hash and
    derives the vertex set; otherwise vertex_ids stay empty."""
    header = {}
    faces = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if ":" in line:
                    key, val = line[1:].split(":", 1)
                    header[key.strip()] = val.strip()
                continue
            faces.append(int(line))
    faces = np.asarray(faces, dtype=np.int64)
    if mesh is not None:
        if header.get("mesh_hash") not in (None, mesh_topology_hash(mesh)):
            raise ValueError("region file was produced for a different mesh")
        return EditRegion.from_faces(mesh, faces), header
    return EditRegion(face_ids=faces, vertex_ids=np.zeros(0, dtype=np.int64),
                      mesh_hash=header.get("mesh_hash", "")), header
