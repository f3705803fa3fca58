"""Procedural indoor-like density scenes with known ground-truth transforms."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .register import SimilarityTransform
from .volume import DensityGrid, interpolate_indices

PRIMITIVE_KINDS = ("box", "wall", "cylinder")


@dataclass
class Primitive:
    """A solid with a soft 1-cell edge.

    ``box`` and ``wall`` are oriented boxes (``size`` is the full edge length
    per local axis); ``cylinder`` uses ``size = (diameter, diameter, height)``
    along its local z axis. ``rotation`` holds xyz Euler angles in degrees.
    """

    kind: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    amplitude: float = 1.0

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if not self.amplitude > 0:
            raise ValueError("primitive amplitude must be positive")
        if min(self.size) <= 0:
            raise ValueError("primitive size must be positive")

    def inside_distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance to the surface, positive inside (exact inside the solid)."""
        rot = Rotation.from_euler("xyz", self.rotation, degrees=True).as_matrix()
        q = (points - np.asarray(self.center)) @ rot  # world -> local
        half = np.asarray(self.size) / 2.0
        if self.kind == "cylinder":
            radial = half[0] - np.hypot(q[..., 0], q[..., 1])
            return np.minimum(radial, half[2] - np.abs(q[..., 2]))
        return np.min(half - np.abs(q), axis=-1)


@dataclass
class SceneSpec:
    extent: tuple[tuple[float, float, float], tuple[float, float, float]]
    primitives: list[Primitive]
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives]
        self.extent = tuple(tuple(float(x) for x in corner) for corner in self.extent)
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            extent=d["extent"],
            primitives=[Primitive(**{**p, "center": tuple(p["center"]), "size": tuple(p["size"]),
                                     "rotation": tuple(p.get("rotation", (0, 0, 0)))}) for p in d["primitives"]],
            noise=d.get("noise", 0.0),
            seed=d.get("seed", 0),
        )


@dataclass
class OverlapPair:
    grid_a: DensityGrid
    grid_b: DensityGrid
    true_transform: SimilarityTransform
    overlap_fraction: float


def evaluate_density(spec: SceneSpec, points: np.ndarray, edge: float) -> np.ndarray:
    """Noise-free density at world points: max over soft primitive indicators."""
    rho = np.zeros(points.shape[:-1])
    for prim in spec.primitives:
        soft = np.clip(0.5 + prim.inside_distance(points) / edge, 0.0, 1.0)
        rho = np.maximum(rho, prim.amplitude * soft)
    return rho


def cell_centers(dims: Sequence[int], spacing: float, origin) -> np.ndarray:
    axes = [origin[a] + spacing * np.arange(dims[a]) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def render_scene(spec: SceneSpec, dims: Sequence[int] | None = None, spacing: float = 1.0,
                 origin=None) -> DensityGrid:
    """Rasterize ``spec`` onto a grid whose cell (0,0,0) sits at ``origin``.

    Defaults cover ``spec.extent``. Density is clamped to >= 0 after noise.
    """
    lo, hi = np.asarray(spec.extent[0]), np.asarray(spec.extent[1])
    if origin is None:
        origin = lo + spacing / 2.0
    if dims is None:
        dims = np.maximum(np.round((hi - lo) / spacing).astype(int), 1)
    dims = tuple(int(n) for n in dims)
    rho = evaluate_density(spec, cell_centers(dims, spacing, origin), edge=spacing)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        rho = rho + rng.normal(0.0, spec.noise, size=rho.shape)
    return DensityGrid(np.maximum(rho, 0.0), spacing, tuple(float(o) for o in origin))


def _box_dims(box, spacing: float) -> tuple[np.ndarray, tuple[int, int, int]]:
    lo, hi = np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float)
    dims = tuple(int(n) for n in np.maximum(np.round((hi - lo) / spacing).astype(int), 1))
    return lo + spacing / 2.0, dims


def make_overlap_pair(spec: SceneSpec, crop_a, crop_b, transform: SimilarityTransform,
                      spacing: float = 1.0, occupancy: float = 0.5) -> OverlapPair:
    """Crop ``spec`` twice and express the second crop in a moved frame.

    ``crop_a`` and ``crop_b`` are world boxes ``(lo, hi)`` in the scene frame,
    which is also the frame of grid a. Grid b is axis-aligned in its own
    frame: it has the size of ``crop_b`` and ``transform`` maps its center onto
    the center of ``crop_b``, so in the scene it covers ``crop_b`` turned by
    the transform's rotation. Grid b values come from rendering the scene on
    the scene lattice and resampling trilinearly at the mapped b cell centers.
    """
    a_lo, a_hi = np.asarray(crop_a[0], float), np.asarray(crop_a[1], float)
    b_lo, b_hi = np.asarray(crop_b[0], float), np.asarray(crop_b[1], float)
    if np.any(np.minimum(a_hi, b_hi) <= np.maximum(a_lo, b_lo)):
        raise ValueError("crop boxes do not overlap")
    origin_a, dims_a = _box_dims(crop_a, spacing)
    grid_a = render_scene(spec, dims_a, spacing, origin_a)

    lat = spacing / transform.scale
    dims_b = tuple(int(n) for n in np.maximum(np.round((b_hi - b_lo) / spacing).astype(int), 1))
    center_b = transform.inverse().apply(((b_lo + b_hi) / 2.0)[None, :])[0]
    origin_b = center_b - lat * (np.asarray(dims_b) - 1) / 2.0
    pts_b = cell_centers(dims_b, lat, origin_b)
    in_scene = transform.apply(pts_b.reshape(-1, 3)).reshape(pts_b.shape)

    # scene-lattice render around the mapped b box, one-cell apron for interpolation
    lo = np.floor((in_scene.reshape(-1, 3).min(axis=0) - origin_a) / spacing) - 1
    hi = np.ceil((in_scene.reshape(-1, 3).max(axis=0) - origin_a) / spacing) + 1
    source = render_scene(spec, (hi - lo + 1).astype(int), spacing, origin_a + spacing * lo)
    origin_b = _snap_to_lattice(origin_b, transform, source)
    pts_b = cell_centers(dims_b, lat, origin_b)
    in_scene = transform.apply(pts_b.reshape(-1, 3)).reshape(pts_b.shape)
    values = interpolate_indices(source.values, source.index(in_scene), fill=0.0)
    grid_b = DensityGrid(values, lat, tuple(float(o) for o in origin_b))

    # overlap: a's occupied cells that fall inside the b box once mapped into the b frame
    centers_a = cell_centers(grid_a.dims, spacing, grid_a.origin)
    occ_a = grid_a.values >= occupancy * max(grid_a.values.max(), 1e-12)
    idx_b = grid_b.index(transform.inverse().apply(centers_a.reshape(-1, 3))).reshape(centers_a.shape)
    in_b = np.all((idx_b >= -0.5) & (idx_b <= np.asarray(dims_b) - 0.5), axis=-1)
    overlap = float((occ_a & in_b).sum() / max(occ_a.sum(), 1))
    return OverlapPair(grid_a, grid_b, transform, overlap)


def _snap_to_lattice(origin_b: np.ndarray, transform: SimilarityTransform, source: DensityGrid) -> np.ndarray:
    """Shift the b origin by < 1 cell so it maps onto a scene lattice point when possible.

    For lattice-exact transforms every b cell then lands exactly on a scene
    cell center and resampling is a pure copy.
    """
    idx = source.index(transform.apply(origin_b[None, :])[0])
    shift = np.round(idx) - idx
    delta = transform.inverse().linear() @ (shift * source.spacing)
    return origin_b + delta


# ---------------------------------------------------------------------------
# Scene families
# ---------------------------------------------------------------------------


def room_scene(seed: int = 0, size=(6.4, 4.8, 3.2), wall: float = 0.2, n_boxes: int | tuple[int, int] = (3, 8),
               n_cylinders: int | tuple[int, int] = (0, 2), noise: float = 0.0, cell: float = 0.1,
               margin: float = 0.3, pad: float = 0.6) -> SceneSpec:
    """Six wall slabs enclosing random furniture-like boxes and cylinders.

    Box sizes and positions are random multiples of ``cell`` in world units;
    some boxes rest on the floor, others are stacked or float, and each
    gets a random yaw. The scene extent adds ``pad`` of empty space around
    the walls so that wall corners are not on the grid boundary.
    """
    rng = np.random.default_rng(seed)
    sx, sy, sz = size
    prims = [
        Primitive("wall", (sx / 2, sy / 2, wall / 2), (sx, sy, wall)),
        Primitive("wall", (sx / 2, sy / 2, sz - wall / 2), (sx, sy, wall)),
        Primitive("wall", (wall / 2, sy / 2, sz / 2), (wall, sy, sz)),
        Primitive("wall", (sx - wall / 2, sy / 2, sz / 2), (wall, sy, sz)),
        Primitive("wall", (sx / 2, wall / 2, sz / 2), (sx, wall, sz)),
        Primitive("wall", (sx / 2, sy - wall / 2, sz / 2), (sx, wall, sz)),
    ]

    def count(n):
        return int(rng.integers(n[0], n[1] + 1)) if isinstance(n, (tuple, list)) else int(n)

    inner_lo = np.array([wall + margin] * 3)
    inner_hi = np.array([sx, sy, sz]) - wall - margin
    for _ in range(count(n_boxes)):
        dims = rng.uniform(3, 12, size=3) * cell
        center = rng.uniform(inner_lo + dims / 2, np.maximum(inner_hi - dims / 2, inner_lo + dims / 2 + 1e-6))
        if rng.random() < 0.5:
            center[2] = wall + dims[2] / 2  # resting on the floor
        yaw = float(rng.uniform(-45, 45))
        prims.append(Primitive("box", tuple(center), tuple(dims), (0.0, 0.0, yaw), float(rng.uniform(0.6, 1.4))))
    for _ in range(count(n_cylinders)):
        d = float(rng.uniform(3, 8) * cell)
        h = float(rng.uniform(4, 12) * cell)
        center = rng.uniform(inner_lo + d, inner_hi - d)
        center[2] = wall + h / 2
        prims.append(Primitive("cylinder", tuple(center), (d, d, h), (0.0, 0.0, 0.0), float(rng.uniform(0.6, 1.4))))
    return SceneSpec(((-pad, -pad, -pad), (sx + pad, sy + pad, sz + pad)), prims, noise, seed)


def cube_scene(n: int = 32, lo: int = 10, hi: int = 22, amplitude: float = 1.0) -> SceneSpec:
    """A single axis-aligned cube occupying cells ``lo..hi-1`` of an n^3 unit grid."""
    c = (lo + hi) / 2.0
    return SceneSpec(((0.0, 0.0, 0.0), (float(n),) * 3),
                     [Primitive("box", (c, c, c), (float(hi - lo),) * 3, amplitude=amplitude)])


def random_transform(rng: np.random.Generator, max_angle_deg: float = 45.0, max_translation: float = 1.0,
                     scale_range=(1.0, 1.0), min_angle_deg: float = 0.0) -> SimilarityTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(min_angle_deg, max_angle_deg))
    rot = Rotation.from_rotvec(axis * angle).as_matrix()
    t = rng.uniform(-max_translation, max_translation, size=3)
    return SimilarityTransform(float(rng.uniform(*scale_range)), rot, t)


def save_pair_truth(pair: OverlapPair, path, extra: dict | None = None) -> None:
    """Ground truth JSON; ``center_b`` (grid b's center, b frame) is where translation error is measured."""
    gb = pair.grid_b
    center_b = gb.world((np.asarray(gb.dims) - 1) / 2.0)
    doc = {"transform": pair.true_transform.to_dict(), "overlap_fraction": pair.overlap_fraction,
           "center_b": [float(x) for x in center_b], "cell": pair.grid_a.spacing}
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def default_crops(extent, fraction: float = 0.66):
    """Two boxes spanning the whole extent in y and z, overlapping in the middle along x."""
    lo, hi = np.asarray(extent[0], float), np.asarray(extent[1], float)
    width = (hi[0] - lo[0]) * fraction
    a_hi = hi.copy()
    a_hi[0] = lo[0] + width
    b_lo = lo.copy()
    b_lo[0] = hi[0] - width
    return (tuple(lo), tuple(a_hi)), (tuple(b_lo), tuple(hi))


def pair_from_document(doc: dict, seed: int = 0) -> tuple[SceneSpec, OverlapPair]:
    """Builds a scene and an overlap pair from a JSON-style description.

    Keys: ``scene`` (a SceneSpec dict, or ``{"room": {...room_scene kwargs}}``),
    ``spacing``, ``crop_a`` / ``crop_b`` (``[lo, hi]``; default: overlapping
    halves along x) and ``transform`` (a SimilarityTransform dict, or
    ``{"random": {...random_transform kwargs}}`` drawn from ``seed``).
    """
    known = {"scene", "spacing", "crop_a", "crop_b", "transform"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown keys in pair description: {sorted(unknown)}")
    scene = doc.get("scene", {"room": {}})
    if "room" in scene:
        spec = room_scene(**{"seed": seed, **scene["room"]})
    else:
        spec = SceneSpec.from_dict(scene)
    crops = default_crops(spec.extent)
    crop_a = doc.get("crop_a", crops[0])
    crop_b = doc.get("crop_b", crops[1])
    tdoc = doc.get("transform", {"random": {}})
    if "random" in tdoc:
        transform = random_transform(np.random.default_rng(seed), **tdoc["random"])
    else:
        transform = SimilarityTransform.from_dict(tdoc)
    return spec, make_overlap_pair(spec, crop_a, crop_b, transform, float(doc.get("spacing", 0.1)))
