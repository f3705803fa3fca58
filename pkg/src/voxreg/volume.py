"""Dense density grids: storage, file format, resampling and denoising filters.

Grid values are stored as a C-ordered array of shape ``(nx, ny, nz)``, so the
flat index of cell ``(i, j, k)`` is ``(i * ny + j) * nz + k`` (z fastest).
The same order is used for the on-disk payload.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

MAGIC = b"VGRD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIf3f")


class GridFormatError(ValueError):
    """Base class for grid decoding failures."""


class MagicMismatchError(GridFormatError):
    pass


class HeaderError(GridFormatError):
    pass


class TruncatedPayloadError(GridFormatError):
    pass


class NonFiniteValueError(GridFormatError):
    pass


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Uniform scalar field with a physical origin and cell spacing.

    ``origin`` is the world coordinate of the center of cell ``(0, 0, 0)``;
    cell ``(i, j, k)`` sits at ``origin + spacing * (i, j, k)``.
    """

    values: np.ndarray
    spacing: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"grid values must be a non-empty 3D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError("origin must have three components")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    def world(self, index) -> np.ndarray:
        """World coordinates of (possibly fractional) grid indices, shape (..., 3)."""
        return np.asarray(self.origin) + self.spacing * np.asarray(index, dtype=np.float64)

    def index(self, point) -> np.ndarray:
        """Continuous grid index of world points, shape (..., 3)."""
        return (np.asarray(point, dtype=np.float64) - np.asarray(self.origin)) / self.spacing

    def with_values(self, values: np.ndarray, spacing: float | None = None) -> "DensityGrid":
        return DensityGrid(values, self.spacing if spacing is None else spacing, self.origin)

    def __eq__(self, other):
        if not isinstance(other, DensityGrid):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )


@dataclass
class GridPyramid:
    levels: list[DensityGrid] = field(default_factory=list)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> DensityGrid:
        return self.levels[level]

    def __len__(self) -> int:
        return len(self.levels)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def encode_grid(g: DensityGrid) -> bytes:
    nx, ny, nz = g.dims
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, nx, ny, nz, g.spacing, *g.origin)
    return header + np.ascontiguousarray(g.values, dtype="<f4").tobytes()


def decode_grid(data: bytes) -> DensityGrid:
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise HeaderError("file too short for VGRD header")
    _, version, nx, ny, nz, spacing, ox, oy, oz = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise HeaderError(f"unsupported VGRD version {version}")
    if min(nx, ny, nz) < 1:
        raise HeaderError(f"invalid dims {(nx, ny, nz)}")
    if not (spacing > 0 and math.isfinite(spacing)) or not all(map(math.isfinite, (ox, oy, oz))):
        raise HeaderError("invalid spacing or origin")
    count = nx * ny * nz
    payload = data[_HEADER.size :]
    if len(payload) < 4 * count:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {4 * count}")
    if len(payload) > 4 * count:
        raise HeaderError("trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(nx, ny, nz)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError("grid payload contains NaN or Inf")
    return DensityGrid(values.astype(np.float64), spacing, (ox, oy, oz))


def save_grid(g: DensityGrid, path, metadata: dict | None = None) -> None:
    """Write ``g`` in VGRD format; ``metadata`` goes to an optional ``.json`` sidecar."""
    path = Path(path)
    path.write_bytes(encode_grid(g))
    if metadata is not None:
        sidecar = {k: metadata.get(k, "") for k in ("name", "source", "notes")}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_grid(path) -> DensityGrid:
    return decode_grid(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------


def _per_axis(value, name: str) -> tuple[int, int, int]:
    if np.isscalar(value):
        value = (value,) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3 or min(value) < 1:
        raise ValueError(f"{name} must be a positive integer per axis, got {value}")
    return value


def average_pool(g: DensityGrid, pool: int | Sequence[int] = 2) -> DensityGrid:
    """Block-mean downsampling; trailing cells that do not fill a block are dropped.

    With a non-uniform pool the output spacing would be anisotropic, so the
    pool must be equal on all axes.
    """
    px, py, pz = _per_axis(pool, "pool")
    if not px == py == pz:
        raise ValueError("anisotropic pooling would break uniform spacing")
    nx, ny, nz = (n // p for n, p in zip(g.dims, (px, py, pz)))
    if min(nx, ny, nz) < 1:
        raise ValueError(f"pool {pool} larger than grid dims {g.dims}")
    v = g.values[: nx * px, : ny * py, : nz * pz]
    v = v.reshape(nx, px, ny, py, nz, pz).mean(axis=(1, 3, 5))
    # cell (0,0,0) of the output is the centroid of the first block
    origin = np.asarray(g.origin) + g.spacing * (px - 1) / 2.0
    return DensityGrid(v, g.spacing * px, tuple(origin))


def diffusion_coefficient(grad_mag: np.ndarray, K: float) -> np.ndarray:
    """Exponential Perona-Malik conductance exp(-(|grad I| / K)^2)."""
    return np.exp(-np.square(grad_mag / K))


def anisotropic_diffusion(g: DensityGrid, iters: int = 5, dt: float = 0.01, K: float = 5.0) -> DensityGrid:
    """Explicit Perona-Malik diffusion with the exponential conductance.

    Each step adds ``dt * sum_d c(|D_d I|) * D_d I`` over the six face
    differences ``D_d I = I(neighbor_d) - I``, with replicated boundary cells
    (so boundary faces carry zero flux).
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if not dt > 0 or not K > 0:
        raise ValueError("dt and K must be positive")
    if iters == 0:
        return g
    v = np.array(g.values, dtype=np.float64)
    for _ in range(iters):
        p = np.pad(v, 1, mode="edge")
        flux = np.zeros_like(v)
        center = p[1:-1, 1:-1, 1:-1]
        for axis in range(3):
            for shift in (-1, 1):
                sl = [slice(1, -1)] * 3
                sl[axis] = slice(1 + shift, p.shape[axis] - 1 + shift)
                diff = p[tuple(sl)] - center
                flux += diffusion_coefficient(np.abs(diff), K) * diff
        v = v + dt * flux
    return g.with_values(v)


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    if radius is None:
        radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with a ceil(3 sigma) radius and replicated edges."""
    if sigma <= 0:
        return np.array(values, dtype=np.float64)
    k = gaussian_kernel(sigma)
    out = np.asarray(values, dtype=np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return out


def build_pyramid(g: DensityGrid, d: int = 3, blur_sigma: float = 1.0) -> GridPyramid:
    """Level 0 is ``g``; each further level is blurred then decimated by 2."""
    if d < 1:
        raise ValueError("pyramid needs at least one level")
    levels = [g]
    for _ in range(1, d):
        prev = levels[-1]
        dims = tuple(n // 2 for n in prev.dims)
        if min(dims) < 1:
            raise ValueError(f"{d} pyramid levels collapse a grid of dims {g.dims}")
        blurred = gaussian_blur(prev.values, blur_sigma)
        v = blurred[: 2 * dims[0] : 2, : 2 * dims[1] : 2, : 2 * dims[2] : 2]
        levels.append(DensityGrid(v, prev.spacing * 2.0, prev.origin))
    return GridPyramid(levels)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def interpolate_indices(values: np.ndarray, idx: np.ndarray, fill: float | None = 0.0) -> np.ndarray:
    """Trilinear interpolation at continuous grid indices ``idx`` of shape (..., 3).

    Points outside ``[0, n - 1]`` on any axis get ``fill``; with ``fill=None``
    they are clamped to the nearest boundary cell instead.
    """
    idx = np.asarray(idx, dtype=np.float64)
    shape = np.asarray(values.shape)
    flat = idx.reshape(-1, 3)
    if fill is None:
        flat = np.clip(flat, 0, shape - 1)
        inside = np.ones(len(flat), dtype=bool)
    else:
        inside = np.all((flat >= 0) & (flat <= shape - 1), axis=1)
    # lower corner clamped to n-2 so the upper boundary interpolates with weight 1
    lo = np.clip(np.floor(flat), 0, np.maximum(shape - 2, 0)).astype(np.intp)
    frac = flat - lo
    hi = np.minimum(lo + 1, shape - 1)
    out = np.zeros(len(flat))
    for cx in (0, 1):
        ix = hi[:, 0] if cx else lo[:, 0]
        wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
        for cy in (0, 1):
            iy = hi[:, 1] if cy else lo[:, 1]
            wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
            for cz in (0, 1):
                iz = hi[:, 2] if cz else lo[:, 2]
                wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                out += wx * wy * wz * values[ix, iy, iz]
    if fill is not None:
        out[~inside] = fill
    return out.reshape(idx.shape[:-1])


def sample_trilinear(g: DensityGrid, p, fill: float | None = 0.0):
    """Trilinear sample of ``g`` at world point(s) ``p``; empty space outside reads 0."""
    p = np.asarray(p, dtype=np.float64)
    out = interpolate_indices(g.values, g.index(p), fill)
    return float(out) if p.ndim == 1 else out
