"""Multi-scale 3D Harris corner detection."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import DensityGrid, GridPyramid

SOBEL_DERIVATIVE = np.array([1.0, 0.0, -1.0])
SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0])


@dataclass(frozen=True)
class HarrisConfig:
    """Detector parameters, in cells of the level being processed.

    ``border`` drops corners closer than that many cells to the grid boundary,
    so that rotated neighborhoods around surviving corners stay inside the grid.

    In 3D, det M is cubic in the gradients' outer products while (tr M)^2 is
    quadratic, so the response is not homogeneous under density scaling.
    With ``normalize_gradients`` each level's gradients are divided by their
    largest magnitude first, which makes detection independent of the
    density scale.
    """

    k: float = 0.06
    window_radius: int = 1
    nms_radius: int = 2
    response_floor: float = 0.01
    gaussian_window: bool = False
    border: int = 6
    tie_rtol: float = 1e-9
    normalize_gradients: bool = True

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("k must be positive")
        if self.window_radius < 1 or self.nms_radius < 1:
            raise ValueError("window_radius and nms_radius must be >= 1")
        if not 0.0 <= self.response_floor <= 1.0:
            raise ValueError("response_floor must lie in [0, 1]")
        if self.border < 0:
            raise ValueError("border must be >= 0")


@dataclass(frozen=True)
class Corner:
    position: tuple[float, float, float]
    level: int
    response: float
    grid_index: tuple[int, int, int]


def sobel_gradients(g: DensityGrid) -> tuple[DensityGrid, DensityGrid, DensityGrid]:
    """Gradients along x, y, z from the separable kernel (1,0,-1) x (1,2,1) x (1,2,1).

    The derivative taps are applied as a convolution, so a ramp increasing
    along an axis gives a positive response. Edges are replicated.
    """
    if min(g.dims) < 3:
        raise ValueError(f"Sobel needs every dim >= 3, got {g.dims}")
    v = g.values
    out = []
    for axis in range(3):
        r = v
        for a in range(3):
            # correlate with the reversed taps == convolution
            taps = SOBEL_DERIVATIVE[::-1] if a == axis else SOBEL_SMOOTH
            r = ndimage.correlate1d(r, taps, axis=a, mode="nearest")
        out.append(g.with_values(r))
    return tuple(out)


def _window_sum(a: np.ndarray, radius: int, gaussian: bool) -> np.ndarray:
    # sums only over in-grid cells (zero padding)
    if gaussian:
        x = np.arange(-radius, radius + 1, dtype=np.float64)
        taps = np.exp(-0.5 * (x / max(radius / 2.0, 0.5)) ** 2)
    else:
        taps = np.ones(2 * radius + 1)
    for axis in range(3):
        a = ndimage.correlate1d(a, taps, axis=axis, mode="constant", cval=0.0)
    return a


def structure_tensor(gx, gy, gz, radius: int, gaussian: bool = False) -> np.ndarray:
    """Windowed outer products of the gradient, shape (nx, ny, nz, 3, 3)."""
    comps = (gx, gy, gz)
    m = np.empty(gx.shape + (3, 3))
    for a in range(3):
        for b in range(a, 3):
            m[..., a, b] = m[..., b, a] = _window_sum(comps[a] * comps[b], radius, gaussian)
    return m


def harris_response(gx: DensityGrid, gy: DensityGrid, gz: DensityGrid, cfg: HarrisConfig | None = None) -> DensityGrid:
    cfg = cfg or HarrisConfig()
    if not gx.dims == gy.dims == gz.dims:
        raise ValueError("gradient grids must share dims")
    m = structure_tensor(gx.values, gy.values, gz.values, cfg.window_radius, cfg.gaussian_window)
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    e, f, i = m[..., 1, 1], m[..., 1, 2], m[..., 2, 2]
    det = a * (e * i - f * f) - b * (b * i - f * c) + c * (b * f - e * c)
    trace = a + e + i
    return gx.with_values(det - cfg.k * trace**2)


def nms_mask(h: np.ndarray, radius: int, floor: float, tie_rtol: float = 0.0) -> np.ndarray:
    """Cells above ``floor`` that strictly exceed every other cell of their cube.

    Values within ``tie_rtol`` (relative) of a neighbor count as ties, and
    ties suppress both cells.
    """
    size = 2 * radius + 1
    footprint = np.ones((size,) * 3, dtype=bool)
    footprint[radius, radius, radius] = False
    neighbor_max = ndimage.maximum_filter(h, footprint=footprint, mode="constant", cval=-np.inf)
    margin = tie_rtol * np.abs(h)
    return (h >= floor) & (h > neighbor_max + margin)


def level_response(g: DensityGrid, cfg: HarrisConfig) -> np.ndarray:
    """The response map detection thresholds, after optional gradient normalization."""
    gx, gy, gz = sobel_gradients(g)
    if cfg.normalize_gradients:
        peak = float(np.sqrt(gx.values**2 + gy.values**2 + gz.values**2).max())
        if peak > 0:
            gx, gy, gz = (d.with_values(d.values / peak) for d in (gx, gy, gz))
    return harris_response(gx, gy, gz, cfg).values


def detect_level(g: DensityGrid, cfg: HarrisConfig, level: int = 0) -> list[Corner]:
    h = level_response(g, cfg)
    hmax = h.max()
    if not hmax > 0:
        return []
    mask = nms_mask(h, cfg.nms_radius, max(cfg.response_floor * hmax, np.finfo(float).tiny), cfg.tie_rtol)
    b = cfg.border
    if b:
        keep = np.zeros_like(mask)
        inner = tuple(slice(b, n - b) for n in h.shape)
        keep[inner] = True
        mask &= keep
    corners = []
    for idx in np.argwhere(mask):  # argwhere yields lexicographic order
        idx = tuple(int(x) for x in idx)
        corners.append(Corner(tuple(float(x) for x in g.world(idx)), level, float(h[idx]), idx))
    return corners


def detect_corners(pyr: GridPyramid, cfg: HarrisConfig | None = None) -> list[Corner]:
    """Harris corners of every pyramid level, ordered by level then grid index."""
    cfg = cfg or HarrisConfig()
    corners = []
    for level, g in enumerate(pyr.levels):
        if min(g.dims) < 3:
            raise ValueError(f"pyramid level {level} has dims {g.dims}, too small for Sobel")
        corners.extend(detect_level(g, cfg, level))
    return corners


def min_border(radius: int) -> int:
    """Border (cells) keeping a rotated cube of half-width ``radius`` plus one interpolation cell inside."""
    return int(math.ceil(radius * math.sqrt(3.0))) + 1


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_corners_ply(corners: list[Corner], path) -> None:
    """Binary little-endian PLY: float x, y, z, float response, uchar level."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(corners)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property float response\n"
        "property uchar level\n"
        "end_header\n"
    )
    rec = struct.Struct("<ffffB")
    body = b"".join(rec.pack(*c.position, c.response, c.level) for c in corners)
    Path(path).write_bytes(header.encode("ascii") + body)


def read_corners_ply(path) -> np.ndarray:
    """Returns a structured array with fields x, y, z, response, level."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[0] != "ply" or "format binary_little_endian 1.0" not in header:
        raise ValueError("not a binary little-endian PLY file")
    count = next(int(line.split()[-1]) for line in header if line.startswith("element vertex"))
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("response", "<f4"), ("level", "u1")])
    return np.frombuffer(data[end:], dtype=dtype, count=count)


def write_corners_jsonl(corners: list[Corner], path) -> None:
    with open(path, "w") as fh:
        for c in corners:
            fh.write(json.dumps(asdict(c)) + "\n")


def read_corners_jsonl(path) -> list[Corner]:
    corners = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                corners.append(Corner(tuple(d["position"]), d["level"], d["response"], tuple(d["grid_index"])))
    return corners
