"""Corner neighborhood grids, axis-aligned or resampled in a rotated frame."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..detect import Corner
from ..volume import DensityGrid, interpolate_indices


class ExcludedCornerError(ValueError):
    """The requested neighborhood would read outside the grid."""


@dataclass
class Neighborhood:
    values: np.ndarray  # (2s+1, 2s+1, 2s+1)
    corner_id: int = -1
    orientation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def radius(self) -> int:
        return (self.values.shape[0] - 1) // 2


def rotation_matrix(theta) -> np.ndarray:
    """Rz(theta_z) @ Ry(theta_y) @ Rx(theta_x), entries within 1e-12 of an integer snapped.

    Snapping makes quarter turns exact permutations of the lattice.
    """
    tx, ty, tz = theta
    cx, sx = math.cos(tx), math.sin(tx)
    cy, sy = math.cos(ty), math.sin(ty)
    cz, sz = math.cos(tz), math.sin(tz)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    r = rz @ ry @ rx
    snapped = np.round(r)
    near = np.abs(r - snapped) < 1e-12
    r[near] = snapped[near]
    return r


def lattice_offsets(s: int) -> np.ndarray:
    """Integer offsets of a (2s+1)^3 cube, shape (2s+1, 2s+1, 2s+1, 3)."""
    r = np.arange(-s, s + 1, dtype=np.float64)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1)


def angle_lattice(step: float) -> np.ndarray:
    """Exact multiples of ``step`` inside (-pi, pi]."""
    k_lo = math.floor(-math.pi / step) + 1
    k_hi = math.floor(math.pi / step + 1e-9)
    ks = np.arange(k_lo, k_hi + 1)
    angles = ks * step
    return angles[(angles > -math.pi + 1e-12) & (angles <= math.pi + 1e-12)]


def orientation_lattice(step: float) -> np.ndarray:
    """All (theta_x, theta_y, theta_z) triples on the angle lattice, shape (n^3, 3)."""
    a = angle_lattice(step)
    return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1).reshape(-1, 3)


def _check_inside(g: DensityGrid, idx, reach: float) -> None:
    idx = np.asarray(idx, dtype=np.float64)
    if np.any(idx - reach < 0) or np.any(idx + reach > np.asarray(g.dims) - 1):
        raise ExcludedCornerError(f"neighborhood of reach {reach:.2f} around {tuple(idx)} leaves grid {g.dims}")


def extract_rotated(g: DensityGrid, index, s: int, orientations) -> np.ndarray:
    """Neighborhoods at several orientations about a cell, shape (n, 2s+1, 2s+1, 2s+1).

    Identity orientations are plain slices; others are trilinear samples of
    the rotated lattice around the cell.
    """
    index = tuple(int(i) for i in index)
    orientations = np.atleast_2d(np.asarray(orientations, dtype=np.float64))
    e = 2 * s + 1
    needs_rotation = np.any(orientations != 0, axis=1)
    _check_inside(g, index, s * math.sqrt(3.0) if needs_rotation.any() else s)
    out = np.empty((len(orientations), e, e, e))
    sl = tuple(slice(i - s, i + s + 1) for i in index)
    out[~needs_rotation] = g.values[sl]
    if needs_rotation.any():
        rots = np.stack([rotation_matrix(t) for t in orientations[needs_rotation]])
        offsets = lattice_offsets(s).reshape(-1, 3)
        pts = np.asarray(index, dtype=np.float64) + np.einsum("nij,pj->npi", rots, offsets)
        out[needs_rotation] = interpolate_indices(g.values, pts, fill=0.0).reshape(-1, e, e, e)
    return out


def extract_neighborhood(g: DensityGrid, c: Corner, s: int = 3, orient=(0.0, 0.0, 0.0),
                         corner_id: int = -1) -> Neighborhood:
    """The (2s+1)^3 neighborhood of ``c`` in ``g`` (the grid of the corner's level)."""
    values = extract_rotated(g, c.grid_index, s, [orient])[0]
    return Neighborhood(values, corner_id, tuple(float(t) for t in orient))
