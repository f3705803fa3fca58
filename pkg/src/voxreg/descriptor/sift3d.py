"""Histogram-of-gradient corner descriptor in a rotation-normalized frame.

The local frame has its first axis along the mean gradient of the corner
window and its second axis at the dominant direction of the remaining
(perpendicular) gradient components. The 9^3 window is resampled in that
frame, so gradients, subgrid membership and orientation bins are all
measured relative to the corner's own geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..detect import Corner
from ..volume import DensityGrid, interpolate_indices
from .neighborhood import ExcludedCornerError, lattice_offsets


@dataclass(frozen=True)
class SiftConfig:
    radius: int = 4  # 9^3 window
    cells_per_side: int = 3  # 27 subgrids of 3^3
    n_azimuth: int = 6
    n_elevation: int = 2
    window_sigma: float = 4.0
    frame_sigma: float = 3.0
    kde_kappa: float = 8.0
    clip: float = 0.2
    magnitude_floor: float = 1e-12
    peak_ratio: float = 0.8  # secondary orientations, see sift3d_descriptors

    @property
    def n_bins(self) -> int:
        return self.n_azimuth * self.n_elevation

    @property
    def length(self) -> int:
        return self.cells_per_side**3 * self.n_bins


def _local_gradients(values: np.ndarray, index, half: int) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients of the cells within ``half`` of ``index``.

    Returns (offsets (n, 3), gradients (n, 3)); reads outside the grid are clamped.
    """
    shape = np.asarray(values.shape)
    r = np.arange(-half - 1, half + 2)
    axes = [np.clip(index[a] + r, 0, shape[a] - 1) for a in range(3)]
    win = values[np.ix_(*axes)]
    g = np.stack([
        (win[2:, 1:-1, 1:-1] - win[:-2, 1:-1, 1:-1]) / 2.0,
        (win[1:-1, 2:, 1:-1] - win[1:-1, :-2, 1:-1]) / 2.0,
        (win[1:-1, 1:-1, 2:] - win[1:-1, 1:-1, :-2]) / 2.0,
    ], axis=-1)
    return lattice_offsets(half).reshape(-1, 3), g.reshape(-1, 3)


def _perpendicular_basis(e1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.eye(3)[int(np.argmin(np.abs(e1)))]
    a = np.cross(e1, helper)
    a /= np.linalg.norm(a)
    return a, np.cross(e1, a)


def _polish_mode(phi: np.ndarray, w: np.ndarray, kappa: float, cur: float, iters: int = 50) -> float:
    """Newton steps on the density derivative; mean-shift alone converges slowly on sharp peaks."""
    for _ in range(iters):
        k = w * np.exp(kappa * (np.cos(phi - cur) - 1.0))
        s, c = np.sin(phi - cur), np.cos(phi - cur)
        d1 = float((k * s).sum())
        d2 = float((k * (kappa * s * s - c)).sum())
        if d2 >= 0:
            break  # not locally concave; keep the mean-shift estimate
        step = d1 / d2
        cur = math.remainder(cur - step, 2 * math.pi)
        if abs(step) < 1e-15:
            break
    return cur


def _circular_modes(phi: np.ndarray, w: np.ndarray, kappa: float, n_start: int = 72,
                    iters: int = 200) -> list[tuple[float, float]]:
    """Modes (angle, density) of a von Mises kernel density, strongest first.

    Mean-shift is started from the local maxima of the density sampled at
    ``n_start`` angles; starts converging to the same mode are merged.
    """
    starts = np.linspace(-math.pi, math.pi, n_start, endpoint=False)
    dens = (w[None, :] * np.exp(kappa * (np.cos(phi[None, :] - starts[:, None]) - 1.0))).sum(axis=1)
    peaks = np.flatnonzero((dens >= np.roll(dens, 1)) & (dens >= np.roll(dens, -1)))
    modes: list[tuple[float, float]] = []
    for s in starts[peaks]:
        cur = float(s)
        for _ in range(iters):
            k = w * np.exp(kappa * (np.cos(phi - cur) - 1.0))
            nxt = math.atan2(float((k * np.sin(phi)).sum()), float((k * np.cos(phi)).sum()))
            delta = abs(math.remainder(nxt - cur, 2 * math.pi))
            cur = nxt
            if delta < 1e-14:
                break
        cur = _polish_mode(phi, w, kappa, cur)
        val = float((w * np.exp(kappa * (np.cos(phi - cur) - 1.0))).sum())
        if all(abs(math.remainder(cur - m, 2 * math.pi)) > 1e-6 for m, _ in modes):
            modes.append((cur, val))
    modes.sort(key=lambda mv: -mv[1])
    return modes


def dominant_frames(g: DensityGrid, index, cfg: SiftConfig | None = None, peak_ratio: float = 1.0) -> list[np.ndarray]:
    """Right-handed orthonormal frames (as matrix columns) attached to the corner at ``index``.

    Column 0 follows the Gaussian-weighted mean gradient; if that cancels out,
    the principal axis of the gradient structure tensor is used instead.
    Column 1 points at a mode of the perpendicular gradient directions: the
    strongest one first, followed by every other mode whose density is at
    least ``peak_ratio`` times the strongest. Flat windows give the identity.
    """
    cfg = cfg or SiftConfig()
    offsets, grad = _local_gradients(g.values, index, cfg.radius)
    w = np.exp(-0.5 * (offsets**2).sum(axis=1) / cfg.frame_sigma**2)
    mag = np.linalg.norm(grad, axis=1)
    total = float((w * mag).sum())
    if total <= cfg.magnitude_floor:
        return [np.eye(3)]
    mean = (w[:, None] * grad).sum(axis=0)
    if np.linalg.norm(mean) > 1e-3 * total:
        e1 = mean / np.linalg.norm(mean)
    else:
        tensor = np.einsum("n,ni,nj->ij", w, grad, grad)
        _, vecs = np.linalg.eigh(tensor)
        e1 = vecs[:, -1]
        if float((w * (grad @ e1) ** 3).sum()) < 0:
            e1 = -e1
    a, b = _perpendicular_basis(e1)
    perp = grad - np.outer(grad @ e1, e1)
    pmag = np.linalg.norm(perp, axis=1)
    keep = pmag > 1e-9 * max(pmag.max(), 1e-300)
    if not keep.any():
        return [np.stack([e1, a, np.cross(e1, a)], axis=1)]
    phi = np.arctan2(perp[keep] @ b, perp[keep] @ a)
    modes = _circular_modes(phi, (w * pmag)[keep], cfg.kde_kappa)
    frames = []
    for angle, val in modes:
        if frames and val < peak_ratio * modes[0][1]:
            break
        e2 = math.cos(angle) * a + math.sin(angle) * b
        frames.append(np.stack([e1, e2, np.cross(e1, e2)], axis=1))
    return frames


def dominant_frame(g: DensityGrid, index, cfg: SiftConfig | None = None) -> np.ndarray:
    return dominant_frames(g, index, cfg)[0]


def sift3d_histogram(g: DensityGrid, index, cfg: SiftConfig | None = None, frame: np.ndarray | None = None) -> np.ndarray:
    """Raw (unnormalized) histograms, shape (cells, cells, cells, n_elevation, n_azimuth).

    Each cell of the window votes its weighted gradient magnitude, split
    linearly over neighboring subgrids and azimuth bins and between the two
    hemispheres around the frame's first axis. Near that axis azimuth is
    ill-defined, so the azimuth share fades into an even spread over all bins.
    Votes are conserved: the histogram sums to the total weighted magnitude
    of cells above the floor.
    """
    cfg = cfg or SiftConfig()
    if frame is None:
        frame = dominant_frame(g, index, cfg)
    r = cfg.radius
    e = 2 * r + 3
    pts = np.asarray(index, dtype=np.float64) + lattice_offsets(r + 1).reshape(-1, 3) @ frame.T
    win = interpolate_indices(g.values, pts, fill=None).reshape(e, e, e)
    grad = np.stack([
        (win[2:, 1:-1, 1:-1] - win[:-2, 1:-1, 1:-1]) / 2.0,
        (win[1:-1, 2:, 1:-1] - win[1:-1, :-2, 1:-1]) / 2.0,
        (win[1:-1, 1:-1, 2:] - win[1:-1, 1:-1, :-2]) / 2.0,
    ], axis=-1).reshape(-1, 3)
    offsets = lattice_offsets(r).reshape(-1, 3)
    mag = np.linalg.norm(grad, axis=1)
    weight = mag * np.exp(-0.5 * (offsets**2).sum(axis=1) / cfg.window_sigma**2)
    live = mag > cfg.magnitude_floor
    weight = np.where(live, weight, 0.0)

    nc = cfg.cells_per_side
    hist = np.zeros((nc, nc, nc, cfg.n_elevation, cfg.n_azimuth))
    if not live.any():
        return hist
    # spatial position in subgrid units, subgrid centers at 0..nc-1
    cell_size = (2 * r + 1) / nc
    pos = np.clip((offsets + r + 0.5) / cell_size - 0.5, 0, nc - 1)
    p0 = np.minimum(np.floor(pos).astype(int), nc - 2) if nc > 1 else np.zeros_like(pos, dtype=int)
    pf = pos - p0

    unit = np.where(live[:, None], grad / np.where(live, mag, 1.0)[:, None], 0.0)
    # elevation split: share towards the forward hemisphere grows with the e1 component
    up = (1.0 + unit[:, 0]) / 2.0
    elev_w = np.stack([1.0 - up, up], axis=1) if cfg.n_elevation == 2 else np.ones((len(unit), 1))
    az = np.arctan2(unit[:, 2], unit[:, 1])
    # azimuth is undefined along e1: blend towards a uniform spread as the perpendicular part vanishes
    rho = np.hypot(unit[:, 1], unit[:, 2])
    spread = (1.0 - rho) / cfg.n_azimuth
    az_pos = (az + math.pi) / (2 * math.pi) * cfg.n_azimuth - 0.5
    a0 = np.floor(az_pos).astype(int)
    af = az_pos - a0
    for dx in (0, 1):
        wx = pf[:, 0] if dx else 1 - pf[:, 0]
        ix = np.minimum(p0[:, 0] + dx, nc - 1)
        for dy in (0, 1):
            wy = pf[:, 1] if dy else 1 - pf[:, 1]
            iy = np.minimum(p0[:, 1] + dy, nc - 1)
            for dz in (0, 1):
                wz = pf[:, 2] if dz else 1 - pf[:, 2]
                iz = np.minimum(p0[:, 2] + dz, nc - 1)
                ws = weight * wx * wy * wz
                for da in (0, 1):
                    wa = rho * (af if da else 1 - af)
                    ia = (a0 + da) % cfg.n_azimuth
                    for el in range(cfg.n_elevation):
                        np.add.at(hist, (ix, iy, iz, el, ia), ws * wa * elev_w[:, el])
                for ia in range(cfg.n_azimuth):
                    for el in range(cfg.n_elevation):
                        np.add.at(hist, (ix, iy, iz, el, ia), ws * spread * elev_w[:, el])
    return hist


def normalize_descriptor(v: np.ndarray, clip: float | None) -> np.ndarray:
    n = np.linalg.norm(v)
    if n <= 1e-300:
        return np.full(len(v), 1.0 / math.sqrt(len(v)))
    v = v / n
    if clip:
        v = np.minimum(v, clip)
        v = v / np.linalg.norm(v)
    return v


def _check_window(g: DensityGrid, index: np.ndarray, cfg: SiftConfig) -> None:
    # the axis-aligned window plus its gradient margin must fit; rotated reads beyond it are clamped
    margin = cfg.radius + 1
    if np.any(index - margin < 0) or np.any(index + margin > np.asarray(g.dims) - 1):
        raise ExcludedCornerError(f"SIFT window around {tuple(index)} leaves grid {g.dims}")


def sift3d_descriptor(g: DensityGrid, c: Corner, cfg: SiftConfig | None = None) -> np.ndarray:
    """Unit-norm gradient-orientation histogram descriptor of corner ``c`` in its level grid ``g``.

    Flat windows return the uniform vector ``1/sqrt(D)``.
    """
    cfg = cfg or SiftConfig()
    index = np.asarray(c.grid_index)
    _check_window(g, index, cfg)
    hist = sift3d_histogram(g, index, cfg)
    return normalize_descriptor(hist.reshape(-1), cfg.clip)


def sift3d_descriptors(g: DensityGrid, c: Corner, cfg: SiftConfig | None = None) -> np.ndarray:
    """Descriptors for every dominant orientation of ``c``, shape (n_orientations, D).

    Row 0 equals :func:`sift3d_descriptor`; further rows use secondary
    orientations within ``cfg.peak_ratio`` of the strongest, which keeps
    near-symmetric corners matchable when the strongest mode flips.
    """
    cfg = cfg or SiftConfig()
    index = np.asarray(c.grid_index)
    _check_window(g, index, cfg)
    frames = dominant_frames(g, index, cfg, cfg.peak_ratio)
    return np.stack([normalize_descriptor(sift3d_histogram(g, index, cfg, f).reshape(-1), cfg.clip) for f in frames])
