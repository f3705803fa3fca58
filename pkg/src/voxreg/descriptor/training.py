"""Triplet dataset synthesis, Adam training loop and held-out error rate."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..detect import Corner, HarrisConfig, detect_corners
from ..volume import DensityGrid, build_pyramid, load_grid, save_grid
from .network import DescriptorNet, net_loss_and_grads
from .neighborhood import ExcludedCornerError, extract_rotated, orientation_lattice


class DatasetError(ValueError):
    pass


@dataclass
class NeighborhoodDataset:
    """Neighborhoods of labeled corners, each sampled at the same set of orientations.

    ``values[c, o]`` is the neighborhood of corner ``corner_ids[c]`` at
    ``orientations[o]``.
    """

    values: np.ndarray  # (n_corners, n_orientations, e, e, e)
    corner_ids: np.ndarray  # (n_corners,)
    orientations: np.ndarray  # (n_orientations, 3)
    corners: list[Corner] = field(default_factory=list)
    scene_index: np.ndarray | None = None

    def __post_init__(self):
        if self.values.ndim != 5 or self.values.shape[0] != len(self.corner_ids):
            raise DatasetError("values must be (n_corners, n_orientations, e, e, e)")
        if self.values.shape[1] != len(self.orientations):
            raise DatasetError("orientation count does not match values")
        if len(np.unique(self.corner_ids)) != len(self.corner_ids):
            raise DatasetError("corner ids must be unique")

    @property
    def n_corners(self) -> int:
        return self.values.shape[0]

    @property
    def n_orientations(self) -> int:
        return self.values.shape[1]

    @property
    def edge(self) -> int:
        return self.values.shape[2]

    def __len__(self) -> int:
        return self.n_corners * self.n_orientations

    def subset(self, rows) -> "NeighborhoodDataset":
        rows = np.asarray(rows)
        scene = None if self.scene_index is None else self.scene_index[rows]
        corners = [self.corners[i] for i in rows] if self.corners else []
        return NeighborhoodDataset(self.values[rows], self.corner_ids[rows], self.orientations, corners, scene)


def synthesize_training_set(scenes: Sequence[DensityGrid], s: int = 3, angle_step: float = math.pi / 6,
                            harris: HarrisConfig | None = None, levels: int = 3, max_corners_per_scene: int | None = None,
                            seed: int = 0, dtype=np.float32) -> NeighborhoodDataset:
    """Detect corners in every scene and sample each one's neighborhood on the full orientation lattice.

    Corners whose rotated neighborhood would leave their level grid are
    skipped. With ``max_corners_per_scene`` a seeded random subset is kept.
    """
    rng = np.random.default_rng(seed)
    orients = orientation_lattice(angle_step)
    blocks, ids, kept, scene_of = [], [], [], []
    for si, g in enumerate(scenes):
        pyr = build_pyramid(g, levels)
        corners = detect_corners(pyr, harris)
        order = np.arange(len(corners))
        if max_corners_per_scene is not None and len(corners) > max_corners_per_scene:
            order = np.sort(rng.choice(len(corners), max_corners_per_scene, replace=False))
        for ci in order:
            c = corners[ci]
            try:
                block = extract_rotated(pyr[c.level], c.grid_index, s, orients)
            except ExcludedCornerError:
                continue
            blocks.append(block.astype(dtype))
            ids.append(len(ids))
            kept.append(c)
            scene_of.append(si)
    if len(blocks) < 2:
        raise DatasetError(f"need at least 2 usable corners to form triplets, found {len(blocks)}")
    return NeighborhoodDataset(np.stack(blocks), np.asarray(ids), orients, kept, np.asarray(scene_of))


def sample_triplets(rng: np.random.Generator, n_corners: int, n_orient: int, batch: int) -> np.ndarray:
    """Rows of (anchor corner, anchor orientation, positive orientation, negative corner, negative orientation)."""
    if n_corners < 2:
        raise DatasetError("triplets need at least 2 corners")
    c = rng.integers(0, n_corners, batch)
    o1 = rng.integers(0, n_orient, batch)
    if n_orient > 1:
        # a different orientation of the same corner
        o2 = (o1 + rng.integers(1, n_orient, batch)) % n_orient
    else:
        o2 = o1.copy()
    cn = (c + rng.integers(1, n_corners, batch)) % n_corners
    on = rng.integers(0, n_orient, batch)
    return np.stack([c, o1, o2, cn, on], axis=1)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k in self.m:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(params[k].dtype)


def train(dataset: NeighborhoodDataset, iterations: int = 2000, batch_size: int = 256, margin: float = 0.1,
          lr: float = 1e-4, seed: int = 0, net: DescriptorNet | None = None,
          callback: Callable[[int, float], None] | None = None) -> tuple[DescriptorNet, np.ndarray]:
    """Adam on the mean triplet loss; returns the trained net and the per-iteration loss.

    Triplet sampling and initialization both derive from ``seed``.
    """
    if iterations < 0 or batch_size < 1:
        raise ValueError("iterations must be >= 0 and batch_size >= 1")
    init_seed, sample_seed = np.random.SeedSequence(seed).spawn(2)
    if net is None:
        net = DescriptorNet.create(int(init_seed.generate_state(1)[0]), input_edge=dataset.edge)
    else:
        net = net.copy()
    rng = np.random.default_rng(sample_seed)
    opt = Adam(net.params, lr)
    losses = np.empty(iterations)
    vals = dataset.values
    for it in range(iterations):
        t = sample_triplets(rng, dataset.n_corners, dataset.n_orientations, batch_size)
        loss, grads = net_loss_and_grads(net, vals[t[:, 0], t[:, 1]], vals[t[:, 0], t[:, 2]], vals[t[:, 3], t[:, 4]], margin)
        opt.step(net.params, grads)
        losses[it] = loss
        if callback is not None:
            callback(it, loss)
    return net, losses


def _as_describer(describe) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(describe, DescriptorNet):
        return describe.forward
    return describe


def eval_error_rate(describe, dataset: NeighborhoodDataset, seed: int = 0, metric: str = "inverse_angular") -> float:
    """Fraction of corners whose test neighborhood is matched to another corner's proposal.

    Every corner contributes one random test orientation and one random,
    different proposal orientation; each test descriptor picks the proposal
    of highest similarity, with exact ties broken at random.
    """
    from ..match import similarity_matrix

    n = dataset.n_corners
    if n < 2 or dataset.n_orientations < 2:
        raise ValueError("need at least 2 corners with at least 2 orientations each")
    describe = _as_describer(describe)
    rng = np.random.default_rng(seed)
    test_o = rng.integers(0, dataset.n_orientations, n)
    prop_o = (test_o + rng.integers(1, dataset.n_orientations, n)) % dataset.n_orientations
    rows = np.arange(n)
    dt = np.asarray(describe(dataset.values[rows, test_o]), dtype=np.float64)
    dp = np.asarray(describe(dataset.values[rows, prop_o]), dtype=np.float64)
    scores = similarity_matrix(dt, dp, metric)
    best = scores.max(axis=1, keepdims=True)
    wrong = 0
    for i in range(n):
        winners = np.flatnonzero(scores[i] == best[i])
        pick = winners[rng.integers(len(winners))] if len(winners) > 1 else winners[0]
        wrong += int(pick != i)
    return wrong / n


def mean_positive_distance(describe, dataset: NeighborhoodDataset, seed: int = 0) -> float:
    """Mean descriptor distance between two random orientations of each corner."""
    describe = _as_describer(describe)
    rng = np.random.default_rng(seed)
    n = dataset.n_corners
    o1 = rng.integers(0, dataset.n_orientations, n)
    o2 = (o1 + rng.integers(1, max(dataset.n_orientations, 2), n)) % dataset.n_orientations
    rows = np.arange(n)
    d1 = np.asarray(describe(dataset.values[rows, o1]), dtype=np.float64)
    d2 = np.asarray(describe(dataset.values[rows, o2]), dtype=np.float64)
    return float(np.linalg.norm(d1 - d2, axis=1).mean())


# ---------------------------------------------------------------------------
# Dataset file: one VGRD grid of stacked neighborhoods plus a JSON index
# ---------------------------------------------------------------------------


def save_dataset(ds: NeighborhoodDataset, path) -> None:
    """Writes ``path`` (VGRD, neighborhoods stacked along x) and ``path + '.index.json'``.

    Index entries are ``{corner_id, orientation, offset}`` with ``offset`` the
    first x-slab of the neighborhood.
    """
    e = ds.edge
    stacked = ds.values.reshape(-1, e, e)
    save_grid(DensityGrid(stacked.astype(np.float64)), path)
    entries = []
    for c in range(ds.n_corners):
        for o in range(ds.n_orientations):
            entries.append({"corner_id": int(ds.corner_ids[c]), "orientation": [float(t) for t in ds.orientations[o]],
                            "offset": (c * ds.n_orientations + o) * e})
    Path(str(path) + ".index.json").write_text(json.dumps({"edge": e, "entries": entries}))


def load_dataset(path, dtype=np.float32) -> NeighborhoodDataset:
    g = load_grid(path)
    index = json.loads(Path(str(path) + ".index.json").read_text())
    e = int(index["edge"])
    entries = index["entries"]
    ids = list(dict.fromkeys(en["corner_id"] for en in entries))
    orients = [tuple(en["orientation"]) for en in entries if en["corner_id"] == ids[0]]
    slab = {(en["corner_id"], tuple(en["orientation"])): en["offset"] for en in entries}
    vals = np.empty((len(ids), len(orients), e, e, e), dtype=dtype)
    for c, cid in enumerate(ids):
        for o, orient in enumerate(orients):
            try:
                off = slab[(cid, orient)]
            except KeyError:
                raise DatasetError(f"corner {cid} lacks orientation {orient}") from None
            vals[c, o] = g.values[off : off + e]
    return NeighborhoodDataset(vals, np.asarray(ids), np.asarray(orients))
