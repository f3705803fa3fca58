"""Similarity-transform estimation between matched corner sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class DegenerateSampleError(ValueError):
    """Point sets too close to collinear to fix a rotation."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """x1 = scale * R @ x2 + t."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def linear(self) -> np.ndarray:
        return self.scale * self.rotation

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear()
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation_row_major": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(d["scale"], np.reshape(d["rotation_row_major"], (3, 3)), d["translation"])


@dataclass
class RansacConfig:
    iterations: int = 50_000
    inlier_threshold: float = 3.0
    min_inliers: int = 6
    sample_size: int = 3
    seed: int = 0
    chunk: int = 4096

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.sample_size < 3:
            raise ValueError("sample_size must be >= 3")
        if self.min_inliers < self.sample_size:
            raise ValueError("min_inliers must be >= sample_size")


@dataclass
class RegistrationResult:
    transform: SimilarityTransform
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    avg_error: float = float("inf")
    success: bool = False
    iteration: int = -1

    def to_dict(self, pairs: np.ndarray | None = None) -> dict:
        """Result JSON; ``pairs`` maps inlier rows back to corner index pairs."""
        inl = [int(i) for i in self.inliers]
        inlier_pairs = [[int(a), int(b)] for a, b in np.asarray(pairs)[inl]] if pairs is not None else [[i, i] for i in inl]
        return {
            "success": bool(self.success),
            "scale": self.transform.scale,
            "rotation_row_major": [float(x) for x in self.transform.rotation.reshape(-1)],
            "translation": [float(x) for x in self.transform.translation],
            "num_inliers": len(inl),
            "avg_error_eq7": float(self.avg_error) if np.isfinite(self.avg_error) else None,
            "inlier_pairs": inlier_pairs,
        }


# ---------------------------------------------------------------------------
# Closed-form fit
# ---------------------------------------------------------------------------


def _umeyama_batch(p1: np.ndarray, p2: np.ndarray, rtol: float = 1e-9):
    """Batched least-squares similarity fits. p1, p2: (B, n, 3).

    Returns (scale, R, t, ok) where ``ok`` marks non-degenerate samples.
    """
    mu1 = p1.mean(axis=1, keepdims=True)
    mu2 = p2.mean(axis=1, keepdims=True)
    x1 = p1 - mu1
    x2 = p2 - mu2
    n = p1.shape[1]
    cov = np.einsum("bni,bnj->bij", x1, x2) / n
    u, s, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    sign[sign == 0] = 1.0
    d = np.ones((len(p1), 3))
    d[:, 2] = sign
    rot = np.einsum("bij,bj,bjk->bik", u, d, vt)
    var2 = np.einsum("bni,bni->b", x2, x2) / n
    # rank < 2 on either side leaves the rotation undetermined
    s2 = np.linalg.svd(x2, compute_uv=False)
    s1 = np.linalg.svd(x1, compute_uv=False)
    ok = (s2[:, 1] > rtol * np.maximum(s2[:, 0], 1e-300)) & (s1[:, 1] > rtol * np.maximum(s1[:, 0], 1e-300))
    ok &= var2 > 0
    scale = np.einsum("bj,bj->b", s, d) / np.where(var2 > 0, var2, 1.0)
    ok &= scale > 0
    t = mu1[:, 0] - scale[:, None] * np.einsum("bij,bj->bi", rot, mu2[:, 0])
    return scale, rot, t, ok


def fit_similarity(p1, p2) -> SimilarityTransform:
    """Least-squares scale, rotation and translation with p1 ≈ l R p2 + t."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape or p1.ndim != 2 or p1.shape[1] != 3:
        raise ValueError("point lists must both have shape (n, 3)")
    if len(p1) < 3:
        raise DegenerateSampleError("need at least 3 correspondences")
    scale, rot, t, ok = _umeyama_batch(p1[None], p2[None])
    if not ok[0]:
        raise DegenerateSampleError("correspondences are collinear or coincident")
    return SimilarityTransform(scale[0], rot[0], t[0])


def pair_error(x1, x2, T: SimilarityTransform) -> np.ndarray:
    """Euclidean residual |x1 - (l R x2 + t)| per pair."""
    return np.linalg.norm(np.asarray(x1, dtype=np.float64) - T.apply(x2), axis=-1)


def avg_squared_error(x1, x2, T: SimilarityTransform) -> float:
    """Mean squared residual over the given pairs."""
    e = pair_error(x1, x2, T)
    return float(np.mean(e**2)) if len(e) else float("inf")


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


def _draw_samples(rng: np.random.Generator, n_items: int, count: int, k: int) -> np.ndarray:
    """``count`` rows of ``k`` distinct indices in [0, n_items), redrawing rows with repeats."""
    idx = rng.integers(0, n_items, size=(count, k))
    while True:
        srt = np.sort(idx, axis=1)
        bad = np.any(srt[:, 1:] == srt[:, :-1], axis=1)
        if not bad.any():
            return idx
        idx[bad] = rng.integers(0, n_items, size=(int(bad.sum()), k))


def ransac_register(x1, x2, cfg: RansacConfig | None = None) -> RegistrationResult:
    """Robust similarity between matched points ``x1[i] <-> x2[i]``.

    Every iteration fits a minimal sample; among hypotheses with more than
    ``min_inliers`` inliers the one with the lowest mean inlier distance wins
    (ties: more inliers, then earlier iteration). Samples come from one seeded
    generator consumed in fixed-size chunks, so results are reproducible.
    """
    cfg = cfg or RansacConfig()
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 3)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 3)
    n = len(x1)
    if len(x2) != n:
        raise ValueError("x1 and x2 must have the same length")
    if n < cfg.sample_size:
        raise InsufficientDataError(f"{n} pairs, need at least {cfg.sample_size}")
    rng = np.random.default_rng(cfg.seed)
    best = None  # (mean_err, -count, iteration, scale, R, t, mask)
    done = 0
    while done < cfg.iterations:
        count = min(cfg.chunk, cfg.iterations - done)
        idx = _draw_samples(rng, n, count, cfg.sample_size)
        scale, rot, t, ok = _umeyama_batch(x1[idx], x2[idx])
        pred = scale[:, None, None] * np.einsum("bij,nj->bni", rot, x2) + t[:, None, :]
        err = np.linalg.norm(x1[None] - pred, axis=-1)
        inl = err < cfg.inlier_threshold
        cnt = inl.sum(axis=1)
        qualifies = ok & (cnt > cfg.min_inliers)
        if qualifies.any():
            mean_err = np.where(inl, err, 0.0).sum(axis=1) / np.maximum(cnt, 1)
            cand = np.flatnonzero(qualifies)
            # lexicographic: mean error, then larger count, then earlier iteration
            order = np.lexsort((cand, -cnt[cand], mean_err[cand]))
            j = cand[order[0]]
            key = (mean_err[j], -int(cnt[j]), done + int(j))
            if best is None or key < best[:3]:
                best = key + (scale[j], rot[j], t[j], inl[j].copy())
        done += count
    if best is None:
        return RegistrationResult(SimilarityTransform.identity(), np.zeros(0, dtype=np.intp), float("inf"), False)
    _, _, it, scale, rot, t, mask = best
    T = SimilarityTransform(scale, _orthonormalize(rot), t)
    inliers = np.flatnonzero(mask)
    return RegistrationResult(T, inliers, avg_squared_error(x1[inliers], x2[inliers], T), True, it)


def _orthonormalize(rot: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def refine_on_inliers(result: RegistrationResult, x1, x2, inlier_threshold: float | None = None,
                      min_inliers: int = 0) -> RegistrationResult:
    """Least-squares polish over the inlier set, then re-select inliers.

    Degenerate inlier sets, or a re-selection that drops to ``min_inliers`` or
    fewer pairs, leave the input result untouched.
    """
    if not result.success:
        return result
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 3)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 3)
    inl = result.inliers
    try:
        T = fit_similarity(x1[inl], x2[inl])
    except DegenerateSampleError:
        return result
    if inlier_threshold is None:
        new_inl = inl
    else:
        new_inl = np.flatnonzero(pair_error(x1, x2, T) < inlier_threshold)
        if len(new_inl) <= min_inliers:
            return result
    return RegistrationResult(T, new_inl, avg_squared_error(x1[new_inl], x2[new_inl], T), True, result.iteration)


def rotation_angle_deg(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle between two rotations."""
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def transform_errors(est: SimilarityTransform, truth: SimilarityTransform, center=(0.0, 0.0, 0.0)) -> dict:
    """Rotation (deg), translation (displacement of ``center``) and relative scale error."""
    center = np.asarray(center, dtype=np.float64)
    return {
        "rotation_deg": rotation_angle_deg(est.rotation, truth.rotation),
        "translation": float(np.linalg.norm(est.apply(center[None])[0] - truth.apply(center[None])[0])),
        "scale_rel": abs(est.scale / truth.scale - 1.0),
    }


def save_result(result_doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(result_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
