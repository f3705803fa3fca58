"""Descriptor similarity and one-to-one correspondence search."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

ETA = 1e-6
METRICS = ("inverse_angular", "inverse_euclidean")


@dataclass(frozen=True)
class MatchCandidate:
    index_1: int
    index_2: int
    score: float


def similarity_matrix(d1, d2, metric: str = "inverse_angular") -> np.ndarray:
    d1 = np.atleast_2d(np.asarray(d1, dtype=np.float64))
    d2 = np.atleast_2d(np.asarray(d2, dtype=np.float64))
    if metric == "inverse_angular":
        dist = np.arccos(np.clip(d1 @ d2.T, -1.0, 1.0))
    elif metric == "inverse_euclidean":
        diff = d1[:, None, :] - d2[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    else:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return 1.0 / (dist + ETA)


def similarity(da, db, metric: str = "inverse_angular") -> float:
    """1 / (distance + eta) between two unit descriptors."""
    return float(similarity_matrix(da, db, metric)[0, 0])


def threshold_for_distance(distance: float) -> float:
    """Score threshold equivalent to a maximum descriptor distance."""
    return 1.0 / (distance + ETA)


DEFAULT_THRESHOLD = threshold_for_distance(0.5)


def max_weight_matching(scores: np.ndarray, threshold: float) -> list[MatchCandidate]:
    """Maximum-total-score one-to-one matching over pairs scoring >= ``threshold``.

    Below-threshold pairs get zero weight so the assignment never gains from
    them and they are dropped afterwards; since valid scores are positive,
    this equals a maximum-weight matching of the thresholded graph. A tiny
    index-dependent penalty breaks exact ties: it grows with i + j and
    shrinks with i * j, so a lone row takes its lowest column and a square
    block of equal scores is matched along its diagonal.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return []
    valid = scores >= threshold
    if not valid.any():
        return []
    w = np.where(valid, scores, 0.0)
    n1, n2 = w.shape
    i = np.arange(n1, dtype=np.float64)[:, None]
    j = np.arange(n2, dtype=np.float64)[None, :]
    penalty = (i + j) / (n1 + n2) - i * j / (n1 * n2) + 1.0
    w = w - np.where(valid, 1e-12 * w.max() * penalty, 0.0)
    rows, cols = linear_sum_assignment(w, maximize=True)
    return [MatchCandidate(int(i), int(j), float(scores[i, j])) for i, j in zip(rows, cols) if valid[i, j]]


def match_descriptors(d1, d2, threshold: float = DEFAULT_THRESHOLD, metric: str = "inverse_angular") -> list[MatchCandidate]:
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if len(d1) == 0 or len(d2) == 0:
        return []
    return max_weight_matching(similarity_matrix(d1, d2, metric), threshold)


def set_similarity_matrix(sets1, sets2, metric: str = "inverse_angular") -> np.ndarray:
    """Corner-to-corner scores when each corner carries several descriptors: best pair wins."""
    sizes1 = [len(d) for d in sets1]
    sizes2 = [len(d) for d in sets2]
    full = similarity_matrix(np.concatenate(sets1), np.concatenate(sets2), metric)
    starts1 = np.concatenate([[0], np.cumsum(sizes1)[:-1]])
    starts2 = np.concatenate([[0], np.cumsum(sizes2)[:-1]])
    rows = np.maximum.reduceat(full, starts1, axis=0)
    return np.maximum.reduceat(rows, starts2, axis=1)


def match_descriptor_sets(sets1, sets2, threshold: float = DEFAULT_THRESHOLD,
                          metric: str = "inverse_angular") -> list[MatchCandidate]:
    """Like :func:`match_descriptors`, but entry ``i`` of each list is an (n_i, D) stack."""
    if len(sets1) == 0 or len(sets2) == 0:
        return []
    return max_weight_matching(set_similarity_matrix(sets1, sets2, metric), threshold)


def write_matches_jsonl(matches: list[MatchCandidate], path) -> None:
    with open(path, "w") as fh:
        for m in matches:
            fh.write(json.dumps({"i1": m.index_1, "i2": m.index_2, "score": m.score}) + "\n")


def read_matches_jsonl(path) -> list[MatchCandidate]:
    with open(path) as fh:
        return [MatchCandidate(d["i1"], d["i2"], d["score"]) for d in map(json.loads, filter(str.strip, fh))]
