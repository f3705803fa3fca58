"""Configuration and end-to-end driver: filter, detect, describe, match, register, evaluate."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .descriptor.neighborhood import ExcludedCornerError, extract_rotated
from .descriptor.network import DescriptorNet, load_weights
from .descriptor.sift3d import SiftConfig, sift3d_descriptors
from .detect import Corner, HarrisConfig, detect_corners
from .match import METRICS, match_descriptor_sets, match_descriptors, threshold_for_distance
from .register import (RansacConfig, RegistrationResult, SimilarityTransform, ransac_register, refine_on_inliers,
                       transform_errors)
from .volume import DensityGrid, GridPyramid, anisotropic_diffusion, average_pool, build_pyramid

BACKENDS = ("network", "sift3d")
FILTERS = ("none", "diffusion", "pool")


class ConfigError(ValueError):
    pass


def _defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


DEFAULTS: dict = {
    "seed": 0,
    "volume": {"filter": "none", "diffusion": {"iters": 5, "dt": 0.01, "K": 5.0}, "pool": 2,
               "levels": 3, "blur_sigma": 1.0},
    # corners whose rotated neighborhood leaves the grid are dropped when describing,
    # so the detector border can be tighter than the worst-case rotation reach
    "detect": {**_defaults(HarrisConfig), "border": 5},
    "descriptor": {"backend": "sift3d", "s": 3, "angle_step": math.pi / 6, "weights": None,
                   "sift": _defaults(SiftConfig)},
    "train": {"iterations": 2000, "batch_size": 256, "margin": 0.1, "lr": 1e-4, "max_corners_per_scene": 40},
    "match": {"metric": "inverse_angular", "max_distance": 0.5},
    "ransac": {"iterations": 50_000, "inlier_threshold_cells": 3.0, "min_inliers": 6, "sample_size": 3,
               "chunk": 4096},
    "refine": True,
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where + key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


@dataclass
class PipelineConfig:
    """All pipeline settings as one nested dict, defaults filled in and validated."""

    data: dict

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "PipelineConfig":
        cfg = cls(_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def replace(self, **sections) -> "PipelineConfig":
        return PipelineConfig.from_dict(_merge(self.data, sections))

    def validate(self) -> None:
        d = self.data
        try:
            self.harris()
            self.sift()
            RansacConfig(**self._ransac_kwargs(1.0))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        vol = d["volume"]
        if vol["filter"] not in FILTERS:
            raise ConfigError(f"volume.filter must be one of {FILTERS}")
        if int(vol["levels"]) < 1:
            raise ConfigError("volume.levels must be >= 1")
        if not vol["blur_sigma"] > 0 or int(vol["pool"]) < 1:
            raise ConfigError("volume.blur_sigma must be positive and volume.pool >= 1")
        dif = vol["diffusion"]
        if int(dif["iters"]) < 0 or not dif["dt"] > 0 or not dif["K"] > 0:
            raise ConfigError("diffusion needs iters >= 0, dt > 0, K > 0")
        desc = d["descriptor"]
        if desc["backend"] not in BACKENDS:
            raise ConfigError(f"descriptor.backend must be one of {BACKENDS}")
        if int(desc["s"]) < 1 or not desc["angle_step"] > 0:
            raise ConfigError("descriptor.s must be >= 1 and angle_step positive")
        if desc["backend"] == "network" and desc["weights"] is not None and not Path(desc["weights"]).is_file():
            raise ConfigError(f"weights file {desc['weights']} does not exist")
        tr = d["train"]
        if int(tr["iterations"]) < 0 or int(tr["batch_size"]) < 1 or not tr["margin"] > 0 or tr["lr"] < 0:
            raise ConfigError("train needs iterations >= 0, batch_size >= 1, margin > 0, lr >= 0")
        if d["match"]["metric"] not in METRICS:
            raise ConfigError(f"match.metric must be one of {METRICS}")
        if not d["match"]["max_distance"] > 0:
            raise ConfigError("match.max_distance must be positive")

    def harris(self) -> HarrisConfig:
        return HarrisConfig(**self.data["detect"])

    def sift(self) -> SiftConfig:
        return SiftConfig(**self.data["descriptor"]["sift"])

    def _ransac_kwargs(self, cell: float) -> dict:
        r = self.data["ransac"]
        return {"iterations": int(r["iterations"]), "inlier_threshold": float(r["inlier_threshold_cells"]) * cell,
                "min_inliers": int(r["min_inliers"]), "sample_size": int(r["sample_size"]),
                "seed": int(self.data["seed"]), "chunk": int(r["chunk"])}

    def ransac(self, cell: float) -> RansacConfig:
        """RANSAC settings with the inlier threshold converted from cells to world units."""
        return RansacConfig(**self._ransac_kwargs(cell))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def preprocess(g: DensityGrid, cfg: PipelineConfig) -> DensityGrid:
    vol = cfg.data["volume"]
    if vol["filter"] == "diffusion":
        dif = vol["diffusion"]
        return anisotropic_diffusion(g, int(dif["iters"]), float(dif["dt"]), float(dif["K"]))
    if vol["filter"] == "pool":
        return average_pool(g, int(vol["pool"]))
    return g


def pyramid_and_corners(g: DensityGrid, cfg: PipelineConfig) -> tuple[GridPyramid, list[Corner]]:
    vol = cfg.data["volume"]
    pyr = build_pyramid(preprocess(g, cfg), int(vol["levels"]), float(vol["blur_sigma"]))
    return pyr, detect_corners(pyr, cfg.harris())


def describe_corners(pyr: GridPyramid, corners: list[Corner], cfg: PipelineConfig,
                     net: DescriptorNet | None = None) -> tuple[list[int], list[np.ndarray]]:
    """Descriptor stacks (n_i, D) for the corners that can be described, and their indices."""
    backend = cfg.data["descriptor"]["backend"]
    keep, stacks = [], []
    if backend == "sift3d":
        scfg = cfg.sift()
        for i, c in enumerate(corners):
            try:
                stacks.append(sift3d_descriptors(pyr[c.level], c, scfg))
            except ExcludedCornerError:
                continue
            keep.append(i)
        return keep, stacks
    if net is None:
        raise ConfigError("network backend needs a trained net")
    s = int(cfg.data["descriptor"]["s"])
    blocks = []
    for i, c in enumerate(corners):
        try:
            blocks.append(extract_rotated(pyr[c.level], c.grid_index, s, [(0.0, 0.0, 0.0)])[0])
        except ExcludedCornerError:
            continue
        keep.append(i)
    if blocks:
        desc = net.forward(np.stack(blocks)).astype(np.float64)
        stacks = [d[None] for d in desc]
    return keep, stacks


def load_net(cfg: PipelineConfig) -> DescriptorNet | None:
    desc = cfg.data["descriptor"]
    if desc["backend"] != "network":
        return None
    if desc["weights"] is None:
        raise ConfigError("network backend requires descriptor.weights")
    return load_weights(desc["weights"])


@dataclass
class PipelineRun:
    result: RegistrationResult
    corners_a: list[Corner]
    corners_b: list[Corner]
    pairs: np.ndarray  # (n_matches, 2) corner indices
    scores: np.ndarray

    def document(self, cfg: PipelineConfig) -> dict:
        doc = self.result.to_dict(self.pairs)
        doc.update({
            "seed": int(cfg.data["seed"]),
            "iterations": int(cfg.data["ransac"]["iterations"]),
            "backend": cfg.data["descriptor"]["backend"],
            "num_corners": [len(self.corners_a), len(self.corners_b)],
            "num_matches": int(len(self.pairs)),
            "config": cfg.to_dict(),
        })
        return doc


def register_grids(grid_a: DensityGrid, grid_b: DensityGrid, cfg: PipelineConfig | None = None,
                   net: DescriptorNet | None = None) -> PipelineRun:
    """Similarity transform mapping grid b's world frame into grid a's."""
    cfg = cfg or PipelineConfig.from_dict()
    if net is None:
        net = load_net(cfg)
    pyr_a, corners_a = pyramid_and_corners(grid_a, cfg)
    pyr_b, corners_b = pyramid_and_corners(grid_b, cfg)
    keep_a, desc_a = describe_corners(pyr_a, corners_a, cfg, net)
    keep_b, desc_b = describe_corners(pyr_b, corners_b, cfg, net)
    metric = cfg.data["match"]["metric"]
    threshold = threshold_for_distance(float(cfg.data["match"]["max_distance"]))
    if desc_a and desc_b and all(len(d) == 1 for d in desc_a + desc_b):
        matches = match_descriptors(np.concatenate(desc_a), np.concatenate(desc_b), threshold, metric)
    else:
        matches = match_descriptor_sets(desc_a, desc_b, threshold, metric)
    pairs = np.array([[keep_a[m.index_1], keep_b[m.index_2]] for m in matches], dtype=np.intp).reshape(-1, 2)
    scores = np.array([m.score for m in matches])
    rcfg = cfg.ransac(grid_a.spacing)
    if len(pairs) < rcfg.sample_size:
        result = RegistrationResult(SimilarityTransform.identity())
    else:
        x1 = np.array([corners_a[i].position for i in pairs[:, 0]])
        x2 = np.array([corners_b[j].position for j in pairs[:, 1]])
        result = ransac_register(x1, x2, rcfg)
        if cfg.data["refine"]:
            result = refine_on_inliers(result, x1, x2, rcfg.inlier_threshold, rcfg.min_inliers)
    return PipelineRun(result, corners_a, corners_b, pairs, scores)


def result_json(doc: dict) -> str:
    """Canonical serialization; identical documents give identical bytes."""
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Evaluation against ground truth
# ---------------------------------------------------------------------------


def case_errors(result_doc: dict, truth_doc: dict, max_rotation_deg: float = 5.0, max_translation_cells: float = 2.0) -> dict:
    """Errors of one registration result against its truth JSON.

    Translation error is the displacement of grid b's center (``center_b`` in
    the truth), in world units and in cells of grid a.
    """
    truth = SimilarityTransform.from_dict(truth_doc["transform"])
    cell = float(truth_doc.get("cell", 1.0))
    case = {"registered": bool(result_doc["success"]), "avg_error_eq7": result_doc.get("avg_error_eq7")}
    if result_doc["success"]:
        est = SimilarityTransform(result_doc["scale"], np.asarray(result_doc["rotation_row_major"]).reshape(3, 3),
                                  np.asarray(result_doc["translation"]))
        err = transform_errors(est, truth, truth_doc.get("center_b", (0.0, 0.0, 0.0)))
        err["translation_cells"] = err["translation"] / cell
        case.update(err)
        case["correct"] = err["rotation_deg"] < max_rotation_deg and err["translation_cells"] < max_translation_cells
    else:
        case["correct"] = False
    return case


def summarize(cases: dict[str, dict]) -> dict:
    ok = [c for c in cases.values() if c["correct"]]

    def mean(key):
        vals = [c[key] for c in ok if c.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "num_cases": len(cases),
        "num_registered": sum(c["registered"] for c in cases.values()),
        "num_success": len(ok),
        "avg_error_eq7_on_success": mean("avg_error_eq7"),
        "mean_rotation_deg_on_success": mean("rotation_deg"),
        "mean_translation_cells_on_success": mean("translation_cells"),
        "mean_scale_rel_on_success": mean("scale_rel"),
        "cases": {k: cases[k] for k in sorted(cases)},
    }


def evaluate_dirs(results_dir, truths_dir) -> dict:
    """Pairs ``results_dir/<name>.json`` with ``truths_dir/<name>.json`` (or ``truths_dir/<name>/truth.json``)."""
    results_dir, truths_dir = Path(results_dir), Path(truths_dir)
    cases = {}
    for rpath in sorted(results_dir.glob("*.json")):
        name = rpath.stem
        tpath = truths_dir / f"{name}.json"
        if not tpath.is_file():
            tpath = truths_dir / name / "truth.json"
        if not tpath.is_file():
            raise FileNotFoundError(f"no truth file for result {rpath.name}")
        cases[name] = case_errors(json.loads(rpath.read_text()), json.loads(tpath.read_text()))
    return summarize(cases)
