"""Acceptance criteria, one test each; every test logs a PASS/FAIL line before asserting."""

from __future__ import annotations

import itertools
import json
import time

import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial.transform import Rotation

from oracles import harris_naive, pool_naive, sobel_naive, trilinear_naive
from voxreg.cli import main
from voxreg.descriptor.network import DescriptorNet, net_loss_and_grads
from voxreg.descriptor.sift3d import SiftConfig, dominant_frames, sift3d_descriptor
from voxreg.descriptor.neighborhood import ExcludedCornerError
from voxreg.descriptor.training import eval_error_rate, synthesize_training_set, train
from voxreg.detect import HarrisConfig, detect_corners, harris_response, sobel_gradients
from voxreg.pipeline import PipelineConfig, register_grids
from voxreg.register import RansacConfig, SimilarityTransform, fit_similarity, ransac_register, transform_errors
from voxreg.synth import Primitive, SceneSpec, make_overlap_pair, random_transform, render_scene, room_scene
from voxreg.volume import DensityGrid, average_pool, build_pyramid, sample_trilinear


def random_similarity(rng, scale=(0.5, 2.0), tmax=10.0):
    rot = Rotation.random(random_state=rng.integers(2**31)).as_matrix()
    t = rng.normal(size=3)
    t *= rng.uniform(0, tmax) / np.linalg.norm(t)
    return SimilarityTransform(float(rng.uniform(*scale)), rot, t)


# ---------------------------------------------------------------------------
# 1. Gradient correctness
# ---------------------------------------------------------------------------


def _kink_state(net, x, margin):
    """ReLU activation pattern and per-triplet hinge activity; finite differences are only valid if both stay fixed."""
    y = net.forward(x)
    b = len(x) // 3
    hinge = margin + np.linalg.norm(y[:b] - y[b:2 * b], axis=1) - np.linalg.norm(y[:b] - y[2 * b:], axis=1) > 0
    return np.concatenate([net.activation_pattern(x).reshape(-1), hinge])


def test_1_gradient_correctness(record):
    start = time.perf_counter()
    net = DescriptorNet.create(0, conv1=2, conv2=3, hidden=8, out=5, dtype=np.float64)
    rng = np.random.default_rng(11)
    a, p, n = rng.random((3, 20, 7, 7, 7))
    x = np.concatenate([a, p, n])
    margin = 0.5  # keeps most hinges active so the loss depends on every weight
    _, grads = net_loss_and_grads(net, a, p, n, margin)
    # unit normalization curves like 1/|v|^2; outputs far from |v| = 0 keep the h^2 truncation term small
    min_norm = float(net.forward(x, keep=True)[1]["norm"].min())
    still = _kink_state(net, x, margin)
    # relative error with a floor at 1e-6 of the largest gradient, so entries that are numerically zero compare absolutely
    floor = 1e-6 * max(float(np.abs(g).max()) for g in grads.values())
    worst, total, retried, unresolved = 0.0, 0, 0, 0
    for name, w in net.params.items():
        for idx in np.ndindex(w.shape):
            old = w[idx]
            for h in (1e-4, 1e-6):
                w[idx] = old + h
                lp, _ = net_loss_and_grads(net, a, p, n, margin)
                kp = _kink_state(net, x, margin)
                w[idx] = old - h
                lm, _ = net_loss_and_grads(net, a, p, n, margin)
                km = _kink_state(net, x, margin)
                w[idx] = old
                if np.array_equal(kp, still) and np.array_equal(km, still):
                    break
                retried += h == 1e-4  # a kink lies between the probes at this step; retry closer
            else:
                unresolved += 1
                continue
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
            total += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and unresolved == 0 and min_norm > 0.1 and elapsed < 60
    record(1, "gradient correctness", ok,
           f"{total} parameters, max rel err {worst:.2e} (h=1e-4; {retried} straddled a kink and used h=1e-6, "
           f"{unresolved} unresolved; min output norm {min_norm:.2f}), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. Oracle equivalence
# ---------------------------------------------------------------------------


def test_2_oracle_equivalence(record):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = {"sobel": 0.0, "harris": 0.0, "pool": 0.0, "trilinear": 0.0}

    def rel(got, want):
        scale = max(np.abs(want).max(), 1e-300)
        return float(np.abs(got - want).max() / scale)

    for _ in range(100):
        dims = tuple(int(d) for d in rng.integers(3, 10, 3))
        v = rng.normal(size=dims)
        g = DensityGrid(v)
        grads = sobel_gradients(g)
        for got, want in zip(grads, sobel_naive(v)):
            worst["sobel"] = max(worst["sobel"], rel(got.values, want))
        radius = int(rng.integers(1, 3))
        h = harris_response(*grads, HarrisConfig(window_radius=radius)).values
        worst["harris"] = max(worst["harris"], rel(h, harris_naive(*(gr.values for gr in grads), radius, 0.06)))
        pool = int(rng.integers(1, min(dims) + 1))
        worst["pool"] = max(worst["pool"], rel(average_pool(g, pool).values, pool_naive(v, pool)))
        pts = rng.uniform(0, np.asarray(dims) - 1, (20, 3))
        got = sample_trilinear(g, pts)
        want = np.array([trilinear_naive(v, *q) for q in pts])
        worst["trilinear"] = max(worst["trilinear"], rel(got, want))
    elapsed = time.perf_counter() - start
    ok = all(e <= 1e-9 for e in worst.values()) and elapsed < 60
    record(2, "oracle equivalence", ok,
           ", ".join(f"{k} {e:.1e}" for k, e in worst.items()) + f" (max rel, 100 trials each), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. Closed-form fit
# ---------------------------------------------------------------------------


def test_3_closed_form_fit(record):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        truth = random_similarity(rng)
        p2 = rng.uniform(-5, 5, (10, 3))
        p1 = truth.apply(p2)
        est = fit_similarity(p1, p2)  # the transform taking p2 onto p1
        worst = max(worst, abs(est.scale - truth.scale), np.abs(est.rotation - truth.rotation).max(),
                    np.abs(est.translation - truth.translation).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    record(3, "closed-form fit", ok, f"max component error {worst:.1e} over 1000 trials, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. RANSAC robustness
# ---------------------------------------------------------------------------


def test_4_ransac_robustness(record):
    start = time.perf_counter()
    cell = 1.0
    good = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        truth = random_similarity(rng, scale=(0.8, 1.25), tmax=10.0)
        x2 = rng.uniform(0, 32, (30, 3)) * cell
        x1 = truth.apply(x2) + rng.normal(0, 0.1 * cell, x2.shape)
        lo, hi = x1[:20].min(axis=0), x1[:20].max(axis=0)
        x1[20:] = rng.uniform(lo, hi, (10, 3))
        res = ransac_register(x1, x2, RansacConfig(iterations=5000, inlier_threshold=3 * cell, min_inliers=6, seed=seed))
        if not res.success:
            continue
        err = transform_errors(res.transform, truth, x2[:20].mean(axis=0))
        good += err["rotation_deg"] < 2 and err["translation"] < cell and err["scale_rel"] < 0.02
    elapsed = time.perf_counter() - start
    ok = good >= 95 and elapsed < 60
    record(4, "RANSAC robustness", ok, f"{good}/100 runs within 2 deg / 1 cell / 2% scale, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. End-to-end synthetic registration
# ---------------------------------------------------------------------------

E2E_CROPS = (((-0.6, -0.6, -0.6), (4.4, 5.4, 3.8)), ((2.0, -0.6, -0.6), (7.0, 5.4, 3.8)))


def e2e_pair(seed: int):
    rng = np.random.default_rng(seed)
    spec = room_scene(seed, n_boxes=(10, 16), n_cylinders=(1, 3))
    truth = random_transform(rng, 60.0, 1.0, min_angle_deg=10.0)
    return make_overlap_pair(spec, *E2E_CROPS, truth, spacing=0.1)


def test_5_end_to_end_registration(record):
    start = time.perf_counter()
    cfg = PipelineConfig.from_dict({"ransac": {"iterations": 20000}})
    lines, successes, sq_cells, overlaps = [], 0, [], []
    for seed in range(10):
        pair = e2e_pair(seed)
        cell = pair.grid_a.spacing
        overlaps.append(pair.overlap_fraction)
        # lattice-inexact: the rotation is not a multiple of 90 degrees about any axis
        assert min(abs(np.degrees(Rotation.from_matrix(pair.true_transform.rotation).magnitude()) - 90 * k) for k in range(3)) > 1
        res = register_grids(pair.grid_a, pair.grid_b, cfg).result
        if res.success:
            center_b = pair.grid_b.world((np.asarray(pair.grid_b.dims) - 1) / 2.0)
            err = transform_errors(res.transform, pair.true_transform, center_b)
            hit = err["rotation_deg"] < 5 and err["translation"] < 2 * cell
        else:
            hit = False
        if hit:
            successes += 1
            sq_cells.append(res.avg_error / cell**2)
    elapsed = time.perf_counter() - start
    mean_sq = float(np.mean(sq_cells)) if sq_cells else float("nan")
    # mean squared inlier error must sit within a decade of one squared cell
    ok = successes >= 8 and min(overlaps) >= 0.3 and 0.1 <= mean_sq <= 10 and elapsed < 600
    record(5, "end-to-end registration", ok,
           f"{successes}/10 within 5 deg / 2 cells, mean squared inlier error {mean_sq:.2f} cell^2 "
           f"(rms {np.sqrt(mean_sq):.2f} cells), overlap >= {min(overlaps):.2f}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6. Training effect
# ---------------------------------------------------------------------------


def test_6_training_effect(record):
    start = time.perf_counter()
    scenes = [render_scene(room_scene(seed=s), spacing=0.1) for s in range(3)]
    held_out = [render_scene(room_scene(seed=s), spacing=0.1) for s in (100, 101)]
    ds = synthesize_training_set(scenes, max_corners_per_scene=40, seed=0)
    ev = synthesize_training_set(held_out, max_corners_per_scene=30, seed=1)
    untrained, _ = train(ds, iterations=0, seed=0)
    net, losses = train(ds, iterations=2000, batch_size=256, margin=0.1, lr=1e-4, seed=0)
    base = np.mean([eval_error_rate(untrained, ev, seed=s) for s in range(20)])
    after = np.mean([eval_error_rate(net, ev, seed=s) for s in range(20)])
    q = len(losses) // 4
    first, last = losses[:q].mean(), losses[-q:].mean()
    elapsed = time.perf_counter() - start
    ok = after < base and last < first and elapsed < 1800
    record(6, "training effect", ok,
           f"held-out error {base:.3f} untrained -> {after:.3f} trained ({ev.n_corners} corners, 20 draws); "
           f"loss quartiles {first:.4f} -> {last:.4f}; {ds.n_corners} training corners, {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 7. Invariance suite
# ---------------------------------------------------------------------------


def lattice_rotations() -> list[np.ndarray]:
    """The 24 proper rotations of the cube as signed permutation matrices."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3), dtype=int)
            m[np.arange(3), perm] = signs
            if round(np.linalg.det(m)) == 1:
                mats.append(m)
    return mats


def rotate_grid(v: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, callable]:
    """Rotate a cubic grid about its center; returns values and the index map old -> new."""
    n = v.shape[0]
    c = (n - 1) / 2.0
    new_idx = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    old_idx = np.rint((new_idx - c) @ r + c).astype(int)  # r^T (j - c) + c, row-vector form
    out = v[tuple(old_idx.T)].reshape(v.shape)

    def forward(i):
        return tuple(int(t) for t in np.rint(r @ (np.asarray(i) - c) + c))

    return out, forward


def invariance_scenes(n: int) -> list[np.ndarray]:
    h = n / 2
    boxes = SceneSpec(((0.0, 0.0, 0.0), (float(n),) * 3), [
        Primitive("box", (h - 4, h - 2, h - 5), (10.0, 8.0, 6.0)),
        Primitive("box", (h + 6, h + 5, h + 3), (6.0, 8.0, 10.0), amplitude=0.7),
        Primitive("cylinder", (h + 5, h - 7, h - 1), (6.0, 6.0, 8.0), amplitude=1.3),
    ])
    smooth = ndimage.gaussian_filter(np.random.default_rng(7).random((n, n, n)), 2.0)
    return [render_scene(boxes, (n, n, n)).values, smooth]


def corner_index_set(v: np.ndarray, levels: int, cfg: HarrisConfig) -> set:
    return {(c.level, c.grid_index) for c in detect_corners(build_pyramid(DensityGrid(v), levels), cfg)}


def test_7_invariance_suite(record):
    start = time.perf_counter()
    cfg = HarrisConfig(border=2)
    rots = lattice_rotations()
    assert len(rots) == 24
    detection_ok, counts = True, []
    # every rotation at level 0; coarser levels decimate with a fixed phase (cells 0, 2, ...), which only the
    # flip-free axis cycles preserve, so those are also checked on the full three-level pyramid
    cycles = [r for r in rots if np.all(r >= 0)]
    for levels, subset in ((1, rots), (3, cycles)):
        for v in invariance_scenes(32):
            base = corner_index_set(v, levels, cfg)
            counts.append(len(base))
            for r in subset:
                rotated, _ = rotate_grid(v, r)
                want = set()
                for lv, idx in base:
                    c = (32 // 2**lv - 1) / 2.0
                    want.add((lv, tuple(int(t) for t in np.rint(r @ (np.asarray(idx) - c) + c))))
                detection_ok &= corner_index_set(rotated, levels, cfg) == want

    # sift3d at every level-0 corner whose strongest frame mode is clearly unique
    sift = SiftConfig()
    sift_worst, sift_checked = 0.0, 0
    for v in invariance_scenes(32):
        g = DensityGrid(v)
        for c in detect_corners(build_pyramid(g, 1), cfg):
            try:
                base = sift3d_descriptor(g, c, sift)
            except ExcludedCornerError:
                continue
            if len(dominant_frames(g, c.grid_index, sift, peak_ratio=0.95)) != 1:
                continue
            for r in rots:
                rotated, fwd = rotate_grid(v, r)
                idx = fwd(c.grid_index)
                moved = type(c)(tuple(float(t) for t in idx), 0, c.response, idx)
                sift_worst = max(sift_worst, float(np.abs(sift3d_descriptor(DensityGrid(rotated), moved, sift) - base).max()))
                sift_checked += 1

    # positive density scaling leaves every detection unchanged
    scale_ok = True
    for v in invariance_scenes(32):
        base = corner_index_set(v, 3, cfg)
        for factor in (1e-3, 0.37, 1.0, 8.0, 1e3):
            scale_ok &= corner_index_set(v * factor, 3, cfg) == base
    elapsed = time.perf_counter() - start
    ok = detection_ok and sift_checked > 0 and sift_worst <= 1e-9 and scale_ok and elapsed < 120
    record(7, "invariance suite", ok,
           f"detection equivariant (24 rotations at level 0, 3 axis cycles on 3 levels): {detection_ok} "
           f"(corner counts {counts}); "
           f"sift3d max diff {sift_worst:.1e} over {sift_checked} corner-rotations; "
           f"scaling invariant: {scale_ok}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 8. Determinism
# ---------------------------------------------------------------------------


def test_8_register_determinism(tmp_path, record):
    pair = {"scene": {"room": {"n_boxes": [10, 16], "n_cylinders": [1, 3]}}, "spacing": 0.1,
            "crop_a": [list(E2E_CROPS[0][0]), list(E2E_CROPS[0][1])],
            "crop_b": [list(E2E_CROPS[1][0]), list(E2E_CROPS[1][1])],
            "transform": {"random": {"max_angle_deg": 60, "min_angle_deg": 10}}}
    (tmp_path / "pair.json").write_text(json.dumps(pair))
    (tmp_path / "cfg.json").write_text(json.dumps({"seed": 5, "ransac": {"iterations": 20000}}))
    assert main(["synth", str(tmp_path / "pair.json"), "--out", str(tmp_path / "case"), "--seed", "3"]) == 0
    args = [str(tmp_path / "case" / "grid_a.vgrd"), str(tmp_path / "case" / "grid_b.vgrd"), "--config", str(tmp_path / "cfg.json")]
    assert main(["register", *args, "--out", str(tmp_path / "r1.json")]) == 0
    assert main(["register", *args, "--out", str(tmp_path / "r2.json")]) == 0
    one, two = (tmp_path / "r1.json").read_bytes(), (tmp_path / "r2.json").read_bytes()
    ok = one == two
    doc = json.loads(one)
    record(8, "determinism", ok, f"two register runs byte-identical: {ok} ({len(one)} bytes, success={doc['success']})")
    assert ok
