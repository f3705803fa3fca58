from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from voxreg.register import (DegenerateSampleError, InsufficientDataError, RansacConfig, RegistrationResult,
                             SimilarityTransform, avg_squared_error, fit_similarity, pair_error, ransac_register,
                             refine_on_inliers, rotation_angle_deg, transform_errors)


def random_similarity(rng, scale=(0.5, 2.0), tmax=10.0):
    rot = Rotation.random(random_state=rng.integers(2**31)).as_matrix()
    t = rng.normal(size=3)
    t *= rng.uniform(0, tmax) / np.linalg.norm(t)
    return SimilarityTransform(float(rng.uniform(*scale)), rot, t)


def assert_valid_rotation(r):
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(r) - 1) < 1e-9


def test_transform_validation_and_algebra():
    with pytest.raises(ValueError):
        SimilarityTransform(-1.0, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        SimilarityTransform(1.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    rng = np.random.default_rng(0)
    a, b = random_similarity(rng), random_similarity(rng)
    x = rng.normal(size=(5, 3))
    assert np.allclose(a.compose(b).apply(x), a.apply(b.apply(x)))
    assert np.allclose(a.inverse().apply(a.apply(x)), x)
    assert np.allclose(a.matrix() @ np.append(x[0], 1.0), np.append(a.apply(x[:1])[0], 1.0))
    back = SimilarityTransform.from_dict(a.to_dict())
    assert back.scale == a.scale and np.array_equal(back.rotation, a.rotation)


def test_fit_identity():
    p = np.random.default_rng(1).normal(size=(6, 3))
    t = fit_similarity(p, p)
    assert t.scale == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, 0, atol=1e-12)


def test_fit_recovers_inverse_of_known_transform():
    s = SimilarityTransform(2.0, Rotation.from_euler("z", 90, degrees=True).as_matrix(), np.array([1.0, 2.0, 3.0]))
    p1 = np.random.default_rng(2).normal(size=(8, 3))
    p2 = s.apply(p1)
    t = fit_similarity(p1, p2)
    inv = s.inverse()
    assert t.scale == pytest.approx(inv.scale, abs=1e-9)
    assert np.allclose(t.rotation, inv.rotation, atol=1e-9)
    assert np.allclose(t.translation, inv.translation, atol=1e-9)


def test_fit_noisy_residual_is_small():
    rng = np.random.default_rng(3)
    for _ in range(50):
        truth = random_similarity(rng)
        p2 = rng.uniform(-5, 5, (10, 3))
        p1 = truth.apply(p2) + rng.normal(0, 0.01, (10, 3))
        t = fit_similarity(p1, p2)
        assert np.sqrt(np.mean(pair_error(p1, p2, t) ** 2)) <= 0.03
        assert_valid_rotation(t.rotation)


def test_fit_is_locally_optimal():
    rng = np.random.default_rng(4)
    p2 = rng.normal(size=(10, 3))
    p1 = random_similarity(rng).apply(p2) + rng.normal(0, 0.1, (10, 3))
    t = fit_similarity(p1, p2)
    base = np.sum(pair_error(p1, p2, t) ** 2)
    for _ in range(1000):
        dr = Rotation.from_rotvec(rng.normal(0, 1e-3, 3)).as_matrix()
        q = SimilarityTransform(t.scale * (1 + rng.normal(0, 1e-3)), dr @ t.rotation, t.translation + rng.normal(0, 1e-3, 3))
        assert np.sum(pair_error(p1, p2, q) ** 2) >= base - 1e-12


def test_fit_handles_reflection_case():
    # mirrored point sets force the reflection correction
    rng = np.random.default_rng(5)
    p2 = rng.normal(size=(10, 3))
    p1 = p2 * np.array([1.0, 1.0, -1.0])
    assert_valid_rotation(fit_similarity(p1, p2).rotation)


def test_fit_rejects_collinear_and_short_inputs():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateSampleError):
        fit_similarity(line, line)
    with pytest.raises(ValueError):
        fit_similarity(np.zeros((2, 3)), np.zeros((2, 3)))


def test_pair_error_examples():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 3))
    assert np.all(pair_error(x, x, SimilarityTransform.identity()) == 0)
    t = random_similarity(rng)
    assert np.allclose(pair_error(t.apply(x), x, t), 0, atol=1e-12)
    y = rng.normal(size=(4, 3))
    want = [np.linalg.norm(x[i] - (t.scale * t.rotation @ y[i] + t.translation)) for i in range(4)]
    assert np.allclose(pair_error(x, y, t), want)
    assert avg_squared_error(x, y, t) == pytest.approx(np.mean(np.square(want)))


def synthetic_pairs(rng, n_true=20, n_out=10, noise=0.1):
    truth = random_similarity(rng, scale=(0.8, 1.25), tmax=5.0)
    x2 = rng.uniform(-10, 10, (n_true + n_out, 3))
    x1 = truth.apply(x2) + rng.normal(0, noise, x2.shape)
    x1[n_true:] = rng.uniform(-15, 15, (n_out, 3))
    return truth, x1, x2


def test_ransac_exact_consensus():
    rng = np.random.default_rng(7)
    truth = random_similarity(rng)
    x2 = rng.normal(size=(12, 3)) * 4
    res = ransac_register(truth.apply(x2), x2, RansacConfig(iterations=200, min_inliers=6))
    assert res.success and len(res.inliers) == 12 and res.avg_error < 1e-20
    assert_valid_rotation(res.transform.rotation)


def test_ransac_with_outliers():
    rng = np.random.default_rng(8)
    truth, x1, x2 = synthetic_pairs(rng)
    res = ransac_register(x1, x2, RansacConfig(iterations=2000, inlier_threshold=3.0, min_inliers=6, seed=1))
    assert res.success
    err = transform_errors(res.transform, truth)
    assert err["rotation_deg"] < 2 and err["translation"] < 1
    assert len(set(res.inliers) & set(range(20))) >= 18


def test_ransac_random_pairs_fail():
    fails = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        x1, x2 = rng.uniform(-50, 50, (2, 15, 3))
        fails += not ransac_register(x1, x2, RansacConfig(iterations=500, inlier_threshold=3.0, min_inliers=6, seed=seed)).success
    assert fails >= 19


def test_ransac_is_deterministic():
    rng = np.random.default_rng(9)
    _, x1, x2 = synthetic_pairs(rng)
    cfg = RansacConfig(iterations=5000, seed=3, chunk=777)
    a, b = ransac_register(x1, x2, cfg), ransac_register(x1, x2, cfg)
    assert a.to_dict() == b.to_dict() and a.iteration == b.iteration


def test_ransac_needs_enough_pairs_and_valid_config():
    with pytest.raises(InsufficientDataError):
        ransac_register(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        RansacConfig(min_inliers=2)
    with pytest.raises(ValueError):
        RansacConfig(iterations=0)


def test_ransac_equivariance():
    rng = np.random.default_rng(10)
    truth = random_similarity(rng)
    x2 = rng.uniform(-5, 5, (15, 3))
    x1 = truth.apply(x2)
    s = random_similarity(rng)
    cfg = RansacConfig(iterations=100, inlier_threshold=1e-3, min_inliers=6)
    t = ransac_register(x1, s.apply(x2), cfg).transform
    want = truth.compose(s.inverse())
    assert np.allclose(t.matrix(), want.matrix(), atol=1e-6)


def test_refine_does_not_increase_error_on_inliers():
    rng = np.random.default_rng(11)
    truth, x1, x2 = synthetic_pairs(rng, noise=0.3)
    coarse = ransac_register(x1, x2, RansacConfig(iterations=50, seed=0))
    assert coarse.success
    fine = refine_on_inliers(coarse, x1, x2)
    inl = coarse.inliers
    assert avg_squared_error(x1[inl], x2[inl], fine.transform) <= avg_squared_error(x1[inl], x2[inl], coarse.transform) + 1e-12


def test_refine_is_fixed_point_of_optimal_fit():
    rng = np.random.default_rng(12)
    truth, x1, x2 = synthetic_pairs(rng, n_out=0)
    t = fit_similarity(x1, x2)
    start = RegistrationResult(t, np.arange(20), avg_squared_error(x1, x2, t), True)
    again = refine_on_inliers(start, x1, x2)
    assert np.allclose(again.transform.matrix(), t.matrix(), atol=1e-9)


def test_refine_declines_degenerate_inliers():
    line = np.outer(np.arange(8.0), [1.0, 0.5, 0.0])
    start = RegistrationResult(SimilarityTransform.identity(), np.arange(8), 0.0, True)
    assert refine_on_inliers(start, line, line) is start
    failed = RegistrationResult(SimilarityTransform.identity())
    assert refine_on_inliers(failed, line, line) is failed


def test_rotation_angle():
    r = Rotation.from_euler("x", 30, degrees=True).as_matrix()
    assert rotation_angle_deg(np.eye(3), r) == pytest.approx(30)
