import itertools
import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from clad.metrics import (
    DegenerateEntryWarning,
    FeatureStats,
    ScoreMatrix,
    average_forgetting,
    average_score,
    confusion_counts,
    extract_features,
    fid,
    fid_forgetting,
    get_extractor,
    pixel_f1,
    pooled_pixel_features,
    sqrtm_psd_product,
)
from clad.scoring import best_f1_threshold


def brute_f1(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def stats(mean, var):
    return FeatureStats(np.array(mean, float), np.atleast_2d(np.array(var, float)), 2)


def matrix(values):
    n = len(values)
    m = ScoreMatrix(n)
    for i, row in enumerate(values, start=1):
        for j, v in enumerate(row, start=1):
            m[i, j] = v
    return m


# -- f1 ---------------------------------------------------------------


def test_f1_matches_brute_force(rng):
    for _ in range(100):
        pred = rng.random((8, 8)) > 0.5
        gt = rng.random((8, 8)) > 0.7
        assert pixel_f1(pred, gt) == brute_f1(pred, gt)


def test_f1_edge_cases():
    z = np.zeros((4, 4), np.uint8)
    o = np.ones((4, 4), np.uint8)
    assert pixel_f1(z, z) == 0.0
    assert pixel_f1(o, o) == 1.0
    assert pixel_f1(o, z) == 0.0
    assert confusion_counts(o, z) == (0, 16, 0)
    with pytest.raises(ValueError):
        pixel_f1(z, np.zeros((2, 2)))


def test_threshold_sweep_matches_brute_force(rng):
    ts = np.linspace(0, 1, 101)
    for _ in range(100):
        maps = [rng.random((8, 8)) for _ in range(3)]
        gts = [(rng.random((8, 8)) > 0.8).astype(np.uint8) for _ in range(3)]
        gts[0][0, 0] = 1
        best_t, best = ts[0], -1.0
        for t in ts:
            f = brute_f1(np.concatenate([m.ravel() > t for m in maps]), np.concatenate([g.ravel() for g in gts]))
            if f > best:
                best_t, best = t, f
        assert best_f1_threshold(maps, gts, ts) == (best_t, best)


# -- score matrices and forgetting ------------------------------------


def test_forgetting_hand_matrix():
    m = matrix([[0.4], [0.2, 0.5]])
    assert average_forgetting(m) == 0.5


def test_forgetting_zero_and_improvement():
    assert average_forgetting(matrix([[0.4], [0.4, 0.5]])) == 0.0
    assert average_forgetting(matrix([[0.4], [0.6, 0.5]])) == pytest.approx(-0.5)


def test_forgetting_takes_worst_past_stage():
    m = matrix([[0.2], [0.5, 0.3], [0.25, 0.3, 0.4]])
    # task 1: max((0.2-0.25)/0.2, (0.5-0.25)/0.5) = 0.5 ; task 2: 0
    assert average_forgetting(m) == pytest.approx(0.25)


def test_forgetting_is_not_clamped():
    assert average_forgetting(matrix([[0.1], [0.5, 0.5]])) == pytest.approx(-4.0)


def test_forgetting_skips_zero_denominators():
    m = matrix([[0.0], [0.3, 0.5], [0.2, 0.25, 0.4]])
    with pytest.warns(DegenerateEntryWarning):
        value = average_forgetting(m)
    # task 1 keeps only l=2: (0.3-0.2)/0.3 ; task 2: 0.5
    assert value == pytest.approx(((0.1 / 0.3) + 0.5) / 2)


def test_average_score_and_errors():
    m = matrix([[0.4], [0.2, 0.6]])
    assert average_score(m, 1) == pytest.approx(0.4)
    assert average_score(m) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        average_forgetting(matrix([[0.3]]))
    partial = ScoreMatrix(2)
    partial[1, 1] = 0.5
    with pytest.raises(ValueError):
        average_score(partial, 2)


def test_fid_forgetting():
    assert fid_forgetting(matrix([[100.0], [150.0, 90.0]])) == pytest.approx(0.5)
    assert fid_forgetting(matrix([[100.0], [100.0, 90.0]])) == 0.0
    assert fid_forgetting(matrix([[100.0], [80.0, 90.0]])) < 0
    # baseline is the best past value, not the first
    assert fid_forgetting(matrix([[100.0], [50.0, 1.0], [75.0, 1.0, 1.0]])) == pytest.approx(0.25)


def test_matrix_lower_triangle_only():
    m = ScoreMatrix(3)
    with pytest.raises(IndexError):
        m[1, 2] = 0.1
    with pytest.raises(IndexError):
        m[4, 1] = 0.1
    m[2, 1] = 0.25
    assert m.defined(2, 1) and not m.defined(2, 2)


def test_matrix_csv_and_json_roundtrip(rng):
    m = ScoreMatrix(3, "f1")
    for i, j in itertools.product(range(1, 4), repeat=2):
        if j <= i:
            m[i, j] = float(rng.random())
    back = ScoreMatrix.from_csv(m.to_csv())
    np.testing.assert_array_equal(back.values, m.values)
    again = ScoreMatrix.from_dict(m.to_dict())
    np.testing.assert_array_equal(again.values, m.values)
    assert m.to_csv().splitlines()[1].endswith(",,")


def test_diagonal_only_matrix():
    m = ScoreMatrix(3)
    for i in range(1, 4):
        m[i, i] = 0.3
    assert m.is_diagonal_only()
    assert not m.row_complete(2)


# -- FID ----------------------------------------------------------------


def test_fid_closed_forms():
    assert fid(stats([0], [1]), stats([3], [1])) == pytest.approx(9.0, abs=1e-6)
    assert fid(stats([0], [1]), stats([0], [4])) == pytest.approx(1.0, abs=1e-6)


def test_fid_identity_and_symmetry(rng):
    feats = rng.normal(size=(200, 6))
    a = FeatureStats.from_features(feats)
    b = FeatureStats.from_features(rng.normal(1.0, 2.0, size=(150, 6)))
    assert fid(a, a) <= 1e-6
    assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-6)


def test_fid_diagonal_oracle(rng):
    for _ in range(20):
        d = 5
        mu_r, mu_g = rng.normal(size=d), rng.normal(size=d)
        var_r, var_g = rng.uniform(0.1, 3, d), rng.uniform(0.1, 3, d)
        want = sum((mu_r[k] - mu_g[k]) ** 2 + (np.sqrt(var_r[k]) - np.sqrt(var_g[k])) ** 2 for k in range(d))
        got = fid(FeatureStats(mu_r, np.diag(var_r), 10), FeatureStats(mu_g, np.diag(var_g), 10))
        assert got == pytest.approx(want, abs=1e-9)


def test_fid_matches_general_sqrtm(rng):
    x = rng.normal(size=(300, 4))
    y = rng.normal(size=(300, 4)) @ rng.normal(size=(4, 4))
    a, b = FeatureStats.from_features(x), FeatureStats.from_features(y)
    covmean = scipy.linalg.sqrtm(a.covariance @ b.covariance).real
    diff = a.mean - b.mean
    want = diff @ diff + np.trace(a.covariance + b.covariance - 2 * covmean)
    assert fid(a, b) == pytest.approx(want, rel=1e-8)


def test_sqrtm_clamp_small_on_well_conditioned(rng):
    a = np.cov(rng.normal(size=(100, 5)), rowvar=False)
    b = np.cov(rng.normal(size=(100, 5)), rowvar=False)
    _, clamp = sqrtm_psd_product(a, b)
    assert clamp < 1e-3


def test_feature_stats_two_pass(rng):
    feats = rng.normal(3.0, 2.0, size=(50, 3))
    s = FeatureStats.from_features(feats)
    mean = feats.sum(axis=0) / 50
    centred = feats - mean
    cov = np.zeros((3, 3))
    for row in centred:
        cov += np.outer(row, row)
    cov /= 49
    np.testing.assert_allclose(s.mean, mean, atol=1e-12)
    np.testing.assert_allclose(s.covariance, cov, atol=1e-12)
    with pytest.raises(ValueError):
        FeatureStats.from_features(feats[:1])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_fid_nonnegative(d, seed):
    r = np.random.default_rng(seed)
    a = FeatureStats.from_features(r.normal(size=(d + 3, d)))
    b = FeatureStats.from_features(r.normal(size=(d + 3, d)) * 2)
    assert fid(a, b) >= 0


def test_pixel_features(rng):
    imgs = rng.integers(0, 256, size=(4, 16, 16, 3), dtype=np.uint8)
    f = pooled_pixel_features(imgs)
    assert f.shape == (4, 4 * 4 * 3 + 6)
    np.testing.assert_allclose(pooled_pixel_features(imgs.astype(np.float32) / 255), f, atol=1e-4)
    np.testing.assert_allclose(f[:, -6:-3], imgs.reshape(4, -1, 3).mean(axis=1))
    with pytest.raises(ValueError):
        pooled_pixel_features(imgs[:, :15, :15])
    s = extract_features(imgs)
    assert s.extractor == "pixels" and s.sample_count == 4
    with pytest.raises(ValueError):
        get_extractor("nope")
