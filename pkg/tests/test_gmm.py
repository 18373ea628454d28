import math

import numpy as np
import pytest
from scipy.special import ndtr

from tasc.gmm import (MODE_ALL_UNKNOWN, MODE_DISABLED, MODE_INTERSECTION,
                      GmmParams, Threshold, fit_gmm, intersection_threshold,
                      predict_known, select_threshold)


def _two_gaussian_scores(rng, n_k=700, n_u=300, mu_k=1.0, mu_u=0.0, sigma=0.2):
    return np.concatenate([rng.normal(mu_k, sigma, n_k),
                           rng.normal(mu_u, sigma, n_u)])


def _grid_balanced_error_minimizer(params, step=1e-4):
    # independent brute-force oracle over [mu_u, mu_k]
    grid = np.arange(params.mu_u, params.mu_k + step, step)
    err = 0.5 * (ndtr((grid - params.mu_k) / params.sigma_k)
                 + 1.0 - ndtr((grid - params.mu_u) / params.sigma_u))
    return grid[int(np.argmin(err))]


def test_em_loglik_non_decreasing():
    rng = np.random.default_rng(0)
    for trial in range(10):
        scores = _two_gaussian_scores(rng, mu_k=rng.uniform(0.5, 2.0),
                                      sigma=rng.uniform(0.1, 0.5))
        _, trace = fit_gmm(scores, (0.7, 0.3))
        diffs = np.diff(trace)
        assert (diffs >= -1e-9).all()


@pytest.mark.parametrize("seed", range(5))
def test_parameter_recovery(seed):
    rng = np.random.default_rng(seed)
    scores = _two_gaussian_scores(rng)
    params, _ = fit_gmm(scores, (0.7, 0.3))
    assert params.mu_k == pytest.approx(1.0, abs=0.05)
    assert params.mu_u == pytest.approx(0.0, abs=0.05)
    assert params.sigma_k == pytest.approx(0.2, abs=0.05)
    assert params.sigma_u == pytest.approx(0.2, abs=0.05)


def test_true_weights_beat_uniform_on_imbalanced_mixture():
    # overlapping components, 70/30 imbalance: the fixed true proportion must
    # estimate the means at least as well as uniform weights on average
    errs_true, errs_uniform = [], []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        scores = np.concatenate([rng.normal(0.8, 0.25, 700),
                                 rng.normal(0.0, 0.25, 300)])
        for weights, errs in (((0.7, 0.3), errs_true), ((0.5, 0.5), errs_uniform)):
            params, _ = fit_gmm(scores, weights)
            errs.append(abs(params.mu_k - 0.8) + abs(params.mu_u - 0.0))
    assert np.mean(errs_true) <= np.mean(errs_uniform) + 1e-9


def test_fit_gmm_zero_weight_signals_disabled():
    rng = np.random.default_rng(0)
    params, trace = fit_gmm(rng.normal(0, 1, 100), (1.0, 0.0))
    assert params is None
    assert trace == []


def test_fit_gmm_too_few_scores():
    with pytest.raises(ValueError):
        fit_gmm(np.arange(5, dtype=float), (0.5, 0.5))


def test_fit_gmm_degenerate_scores():
    with pytest.raises(ValueError):
        fit_gmm(np.full(50, 3.14), (0.5, 0.5))


def test_fit_gmm_sigma_floor():
    rng = np.random.default_rng(1)
    scores = np.concatenate([np.full(50, 1.0), rng.normal(0, 0.1, 50)])
    params, _ = fit_gmm(scores, (0.5, 0.5))
    assert params.sigma_k >= 1e-4
    assert params.sigma_u >= 1e-4


def test_fit_gmm_component_order():
    rng = np.random.default_rng(2)
    params, _ = fit_gmm(_two_gaussian_scores(rng), (0.7, 0.3))
    assert params.mu_k >= params.mu_u
    assert params.p_k + params.p_u == pytest.approx(1.0, abs=1e-9)


def test_intersection_equal_sigma_midpoint():
    params = GmmParams(p_k=0.5, p_u=0.5, mu_k=2.0, mu_u=0.0,
                       sigma_k=0.3, sigma_u=0.3)
    thr = intersection_threshold(params)
    assert thr.mode == MODE_INTERSECTION
    assert thr.gamma == pytest.approx(1.0, abs=1e-12)


def test_intersection_unequal_sigma_against_grid():
    params = GmmParams(p_k=0.5, p_u=0.5, mu_k=3.0, mu_u=0.0,
                       sigma_k=2.0, sigma_u=1.0)
    thr = intersection_threshold(params)
    assert thr.mode == MODE_INTERSECTION
    assert 0.0 < thr.gamma < 3.0
    oracle = _grid_balanced_error_minimizer(params)
    assert abs(thr.gamma - oracle) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_intersection_matches_balanced_error_oracle(seed):
    # sigmas large enough that the components genuinely overlap, so the
    # balanced error has a unique minimum visible at grid resolution
    rng = np.random.default_rng(seed)
    mu_u = rng.uniform(-1.0, 0.0)
    gap = rng.uniform(0.5, 3.0)
    params = GmmParams(
        p_k=0.5, p_u=0.5, mu_k=mu_u + gap, mu_u=mu_u,
        sigma_k=float(rng.uniform(0.15, 0.35) * gap),
        sigma_u=float(rng.uniform(0.15, 0.35) * gap))
    thr = intersection_threshold(params)
    assert thr.mode == MODE_INTERSECTION
    oracle = _grid_balanced_error_minimizer(params)
    assert abs(thr.gamma - oracle) <= 1e-4


def test_shift_equivariance():
    rng = np.random.default_rng(3)
    scores = _two_gaussian_scores(rng)
    c = 7.25
    p1, _ = fit_gmm(scores, (0.7, 0.3))
    p2, _ = fit_gmm(scores + c, (0.7, 0.3))
    assert p2.mu_k == pytest.approx(p1.mu_k + c, abs=1e-6)
    assert p2.mu_u == pytest.approx(p1.mu_u + c, abs=1e-6)
    t1 = intersection_threshold(p1)
    t2 = intersection_threshold(p2)
    assert t2.gamma == pytest.approx(t1.gamma + c, abs=1e-6)
    assert np.array_equal(predict_known(scores, t1),
                          predict_known(scores + c, t2))


def test_predict_known_boundary_and_modes():
    thr = Threshold(gamma=0.5, mode=MODE_INTERSECTION)
    assert predict_known(np.array([0.5]), thr)[0]  # score == gamma: known
    assert not predict_known(np.array([0.499]), thr)[0]
    scores = np.array([-1.0, 0.0, 1.0])
    assert predict_known(scores, Threshold(-math.inf, MODE_DISABLED)).all()
    assert not predict_known(scores, Threshold(math.inf, MODE_ALL_UNKNOWN)).any()


def test_predict_known_matches_comparison_oracle():
    rng = np.random.default_rng(4)
    scores = rng.standard_normal(200)
    thr = Threshold(gamma=0.1, mode=MODE_INTERSECTION)
    assert np.array_equal(predict_known(scores, thr), scores >= 0.1)


def test_select_threshold_degenerate_counts():
    rng = np.random.default_rng(5)
    scores = rng.standard_normal(100)
    report = select_threshold(scores, k_com=10, k_pri=0)
    assert report.threshold.mode == MODE_DISABLED
    assert report.params is None
    report = select_threshold(scores, k_com=0, k_pri=10)
    assert report.threshold.mode == MODE_ALL_UNKNOWN
    with pytest.raises(ValueError):
        select_threshold(scores, k_com=0, k_pri=0)


def test_select_threshold_clamps_extreme_proportion():
    rng = np.random.default_rng(6)
    scores = _two_gaussian_scores(rng)
    report = select_threshold(scores, k_com=500, k_pri=1)
    assert report.weights[1] == pytest.approx(0.01)
    assert report.params is not None


def test_select_threshold_full_path():
    rng = np.random.default_rng(7)
    scores = _two_gaussian_scores(rng)
    report = select_threshold(scores, k_com=7, k_pri=3)
    assert report.threshold.mode == MODE_INTERSECTION
    assert report.params.mu_u < report.threshold.gamma < report.params.mu_k
    mask = predict_known(scores, report.threshold)
    # roughly the right proportion detected
    assert 0.6 < mask.mean() < 0.8
