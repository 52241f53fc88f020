import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priordetr import gmm
from priordetr.gmm import GmmPrior2D

TRUTH = GmmPrior2D(
    weights=np.array([0.5, 0.3, 0.2]),
    means=np.array([[1.0, 2.8], [0.6, 3.3], [1.5, 2.3]]),
    covs=np.array([
        [[0.010, 0.002], [0.002, 0.020]],
        [[0.006, -0.001], [-0.001, 0.015]],
        [[0.015, 0.000], [0.000, 0.010]],
    ]),
)


def draw_from(prior, n, seed):
    return gmm.sample(prior, np.random.default_rng(seed), n)


def test_em_recovers_known_mixture():
    x = draw_from(TRUTH, 5000, seed=1)
    fit = gmm.fit_em(x, M=3, seed=0)
    perm = gmm.align_components(fit.means, TRUTH.means)
    assert np.abs(fit.means[perm] - TRUTH.means).max() < 0.05
    assert np.abs(fit.weights[perm] - TRUTH.weights).max() < 0.03


def test_em_single_component_is_closed_form():
    x = np.random.default_rng(2).normal(size=(200, 2)) * [0.3, 0.5] + [1.0, 3.0]
    x[:, 0] = np.abs(x[:, 0])
    fit = gmm.fit_em(x, M=1, seed=0)
    np.testing.assert_allclose(fit.means[0], x.mean(axis=0), atol=1e-10)
    np.testing.assert_allclose(fit.covs[0], np.cov(x.T, bias=True), atol=1e-10)


def test_em_infinite_tol_stops_after_one_iteration():
    x = draw_from(TRUTH, 300, seed=3)
    fit = gmm.fit_em(x, M=3, tol=np.inf, seed=0)
    assert len(fit.ll_trace) == 2
    # weights were uniform before the single update
    assert not np.allclose(fit.weights, 1 / 3)


@pytest.mark.parametrize("seed", range(5))
def test_em_log_likelihood_is_monotone(seed):
    x = draw_from(TRUTH, 800, seed=10 + seed)
    trace = np.array(gmm.fit_em(x, M=3, seed=seed, tol=1e-12, max_iter=100).ll_trace)
    assert (np.diff(trace) >= -1e-9).all()


def test_em_invariants_hold_every_iteration():
    x = draw_from(TRUTH, 600, seed=4)
    for iters in range(1, 8):
        fit = gmm.fit_em(x, M=3, seed=1, max_iter=iters, tol=-np.inf)
        assert abs(fit.weights.sum() - 1) < 1e-12 and (fit.weights >= 0).all()
        for cov in fit.covs:
            np.linalg.cholesky(cov)
            np.testing.assert_allclose(cov, cov.T)


def test_em_degenerate_input_warns(caplog):
    x = np.tile([[1.0, 2.5]], (40, 1))
    with caplog.at_level(logging.WARNING):
        fit = gmm.fit_em(x, M=3)
    assert "identical" in caplog.text
    assert fit.M == 1
    np.testing.assert_array_equal(fit.means[0], [1.0, 2.5])
    np.testing.assert_allclose(fit.covs[0], gmm.COV_FLOOR * np.eye(2))


def test_em_preconditions():
    with pytest.raises(ValueError, match="at least 30"):
        gmm.fit_em(np.ones((29, 2)), M=3)
    bad = draw_from(TRUTH, 100, 0)
    bad[0, 0] = -1.0
    with pytest.raises(ValueError, match="positive"):
        gmm.fit_em(bad, M=3)


# -- sampling --------------------------------------------------------------

def test_point_mass_samples_equal_mean():
    prior = GmmPrior2D(np.ones(1), np.array([[1.2, 3.0]]), np.zeros((1, 2, 2)))
    s = gmm.sample(prior, np.random.default_rng(0), 50)
    np.testing.assert_array_equal(s, np.tile([1.2, 3.0], (50, 1)))


def test_sample_mean_matches_mixture_mean():
    n = 100_000
    s = gmm.sample(TRUTH, np.random.default_rng(5), n)
    mean_r = TRUTH.mixture_mean()[0]
    # mixture variance of r: E[var] + var of component means
    var_r = TRUTH.weights @ (TRUTH.covs[:, 0, 0] + TRUTH.means[:, 0] ** 2) - mean_r ** 2
    assert abs(s[:, 0].mean() - mean_r) < 3 * np.sqrt(var_r / n)


def test_sample_is_deterministic_under_seed():
    a = gmm.sample(TRUTH, np.random.default_rng(9), 20)
    b = gmm.sample(TRUTH, np.random.default_rng(9), 20)
    np.testing.assert_array_equal(a, b)


def test_sample_rejects_empty_group():
    with pytest.raises(ValueError):
        gmm.sample(TRUTH, np.random.default_rng(0), 0)


# -- normalization -----------------------------------------------------------

def test_normalize_fixed_point():
    f = gmm.normalize_factors(1.0, np.log(17.0), w_ref=17.0)
    assert f.w_tilde == pytest.approx(1.0, abs=1e-15)
    assert f.r_tilde == 1.0


def test_normalize_saturates_at_bound():
    f = gmm.normalize_factors(100.0, 50.0, w_ref=10.0)
    assert f.w_tilde == gmm.W_BOUNDS[1]
    assert f.r_tilde == gmm.R_BOUNDS[1]


def test_normalize_rejects_non_finite():
    with pytest.raises(ValueError):
        gmm.normalize_factors(np.nan, 1.0, w_ref=1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 200.0))
def test_sample_normalize_within_bounds(seed, w_ref):
    rng = np.random.default_rng(seed)
    prior = gmm.random_prior(rng)
    s = gmm.sample(prior, rng, 16)
    f = gmm.normalize_factors(s[:, 0], s[:, 1], w_ref)
    assert np.isfinite(f.r_tilde).all() and np.isfinite(f.w_tilde).all()
    assert (f.w_tilde >= gmm.W_BOUNDS[0]).all() and (f.w_tilde <= gmm.W_BOUNDS[1]).all()
    assert (f.r_tilde >= gmm.R_BOUNDS[0]).all() and (f.r_tilde <= gmm.R_BOUNDS[1]).all()


# -- density -----------------------------------------------------------------

def test_standard_normal_log_density_at_mean():
    prior = GmmPrior2D(np.ones(1), np.zeros((1, 2)), np.eye(2)[None])
    assert gmm.log_likelihood(prior, np.zeros((3, 2))) == pytest.approx(-np.log(2 * np.pi), abs=1e-14)


def test_mixture_dominates_weighted_components():
    x = draw_from(TRUTH, 500, seed=8)
    total = gmm.log_density(TRUTH, x)
    per = gmm.weighted_log_densities(TRUTH, x)
    assert (total[:, None] >= per - 1e-12).all()


def test_log_density_stable_far_from_all_components():
    far = np.array([[50.0, -40.0]])
    assert np.isfinite(gmm.log_density(TRUTH, far)).all()


def test_prior_json_roundtrip(tmp_path):
    path = tmp_path / "prior.json"
    prior = GmmPrior2D(TRUTH.weights, TRUTH.means, TRUTH.covs, w_ref=14.5)
    gmm.save_prior(path, prior)
    data = json.loads(path.read_text())
    assert set(data) == {"M", "weights", "means", "covs", "w_ref"}
    assert gmm.load_prior(path) == prior


def test_invalid_prior_rejected():
    with pytest.raises(ValueError, match="simplex"):
        GmmPrior2D(np.array([0.5, 0.6]), np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    with pytest.raises(ValueError, match="semi-definite"):
        GmmPrior2D(np.ones(1), np.zeros((1, 2)), -np.eye(2)[None])
