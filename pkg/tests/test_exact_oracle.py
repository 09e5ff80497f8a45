import numpy as np
import pytest
from scipy import stats

from hierda.exact_oracle import (
    conditional_z_sample,
    ks_distance,
    log_marginal_likelihood,
    mtc_sample,
    posterior_hyper_grid,
    read_hypergrid_csv,
    write_hypergrid_csv,
)
from hierda.field_model import HyperParams
from hierda.priors import HyperPrior
from hierda.problems import flow2d_benchmark, linear1d_benchmark


@pytest.fixture(scope="module")
def problem():
    return linear1d_benchmark(3, {"n_cells": 60, "obs_every": 4, "noise_std": 0.05}).problem


@pytest.fixture(scope="module")
def grid(problem):
    return posterior_hyper_grid(problem, resolution=61)


def test_log_marginal_likelihood_matches_scipy(problem):
    theta = np.array([0.1, np.log(0.12)])
    G = problem.observer_jacobian
    L = problem.operator(np.concatenate([np.zeros(60), theta])).L
    cov = G @ L @ L.T @ G.T + np.diag(problem.obs.noise_std**2)
    ref = stats.multivariate_normal(G @ problem.m_pr, cov).logpdf(problem.obs.d_obs)
    assert log_marginal_likelihood(theta, problem) == pytest.approx(ref, rel=1e-10)
    h = HyperParams(("log_sigma", "log_range"), theta)
    assert log_marginal_likelihood(h, problem) == log_marginal_likelihood(theta, problem)


def test_fast_grid_matches_direct_evaluation(problem, grid):
    prior = problem.prior
    for a, b in [(0, 0), (30, 12), (45, 50), (60, 60)]:
        t = np.array([grid.axes[0][a], grid.axes[1][b]])
        lp = sum(-0.5 * ((t[k] - prior.means[n]) / prior.stds[n]) ** 2 for k, n in enumerate(grid.names))
        assert grid.log_post[a, b] == pytest.approx(log_marginal_likelihood(t, problem) + lp, abs=1e-8)


def test_single_hyperparameter_rejected(problem):
    p = problem.with_prior(HyperPrior(("log_range",), {"log_range": -2.3}, {"log_range": 0.6}))
    with pytest.raises(ValueError):
        posterior_hyper_grid(p)


def test_grid_without_sigma_uses_direct_evaluation():
    """2D point data with the orientation fixed: one Cholesky per grid node."""
    from hierda.sensitivity import DEFAULT_SENSITIVITY, _point_problem

    cfg = {**DEFAULT_SENSITIVITY, "dims": [8, 6], "spacing": [0.125, 0.125], "obs_cell": [3, 2]}
    p = _point_problem(cfg)
    p = p.with_prior(HyperPrior(("log_rho", "log_alpha"), p.prior.means, p.prior.stds))
    g = posterior_hyper_grid(p, resolution=50)
    t = np.array([g.axes[0][7], g.axes[1][33]])
    lp = sum(-0.5 * ((t[k] - p.prior.means[n]) / p.prior.stds[n]) ** 2 for k, n in enumerate(g.names))
    assert g.log_post[7, 33] == pytest.approx(log_marginal_likelihood(t, p) + lp, abs=1e-10)
    assert g.weights.sum() == pytest.approx(1.0)


def test_grid_normalization(grid):
    assert grid.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(grid.weights >= 0)
    for k in (0, 1):
        ax, cdf = grid.marginal_cdf(k)
        assert cdf[0] == 0.0 and cdf[-1] == pytest.approx(1.0)
        assert np.all(np.diff(cdf) >= 0)


def test_prior_grid_reproduces_prior(problem):
    g = posterior_hyper_grid(problem, resolution=101, use_data=False)
    for k, n in enumerate(g.names):
        assert g.mean(k) == pytest.approx(problem.prior.means[n], abs=1e-8)
        assert g.std(k) == pytest.approx(problem.prior.stds[n], rel=1e-3)


def test_data_concentrates_the_posterior(problem, grid):
    for k, n in enumerate(grid.names):
        assert grid.std(k) < problem.prior.stds[n]


def test_resolution_guard(problem):
    with pytest.raises(ValueError):
        posterior_hyper_grid(problem, resolution=49)


def test_nonlinear_problem_rejected():
    fb = flow2d_benchmark(1, {"n_times": 2})
    with pytest.raises(ValueError):
        log_marginal_likelihood([0.0, 0.0], fb.problem)


def test_conditional_z_moments(problem):
    theta = np.array([0.0, np.log(0.1)])
    rng = np.random.default_rng(0)
    Z = conditional_z_sample(theta, problem, rng, size=20_000)
    G = problem.observer_jacobian
    GL = G @ problem.operator(np.concatenate([np.zeros(60), theta])).L
    C = GL @ GL.T + np.diag(problem.obs.noise_std**2)
    K = np.linalg.solve(C, GL).T
    mean = K @ (problem.obs.d_obs - G @ problem.m_pr)
    cov = np.eye(60) - K @ GL
    assert np.max(np.abs(Z.mean(axis=0) - mean)) < 0.04
    assert np.max(np.abs(np.cov(Z.T) - cov)) < 0.04
    single = conditional_z_sample(theta, problem, np.random.default_rng(1))
    assert single.values.shape == (60,)


def test_mtc_hyper_draws_follow_grid(problem, grid):
    rng = np.random.default_rng(5)
    S = mtc_sample(problem, grid, 2000, rng)
    assert S.shape == (2000, 62)
    for k in (0, 1):
        assert ks_distance(S[:, 60 + k], grid, k) < 0.04


def test_ks_distance_oracle(problem):
    g = posterior_hyper_grid(problem, resolution=201, use_data=False)
    mu, sd = problem.prior.means["log_sigma"], problem.prior.stds["log_sigma"]
    x = np.random.default_rng(2).normal(mu, sd, 500)
    ref = stats.kstest(x, stats.norm(mu, sd).cdf).statistic
    assert ks_distance(x, g, 0) == pytest.approx(ref, abs=2e-3)
    assert ks_distance(x + 3 * sd, g, 0) > 0.8


def test_hypergrid_csv_round_trip(tmp_path, grid):
    write_hypergrid_csv(tmp_path / "g.csv", grid)
    back = read_hypergrid_csv(tmp_path / "g.csv")
    assert back.names == grid.names
    for a, b in zip(back.axes, grid.axes):
        assert np.array_equal(a, b)
    assert np.array_equal(back.weights, grid.weights)
    assert np.array_equal(back.log_post, grid.log_post)
