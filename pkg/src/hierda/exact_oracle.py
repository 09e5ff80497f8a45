"""Exact posterior for the linear-Gaussian 1D problem (marginal-then-conditional).

With a linear observer ``d = G_m m + e`` and ``m = m_pr + L(theta) z``, the
hyperparameter marginal is available in closed form,

    p(d | theta) = N(d; G_m m_pr, G_m L L^T G_m^T + C_d),

so the two hyperparameters are gridded, and ``z`` is then drawn from its
Gaussian conditional given ``theta`` and ``d``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy import integrate

from .field_model import Field, HyperParams

__all__ = [
    "HyperGrid",
    "log_marginal_likelihood",
    "posterior_hyper_grid",
    "conditional_z_sample",
    "mtc_sample",
    "write_hypergrid_csv",
    "read_hypergrid_csv",
    "ks_distance",
]

_LOG2PI = np.log(2.0 * np.pi)


def _theta_array(problem, theta) -> np.ndarray:
    if isinstance(theta, HyperParams):
        return np.array([theta[n] for n in problem.free_names])
    return np.asarray(theta, dtype=float)


def _require_linear(problem):
    if problem.observer_jacobian is None:
        raise ValueError("the exact oracle needs a linear observer (observer_jacobian)")
    if problem.prior is None or len(problem.free_names) != 2 or "phi" in problem.free_names:
        raise ValueError("the exact oracle grids exactly two Gaussian hyperparameters")


def _operator_at(problem, theta):
    x = np.concatenate([np.zeros(problem.grid.size), theta])
    return problem.operator(x).L


def log_marginal_likelihood(theta, problem) -> float:
    """``log N(d_obs; G_m m_pr, G_m L L^T G_m^T + C_d)`` via a Cholesky factor."""
    _require_linear(problem)
    G = problem.observer_jacobian
    GL = G @ _operator_at(problem, _theta_array(problem, theta))
    C = GL @ GL.T
    C[np.diag_indices_from(C)] += problem.obs.noise_std**2
    r = problem.obs.d_obs - G @ problem.m_pr
    try:
        cf = sla.cho_factor(C, lower=True)
    except sla.LinAlgError as exc:
        raise np.linalg.LinAlgError("data covariance is not positive definite") from exc
    alpha = sla.cho_solve(cf, r)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return float(-0.5 * (r @ alpha + logdet + r.size * _LOG2PI))


@dataclass(frozen=True)
class HyperGrid:
    """Hyperparameter posterior tabulated on a tensor grid.

    ``density`` integrates to one under the trapezoid rule; ``weights`` are
    the corresponding quadrature masses (non-negative, summing to one).
    """

    names: tuple[str, str]
    axes: tuple[np.ndarray, np.ndarray]
    log_post: np.ndarray  # unnormalized log p(d|theta) + log p(theta)
    density: np.ndarray
    weights: np.ndarray

    def marginal(self, k: int) -> np.ndarray:
        """Marginal density of hyperparameter ``k`` on its axis."""
        other = self.axes[1 - k]
        return integrate.trapezoid(self.density, other, axis=1 - k)

    def marginal_cdf(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        ax = self.axes[k]
        cdf = integrate.cumulative_trapezoid(self.marginal(k), ax, initial=0.0)
        return ax, cdf / cdf[-1]

    def mean(self, k: int) -> float:
        ax = self.axes[k]
        return float(integrate.trapezoid(ax * self.marginal(k), ax))

    def std(self, k: int) -> float:
        ax = self.axes[k]
        mu = self.mean(k)
        return float(np.sqrt(integrate.trapezoid((ax - mu) ** 2 * self.marginal(k), ax)))


def _trapezoid_weights(ax: np.ndarray) -> np.ndarray:
    h = np.diff(ax)
    w = np.zeros_like(ax)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


def posterior_hyper_grid(problem, resolution: int = 101, width: float = 4.0, use_data: bool = True) -> HyperGrid:
    """Tabulate the hyperparameter posterior over ``prior mean +/- width * prior sd``.

    The marginal likelihood is linear in ``sigma^2`` for a fixed range, so
    each range needs one small eigendecomposition and the ``sigma`` axis is
    then evaluated in closed form. ``use_data=False`` returns the prior.
    """
    _require_linear(problem)
    if resolution < 50:
        raise ValueError("resolution must be >= 50 per axis")
    prior = problem.prior
    names = problem.free_names
    axes = tuple(
        np.linspace(prior.means[n] - width * prior.stds[n], prior.means[n] + width * prior.stds[n], resolution)
        for n in names
    )
    log_prior = sum(
        np.expand_dims(-0.5 * ((axes[k] - prior.means[n]) / prior.stds[n]) ** 2, 1 - k) for k, n in enumerate(names)
    )
    loglik = np.zeros((resolution, resolution))
    if use_data:
        loglik = _grid_loglik(problem, names, axes)
    log_post = log_prior + loglik
    dens = np.exp(log_post - log_post.max())
    w2 = np.outer(_trapezoid_weights(axes[0]), _trapezoid_weights(axes[1]))
    total = np.sum(dens * w2)
    return HyperGrid(tuple(names), axes, log_post, dens / total, dens * w2 / total)


def _grid_loglik(problem, names, axes) -> np.ndarray:
    if "log_sigma" not in names:
        out = np.empty((axes[0].size, axes[1].size))
        for a, t0 in enumerate(axes[0]):
            for b, t1 in enumerate(axes[1]):
                out[a, b] = log_marginal_likelihood([t0, t1], problem)
        return out
    ks = names.index("log_sigma")
    ko = 1 - ks
    G = problem.observer_jacobian
    s = problem.obs.noise_std
    r = (problem.obs.d_obs - G @ problem.m_pr) / s
    n_d = r.size
    const = -0.5 * n_d * _LOG2PI - np.sum(np.log(s))
    sig2 = np.exp(2.0 * axes[ks])
    out = np.empty((axes[0].size, axes[1].size))
    for j, t in enumerate(axes[ko]):
        theta = np.zeros(2)
        theta[ks], theta[ko] = 0.0, t  # unit sigma
        B = G @ _operator_at(problem, theta) / s[:, None]
        lam, Q = np.linalg.eigh(B @ B.T)
        lam = np.maximum(lam, 0.0)
        proj = (Q.T @ r) ** 2
        ev = 1.0 + np.outer(sig2, lam)  # (n_sigma, n_d)
        col = const - 0.5 * (np.sum(proj / ev, axis=1) + np.sum(np.log(ev), axis=1))
        if ks == 0:
            out[:, j] = col
        else:
            out[j, :] = col
    return out


def conditional_z_sample(theta, problem, rng, size: int | None = None):
    """Draw ``z | theta, d`` exactly (prior draw corrected by a perturbed-data update).

    Mean ``L^T G^T C^{-1}(d - G m_pr)``, covariance ``I - L^T G^T C^{-1} G L``
    with ``C = G L L^T G^T + C_d``. Returns a :class:`Field` (or an array of
    shape ``(size, n_cells)``).
    """
    _require_linear(problem)
    G = problem.observer_jacobian
    L = _operator_at(problem, _theta_array(problem, theta))
    GL = G @ L
    C = GL @ GL.T
    std = problem.obs.noise_std
    C[np.diag_indices_from(C)] += std**2
    cf = sla.cho_factor(C, lower=True)
    n = 1 if size is None else int(size)
    z0 = rng.standard_normal((n, problem.grid.size))
    e = rng.standard_normal((n, std.size)) * std
    resid = (problem.obs.d_obs - G @ problem.m_pr)[None, :] - z0 @ GL.T - e
    z = z0 + sla.cho_solve(cf, resid.T).T @ GL
    if size is None:
        return Field(problem.grid, z[0])
    return z


def mtc_sample(problem, grid: HyperGrid, n: int, rng) -> np.ndarray:
    """Exact posterior draws of the full state ``(z, theta)``, shape ``(n, n_state)``.

    Hyperparameters are drawn from the grid masses and jittered uniformly
    within the grid cell; ``z`` is then drawn from its conditional.
    """
    flat = grid.weights.ravel()
    picks = rng.choice(flat.size, size=n, p=flat / flat.sum())
    ia, ib = np.unravel_index(picks, grid.weights.shape)
    h = [ax[1] - ax[0] for ax in grid.axes]
    theta = np.column_stack([
        grid.axes[0][ia] + h[0] * rng.uniform(-0.5, 0.5, n),
        grid.axes[1][ib] + h[1] * rng.uniform(-0.5, 0.5, n),
    ])
    out = np.empty((n, problem.layout.size))
    for k in range(n):
        out[k, : problem.grid.size] = conditional_z_sample(theta[k], problem, rng).values
        out[k, problem.grid.size :] = theta[k]
    return out


def ks_distance(samples, grid: HyperGrid, k: int) -> float:
    """Kolmogorov distance between a sample and the gridded marginal of hyperparameter ``k``."""
    x = np.sort(np.asarray(samples, dtype=float))
    ax, cdf = grid.marginal_cdf(k)
    F = np.interp(x, ax, cdf, left=0.0, right=1.0)
    n = x.size
    hi = np.arange(1, n + 1) / n - F
    lo = F - np.arange(n) / n
    return float(max(hi.max(), lo.max()))


def write_hypergrid_csv(path, grid: HyperGrid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([grid.names[0], grid.names[1], "weight", "density", "log_post"])
        for a, t0 in enumerate(grid.axes[0]):
            for b, t1 in enumerate(grid.axes[1]):
                w.writerow([repr(float(t0)), repr(float(t1)), repr(float(grid.weights[a, b])),
                            repr(float(grid.density[a, b])), repr(float(grid.log_post[a, b]))])


def read_hypergrid_csv(path) -> HyperGrid:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in r] for r in reader])
    ax0 = np.unique(rows[:, 0])
    ax1 = np.unique(rows[:, 1])
    shape = (ax0.size, ax1.size)
    return HyperGrid(
        (header[0], header[1]), (ax0, ax1),
        rows[:, 4].reshape(shape), rows[:, 3].reshape(shape), rows[:, 2].reshape(shape),
    )
