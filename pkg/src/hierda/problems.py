"""Hierarchical inverse problems and the two benchmark set-ups.

A :class:`HierarchicalProblem` couples the non-centred parameterization
``m = m_pr + L(theta) z`` to a forward model and an observation set. The
free hyperparameters are those named by ``prior``; the rest are taken from
``fixed`` (a non-hierarchical problem has ``prior=None`` and state ``z``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .covariance import AnisoParams, CovOperator, KernelFamily, assemble_Mx, build_L
from .field_model import GridSpec, HyperParams, StateLayout, normalize_angle
from .flow import FlowModel, default_flow_model, simulate_flow
from .forward import LinearObserver, ObsSet, generate_truth_and_data
from .priors import HyperPrior

__all__ = [
    "HierarchicalProblem",
    "hyper_names_for",
    "kernel_params",
    "LinearBenchmark",
    "FlowBenchmark",
    "linear1d_benchmark",
    "flow2d_benchmark",
    "DEFAULT_1D",
    "DEFAULT_2D",
    "TRUTH_STREAMS",
]


def hyper_names_for(family: KernelFamily) -> tuple[str, ...]:
    return ("log_rho", "log_alpha", "phi") if family.ndim == 2 else ("log_sigma", "log_range")


def kernel_params(family: KernelFamily, hyper: HyperParams):
    """Map log-scale hyperparameters to ``(family with sigma, kernel params)``."""
    if family.ndim == 2:
        return family, AnisoParams(np.exp(hyper["log_rho"]), np.exp(hyper["log_alpha"]), hyper["phi"])
    return family.with_sigma(np.exp(hyper["log_sigma"])), float(np.exp(hyper["log_range"]))


@dataclass
class HierarchicalProblem:
    grid: GridSpec
    family: KernelFamily
    m_pr: np.ndarray
    obs: ObsSet
    forward: Callable[[np.ndarray], np.ndarray]
    fixed: HyperParams
    prior: HyperPrior | None = None
    observer_jacobian: np.ndarray | None = None  # exact G_m for linear observers
    data_coords: np.ndarray | None = None  # (n_data, ndim) anchors for localization
    backend: str | None = None

    def __post_init__(self):
        self.m_pr = np.broadcast_to(np.asarray(self.m_pr, dtype=float), (self.grid.size,)).copy()
        full = hyper_names_for(self.family)
        if tuple(self.fixed.names) != full:
            raise ValueError(f"fixed hyperparameters must be named {full}")
        if self.prior is not None:
            order = [n for n in full if n in self.prior.names]
            if tuple(order) != self.prior.names or not order:
                raise ValueError(f"prior names must be an ordered subset of {full}")

    # --------------------------------------------------------------- layout
    @property
    def free_names(self) -> tuple[str, ...]:
        return self.prior.names if self.prior is not None else ()

    @property
    def layout(self) -> StateLayout:
        return StateLayout(self.grid.size, self.free_names)

    @property
    def n_data(self) -> int:
        return self.obs.n_data

    def hyper_of(self, x) -> HyperParams:
        x = np.asarray(x, dtype=float)
        lay = self.layout
        vals = dict(zip(self.fixed.names, self.fixed.values))
        for k, n in enumerate(lay.hyper_names):
            vals[n] = x[lay.n_cells + k]
        return HyperParams(self.fixed.names, [vals[n] for n in self.fixed.names])

    def operator(self, x, derivatives: bool = False) -> CovOperator:
        fam, p = kernel_params(self.family, self.hyper_of(x))
        return build_L(self.grid, fam, p, derivatives=derivatives, backend=self.backend)

    def m_of(self, x, cov: CovOperator | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        cov = cov or self.operator(x)
        return self.m_pr + cov.L @ x[: self.grid.size]

    def Mx(self, x, cov: CovOperator | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if cov is None or (self.free_names and not cov.derivatives):
            cov = self.operator(x, derivatives=bool(self.free_names))
        return assemble_Mx(cov, x[: self.grid.size], self.free_names)

    def predict(self, x) -> np.ndarray:
        return np.asarray(self.forward(self.m_of(x)), dtype=float)

    # ----------------------------------------------------- whitened geometry
    def cx_sqrt(self) -> np.ndarray:
        if self.prior is None:
            return np.ones(self.grid.size)
        return self.prior.cx_sqrt(self.layout)

    def prior_residual(self, x, anchor) -> np.ndarray:
        """``C_x^{-1/2}`` times the prior residual (circular for ``phi``)."""
        x = np.asarray(x, dtype=float)
        anchor = np.asarray(anchor, dtype=float)
        if self.prior is None:
            return x - anchor
        return self.prior.whitened_residual(x, anchor, self.layout)

    def anomalies(self, X) -> np.ndarray:
        """Whitened ensemble anomalies ``(X - mean)/sqrt(N-1)``, shape (n_state, N).

        Orientation anomalies are wrapped about the circular (axial) mean.
        """
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        A = X - X.mean(axis=0)
        if "phi" in self.free_names:
            k = self.layout.index_of("phi")
            mean = 0.5 * np.angle(np.mean(np.exp(2j * X[:, k])))
            A[:, k] = normalize_angle(X[:, k] - mean)
        return (A / self.cx_sqrt()).T / np.sqrt(n - 1)

    def apply_step(self, x, dw) -> np.ndarray:
        x = np.asarray(x, dtype=float) + self.cx_sqrt() * np.asarray(dw, dtype=float)
        if "phi" in self.free_names:
            k = self.layout.index_of("phi")
            x[k] = normalize_angle(x[k])
        return x

    def data_residual(self, d_pred, eps) -> np.ndarray:
        """``C_d^{-1/2} (g + eps' - d_obs)``."""
        return (np.asarray(d_pred) + np.asarray(eps) - self.obs.d_obs) / self.obs.noise_std

    def with_prior(self, prior: HyperPrior | None, fixed: HyperParams | None = None) -> "HierarchicalProblem":
        return replace(self, prior=prior, fixed=fixed or self.fixed)


# ------------------------------------------------------------------ benchmarks

# seed-stream tags for the truth/data draws of each benchmark
TRUTH_STREAMS = {"linear1d": 7919, "flow2d": 104729}

DEFAULT_1D = {
    "n_cells": 150,
    "interval": [0.0, 1.0],
    "obs_every": 4,
    "obs_start": 0,
    "noise_std": 0.01,
    "truth": {"sigma": 1.08, "range": 0.100},
    "prior": {"log_sigma": [-0.22, 0.5], "log_range": [-2.3, 0.6]},
    "m_prior_mean": 0.0,
}

DEFAULT_2D = {
    "dims": [30, 15],
    "spacing": [1 / 30, 1 / 30],
    "sigma": 2.0,
    "truth": {"rho": 1.0, "alpha": 6.0, "phi": 0.93},
    "prior": {"log_rho": [-0.2, 0.25], "log_alpha": [1.6, 0.25], "mu_phi": 0.8, "kappa": 10.0},
    "noise_std": 0.02,
    "n_times": 80,
    "t_end": 0.5,
    "m_prior_mean": 0.0,
    "porosity": 0.2,
}


@dataclass
class LinearBenchmark:
    problem: HierarchicalProblem
    truth: np.ndarray
    observer: LinearObserver
    config: dict = field(default_factory=dict)


def linear1d_benchmark(seed: int, overrides: dict | None = None) -> LinearBenchmark:
    """1D lattice on [0, 1], Gaussian covariance, every k-th cell observed."""
    cfg = {**DEFAULT_1D, **(overrides or {})}
    grid = GridSpec.on_interval(int(cfg["n_cells"]), *cfg["interval"])
    family = KernelFamily("gaussian1d", 1.0)
    observer = LinearObserver.every_kth(grid.size, int(cfg["obs_every"]), float(cfg["noise_std"]), int(cfg["obs_start"]))
    rng = np.random.default_rng([int(seed), TRUTH_STREAMS["linear1d"]])
    truth_family = family.with_sigma(cfg["truth"]["sigma"])
    truth, obs = generate_truth_and_data(
        grid, truth_family, cfg["truth"]["range"], cfg["m_prior_mean"], observer,
        cfg["noise_std"], rng, meta={"cell": np.array(observer.obs_indices)},
    )
    pr = cfg["prior"]
    prior = HyperPrior(
        ("log_sigma", "log_range"),
        means={k: v[0] for k, v in pr.items()},
        stds={k: v[1] for k, v in pr.items()},
    )
    fixed = HyperParams(("log_sigma", "log_range"), (np.log(cfg["truth"]["sigma"]), np.log(cfg["truth"]["range"])))
    coords = grid.coords()[list(observer.obs_indices)]
    problem = HierarchicalProblem(
        grid, family, np.full(grid.size, float(cfg["m_prior_mean"])), obs, observer, fixed,
        prior=prior, observer_jacobian=observer.jacobian(), data_coords=coords,
    )
    return LinearBenchmark(problem, truth.values, observer, cfg)


@dataclass
class FlowBenchmark:
    problem: HierarchicalProblem
    truth: np.ndarray
    model: FlowModel
    truth_hyper: HyperParams
    config: dict = field(default_factory=dict)

    def fixed_problem(self, phi_shift: float = 0.0) -> HierarchicalProblem:
        """Non-hierarchical variant using the data-generating covariance, optionally rotated."""
        h = self.truth_hyper.replace(phi=self.truth_hyper["phi"] + phi_shift)
        return self.problem.with_prior(None, h)


def flow2d_benchmark(seed: int, overrides: dict | None = None, backend=None) -> FlowBenchmark:
    """30 x 15 waterflood with anisotropic Gaussian log-permeability."""
    cfg = {**DEFAULT_2D, **(overrides or {})}
    grid = GridSpec(tuple(cfg["dims"]), tuple(cfg["spacing"]))
    family = KernelFamily("gaussian2d", float(cfg["sigma"]))
    model = default_flow_model(grid, n_times=int(cfg["n_times"]), t_end=float(cfg["t_end"]), porosity=float(cfg["porosity"]))
    tr = cfg["truth"]
    truth_hyper = HyperParams(("log_rho", "log_alpha", "phi"), (np.log(tr["rho"]), np.log(tr["alpha"]), tr["phi"]))
    _, p_true = kernel_params(family, truth_hyper)

    def forward(m):
        return simulate_flow(m, model, backend=backend).data_vector()

    n_t, n_w = len(model.obs_times), len(model.producers)
    meta = {
        "well": np.tile(np.arange(n_w), n_t),
        "time": np.repeat(np.asarray(model.obs_times), n_w),
    }
    rng = np.random.default_rng([int(seed), TRUTH_STREAMS["flow2d"]])
    truth, obs = generate_truth_and_data(
        grid, family, p_true, cfg["m_prior_mean"], forward, cfg["noise_std"], rng, meta=meta
    )
    pr = cfg["prior"]
    prior = HyperPrior(
        ("log_rho", "log_alpha", "phi"),
        means={"log_rho": pr["log_rho"][0], "log_alpha": pr["log_alpha"][0]},
        stds={"log_rho": pr["log_rho"][1], "log_alpha": pr["log_alpha"][1]},
        mu_phi=float(pr["mu_phi"]),
        kappa=float(pr["kappa"]),
        circular=bool(pr.get("circular", True)),
    )
    well_xy = np.array([[o + h * i for o, h, i in zip(grid.origin, grid.spacing, w)] for w in model.producers])
    problem = HierarchicalProblem(
        grid, family, np.full(grid.size, float(cfg["m_prior_mean"])), obs, forward, truth_hyper,
        prior=prior, data_coords=well_xy[obs.well], backend=backend,
    )
    return FlowBenchmark(problem, truth.values, model, truth_hyper, cfg)
