"""Ensemble versus hybrid estimates of the sensitivity of a point observation to ``z``.

For an observation ``d = m[k]`` of a hierarchical field, the exact
sensitivity of ``d`` to ``z`` for one realization is row ``k`` of ``L(theta)``
(the z-block of ``G_m M_x``). Because ``C_z = I`` the cross-covariance
between ``d`` and ``z`` should equal that sensitivity. The pure ensemble
estimate ``dZ dd^T`` averages over every member's hyperparameters; the
hybrid estimate ``(G_m M_x)^T`` keeps the realization's own ``M_x`` and only
takes ``G_m`` from the ensemble.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .covariance import KernelFamily
from .field_model import GridSpec, HyperParams
from .forward import LinearObserver
from .priors import HyperPrior, sample_prior_ensemble
from .problems import HierarchicalProblem, hyper_names_for
from .forward import ObsSet
from .smoothers import estimate_Gm, hybrid_cross_covariance

__all__ = ["SensitivityResult", "sensitivity_study", "write_grid_csv", "DEFAULT_SENSITIVITY"]

DEFAULT_SENSITIVITY = {
    "dims": [30, 15],
    "spacing": [1 / 30, 1 / 30],
    "sigma": 2.0,
    "obs_cell": [10, 4],
    "prior": {"log_rho": [-0.2, 0.25], "log_alpha": [1.6, 0.25], "mu_phi": 0.8, "kappa": 4.0},
    "ensemble_sizes": [100, 200, 800],
    "realization": 0,
    "energy": 1.0,
}


@dataclass
class SensitivityResult:
    grid: GridSpec
    obs_cell: tuple[int, int]
    exact: np.ndarray  # z-block sensitivity of realization 0
    hybrid_exact_Gm: np.ndarray
    ensemble: dict = field(default_factory=dict)  # N_e -> field
    hybrid: dict = field(default_factory=dict)
    hyper: np.ndarray | None = None  # hyperparameters of the realization

    def distance(self, fld) -> float:
        return float(np.linalg.norm(np.asarray(fld) - self.exact))

    def distances(self) -> dict:
        out = {}
        for n in sorted(self.ensemble):
            out[n] = {"ensemble": self.distance(self.ensemble[n]), "hybrid": self.distance(self.hybrid[n])}
        return out


def _point_problem(cfg) -> HierarchicalProblem:
    grid = GridSpec(tuple(cfg["dims"]), tuple(cfg["spacing"]))
    family = KernelFamily("gaussian2d", float(cfg["sigma"]))
    k = grid.flat_index(tuple(cfg["obs_cell"]))
    observer = LinearObserver((k,), 1.0, grid.size)
    pr = cfg["prior"]
    prior = HyperPrior(
        ("log_rho", "log_alpha", "phi"),
        means={"log_rho": pr["log_rho"][0], "log_alpha": pr["log_alpha"][0]},
        stds={"log_rho": pr["log_rho"][1], "log_alpha": pr["log_alpha"][1]},
        mu_phi=float(pr["mu_phi"]),
        kappa=float(pr["kappa"]),
    )
    names = hyper_names_for(family)
    fixed = HyperParams(names, (pr["log_rho"][0], pr["log_alpha"][0], pr["mu_phi"]))
    obs = ObsSet(np.zeros(1), np.ones(1))  # the data values play no role here
    return HierarchicalProblem(grid, family, np.zeros(grid.size), obs, observer, fixed, prior=prior,
                               observer_jacobian=observer.jacobian())


def sensitivity_study(seed: int, overrides: dict | None = None, backend=None) -> SensitivityResult:
    """Compare ensemble and hybrid cross-covariance fields for every ensemble size.

    Ensembles are nested: member ``i`` is the same draw for every size, so
    realization ``cfg['realization']`` is shared by all estimates.
    """
    cfg = {**DEFAULT_SENSITIVITY, **(overrides or {})}
    problem = _point_problem(cfg)
    if backend is not None:
        problem.backend = backend
    sizes = sorted(int(n) for n in cfg["ensemble_sizes"])
    r = int(cfg["realization"])
    if sizes[0] <= r or sizes[0] < 2:
        raise ValueError("every ensemble must contain the reference realization and two members")
    full = sample_prior_ensemble(sizes[-1], problem.prior, problem.grid.size, problem.obs.noise_std, seed)
    X = full.members
    nz = problem.grid.size
    M = np.stack([problem.m_of(x) for x in X])
    D = M @ problem.observer_jacobian.T
    Mx0 = problem.Mx(X[r])
    cx = problem.cx_sqrt()
    exact = (problem.observer_jacobian @ Mx0)[0, :nz]
    res = SensitivityResult(
        problem.grid, tuple(cfg["obs_cell"]), exact,
        hybrid_cross_covariance(Mx0, problem.observer_jacobian, cx)[:nz, 0],
        hyper=X[r, nz:].copy(),
    )
    for n in sizes:
        Z, Mn, Dn = X[:n, :nz], M[:n], D[:n]
        scale = 1.0 / np.sqrt(n - 1)
        dz = (Z - Z.mean(axis=0)).T * scale
        dm = (Mn - Mn.mean(axis=0)).T * scale
        dd = (Dn - Dn.mean(axis=0)).T * scale
        res.ensemble[n] = (dz @ dd.T)[:, 0]
        Gm = estimate_Gm(dm, dd, float(cfg["energy"]))
        res.hybrid[n] = hybrid_cross_covariance(Mx0, Gm, cx)[:nz, 0]
    return res


def write_grid_csv(path, grid: GridSpec, values) -> None:
    """One row per cell: ``i, j, value`` (row-major cell order)."""
    values = np.asarray(values, dtype=float).reshape(grid.dims)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        for i in range(grid.dims[0]):
            for j in range(grid.dims[1]):
                w.writerow([i, j, repr(float(values[i, j]))])
