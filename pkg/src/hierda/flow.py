"""Two-phase incompressible waterflood on a 2D lattice (IMPES).

Each observation interval re-solves the pressure equation with
harmonic-mean transmissibilities and upstream total mobility, then advances
water saturation with explicit upwind transport in CFL-limited sub-steps.
Wells are rate-controlled cell sources (injectors, pure water) and sinks
(producers, equal total-liquid rates). Time is measured in pore volumes
injected when ``total_rate`` is left at its default.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.sparse.linalg import splu

from . import _kernels
from .field_model import Field, GridSpec

__all__ = [
    "RelPerm",
    "FlowModel",
    "FlowResult",
    "FlowError",
    "simulate_flow",
    "buckley_leverett_breakthrough",
    "write_watercut_csv",
    "default_flow_model",
]


class FlowError(RuntimeError):
    """Forward simulation failed (singular pressure system, runaway sub-steps)."""


@dataclass(frozen=True)
class RelPerm:
    """Corey relative permeability and viscosities."""

    swr: float = 0.0
    sor: float = 0.0
    nw: float = 2.0
    no: float = 2.0
    krw0: float = 1.0
    kro0: float = 1.0
    mu_w: float = 1.0
    mu_o: float = 1.0

    def packed(self) -> np.ndarray:
        return np.array([self.swr, self.sor, self.nw, self.no, self.krw0, self.kro0, self.mu_w, self.mu_o])

    def fractional_flow(self, s):
        return _kernels.frac_flow(s, self.packed())

    def total_mobility(self, s):
        se = np.clip((np.asarray(s, dtype=float) - self.swr) / (1 - self.swr - self.sor), 0.0, 1.0)
        return self.krw0 * se**self.nw / self.mu_w + self.kro0 * (1 - se) ** self.no / self.mu_o

    def max_dfds(self) -> float:
        s = np.linspace(self.swr, 1 - self.sor, 4001)
        f = self.fractional_flow(s)
        return float(np.max(np.abs(np.diff(f) / np.diff(s))))


@dataclass(frozen=True)
class FlowModel:
    grid: GridSpec
    injectors: tuple[tuple[int, int], ...]
    producers: tuple[tuple[int, int], ...]
    obs_times: tuple[float, ...]
    porosity: float = 0.2
    relperm: RelPerm = field(default_factory=RelPerm)
    s_init: float = 0.0
    total_rate: float | None = None  # default: one pore volume per unit time
    thickness: float = 1.0
    cfl: float = 0.9
    max_substeps: int = 200_000

    def __post_init__(self):
        object.__setattr__(self, "injectors", tuple(tuple(int(v) for v in w) for w in self.injectors))
        object.__setattr__(self, "producers", tuple(tuple(int(v) for v in w) for w in self.producers))
        object.__setattr__(self, "obs_times", tuple(float(t) for t in self.obs_times))
        if not self.injectors or not self.producers:
            raise ValueError("need at least one injector and one producer")
        for w in self.injectors + self.producers:
            self.grid.flat_index(w)
        cells = [self.grid.flat_index(w) for w in self.injectors + self.producers]
        if len(set(cells)) != len(cells):
            raise ValueError("two wells share a cell")
        if not self.obs_times or np.any(np.diff((0.0,) + self.obs_times) <= 0):
            raise ValueError("observation times must be positive and increasing")
        if not 0 < self.porosity <= 1:
            raise ValueError("porosity must lie in (0, 1]")
        if not 0 <= self.s_init <= 1:
            raise ValueError("initial saturation must lie in [0, 1]")

    @property
    def pore_volume(self) -> float:
        return self.porosity * self.grid.cell_measure * self.thickness * self.grid.size

    @property
    def rate(self) -> float:
        return self.pore_volume if self.total_rate is None else float(self.total_rate)

    def well_rates(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.grid.size
        q_inj, q_prod = np.zeros(n), np.zeros(n)
        for w in self.injectors:
            q_inj[self.grid.flat_index(w)] = self.rate / len(self.injectors)
        for w in self.producers:
            q_prod[self.grid.flat_index(w)] = self.rate / len(self.producers)
        return q_inj, q_prod

    @property
    def n_data(self) -> int:
        return len(self.obs_times) * len(self.producers)


@dataclass
class FlowResult:
    times: np.ndarray
    watercut: np.ndarray  # (n_times, n_producers)
    saturation: np.ndarray  # final saturation, flat
    water_balance: np.ndarray  # worst relative water-balance error per interval
    volume_balance: np.ndarray  # relative total-liquid imbalance per interval
    pressure_residual: np.ndarray  # relative pressure-solve residual per interval
    substeps: np.ndarray
    injected: float = 0.0  # total liquid volumes
    produced: float = 0.0
    water_produced: float = 0.0

    def data_vector(self) -> np.ndarray:
        """Water cuts ordered time-major: ``[t0 wells..., t1 wells..., ...]``."""
        return self.watercut.ravel()


def _faces(grid: GridSpec):
    nx, ny = grid.dims
    idx = np.arange(grid.size).reshape(nx, ny)
    hx, hy = grid.spacing
    a = [idx[:-1, :].ravel(), idx[:, :-1].ravel()]
    b = [idx[1:, :].ravel(), idx[:, 1:].ravel()]
    geo = [np.full(a[0].size, hy / hx), np.full(a[1].size, hx / hy)]
    return np.concatenate(a), np.concatenate(b), np.concatenate(geo)


def simulate_flow(lnK, model: FlowModel, backend=None) -> FlowResult:
    """Run the waterflood for permeability ``exp(lnK)``; see module docstring."""
    lnK = lnK.values if isinstance(lnK, Field) else np.asarray(lnK, dtype=float).ravel()
    grid = model.grid
    if lnK.size != grid.size:
        raise ValueError(f"lnK has {lnK.size} values, grid has {grid.size} cells")
    if not np.all(np.isfinite(lnK)):
        raise FlowError("non-finite log-permeability")
    if grid.ndim != 2:
        raise ValueError("the flow model needs a 2D grid")
    K = np.exp(lnK)
    n = grid.size
    fa, fb, geo = _faces(grid)
    T = geo * model.thickness * 2.0 * K[fa] * K[fb] / (K[fa] + K[fb])
    q_inj, q_prod = model.well_rates()
    q = q_inj - q_prod
    pv = np.full(n, model.porosity * grid.cell_measure * model.thickness)
    rel = model.relperm
    relp = rel.packed()
    fmax = rel.max_dfds() * 1.0001

    s = np.full(n, float(model.s_init))
    flux = np.zeros(fa.size)
    times = np.asarray(model.obs_times)
    prod_cells = np.array([grid.flat_index(w) for w in model.producers])
    wc = np.empty((times.size, prod_cells.size))
    wbal = np.empty(times.size)
    vbal = np.empty(times.size)
    pres = np.empty(times.size)
    nsub = np.empty(times.size, dtype=int)
    q_scale = np.abs(q).sum()
    water_out = 0.0
    t_prev = 0.0
    for k, t in enumerate(times):
        lam = rel.total_mobility(s)
        lam_face = np.where(flux > 0, lam[fa], np.where(flux < 0, lam[fb], 0.5 * (lam[fa] + lam[fb])))
        tf = T * lam_face
        rows = np.concatenate([fa, fb, fa, fb])
        cols = np.concatenate([fa, fb, fb, fa])
        vals = np.concatenate([tf, tf, -tf, -tf])
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        # pin cell 0 to fix the additive constant
        keep = rows != 0
        Ap = sparse.csc_matrix(
            (np.append(vals[keep], 1.0), (np.append(rows[keep], 0), np.append(cols[keep], 0))),
            shape=(n, n),
        )
        rhs = q.copy()
        rhs[0] = 0.0
        try:
            p = splu(Ap).solve(rhs)
        except RuntimeError as exc:
            raise FlowError(f"pressure solve failed ({exc}); check the well configuration") from exc
        if not np.all(np.isfinite(p)):
            raise FlowError("pressure solve produced non-finite values")
        resid = A @ p - q
        pres[k] = np.linalg.norm(resid) / np.linalg.norm(q)
        flux = tf * (p[fa] - p[fb])
        net_out = np.bincount(fa, weights=flux, minlength=n) - np.bincount(fb, weights=flux, minlength=n)
        vbal[k] = np.abs(net_out - q).sum() / q_scale

        out = np.bincount(fa, weights=np.maximum(flux, 0), minlength=n)
        out += np.bincount(fb, weights=np.maximum(-flux, 0), minlength=n) + q_prod
        with np.errstate(divide="ignore"):
            dt_max = model.cfl * np.min(pv / (fmax * out))
        dt_total = t - t_prev
        steps = max(1, int(np.ceil(dt_total / dt_max)))
        if steps > model.max_substeps:
            raise FlowError(f"{steps} transport sub-steps needed (limit {model.max_substeps})")
        s, wbal[k], w_out = _kernels.advance_saturation(
            s, fa, fb, flux, q_inj, q_prod, pv, dt_total / steps, steps, relp, backend=backend
        )
        # roundoff can push s a hair outside [0, 1]
        np.clip(s, 0.0, 1.0, out=s)
        water_out += w_out
        nsub[k] = steps
        wc[k] = rel.fractional_flow(s[prod_cells])
        t_prev = t
    return FlowResult(
        times, wc, s, wbal, vbal, pres, nsub,
        injected=q_inj.sum() * times[-1], produced=q_prod.sum() * times[-1], water_produced=water_out,
    )


def buckley_leverett_breakthrough(rel: RelPerm, s_init: float = 0.0) -> tuple[float, float]:
    """Shock saturation and breakthrough time in pore volumes injected (1D, Welge tangent)."""
    f0 = float(rel.fractional_flow(s_init))

    def tangency(sf):
        h = 1e-7
        df = (rel.fractional_flow(sf + h) - rel.fractional_flow(sf - h)) / (2 * h)
        return float(df * (sf - s_init) - (rel.fractional_flow(sf) - f0))

    # the tangent point is where the chord slope peaks; bracket on its sign change
    grid = np.linspace(s_init + 1e-4, 1 - rel.sor - 1e-4, 2000)
    vals = np.array([tangency(v) for v in grid])
    k = np.nonzero(np.diff(np.sign(vals)))[0][-1]
    sf = optimize.brentq(tangency, grid[k], grid[k + 1], xtol=1e-14)
    slope = (float(rel.fractional_flow(sf)) - f0) / (sf - s_init)
    return sf, 1.0 / slope


def default_flow_model(grid: GridSpec | None = None, n_times: int = 40, t_end: float = 1.0, **kw) -> FlowModel:
    """Five-spot-like pattern: two injectors on the short-axis midline,
    producers in a 3 x 2 arrangement, mirror-symmetric about that midline."""
    grid = grid or GridSpec((30, 15), (1 / 30, 1 / 30))
    nx, ny = grid.dims
    jm = ny // 2
    lo, hi = 2, ny - 3
    injectors = ((round(0.3 * (nx - 1)), jm), (nx - 1 - round(0.3 * (nx - 1)), jm))
    mids = (2, (nx - 1) // 2, nx - 3)
    producers = tuple((i, j) for i in mids for j in (lo, hi))
    times = tuple(np.linspace(t_end / n_times, t_end, n_times))
    return FlowModel(grid, injectors, producers, times, **kw)


def write_watercut_csv(path, result: FlowResult, well_names=None) -> None:
    names = well_names or [f"P{k}" for k in range(result.watercut.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "well", "value"])
        for t, row in zip(result.times, result.watercut):
            for name, v in zip(names, row):
                w.writerow([repr(float(t)), name, repr(float(v))])
