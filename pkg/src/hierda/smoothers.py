"""RML, iterative ensemble smoother (IES) and hybrid IES samplers.

All updates are Levenberg-Marquardt steps on the stochastic objective

    J_i(x) = |C_x^{-1/2}(x - x'_i)|^2 / 2 + |C_d^{-1/2}(g(x) + eps'_i - d_obs)|^2 / 2

written in whitened coordinates (``C_x = I`` after scaling by
``problem.cx_sqrt()``, ``C_d = I`` after dividing residuals by the noise
std). With ``Gt`` the whitened sensitivity, ``r`` the whitened prior
residual and ``y`` the whitened data residual, every method takes

    dw = -r/(1+lam) - Gt^T [(1+lam) I + Gt Gt^T]^{-1} (y - Gt r/(1+lam))

and differs only in how ``Gt`` is formed: analytically (RML), from
ensemble anomalies (IES), or as ``G_m M_x`` with an ensemble regression for
``G_m`` and an analytic ``M_x`` per member (hybrid).
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .flow import FlowError
from .priors import Ensemble, prior_objective

__all__ = [
    "LMState",
    "MismatchRecord",
    "LocalizationSpec",
    "SamplerConfig",
    "SamplerResult",
    "GmEstimate",
    "mismatch",
    "lm_step_control",
    "gaspari_cohn",
    "taper_matrix",
    "rml_update",
    "ies_update",
    "hybrid_update",
    "estimate_Gm",
    "hybrid_cross_covariance",
    "run_sampler",
    "write_mismatch_csv",
]

log = logging.getLogger(__name__)


def mismatch(g_m, d, noise_std) -> float:
    """Squared data mismatch ``sum(((g - d)/std)^2) / 2``."""
    g_m = np.asarray(g_m, dtype=float)
    d = np.asarray(d, dtype=float)
    if g_m.shape != d.shape:
        raise ValueError(f"length mismatch: {g_m.shape} vs {d.shape}")
    return float(0.5 * np.sum(((g_m - d) / noise_std) ** 2))


# ------------------------------------------------------------------- LM control


@dataclass
class LMState:
    lam: float
    iteration: int = 0
    increases: int = 0
    history: list = field(default_factory=list)  # accepted objective values
    factor: float = 4.0
    max_iter: int = 25
    min_rel_reduction: float = 0.005
    max_increases: int | None = 2  # None disables the rule
    stop_reason: str = ""

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")

    @property
    def current(self) -> float:
        return self.history[-1] if self.history else np.inf


def lm_step_control(state: LMState, new_value: float) -> tuple[LMState, bool, bool]:
    """Accept/reject a trial step and update lambda.

    Returns ``(new_state, accepted, stop)``. Improvement divides lambda by
    ``factor``; otherwise the step is rejected and lambda multiplied.
    Stops after ``max_iter`` trials, ``max_increases`` consecutive
    increases, or an accepted relative reduction below ``min_rel_reduction``.
    """
    s = replace(state, history=list(state.history))
    s.iteration += 1
    old = s.current
    accepted = bool(np.isfinite(new_value) and new_value < old)
    stop = False
    if accepted:
        s.lam /= s.factor
        s.increases = 0
        s.history.append(float(new_value))
        if np.isfinite(old) and (old - new_value) / old < s.min_rel_reduction:
            stop, s.stop_reason = True, "small reduction"
    else:
        s.lam *= s.factor
        s.increases += 1
        if s.max_increases and s.increases >= s.max_increases:
            stop, s.stop_reason = True, "lambda increased twice"
    if not stop and s.iteration >= s.max_iter:
        stop, s.stop_reason = True, "iteration limit"
    return s, accepted, stop


# ----------------------------------------------------------------- localization


def gaspari_cohn(dist, half_width):
    """Gaspari-Cohn fifth-order taper; 1 at 0 and 0 beyond ``2 * half_width``."""
    r = np.abs(np.asarray(dist, dtype=float)) / half_width
    out = np.zeros_like(r)
    a = r <= 1
    ra = r[a]
    out[a] = -0.25 * ra**5 + 0.5 * ra**4 + 0.625 * ra**3 - 5.0 / 3.0 * ra**2 + 1.0
    b = (r > 1) & (r < 2)
    rb = r[b]
    out[b] = rb**5 / 12.0 - 0.5 * rb**4 + 0.625 * rb**3 + 5.0 / 3.0 * rb**2 - 5.0 * rb + 4.0 - 2.0 / (3.0 * rb)
    return out


@dataclass(frozen=True)
class LocalizationSpec:
    """Gaspari-Cohn taper between each cell and each datum's anchor.

    ``taper_range`` is the full support radius (half-width ``taper_range/2``).
    """

    taper_range: float
    taper: str = "gaspari_cohn"

    def __post_init__(self):
        if not self.taper_range > 0:
            raise ValueError("taper range must be > 0")
        if self.taper != "gaspari_cohn":
            raise ValueError(f"unknown taper {self.taper!r}")


def taper_matrix(cell_coords, data_coords, spec: LocalizationSpec) -> np.ndarray:
    """Taper weights, shape ``(n_cells, n_data)``."""
    cell_coords = np.atleast_2d(np.asarray(cell_coords, dtype=float))
    data_coords = np.atleast_2d(np.asarray(data_coords, dtype=float))
    if cell_coords.shape[0] == 1 and cell_coords.shape[1] > 2:
        cell_coords = cell_coords.T
    d = np.linalg.norm(cell_coords[:, None, :] - data_coords[None, :, :], axis=-1)
    return gaspari_cohn(d, spec.taper_range / 2.0)


# ------------------------------------------------------------------ G_m estimate


@dataclass(frozen=True)
class GmEstimate:
    """``G_m ~ dD dM^+`` kept in factored form ``A @ U.T``.

    ``U`` (n_cells, k) spans the retained m-anomaly directions and ``A``
    (n_data, k) is ``dD V S^{-1}``.
    """

    A: np.ndarray
    U: np.ndarray

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return self.A @ self.U.T

    def matvec(self, v) -> np.ndarray:
        return self.A @ (self.U.T @ v)

    def rmatvec(self, w) -> np.ndarray:
        return self.U @ (self.A.T @ w)

    def compose(self, Mx) -> np.ndarray:
        """``G_m @ Mx`` without forming ``G_m``."""
        return self.A @ (self.U.T @ Mx)


def estimate_Gm(dm, dd, energy: float = 1.0, rtol: float = 1e-10) -> GmEstimate:
    """Regress responses on parameters through a truncated pseudo-inverse of ``dm``.

    ``dm`` (n_cells, N) and ``dd`` (n_data, N) are centred anomalies. The
    smallest set of singular directions holding ``energy`` of the squared
    singular-value sum is kept.
    """
    dm = np.asarray(dm, dtype=float)
    dd = np.asarray(dd, dtype=float)
    if dm.shape[1] != dd.shape[1] or dm.shape[1] < 2:
        raise ValueError("need matching anomaly matrices with at least two members")
    U, s, Vt = np.linalg.svd(dm, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        warnings.warn("m-anomalies are all zero; G_m estimate is the zero operator", RuntimeWarning)
        return GmEstimate(np.zeros((dd.shape[0], 0)), np.zeros((dm.shape[0], 0)))
    s2 = s**2
    k = int(np.searchsorted(np.cumsum(s2) / s2.sum(), energy - 1e-15) + 1)
    k = min(k, s.size)
    k = min(k, int(np.sum(s > rtol * s[0])))
    A = (dd @ Vt[:k].T) / s[:k]
    return GmEstimate(A, U[:, :k])


# ---------------------------------------------------------------------- updates


def _lm_direction(Gt, r, y, lam) -> np.ndarray:
    c = 1.0 + lam
    n_d = Gt.shape[0]
    M = Gt @ Gt.T
    M[np.diag_indices(n_d)] += c
    rhs = y - (Gt @ r) / c
    try:
        sol = sla.cho_solve(sla.cho_factor(M, lower=True, check_finite=False), rhs, check_finite=False)
    except sla.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"inner {n_d}x{n_d} solve failed: {exc}") from exc
    return -r / c - Gt.T @ sol


def rml_update(problem, x, anchor, eps, d_pred, G, lam) -> np.ndarray:
    """One LM step for a single member with sensitivity ``G = dg/dx`` (n_data, n_state)."""
    Gt = np.asarray(G) * problem.cx_sqrt()[None, :] / problem.obs.noise_std[:, None]
    r = problem.prior_residual(x, anchor)
    y = problem.data_residual(d_pred, eps)
    return problem.apply_step(x, _lm_direction(Gt, r, y, lam))


def hybrid_update(problem, x, anchor, eps, d_pred, Gm, Mx, lam) -> np.ndarray:
    """RML step with ``G = G_m M_x``; ``Gm`` is a matrix or a :class:`GmEstimate`."""
    G = Gm.compose(Mx) if isinstance(Gm, GmEstimate) else np.asarray(Gm) @ Mx
    return rml_update(problem, x, anchor, eps, d_pred, G, lam)


def ies_update(problem, X, anchors, eps, D, lam, taper=None, active=None) -> np.ndarray:
    """Ensemble-sensitivity LM step for all members at once.

    ``X``/``anchors`` are (N, n_state), ``eps``/``D`` (N, n_data).
    ``taper`` (n_cells, n_data) multiplies the latent-field rows of the gain;
    hyperparameter rows are left untapered. Members outside ``active`` keep
    their state and are excluded from the anomalies.
    """
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    active = np.ones(N, bool) if active is None else np.asarray(active, bool)
    if active.sum() < 2:
        raise ValueError("IES needs at least two active members")
    std = problem.obs.noise_std
    dX = problem.anomalies(X[active])
    dD = ((D[active] - D[active].mean(axis=0)) / std).T / np.sqrt(active.sum() - 1)
    idx = np.flatnonzero(active)
    R = np.stack([problem.prior_residual(X[i], anchors[i]) for i in idx], axis=1)
    Y = np.stack([problem.data_residual(D[i], eps[i]) for i in idx], axis=1)
    c = 1.0 + lam
    proj = dX.T @ R  # (N_active, N_active)
    C = dD @ dD.T
    C[np.diag_indices_from(C)] += c
    Kd = sla.cho_solve(sla.cho_factor(C, lower=True, check_finite=False), dD, check_finite=False).T
    inner = Y - dD @ proj / c
    if taper is None:
        step = -(dX @ proj) / c - dX @ (Kd @ inner)
    else:
        K = dX @ Kd  # (n_state, n_data)
        nz = problem.grid.size
        K[:nz] *= taper
        step = -(dX @ proj) / c - K @ inner
    out = X.copy()
    for col, i in enumerate(idx):
        out[i] = problem.apply_step(X[i], step[:, col])
    return out


def hybrid_cross_covariance(Mx, Gm, cx_sqrt=None) -> np.ndarray:
    """``C_x M_x^T G_m^T`` for one member; one column per datum."""
    G = Gm.compose(Mx) if isinstance(Gm, GmEstimate) else np.asarray(Gm) @ Mx
    cx = np.ones(Mx.shape[1]) if cx_sqrt is None else np.asarray(cx_sqrt) ** 2
    return cx[:, None] * G.T


# ------------------------------------------------------------------------ driver


@dataclass
class SamplerConfig:
    """Sampler options.

    ``shared_lambda`` selects one ensemble-wide lambda accepted on the mean
    ``S_pert`` (required for IES) versus a lambda per member accepted on
    that member's objective ``J_i`` (required for RML). ``max_increases``
    defaults to 2 for shared control and is disabled (None) per member.
    """

    method: str = "hybrid"  # rml | ies | hybrid
    lam0: float | None = None  # None: 5000 for RML, mean(S_pert)/(2 N_d) otherwise
    factor: float = 4.0
    max_iter: int | None = None  # None: 25 with a shared lambda, 50 per member
    min_rel_reduction: float = 0.005
    max_increases: int | None = None
    energy: float = 1.0  # singular-energy fraction kept in the G_m regression
    localization: LocalizationSpec | None = None
    workers: int = 1
    exact_Gm: bool = False  # hybrid only: use problem.observer_jacobian
    shared_lambda: bool | None = None

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in ("rml", "ies", "hybrid"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.shared_lambda is None:
            self.shared_lambda = self.method == "ies"
        if self.method == "ies" and not self.shared_lambda:
            raise ValueError("IES updates the whole ensemble at once; it needs a shared lambda")
        if self.method == "rml" and self.shared_lambda:
            raise ValueError("RML members are minimized independently; lambda cannot be shared")
        if self.localization is not None and self.method != "ies":
            raise ValueError("localization is only applied in IES")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def iteration_limit(self) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return 25 if self.shared_lambda else 50

    @property
    def increase_limit(self) -> int | None:
        if self.max_increases is not None:
            return self.max_increases
        return 2 if self.shared_lambda else None


@dataclass
class MismatchRecord:
    iteration: int
    s_pert: np.ndarray
    s_obs: np.ndarray
    lam: np.ndarray
    accepted: np.ndarray

    @property
    def mean_obs(self) -> float:
        v = self.s_obs[np.isfinite(self.s_obs)]
        return float(v.mean()) if v.size else np.nan

    @property
    def mean_pert(self) -> float:
        v = self.s_pert[np.isfinite(self.s_pert)]
        return float(v.mean()) if v.size else np.nan

    def quantiles(self, q=(0.25, 0.5, 0.75)) -> np.ndarray:
        return np.nanquantile(self.s_obs, q)


@dataclass
class SamplerResult:
    method: str
    members: np.ndarray
    predictions: np.ndarray
    failed: np.ndarray
    history: list
    stop_reason: str
    converged: np.ndarray  # see _converged

    @property
    def final(self) -> MismatchRecord:
        return self.history[-1]


def _forward(problem, x):
    d = problem.predict(x)
    if not np.all(np.isfinite(d)):
        raise FlowError("non-finite prediction")
    return d


_FAILURES = (FlowError, np.linalg.LinAlgError, ValueError)


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _predict_all(problem, X, workers=1, skip=None):
    N = X.shape[0]
    D = np.full((N, problem.n_data), np.nan)
    failed = np.zeros(N, bool)
    todo = [i for i in range(N) if skip is None or not skip[i]]

    def run(i):
        try:
            return _forward(problem, X[i])
        except _FAILURES as exc:
            log.warning("member %d forward run failed: %s", i, exc)
            return None

    for i, d in zip(todo, _map(run, todo, workers)):
        if d is None:
            failed[i] = True
        else:
            D[i] = d
    return D, failed


def _scores(problem, D, eps):
    d, std = problem.obs.d_obs, problem.obs.noise_std
    s_pert = 0.5 * np.sum(((D + eps - d) / std) ** 2, axis=1)
    s_obs = 0.5 * np.sum(((D - d) / std) ** 2, axis=1)
    return s_pert, s_obs


def _objective(problem, x, anchor, d, eps) -> float:
    """Member objective ``J_i`` (prior part plus ``S_pert``)."""
    y = problem.data_residual(d, eps)
    if problem.prior is None:
        prior = 0.5 * float(np.sum((np.asarray(x) - anchor) ** 2))
    else:
        prior = prior_objective(x, anchor, problem.prior, problem.layout)
    return prior + 0.5 * float(y @ y)


def _ensemble_Gm(problem, X, D, ok, energy):
    M = np.stack([problem.m_of(X[i]) for i in np.flatnonzero(ok)])
    n = M.shape[0]
    dm = (M - M.mean(axis=0)).T / np.sqrt(n - 1)
    dd = (D[ok] - D[ok].mean(axis=0)).T / np.sqrt(n - 1)
    return estimate_Gm(dm, dd, energy)


def _converged(problem, D, eps, failed) -> np.ndarray:
    """Members that did not fail and fit their perturbed data to ``S_pert <= N_d``.

    ``N_d`` is twice the expected mismatch of a calibrated member, so this
    flags members that stalled far from a minimum.
    """
    sp, _ = _scores(problem, D, eps)
    with np.errstate(invalid="ignore"):
        return ~failed & (sp <= problem.n_data)


def run_sampler(problem, ensemble: Ensemble, config: SamplerConfig) -> SamplerResult:
    """Iterate the chosen update under Levenberg-Marquardt control."""
    if ensemble.layout != problem.layout:
        raise ValueError("ensemble layout does not match the problem")
    if config.method == "rml" and problem.observer_jacobian is None:
        raise ValueError("RML needs an analytic observation Jacobian")
    if config.exact_Gm and problem.observer_jacobian is None:
        raise ValueError("exact G_m requested but the problem has no analytic observation Jacobian")
    if config.method != "rml" and ensemble.size < 2:
        raise ValueError("ensemble methods need at least two members")
    if config.shared_lambda:
        return _run_shared(problem, ensemble, config)
    return _run_members(problem, ensemble, config)


def _lm_state(config, lam):
    return LMState(lam, factor=config.factor, max_iter=config.iteration_limit,
                   min_rel_reduction=config.min_rel_reduction, max_increases=config.increase_limit)


def _run_members(problem, ens: Ensemble, config: SamplerConfig) -> SamplerResult:
    """Per-member lambda (RML and the default hybrid): each member accepts on its own ``J_i``."""
    X = ens.members.copy()
    N = X.shape[0]
    eps = ens.perturbed_obs
    D, failed = _predict_all(problem, X, config.workers)
    sp, so = _scores(problem, D, eps)
    if config.lam0 is not None:
        lam0 = config.lam0
    elif config.method == "rml":
        lam0 = 5000.0
    else:
        lam0 = float(sp[~failed].mean()) / (2.0 * problem.n_data)
    states = []
    for i in range(N):
        st = _lm_state(config, lam0)
        if not failed[i]:
            st.history.append(_objective(problem, X[i], ens.anchors[i], D[i], eps[i]))
        states.append(st)
    sp[failed], so[failed] = np.nan, np.nan
    history = [MismatchRecord(0, sp, so, np.full(N, lam0), np.zeros(N, bool))]
    active = ~failed
    analytic = config.method == "rml" or config.exact_Gm
    while active.any():
        if analytic:
            Gm = problem.observer_jacobian
        else:
            ok = ~failed
            if ok.sum() < 2:
                break
            Gm = _ensemble_Gm(problem, X, D, ok, config.energy)

        def trial(i):
            try:
                Mx = problem.Mx(X[i])
                x_new = hybrid_update(problem, X[i], ens.anchors[i], eps[i], D[i], Gm, Mx, states[i].lam)
                d_new = _forward(problem, x_new)
                return x_new, d_new, _objective(problem, x_new, ens.anchors[i], d_new, eps[i])
            except _FAILURES as exc:
                log.warning("member %d failed: %s", i, exc)
                return None

        idx = list(np.flatnonzero(active))
        acc = np.zeros(N, bool)
        for i, res in zip(idx, _map(trial, idx, config.workers)):
            if res is None:
                failed[i], active[i] = True, False
                continue
            states[i], acc[i], stop = lm_step_control(states[i], res[2])
            if acc[i]:
                X[i], D[i] = res[0], res[1]
            if stop:
                active[i] = False
        sp, so = _scores(problem, D, eps)
        sp[failed], so[failed] = np.nan, np.nan
        history.append(MismatchRecord(len(history), sp, so, np.array([s.lam for s in states]), acc))
        log.info("%s iter %d active=%d mean S_obs=%.4g", config.method, len(history) - 1, active.sum(), np.nanmean(so))
    converged = _converged(problem, D, eps, failed)
    reasons = sorted({s.stop_reason for s in states if s.stop_reason})
    return SamplerResult(config.method, X, D, failed, history, "; ".join(reasons), converged)


def _run_shared(problem, ens: Ensemble, config: SamplerConfig) -> SamplerResult:
    """Ensemble-wide lambda accepted on the mean ``S_pert`` (IES, optionally hybrid)."""
    X = ens.members.copy()
    N = X.shape[0]
    eps = ens.perturbed_obs
    D, failed = _predict_all(problem, X, config.workers)
    sp, so = _scores(problem, D, eps)
    mean_sp = float(sp[~failed].mean())
    lam0 = mean_sp / (2.0 * problem.n_data) if config.lam0 is None else config.lam0
    state = _lm_state(config, lam0)
    state.history.append(mean_sp)
    sp[failed], so[failed] = np.nan, np.nan
    history = [MismatchRecord(0, sp, so, np.full(N, lam0), np.zeros(N, bool))]

    taper = None
    if config.localization is not None:
        if problem.data_coords is None:
            raise ValueError("localization needs data anchor coordinates")
        taper = taper_matrix(problem.grid.coords(), problem.data_coords, config.localization)

    Gm = None
    while True:
        ok = ~failed
        if ok.sum() < 2:
            state.stop_reason = "fewer than two working members"
            break
        if config.method == "ies":
            X_new = ies_update(problem, X, ens.anchors, eps, D, state.lam, taper=taper, active=ok)
        else:
            if config.exact_Gm:
                Gm = problem.observer_jacobian
            elif Gm is None:
                Gm = _ensemble_Gm(problem, X, D, ok, config.energy)
            lam = state.lam

            def step(i):
                Mx = problem.Mx(X[i])
                return hybrid_update(problem, X[i], ens.anchors[i], eps[i], D[i], Gm, Mx, lam)

            X_new = X.copy()
            idx = list(np.flatnonzero(ok))
            for i, x in zip(idx, _map(step, idx, config.workers)):
                X_new[i] = x
        D_new, f_new = _predict_all(problem, X_new, config.workers, skip=failed)
        newly = f_new & ~failed
        cand = ~(failed | newly)
        sp_new, _ = _scores(problem, D_new, eps)
        value = float(sp_new[cand].mean()) if cand.any() else np.inf
        state, accepted, stop = lm_step_control(state, value)
        if accepted:
            # members whose forward run failed stay frozen at their last good state
            X[cand], D[cand] = X_new[cand], D_new[cand]
            failed |= newly
            Gm = None
        sp, so = _scores(problem, D, eps)
        sp[failed], so[failed] = np.nan, np.nan
        history.append(MismatchRecord(state.iteration, sp, so, np.full(N, state.lam), np.full(N, accepted)))
        log.info("%s iter %d lam=%.3g mean S_pert=%.4g accepted=%s",
                 config.method, state.iteration, state.lam, np.nanmean(sp), accepted)
        if stop:
            break
    converged = _converged(problem, D, eps, failed)
    return SamplerResult(config.method, X, D, failed, history, state.stop_reason, converged)


def write_mismatch_csv(path, result: SamplerResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "member", "s_pert", "s_obs", "lambda", "accepted"])
        for rec in result.history:
            for i in range(rec.s_pert.size):
                w.writerow([rec.iteration, i, repr(float(rec.s_pert[i])), repr(float(rec.s_obs[i])),
                            repr(float(rec.lam[i])), int(bool(rec.accepted[i]))])
