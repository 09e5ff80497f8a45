"""Hyperparameter priors, prior ensembles and prior-term gradients.

Log-scale hyperparameters (``log_sigma``, ``log_range``, ``log_rho``,
``log_alpha``) are Gaussian. The orientation ``phi`` follows the
Gauss-von Mises density ``exp(kappa cos 2(phi - mu)) / (pi I0(kappa))`` on
[-pi/2, pi/2).

The samplers work in whitened coordinates where the (pseudo) prior
covariance ``C_x = blockdiag(I, C_u, 1/(4 kappa))`` becomes the identity;
:meth:`HyperPrior.whitened_residual` and :meth:`HyperPrior.cx_sqrt` provide
both halves of that transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .field_model import HyperParams, StateLayout, normalize_angle

__all__ = [
    "HyperParams",
    "HyperPrior",
    "Ensemble",
    "gvm_density",
    "gvm_logpdf",
    "gvm_sample",
    "member_rng",
    "sample_prior_ensemble",
    "prior_gradient_terms",
    "prior_objective",
]


def gvm_logpdf(phi, mu, kappa):
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    phi = np.asarray(phi, dtype=float)
    # log I0 via the exponentially scaled Bessel function to avoid overflow
    log_norm = np.log(np.pi) + np.log(special.i0e(kappa)) + kappa
    return kappa * np.cos(2.0 * (phi - mu)) - log_norm


def gvm_density(phi, mu, kappa):
    """Gauss-von Mises density with period pi."""
    return np.exp(gvm_logpdf(phi, mu, kappa))


def gvm_sample(mu, kappa, rng, size=None):
    """Rejection sampler: uniform proposals accepted w.p. exp(kappa (cos 2(phi-mu) - 1))."""
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    n = 1 if size is None else int(np.prod(size))
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        batch = max(16, int(1.2 * need / special.i0e(kappa)) + 8)  # i0e = acceptance rate
        phi = rng.uniform(-np.pi / 2, np.pi / 2, size=batch)
        u = rng.uniform(size=batch)
        keep = phi[np.log(u) < kappa * (np.cos(2.0 * (phi - mu)) - 1.0)][:need]
        out[filled : filled + keep.size] = keep
        filled += keep.size
    out = normalize_angle(out)
    if size is None:
        return float(out[0])
    return np.reshape(out, size)


@dataclass(frozen=True)
class HyperPrior:
    """Independent priors for the free hyperparameters.

    ``means``/``stds`` are keyed by the Gaussian (log-scale) hyperparameter
    names. ``mu_phi``/``kappa`` describe the orientation prior when ``phi``
    is among ``names``. ``circular`` selects the circular prior residual
    ``sin 2(phi - phi*) / 2``; otherwise the wrapped difference is used with
    variance ``1/(4 kappa)``.
    """

    names: tuple[str, ...]
    means: dict = field(default_factory=dict)
    stds: dict = field(default_factory=dict)
    mu_phi: float = 0.0
    kappa: float = 0.0
    circular: bool = True

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        for n in self.names:
            if n == "phi":
                if self.kappa < 0:
                    raise ValueError("kappa must be >= 0")
                continue
            if n not in self.means or n not in self.stds:
                raise ValueError(f"prior for {n!r} needs a mean and a std")
            if not self.stds[n] > 0:
                raise ValueError(f"prior std for {n!r} must be > 0")

    @property
    def gaussian_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n != "phi")

    def sample(self, rng) -> HyperParams:
        vals = []
        for n in self.names:
            if n == "phi":
                vals.append(gvm_sample(self.mu_phi, self.kappa, rng))
            else:
                vals.append(rng.normal(self.means[n], self.stds[n]))
        return HyperParams(self.names, vals)

    def hyper_scale(self) -> np.ndarray:
        """Square roots of the diagonal pseudo prior covariance of the hyperparameters."""
        out = []
        for n in self.names:
            if n == "phi":
                if self.kappa <= 0:
                    raise ValueError(
                        "kappa = 0 leaves the orientation block of C_x undefined (1/(4 kappa)); "
                        "fix phi or give the orientation prior a positive concentration"
                    )
                out.append(1.0 / (2.0 * np.sqrt(self.kappa)))
            else:
                out.append(self.stds[n])
        return np.array(out)

    def cx_sqrt(self, layout: StateLayout) -> np.ndarray:
        """Diagonal of ``C_x^{1/2}`` for the full state."""
        return np.concatenate([np.ones(layout.n_cells), self.hyper_scale()])

    def hyper_residual(self, h, h_anchor) -> np.ndarray:
        """Unwhitened prior residual ``(u - u*)`` with the orientation entry
        ``sin 2(phi - phi*)/2`` (circular) or the wrapped difference."""
        h = np.asarray(h, dtype=float)
        h_anchor = np.asarray(h_anchor, dtype=float)
        r = h - h_anchor
        if "phi" in self.names:
            k = self.names.index("phi")
            dphi = h[k] - h_anchor[k]
            r[k] = 0.5 * np.sin(2.0 * dphi) if self.circular else normalize_angle(dphi)
        return r

    def whitened_residual(self, x, anchor, layout: StateLayout) -> np.ndarray:
        """``C_x^{-1/2}`` times the prior residual of the whole state."""
        x = np.asarray(x, dtype=float)
        anchor = np.asarray(anchor, dtype=float)
        rz = x[layout.z] - anchor[layout.z]
        if not layout.hyper_names:
            return rz
        rh = self.hyper_residual(x[layout.hyper], anchor[layout.hyper]) / self.hyper_scale()
        return np.concatenate([rz, rh])

    def log_prior(self, h) -> float:
        """Log prior density of the hyperparameters (up to a constant for the Gaussian part)."""
        h = np.asarray(h, dtype=float)
        out = 0.0
        for k, n in enumerate(self.names):
            if n == "phi":
                out += float(gvm_logpdf(h[k], self.mu_phi, self.kappa))
            else:
                out += -0.5 * ((h[k] - self.means[n]) / self.stds[n]) ** 2
        return out


def prior_objective(x, anchor, prior: HyperPrior, layout: StateLayout) -> float:
    """Prior part of the stochastic objective:
    ``|z - z*|^2/2 + (u - u*)^T C_u^{-1} (u - u*)/2 + kappa (1 - cos 2(phi - phi*))``.

    The orientation term is offset by ``kappa`` so the objective is >= 0.
    """
    x = np.asarray(x, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    out = 0.5 * np.sum((x[layout.z] - anchor[layout.z]) ** 2)
    for k, n in enumerate(layout.hyper_names):
        i = layout.n_cells + k
        if n == "phi":
            if prior.circular:
                out += prior.kappa * (1.0 - np.cos(2.0 * (x[i] - anchor[i])))
            else:
                out += 2.0 * prior.kappa * normalize_angle(x[i] - anchor[i]) ** 2
        else:
            out += 0.5 * ((x[i] - anchor[i]) / prior.stds[n]) ** 2
    return float(out)


def prior_gradient_terms(x, anchor, prior: HyperPrior, layout: StateLayout) -> np.ndarray:
    """Gradient of :func:`prior_objective`: ``[z - z*; C_u^{-1}(u - u*); 2 kappa sin 2(phi - phi*)]``."""
    x = np.asarray(x, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    if x.shape != anchor.shape or x.shape != (layout.size,):
        raise ValueError("state and anchor must match the layout")
    g = x - anchor
    for k, n in enumerate(layout.hyper_names):
        i = layout.n_cells + k
        if n == "phi":
            dphi = x[i] - anchor[i]
            g[i] = 2.0 * prior.kappa * np.sin(2.0 * dphi) if prior.circular else 4.0 * prior.kappa * normalize_angle(dphi)
        else:
            g[i] = g[i] / prior.stds[n] ** 2
    return g


@dataclass
class Ensemble:
    """Prior draws for an ensemble run.

    ``members`` starts as a copy of ``anchors`` (the perturbed prior draws
    ``x'``); ``perturbed_obs[i]`` is the noise draw ``eps'_i``.
    """

    layout: StateLayout
    members: np.ndarray  # (n_members, layout.size)
    anchors: np.ndarray
    perturbed_obs: np.ndarray  # (n_members, n_data)

    @property
    def size(self) -> int:
        return self.members.shape[0]


def member_rng(seed: int, member: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for ``member`` derived from ``seed``."""
    return np.random.default_rng([int(seed), int(stream), int(member)])


def sample_prior_ensemble(
    n_members: int,
    prior: HyperPrior | None,
    n_cells: int,
    noise_std,
    seed: int,
    fixed_hyper: HyperParams | None = None,
) -> Ensemble:
    """Draw ``(x'_i, eps'_i)`` for every member from per-member RNG streams.

    Hyperparameters listed in ``prior.names`` are sampled; with
    ``prior=None`` the state is ``z`` alone (``fixed_hyper`` is only
    recorded by the caller).
    """
    if n_members < 1:
        raise ValueError("need at least one member")
    noise_std = np.asarray(noise_std, dtype=float)
    if np.any(noise_std <= 0):
        raise ValueError("noise stds must be > 0")
    names = prior.names if prior is not None else ()
    layout = StateLayout(n_cells, names)
    members = np.empty((n_members, layout.size))
    eps = np.empty((n_members, noise_std.size))
    for i in range(n_members):
        rng = member_rng(seed, i)
        members[i, : n_cells] = rng.standard_normal(n_cells)
        if names:
            members[i, n_cells:] = prior.sample(rng).as_array()
        eps[i] = rng.standard_normal(noise_std.size) * noise_std
    return Ensemble(layout, members.copy(), members, eps)
