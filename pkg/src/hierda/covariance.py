"""Convolution square roots of stationary covariances and their derivatives.

A covariance ``C(r)`` is factored as a continuous convolution ``C = f * f``;
the discrete square root is ``L[i, j] = f(x_i - x_j) * sqrt(cell measure)``
so that ``L @ L.T`` approximates the covariance matrix on the lattice.
Boundary cells use the same translation-invariant kernel.

2D kernels use geometric anisotropy: a rotation by ``phi`` followed by a
stretch ``alpha`` of the second principal axis, giving the squared distance
``r^2 = dx^T H dx``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels
from .field_model import Field, GridSpec, normalize_angle

__all__ = [
    "KernelFamily",
    "AnisoParams",
    "CovOperator",
    "aniso_H",
    "aniso_distance_sq",
    "dH",
    "sqrt_kernel_value",
    "sqrt_kernel_derivatives",
    "covariance_value",
    "build_L",
    "build_L_derivatives",
    "assemble_Mx",
    "realize_m",
    "MAX_DENSE_CELLS",
]

MAX_DENSE_CELLS = 10_000

FAMILIES_1D = ("exponential1d", "gaussian1d")
FAMILIES_2D = ("gaussian2d",)

# Gauss-Legendre nodes for cell-averaging the log-singular K0 factor.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


@dataclass(frozen=True)
class KernelFamily:
    tag: str
    sigma: float = 1.0
    variant: str = "symmetric"

    def __post_init__(self):
        tag = self.tag.lower()
        if tag not in FAMILIES_1D + FAMILIES_2D:
            raise ValueError(f"unknown kernel family {self.tag!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.variant not in ("symmetric", "one-sided"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "one-sided" and tag != "exponential1d":
            raise ValueError("only the exponential family has a one-sided factor")
        object.__setattr__(self, "tag", tag)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def ndim(self) -> int:
        return 2 if self.tag in FAMILIES_2D else 1

    def with_sigma(self, sigma: float) -> "KernelFamily":
        return KernelFamily(self.tag, sigma, self.variant)


@dataclass(frozen=True)
class AnisoParams:
    rho: float
    alpha: float
    phi: float

    def __post_init__(self):
        if not (self.rho > 0 and np.isfinite(self.rho)):
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not np.isfinite(self.phi):
            raise ValueError("phi must be finite")
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "phi", normalize_angle(self.phi))


@dataclass(frozen=True)
class CovOperator:
    """Square root ``L`` and derivatives keyed by hyperparameter name.

    1D operators carry ``log_sigma`` and ``log_range``; 2D operators carry
    ``log_rho``, ``log_alpha`` and ``phi``.
    """

    grid: GridSpec
    L: np.ndarray
    derivatives: dict = field(default_factory=dict)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.derivatives)


# ------------------------------------------------------------------ anisotropy


def aniso_H(p: AnisoParams) -> np.ndarray:
    c, s, a2 = np.cos(p.phi), np.sin(p.phi), p.alpha**2
    return np.array(
        [[c * c + a2 * s * s, (1 - a2) * s * c], [(1 - a2) * s * c, s * s + a2 * c * c]]
    )


def aniso_distance_sq(dx, p: AnisoParams):
    """``dx^T H dx`` for one offset (shape (2,)) or many (shape (..., 2))."""
    dx = np.asarray(dx, dtype=float)
    H = aniso_H(p)
    return np.einsum("...i,ij,...j->...", dx, H, dx)


def dH(p: AnisoParams) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of ``H`` with respect to ``phi`` and ``alpha``."""
    c2, s2 = np.cos(2 * p.phi), np.sin(2 * p.phi)
    d_phi = (1 - p.alpha**2) * np.array([[-s2, c2], [c2, s2]])
    d_alpha = p.alpha * np.array([[1 - c2, -s2], [-s2, 1 + c2]])
    return d_phi, d_alpha


# --------------------------------------------------------------- kernel values


def _k0_factor(r, a, sigma):
    return sigma * np.sqrt(2.0) / (np.sqrt(a) * np.pi) * special.k0(np.abs(r) / a)


def _k0_dlog_a(r, a, sigma):
    s = np.abs(r) / a
    return sigma * np.sqrt(2.0) / (np.sqrt(a) * np.pi) * (s * special.k1(s) - 0.5 * special.k0(s))


def sqrt_kernel_value(family: KernelFamily, r, p):
    """Continuous square-root kernel ``f``.

    For 1D families ``r`` is a signed offset and ``p`` the range ``a``; for
    the 2D Gaussian ``r`` is an offset vector (..., 2) and ``p`` an
    :class:`AnisoParams`. The symmetric exponential factor is singular at
    ``r = 0`` and returns ``inf`` there; :func:`build_L` cell-averages it.
    """
    sigma = family.sigma
    if family.tag == "gaussian2d":
        q = aniso_distance_sq(r, p)
        amp = np.sqrt(p.alpha) * 2 * sigma * np.sqrt(3.0) / (p.rho * np.sqrt(np.pi))
        return amp * np.exp(-6.0 * q / p.rho**2)
    a = float(p)
    if not a > 0:
        raise ValueError(f"range must be > 0, got {a}")
    r = np.asarray(r, dtype=float)
    if family.tag == "gaussian1d":
        return sigma * (4.0 / (a * a * np.pi)) ** 0.25 * np.exp(-2.0 * r * r / (a * a))
    if family.variant == "one-sided":
        return np.where(r >= 0, sigma * np.sqrt(2.0 / a) * np.exp(-np.abs(r) / a), 0.0)
    with np.errstate(divide="ignore"):
        return _k0_factor(r, a, sigma)


def sqrt_kernel_derivatives(family: KernelFamily, r, p) -> dict:
    """Pointwise log-parameter derivatives of :func:`sqrt_kernel_value`."""
    f = sqrt_kernel_value(family, r, p)
    if family.tag == "gaussian2d":
        r = np.asarray(r, dtype=float)
        dphi, dalpha = dH(p)
        q = aniso_distance_sq(r, p)
        q_phi = np.einsum("...i,ij,...j->...", r, dphi, r)
        q_alpha = np.einsum("...i,ij,...j->...", r, dalpha, r)
        inv = 1.0 / p.rho**2
        return {
            "log_rho": f * (12.0 * q * inv - 1.0),
            "log_alpha": f * (0.5 - 6.0 * p.alpha * q_alpha * inv),
            "phi": f * (-6.0 * q_phi * inv),
        }
    a = float(p)
    r = np.asarray(r, dtype=float)
    if family.tag == "gaussian1d":
        d_a = f * (4.0 * r * r / (a * a) - 0.5)
    elif family.variant == "one-sided":
        d_a = f * (np.abs(r) / a - 0.5)
    else:
        d_a = _k0_dlog_a(r, a, family.sigma)
    return {"log_sigma": f, "log_range": d_a}


def covariance_value(family: KernelFamily, r, p):
    """Target covariance ``C(r)`` that ``f * f`` reproduces."""
    s2 = family.sigma**2
    if family.tag == "gaussian2d":
        return s2 * np.exp(-3.0 * aniso_distance_sq(r, p) / p.rho**2)
    a = float(p)
    r = np.asarray(r, dtype=float)
    if family.tag == "gaussian1d":
        return s2 * np.exp(-(r * r) / (a * a))
    return s2 * np.exp(-np.abs(r) / a)


# ---------------------------------------------------------------- discrete L


def _check_inputs(grid: GridSpec, family: KernelFamily, p):
    if grid.size > MAX_DENSE_CELLS:
        raise ValueError(f"grid has {grid.size} cells; dense factors are limited to {MAX_DENSE_CELLS}")
    if family.ndim != grid.ndim:
        raise ValueError(f"{family.tag} kernel on a {grid.ndim}D grid")
    if family.ndim == 2 and not isinstance(p, AnisoParams):
        raise TypeError("2D kernels need AnisoParams")
    if family.ndim == 1 and not (np.isfinite(p) and p > 0):
        raise ValueError(f"range must be finite and > 0, got {p}")


def _cell_average(fn, h):
    # even rule about 0 on [-h/2, h/2]; nodes never hit the singular point
    nodes = 0.25 * h * (_GL_X + 1.0)
    return np.sum(0.5 * _GL_W * fn(nodes))


def _build_1d(grid, family, a, derivs):
    x = grid.coords()[:, 0]
    r = x[:, None] - x[None, :]
    scale = np.sqrt(grid.cell_measure)
    h = grid.spacing[0]
    singular = family.tag == "exponential1d"
    with np.errstate(divide="ignore", invalid="ignore"):
        L = sqrt_kernel_value(family, r, a) * scale
        d = sqrt_kernel_derivatives(family, r, a) if derivs else None
    if singular:
        if family.variant == "one-sided":
            # half of the averaging cell lies behind the Heaviside step
            diag = 0.5 * _cell_average(lambda t: sqrt_kernel_value(family, t, a), h)
            diag_d = 0.5 * _cell_average(lambda t: sqrt_kernel_derivatives(family, t, a)["log_range"], h)
        else:
            diag = _cell_average(lambda t: _k0_factor(t, a, family.sigma), h)
            diag_d = _cell_average(lambda t: _k0_dlog_a(t, a, family.sigma), h)
        np.fill_diagonal(L, diag * scale)
    if not derivs:
        return CovOperator(grid, L)
    d_range = d["log_range"] * scale
    if singular:
        np.fill_diagonal(d_range, diag_d * scale)
    return CovOperator(grid, L, {"log_sigma": L.copy(), "log_range": d_range})


def build_L(grid: GridSpec, family: KernelFamily, p, derivatives: bool = False, backend=None) -> CovOperator:
    """Dense discrete square root of the covariance on ``grid``."""
    _check_inputs(grid, family, p)
    if family.ndim == 1:
        return _build_1d(grid, family, float(p), derivatives)
    L, d1, d2, d3 = _kernels.aniso_gaussian_blocks(
        grid.coords(), family.sigma, p.rho, p.alpha, p.phi,
        np.sqrt(grid.cell_measure), derivs=derivatives, backend=backend,
    )
    if not derivatives:
        return CovOperator(grid, L)
    return CovOperator(grid, L, {"log_rho": d1, "log_alpha": d2, "phi": d3})


def build_L_derivatives(grid: GridSpec, family: KernelFamily, p, backend=None) -> dict:
    return build_L(grid, family, p, derivatives=True, backend=backend).derivatives


def assemble_Mx(cov: CovOperator, z, names=None) -> np.ndarray:
    """Jacobian of ``m = m_pr + L z`` w.r.t. ``(z, hyper[names])``.

    ``names`` selects (and orders) the hyperparameter columns; by default
    every derivative carried by ``cov`` is used.
    """
    zv = z.values if isinstance(z, Field) else np.asarray(z, dtype=float).ravel()
    n = cov.L.shape[0]
    if zv.size != n:
        raise ValueError(f"z has {zv.size} entries, operator has {n} cells")
    names = cov.names if names is None else tuple(names)
    Mx = np.empty((n, n + len(names)))
    Mx[:, :n] = cov.L
    for k, name in enumerate(names):
        Mx[:, n + k] = cov.derivatives[name] @ zv
    return Mx


def realize_m(m_pr, cov: CovOperator, z):
    """``m_pr + L z``; returns a Field when ``m_pr`` is one."""
    zv = z.values if isinstance(z, Field) else np.asarray(z, dtype=float)
    if zv.shape[0] != cov.L.shape[1]:
        raise ValueError(f"z has {zv.shape[0]} rows, operator expects {cov.L.shape[1]}")
    if isinstance(m_pr, Field):
        return Field(m_pr.grid, m_pr.values + cov.L @ zv)
    m_pr = np.asarray(m_pr, dtype=float)
    if zv.ndim == 2 and m_pr.ndim == 1:
        m_pr = m_pr[:, None]
    return m_pr + cov.L @ zv
