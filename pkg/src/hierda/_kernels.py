"""Hot inner loops, each with a numba and a pure-numpy implementation.

Set ``HIERDA_DISABLE_NUMBA=1`` to force the numpy path (numba is also
skipped automatically when it is not installed). Every public kernel takes
``backend=None | "numba" | "numpy"`` so tests and benchmarks can pin one.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "NUMBA_AVAILABLE",
    "default_backend",
    "aniso_gaussian_blocks",
    "advance_saturation",
]


def _numba_disabled() -> bool:
    return os.environ.get("HIERDA_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def default_backend() -> str:
    return "numba" if NUMBA_AVAILABLE and not _numba_disabled() else "numpy"


def _resolve(backend):
    backend = backend or default_backend()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend


# --------------------------------------------------- anisotropic Gaussian factor


def _aniso_gaussian_numpy(coords, sigma, rho, alpha, phi, scale, derivs):
    dx = coords[:, 0][:, None] - coords[:, 0][None, :]
    dy = coords[:, 1][:, None] - coords[:, 1][None, :]
    c, s = np.cos(phi), np.sin(phi)
    c2, s2 = np.cos(2 * phi), np.sin(2 * phi)
    a2 = alpha * alpha
    dxx, dxy, dyy = dx * dx, dx * dy, dy * dy
    q = (c * c + a2 * s * s) * dxx + 2 * (1 - a2) * s * c * dxy + (s * s + a2 * c * c) * dyy
    amp = scale * np.sqrt(alpha) * 2 * sigma * np.sqrt(3.0) / (rho * np.sqrt(np.pi))
    L = amp * np.exp(-6.0 * q / (rho * rho))
    if not derivs:
        return L, None, None, None
    q_phi = (1 - a2) * (-s2 * dxx + 2 * c2 * dxy + s2 * dyy)
    q_alpha = alpha * ((1 - c2) * dxx - 2 * s2 * dxy + (1 + c2) * dyy)
    inv_r2 = 1.0 / (rho * rho)
    d_u1 = L * (12.0 * q * inv_r2 - 1.0)
    d_u2 = L * (0.5 - 6.0 * alpha * q_alpha * inv_r2)
    d_phi = L * (-6.0 * q_phi * inv_r2)
    return L, d_u1, d_u2, d_phi


@njit(cache=True, nogil=True, fastmath=False)
def _aniso_gaussian_loops(coords, sigma, rho, alpha, phi, scale, derivs):
    n = coords.shape[0]
    L = np.empty((n, n))
    m = 1 if derivs else 0
    d_u1 = np.empty((n * m, n * m))
    d_u2 = np.empty((n * m, n * m))
    d_phi = np.empty((n * m, n * m))
    c, s = np.cos(phi), np.sin(phi)
    c2, s2 = np.cos(2 * phi), np.sin(2 * phi)
    a2 = alpha * alpha
    hxx = c * c + a2 * s * s
    hxy = 2 * (1 - a2) * s * c
    hyy = s * s + a2 * c * c
    amp = scale * np.sqrt(alpha) * 2 * sigma * np.sqrt(3.0) / (rho * np.sqrt(np.pi))
    inv_r2 = 1.0 / (rho * rho)
    for i in range(n):
        xi, yi = coords[i, 0], coords[i, 1]
        for j in range(n):
            dx = xi - coords[j, 0]
            dy = yi - coords[j, 1]
            dxx, dxy, dyy = dx * dx, dx * dy, dy * dy
            q = hxx * dxx + hxy * dxy + hyy * dyy
            v = amp * np.exp(-6.0 * q * inv_r2)
            L[i, j] = v
            if derivs:
                q_phi = (1 - a2) * (-s2 * dxx + 2 * c2 * dxy + s2 * dyy)
                q_alpha = alpha * ((1 - c2) * dxx - 2 * s2 * dxy + (1 + c2) * dyy)
                d_u1[i, j] = v * (12.0 * q * inv_r2 - 1.0)
                d_u2[i, j] = v * (0.5 - 6.0 * alpha * q_alpha * inv_r2)
                d_phi[i, j] = v * (-6.0 * q_phi * inv_r2)
    return L, d_u1, d_u2, d_phi


def aniso_gaussian_blocks(coords, sigma, rho, alpha, phi, scale, derivs=True, backend=None):
    """Discrete 2D Gaussian square-root kernel and its log-parameter derivatives.

    Returns ``(L, dL/dln(rho), dL/dln(alpha), dL/dphi)``; the last three are
    ``None`` when ``derivs`` is false.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    args = (coords, float(sigma), float(rho), float(alpha), float(phi), float(scale), bool(derivs))
    if _resolve(backend) == "numba":
        out = _aniso_gaussian_loops(*args)
        return out if derivs else (out[0], None, None, None)
    return _aniso_gaussian_numpy(*args)


# ------------------------------------------------------------ saturation transport


@njit(cache=True, nogil=True)
def _frac_flow_loops(s, swr, sor, nw, no, krw0, kro0, muw, muo):
    n = s.shape[0]
    out = np.empty(n)
    span = 1.0 - swr - sor
    for k in range(n):
        se = (s[k] - swr) / span
        if se < 0.0:
            se = 0.0
        elif se > 1.0:
            se = 1.0
        lw = krw0 * se**nw / muw
        lo = kro0 * (1.0 - se) ** no / muo
        out[k] = lw / (lw + lo)
    return out


@njit(cache=True, nogil=True)
def _advance_loops(s, face_a, face_b, face_flux, q_inj, q_prod, pv, dt, nsteps, rel):
    s = s.copy()
    n = s.shape[0]
    nf = face_a.shape[0]
    swr, sor, nw, no, krw0, kro0, muw, muo = rel[0], rel[1], rel[2], rel[3], rel[4], rel[5], rel[6], rel[7]
    tot_inj = 0.0
    for k in range(n):
        tot_inj += q_inj[k]
    worst = 0.0
    water_out = 0.0
    rate = np.empty(n)
    for _ in range(nsteps):
        fw = _frac_flow_loops(s, swr, sor, nw, no, krw0, kro0, muw, muo)
        for k in range(n):
            rate[k] = q_inj[k] - q_prod[k] * fw[k]
        for f in range(nf):
            a = face_a[f]
            b = face_b[f]
            F = face_flux[f]
            w = F * (fw[a] if F > 0.0 else fw[b])
            rate[a] -= w
            rate[b] += w
        stored = 0.0
        produced = 0.0
        for k in range(n):
            ds = dt * rate[k] / pv[k]
            s[k] += ds
            stored += pv[k] * ds
            produced += q_prod[k] * fw[k]
        net = dt * (tot_inj - produced)
        scale = dt * tot_inj if tot_inj > 0.0 else 1.0
        err = abs(stored - net) / scale
        if err > worst:
            worst = err
        water_out += dt * produced
    return s, worst, water_out


def frac_flow(s, rel):
    swr, sor, nw, no, krw0, kro0, muw, muo = rel
    se = np.clip((np.asarray(s, dtype=float) - swr) / (1.0 - swr - sor), 0.0, 1.0)
    lw = krw0 * se**nw / muw
    lo = kro0 * (1.0 - se) ** no / muo
    return lw / (lw + lo)


def _advance_numpy(s, face_a, face_b, face_flux, q_inj, q_prod, pv, dt, nsteps, rel):
    s = s.copy()
    n = s.size
    tot_inj = q_inj.sum()
    scale = dt * tot_inj if tot_inj > 0 else 1.0
    forward = face_flux > 0.0
    worst = 0.0
    water_out = 0.0
    for _ in range(nsteps):
        fw = frac_flow(s, rel)
        w = face_flux * np.where(forward, fw[face_a], fw[face_b])
        rate = q_inj - q_prod * fw
        rate = rate - np.bincount(face_a, weights=w, minlength=n) + np.bincount(face_b, weights=w, minlength=n)
        ds = dt * rate / pv
        s += ds
        produced = np.dot(q_prod, fw)
        worst = max(worst, abs(np.dot(pv, ds) - dt * (tot_inj - produced)) / scale)
        water_out += dt * produced
    return s, worst, water_out


def advance_saturation(
    s, face_a, face_b, face_flux, q_inj, q_prod, pv, dt, nsteps, rel, backend=None
):
    """Run ``nsteps`` explicit upwind transport steps of length ``dt``.

    ``face_flux[f] > 0`` means total flow from ``face_a[f]`` to ``face_b[f]``.
    ``rel`` packs ``(swr, sor, nw, no, krw0, kro0, mu_w, mu_o)``. Returns the
    new saturation, the worst per-step relative water-balance error and the
    water volume produced.
    """
    args = (
        np.ascontiguousarray(s, dtype=np.float64),
        np.ascontiguousarray(face_a, dtype=np.int64),
        np.ascontiguousarray(face_b, dtype=np.int64),
        np.ascontiguousarray(face_flux, dtype=np.float64),
        np.ascontiguousarray(q_inj, dtype=np.float64),
        np.ascontiguousarray(q_prod, dtype=np.float64),
        np.ascontiguousarray(pv, dtype=np.float64),
        float(dt),
        int(nsteps),
        np.asarray(rel, dtype=np.float64),
    )
    if _resolve(backend) == "numba":
        return _advance_loops(*args)
    return _advance_numpy(*args)
