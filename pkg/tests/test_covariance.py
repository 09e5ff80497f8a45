import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hierda.covariance import (
    MAX_DENSE_CELLS,
    AnisoParams,
    KernelFamily,
    aniso_H,
    aniso_distance_sq,
    assemble_Mx,
    build_L,
    build_L_derivatives,
    covariance_value,
    dH,
    realize_m,
    sqrt_kernel_value,
)
from hierda.field_model import Field, GridSpec

aniso = st.builds(
    AnisoParams,
    rho=st.floats(0.05, 3.0),
    alpha=st.floats(0.2, 8.0),
    phi=st.floats(-np.pi / 2, np.pi / 2 - 1e-9),
)


def fd_rel_err(analytic, plus, minus, h, scale):
    """Central-difference error relative to the entry scale (entries with scale > 1e-12)."""
    fd = (plus - minus) / (2 * h)
    mask = scale > 1e-12
    return np.max(np.abs(analytic - fd)[mask] / scale[mask])


# ----------------------------------------------------------------- geometry


def test_H_at_phi_zero():
    p = AnisoParams(1.0, 3.0, 0.0)
    assert aniso_distance_sq(np.array([1.0, 0.0]), p) == pytest.approx(1.0)
    assert aniso_distance_sq(np.array([0.0, 1.0]), p) == pytest.approx(9.0)


@given(aniso, st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_H_matches_rotate_then_stretch(p, dx):
    """Oracle: rotate into the principal frame, stretch the second axis, take |.|^2."""
    c, s = np.cos(p.phi), np.sin(p.phi)
    A = np.diag([1.0, p.alpha]) @ np.array([[c, s], [-s, c]])
    dx = np.array(dx)
    assert aniso_distance_sq(dx, p) == pytest.approx(np.sum((A @ dx) ** 2), rel=1e-10, abs=1e-12)


def test_H_explicit_value():
    p = AnisoParams(1.0, 2.0, np.pi / 4)
    # rotation by pi/4 maps (1, 1) to (sqrt 2, 0): the stretched axis sees nothing
    assert aniso_distance_sq(np.array([1.0, 1.0]), p) == pytest.approx(2.0)
    assert aniso_distance_sq(np.array([1.0, -1.0]), p) == pytest.approx(8.0)


@given(st.floats(-np.pi / 2, np.pi / 2 - 1e-9), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_isotropic_when_alpha_is_one(phi, dx):
    p = AnisoParams(0.7, 1.0, phi)
    assert aniso_distance_sq(np.array(dx), p) == pytest.approx(np.dot(dx, dx), abs=1e-12)
    assert np.allclose(dH(p)[0], 0.0)


def test_dH_closed_forms_and_fd():
    p = AnisoParams(1.0, 2.5, 0.3)
    dphi, dalpha = dH(p)
    h = 1e-5
    fd_phi = (aniso_H(AnisoParams(1.0, 2.5, 0.3 + h)) - aniso_H(AnisoParams(1.0, 2.5, 0.3 - h))) / (2 * h)
    fd_alpha = (aniso_H(AnisoParams(1.0, 2.5 + h, 0.3)) - aniso_H(AnisoParams(1.0, 2.5 - h, 0.3))) / (2 * h)
    assert np.max(np.abs(dphi - fd_phi)) / np.max(np.abs(dphi)) < 1e-6
    assert np.max(np.abs(dalpha - fd_alpha)) / np.max(np.abs(dalpha)) < 1e-6
    _, da0 = dH(AnisoParams(1.0, 2.5, 0.0))
    assert np.allclose(da0, np.diag([0.0, 5.0]))


# ------------------------------------------------------------ kernel values


def test_gaussian2d_peak_value():
    fam = KernelFamily("gaussian2d", 2.0)
    assert sqrt_kernel_value(fam, np.zeros(2), AnisoParams(1.0, 1.0, 0.0)) == pytest.approx(4 * np.sqrt(3 / np.pi))


def test_one_sided_exponential_is_causal():
    fam = KernelFamily("exponential1d", 1.3, "one-sided")
    assert np.all(sqrt_kernel_value(fam, np.array([-1.0, -1e-3]), 0.2) == 0.0)
    assert sqrt_kernel_value(fam, 0.1, 0.2) > 0


@pytest.mark.parametrize("a_cells", [5, 8, 12])
def test_gaussian1d_self_convolution_reproduces_covariance(a_cells):
    """Oracle: numerical convolution of f with itself on a fine line vs closed-form C."""
    fam = KernelFamily("gaussian1d", 1.4)
    h = 1.0 / 200
    a = a_cells * h
    t = np.arange(-2000, 2001) * h
    f = sqrt_kernel_value(fam, t, a)
    for lag in (0, 2, 5, 10, 20):
        conv = np.sum(f * np.interp(t - lag * h, t, f)) * h
        assert conv == pytest.approx(covariance_value(fam, lag * h, a), abs=0.01 * fam.sigma**2)


def test_unknown_family_and_bad_sigma():
    with pytest.raises(ValueError):
        KernelFamily("spherical", 1.0)
    with pytest.raises(ValueError):
        KernelFamily("gaussian1d", 0.0)
    with pytest.raises(ValueError):
        AnisoParams(-1.0, 1.0, 0.0)


# ------------------------------------------------------------------ build_L


def _interior(n, margin):
    return np.arange(margin, n - margin)


@pytest.mark.parametrize("fam,tol", [
    (KernelFamily("gaussian1d", 1.08), 0.02),
    (KernelFamily("exponential1d", 1.08), 0.05),
    (KernelFamily("exponential1d", 1.08, "one-sided"), 0.05),
])
def test_factorization_fidelity_1d(fam, tol):
    grid = GridSpec.on_interval(300)
    a = 10 * grid.spacing[0]
    L = build_L(grid, fam, a).L
    C = L @ L.T
    x = grid.coords()[:, 0]
    idx = _interior(grid.size, 100)
    target = covariance_value(fam, x[idx, None] - x[None, :], a)
    assert np.max(np.abs(C[idx] - target)) <= tol * fam.sigma**2


def test_diag_of_LLt_is_variance():
    grid = GridSpec.on_interval(150)
    L = build_L(grid, KernelFamily("gaussian1d", 1.08), 0.1).L
    d = np.einsum("ij,ij->i", L, L)[30:120]
    assert np.allclose(d, 1.08**2, rtol=0.02)


def test_factorization_fidelity_2d():
    grid = GridSpec((56, 56), (1 / 56, 1 / 56))
    fam = KernelFamily("gaussian2d", 2.0)
    p = AnisoParams(0.2, 1.6, 0.6)  # ranges of ~11 and ~7 cells
    L = build_L(grid, fam, p).L
    coords = grid.coords()
    inner = [grid.flat_index((i, j)) for i in range(22, 34, 3) for j in range(22, 34, 3)]
    C_rows = L[inner] @ L.T
    target = covariance_value(fam, coords[inner][:, None, :] - coords[None, :, :], p)
    assert np.max(np.abs(C_rows - target)) <= 0.02 * fam.sigma**2


def test_sigma_linearity_and_zero_limit():
    grid = GridSpec((6, 5), (0.1, 0.1))
    p = AnisoParams(0.4, 2.0, 0.3)
    L1 = build_L(grid, KernelFamily("gaussian2d", 1.0), p).L
    L3 = build_L(grid, KernelFamily("gaussian2d", 3.0), p).L
    assert np.allclose(L3, 3 * L1, rtol=1e-14)
    tiny = build_L(grid, KernelFamily("gaussian2d", 1e-300), p).L
    assert np.max(np.abs(tiny)) < 1e-290
    g1 = GridSpec.on_interval(20)
    for fam in (KernelFamily("gaussian1d", 1.0), KernelFamily("exponential1d", 1.0)):
        assert np.allclose(build_L(g1, fam.with_sigma(2.5), 0.1).L, 2.5 * build_L(g1, fam, 0.1).L, rtol=1e-14)


@given(aniso)
def test_phi_pi_periodicity(p):
    grid = GridSpec((5, 4), (0.2, 0.2))
    fam = KernelFamily("gaussian2d", 1.5)
    a = build_L(grid, fam, p, derivatives=True)
    b = build_L(grid, fam, AnisoParams(p.rho, p.alpha, p.phi + np.pi), derivatives=True)
    assert np.allclose(a.L, b.L, rtol=1e-10, atol=1e-300)
    for k in a.derivatives:
        assert np.allclose(a.derivatives[k], b.derivatives[k], rtol=1e-9, atol=1e-12 * np.max(np.abs(a.L)))


def test_dense_guard():
    big = GridSpec((101, 100), (0.01, 0.01))
    assert big.size > MAX_DENSE_CELLS
    with pytest.raises(ValueError, match="dense"):
        build_L(big, KernelFamily("gaussian2d", 1.0), AnisoParams(1.0, 1.0, 0.0))


def test_family_grid_mismatch():
    with pytest.raises(ValueError):
        build_L(GridSpec((4, 4), (1, 1)), KernelFamily("gaussian1d"), 1.0)
    with pytest.raises(TypeError):
        build_L(GridSpec((4, 4), (1, 1)), KernelFamily("gaussian2d"), 1.0)


def test_backends_agree():
    grid = GridSpec((12, 7), (1 / 12, 1 / 12))
    fam = KernelFamily("gaussian2d", 2.0)
    p = AnisoParams(0.5, 3.0, -0.7)
    a = build_L(grid, fam, p, derivatives=True, backend="numpy")
    from hierda import _kernels

    if not _kernels.NUMBA_AVAILABLE:
        pytest.skip("numba not installed")
    b = build_L(grid, fam, p, derivatives=True, backend="numba")
    assert np.allclose(a.L, b.L, rtol=1e-13, atol=1e-15)
    for k in a.derivatives:
        assert np.allclose(a.derivatives[k], b.derivatives[k], rtol=1e-12, atol=1e-14)


# -------------------------------------------------------------- derivatives


def _fd_check_1d(fam, a, grid):
    h = 1e-5
    d = build_L_derivatives(grid, fam, a)
    L = build_L(grid, fam, a).L
    Lp = build_L(grid, fam, a * np.exp(h)).L
    Lm = build_L(grid, fam, a * np.exp(-h)).L
    scale = np.maximum(np.abs(L), np.abs(d["log_range"]))
    return d, L, fd_rel_err(d["log_range"], Lp, Lm, h, scale)


@pytest.mark.parametrize("fam", [
    KernelFamily("gaussian1d", 1.3),
    KernelFamily("exponential1d", 0.8),
    KernelFamily("exponential1d", 0.8, "one-sided"),
])
@pytest.mark.parametrize("a", [0.03, 0.1, 0.4])
def test_1d_derivatives_match_finite_differences(fam, a):
    d, L, err = _fd_check_1d(fam, a, GridSpec.on_interval(40))
    assert err < 1e-5
    assert np.array_equal(d["log_sigma"], L)


def _fd_2d(grid, fam, p):
    h = 1e-5
    d = build_L_derivatives(grid, fam, p)
    L = build_L(grid, fam, p).L
    shifts = {
        "log_rho": lambda s: AnisoParams(p.rho * np.exp(s), p.alpha, p.phi),
        "log_alpha": lambda s: AnisoParams(p.rho, p.alpha * np.exp(s), p.phi),
        "phi": lambda s: AnisoParams(p.rho, p.alpha, p.phi + s),
    }
    errs = {}
    for k, mk in shifts.items():
        plus, minus = build_L(grid, fam, mk(h)).L, build_L(grid, fam, mk(-h)).L
        errs[k] = fd_rel_err(d[k], plus, minus, h, np.maximum(np.abs(L), np.abs(d[k])))
    return d, errs


@given(aniso)
def test_2d_derivatives_match_finite_differences(p):
    grid = GridSpec((7, 5), (0.1, 0.1))
    _, errs = _fd_2d(grid, KernelFamily("gaussian2d", 2.0), p)
    assert max(errs.values()) < 1e-5, errs


def test_no_orientation_sensitivity_when_isotropic():
    grid = GridSpec((6, 6), (0.2, 0.2))
    d = build_L_derivatives(grid, KernelFamily("gaussian2d", 2.0), AnisoParams(0.5, 1.0, 0.4))
    assert np.max(np.abs(d["phi"])) < 1e-12


# -------------------------------------------------------------- M_x, realize


def test_Mx_blocks():
    grid = GridSpec((5, 4), (0.25, 0.25))
    cov = build_L(grid, KernelFamily("gaussian2d", 2.0), AnisoParams(0.6, 2.0, 0.2), derivatives=True)
    Mx = assemble_Mx(cov, np.zeros(grid.size))
    assert Mx.shape == (20, 23)
    assert np.all(Mx[:, 20:] == 0)
    e = np.zeros(20)
    e[7] = 1.0
    assert np.array_equal(Mx[:, :20] @ e, cov.L @ e)
    with pytest.raises(ValueError):
        assemble_Mx(cov, np.zeros(19))


@pytest.mark.parametrize("dim", [1, 2])
def test_Mx_matches_finite_difference_of_m(dim, rng):
    if dim == 1:
        grid, fam = GridSpec.on_interval(30), KernelFamily("gaussian1d", 1.0)

        def m_of(x):
            return build_L(grid, fam.with_sigma(np.exp(x[-2])), np.exp(x[-1])).L @ x[:-2]

        def Mx_of(x):
            cov = build_L(grid, fam.with_sigma(np.exp(x[-2])), np.exp(x[-1]), derivatives=True)
            return assemble_Mx(cov, x[:-2])

        x = np.concatenate([rng.standard_normal(grid.size), [0.1, np.log(0.1)]])
    else:
        grid, fam = GridSpec((6, 5), (0.2, 0.2)), KernelFamily("gaussian2d", 2.0)

        def params(x):
            return AnisoParams(np.exp(x[-3]), np.exp(x[-2]), x[-1])

        def m_of(x):
            return build_L(grid, fam, params(x)).L @ x[:-3]

        def Mx_of(x):
            return assemble_Mx(build_L(grid, fam, params(x), derivatives=True), x[:-3])

        x = np.concatenate([rng.standard_normal(grid.size), [-0.3, 0.8, 0.9]])
    for _ in range(5):
        dx = 1e-6 * rng.standard_normal(x.size)
        fd = m_of(x + dx) - m_of(x - dx)
        lin = 2 * Mx_of(x) @ dx
        assert np.linalg.norm(fd - lin) / np.linalg.norm(lin) < 1e-4


def test_realize_m(rng):
    grid = GridSpec.on_interval(60)
    cov = build_L(grid, KernelFamily("gaussian1d", 1.08), 0.1)
    m_pr = Field(grid, np.full(60, 0.5))
    assert realize_m(m_pr, cov, np.zeros(60)) == m_pr
    z1, z2 = rng.standard_normal((2, 60))
    lhs = realize_m(m_pr, cov, z1 + z2).values - 0.5
    rhs = (realize_m(m_pr, cov, z1).values - 0.5) + (realize_m(m_pr, cov, z2).values - 0.5)
    assert np.allclose(lhs, rhs, atol=1e-13)
    Z = rng.standard_normal((60, 10_000))
    M = realize_m(np.zeros(60), cov, Z)
    assert np.var(M[30]) == pytest.approx(np.sum(cov.L[30] ** 2), rel=0.05)
    assert np.var(M[30]) == pytest.approx(1.08**2, rel=0.05)
