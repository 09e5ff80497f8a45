import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hierda.field_model import (
    Field,
    GridSpec,
    HyperParams,
    StateLayout,
    cell_coords,
    normalize_angle,
    pack,
    read_field_csv,
    read_fields_binary,
    unpack,
    write_field_csv,
    write_fields_binary,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_pack_zero_case():
    grid = GridSpec((4,), (0.25,))
    x = pack(Field(grid, np.zeros(4)), HyperParams(("log_rho", "log_alpha", "phi"), (0, 0, 0)), grid)
    assert x.shape == (7,)
    assert np.all(x == 0)


def test_benchmark_state_length():
    grid = GridSpec((30, 15), (1 / 30, 1 / 30))
    layout = StateLayout(grid.size, ("log_rho", "log_alpha", "phi"))
    assert grid.size == 450
    assert layout.size == 453


@given(arrays(float, 12, elements=finite), st.lists(finite, min_size=2, max_size=2), st.floats(-10, 10))
def test_pack_unpack_round_trip(z, u, phi):
    grid = GridSpec((4, 3), (1.0, 2.0))
    h = HyperParams(("log_rho", "log_alpha", "phi"), (*u, phi))
    x = pack(z, h, grid)
    z2, h2 = unpack(x, StateLayout(grid.size, h.names), grid)
    assert np.array_equal(z2.values, z)
    assert h2 == h
    assert np.array_equal(pack(z2, h2), x)


def test_pack_dimension_mismatch():
    grid = GridSpec((5,), (0.2,))
    with pytest.raises(ValueError):
        pack(np.zeros(4), None, grid)
    with pytest.raises(ValueError):
        unpack(np.zeros(3), StateLayout(5))


def test_cell_coords_1d_benchmark():
    grid = GridSpec.on_interval(150, 0.0, 1.0)
    assert cell_coords(grid, 0) == pytest.approx((1 / 300,), abs=1e-15)
    c = grid.coords()[:, 0]
    assert np.allclose(np.diff(c), 1 / 150)
    with pytest.raises(IndexError):
        cell_coords(grid, 150)


def test_cell_coords_2d():
    grid = GridSpec((30, 15), (1 / 30, 1 / 30))
    assert cell_coords(grid, (0, 0)) == grid.origin
    a, b = cell_coords(grid, (3, 4)), cell_coords(grid, (4, 4))
    assert b[0] - a[0] == pytest.approx(1 / 30)
    assert b[1] == a[1]
    with pytest.raises(IndexError):
        cell_coords(grid, (0, 15))
    # flat order is row-major with the second index fastest
    assert grid.flat_index((1, 0)) == 15
    assert np.allclose(grid.coords()[grid.flat_index((3, 4))], a)


@given(st.floats(-50, 50))
def test_normalize_angle_interval(phi):
    out = normalize_angle(phi)
    assert -np.pi / 2 <= out < np.pi / 2
    assert np.isclose(np.sin(2 * out), np.sin(2 * phi), atol=1e-9)
    assert np.isclose(np.cos(2 * out), np.cos(2 * phi), atol=1e-9)


def test_hyperparams_phi_normalized():
    h = HyperParams(("log_rho", "log_alpha", "phi"), (0.0, 1.0, 0.93 + np.pi))
    assert h["phi"] == pytest.approx(0.93)
    with pytest.raises(ValueError):
        HyperParams(("a",), (np.nan,))


def test_field_is_immutable_and_validated():
    grid = GridSpec((3,), (1.0,))
    f = Field(grid, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        f.values[0] = 5.0
    with pytest.raises(ValueError):
        Field(grid, [1.0, 2.0])
    with pytest.raises(ValueError):
        Field(grid, [1.0, np.inf, 2.0])


@given(arrays(float, 6, elements=finite))
def test_csv_and_binary_round_trip(tmp_path_factory, vals):
    d = tmp_path_factory.mktemp("io")
    grid = GridSpec((2, 3), (0.5, 0.25), (1.0, -2.0))
    f = Field(grid, vals)
    write_field_csv(d / "f.csv", f)
    assert read_field_csv(d / "f.csv") == f
    write_fields_binary(d / "f.bin", [f, Field(grid, -vals)])
    back = read_fields_binary(d / "f.bin")
    assert back[0] == f and back[1] == Field(grid, -vals)


def test_serialization_is_bitwise_stable(tmp_path):
    grid = GridSpec((4,), (0.1,))
    f = Field(grid, [0.1, 0.2, 1 / 3, -7.0])
    write_fields_binary(tmp_path / "a.bin", f)
    write_fields_binary(tmp_path / "b.bin", f)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    with pytest.raises(ValueError):
        (tmp_path / "c.bin").write_bytes(b"nope" + bytes(20))
        read_fields_binary(tmp_path / "c.bin")
