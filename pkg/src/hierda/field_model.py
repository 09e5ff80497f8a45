"""Regular lattices, scalar fields and the packed assimilation state.

Cells are addressed row-major: for a 2D grid with ``dims == (nx, ny)`` the
flat index of cell ``(i, j)`` is ``i * ny + j``. ``origin`` is the centre of
cell ``(0, ..., 0)``, so cell ``i`` sits at ``origin + i * spacing``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "GridSpec",
    "Field",
    "HyperParams",
    "StateLayout",
    "pack",
    "unpack",
    "cell_coords",
    "normalize_angle",
    "write_field_csv",
    "read_field_csv",
    "write_fields_binary",
    "read_fields_binary",
]

_MAGIC = b"HDAF"
_VERSION = 1


def normalize_angle(phi):
    """Map an orientation to its representative in [-pi/2, pi/2)."""
    phi = np.asarray(phi, dtype=float)
    out = phi - np.pi * np.floor((phi + np.pi / 2) / np.pi)
    # floor can land exactly on +pi/2 through rounding
    out = np.where(out >= np.pi / 2, out - np.pi, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...] | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if not dims or len(dims) > 2:
            raise ValueError(f"only 1D and 2D grids are supported, got dims={dims}")
        if len(spacing) != len(dims):
            raise ValueError("spacing must have one entry per axis")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"all spacings must be > 0, got {spacing}")
        origin = self.origin
        if origin is None:
            origin = tuple(0.5 * s for s in spacing)
        origin = tuple(float(o) for o in origin)
        if len(origin) != len(dims):
            raise ValueError("origin must have one entry per axis")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def on_interval(cls, n: int, lo: float = 0.0, hi: float = 1.0) -> "GridSpec":
        """Cell-centred 1D grid of ``n`` cells covering ``[lo, hi]``."""
        h = (hi - lo) / n
        return cls((n,), (h,), (lo + 0.5 * h,))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def cell_measure(self) -> float:
        return float(np.prod(self.spacing))

    def flat_index(self, index) -> int:
        index = np.atleast_1d(np.asarray(index, dtype=int))
        if index.shape != (self.ndim,):
            raise ValueError(f"index {tuple(index)} does not match a {self.ndim}D grid")
        for k, (i, n) in enumerate(zip(index, self.dims)):
            if not 0 <= i < n:
                raise IndexError(f"index {i} out of range on axis {k} (size {n})")
        return int(np.ravel_multi_index(tuple(index), self.dims))

    def coords(self) -> np.ndarray:
        """Cell-centre coordinates, shape ``(size, ndim)`` in flat order."""
        axes = [o + h * np.arange(n) for o, h, n in zip(self.origin, self.spacing, self.dims)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def cell_coords(grid: GridSpec, index) -> tuple[float, ...]:
    """Centre of the cell at multi-index (or 1D integer) ``index``."""
    index = np.atleast_1d(np.asarray(index, dtype=int))
    grid.flat_index(index)  # range check
    return tuple(o + h * i for o, h, i in zip(grid.origin, grid.spacing, index))


@dataclass(frozen=True)
class Field:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.grid.size:
            raise ValueError(
                f"field has {values.size} values but grid {self.grid.dims} has {self.grid.size} cells"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.dims)

    def __eq__(self, other):
        return (
            isinstance(other, Field)
            and self.grid == other.grid
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class HyperParams:
    """Covariance hyperparameters in their unconstrained coordinates.

    1D problems use ``("log_sigma", "log_range")``; 2D problems use
    ``("log_rho", "log_alpha", "phi")`` where ``phi`` is an orientation in
    radians, always stored in [-pi/2, pi/2).
    """

    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        names = tuple(self.names)
        values = [float(v) for v in self.values]
        if len(names) != len(values):
            raise ValueError("names and values differ in length")
        if not all(np.isfinite(values)):
            raise ValueError(f"hyperparameters must be finite, got {values}")
        if "phi" in names:
            k = names.index("phi")
            values[k] = normalize_angle(values[k])
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", tuple(values))

    def __getitem__(self, name: str) -> float:
        return self.values[self.names.index(name)]

    def as_array(self) -> np.ndarray:
        return np.array(self.values)

    def replace(self, **kw) -> "HyperParams":
        vals = [kw.pop(n, v) for n, v in zip(self.names, self.values)]
        if kw:
            raise KeyError(f"unknown hyperparameters {sorted(kw)}")
        return HyperParams(self.names, vals)


@dataclass(frozen=True)
class StateLayout:
    """Ordering ``[z..., hyper...]`` of the packed state ``x = (z, theta)``."""

    n_cells: int
    hyper_names: tuple[str, ...] = field(default=())

    @property
    def size(self) -> int:
        return self.n_cells + len(self.hyper_names)

    @property
    def z(self) -> slice:
        return slice(0, self.n_cells)

    @property
    def hyper(self) -> slice:
        return slice(self.n_cells, self.size)

    def index_of(self, name: str) -> int:
        return self.n_cells + self.hyper_names.index(name)


def pack(z, hyper: HyperParams | None, grid: GridSpec | None = None) -> np.ndarray:
    """Pack a latent field and hyperparameters into one state vector."""
    if isinstance(z, Field):
        if grid is not None and z.grid != grid:
            raise ValueError("z is defined on a different grid")
        zv = z.values
    else:
        zv = np.asarray(z, dtype=float).ravel()
        if grid is not None and zv.size != grid.size:
            raise ValueError(f"z has {zv.size} entries, grid has {grid.size} cells")
    hv = hyper.as_array() if hyper is not None else np.empty(0)
    return np.concatenate([zv, hv])


def unpack(x, layout: StateLayout, grid: GridSpec | None = None):
    """Inverse of :func:`pack`; returns ``(z, hyper)``.

    ``z`` is a :class:`Field` when ``grid`` is given, otherwise an array.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (layout.size,):
        raise ValueError(f"state has shape {x.shape}, layout expects ({layout.size},)")
    z = x[layout.z].copy()
    hyper = HyperParams(layout.hyper_names, x[layout.hyper]) if layout.hyper_names else None
    if grid is not None:
        z = Field(grid, z)
    return z, hyper


# ---------------------------------------------------------------- serialization


def _grid_header(grid: GridSpec) -> str:
    fmt = lambda xs: ",".join(repr(float(v)) for v in xs)  # noqa: E731
    return (
        f"# dims={','.join(str(d) for d in grid.dims)} "
        f"spacing={fmt(grid.spacing)} origin={fmt(grid.origin)}"
    )


def _parse_header(line: str) -> GridSpec:
    parts = dict(tok.split("=", 1) for tok in line.lstrip("#").split())
    return GridSpec(
        tuple(int(v) for v in parts["dims"].split(",")),
        tuple(float(v) for v in parts["spacing"].split(",")),
        tuple(float(v) for v in parts["origin"].split(",")),
    )


def write_field_csv(path, f: Field) -> None:
    buf = io.StringIO()
    buf.write(_grid_header(f.grid) + "\n")
    for v in f.values:
        buf.write(repr(float(v)) + "\n")
    Path(path).write_text(buf.getvalue())


def read_field_csv(path) -> Field:
    lines = Path(path).read_text().splitlines()
    grid = _parse_header(lines[0])
    return Field(grid, np.array([float(s) for s in lines[1:] if s.strip()]))


def write_fields_binary(path, fields: Sequence[Field] | Field) -> None:
    """Little-endian float64 block: magic, version, ndim, count, dims, spacing, origin, data."""
    if isinstance(fields, Field):
        fields = [fields]
    if not fields:
        raise ValueError("nothing to write")
    grid = fields[0].grid
    if any(f.grid != grid for f in fields):
        raise ValueError("all fields must share one grid")
    head = _MAGIC + struct.pack("<III", _VERSION, grid.ndim, len(fields))
    head += struct.pack(f"<{grid.ndim}Q", *grid.dims)
    head += struct.pack(f"<{2 * grid.ndim}d", *grid.spacing, *grid.origin)
    data = np.stack([f.values for f in fields]).astype("<f8").tobytes()
    Path(path).write_bytes(head + data)


def read_fields_binary(path) -> list[Field]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a field file")
    version, ndim, count = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 16
    dims = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    geo = struct.unpack_from(f"<{2 * ndim}d", raw, off)
    off += 16 * ndim
    grid = GridSpec(dims, geo[:ndim], geo[ndim:])
    data = np.frombuffer(raw, dtype="<f8", offset=off).reshape(count, grid.size)
    return [Field(grid, row) for row in data]
