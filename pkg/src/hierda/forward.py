"""Observation operators, observation sets and synthetic truth generation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .covariance import KernelFamily, build_L
from .field_model import Field, GridSpec

__all__ = [
    "LinearObserver",
    "ObsSet",
    "linear_observe",
    "perturb_observations",
    "generate_truth_and_data",
    "write_obs_csv",
    "read_obs_csv",
]


@dataclass(frozen=True)
class LinearObserver:
    """Point sampling of ``m`` at ``obs_indices`` (flat cell indices)."""

    obs_indices: tuple[int, ...]
    noise_std: float
    n_cells: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.obs_indices)
        if len(set(idx)) != len(idx):
            raise ValueError("observation indices must be unique")
        if any(not 0 <= i < self.n_cells for i in idx):
            raise IndexError("observation index outside the grid")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be > 0")
        object.__setattr__(self, "obs_indices", idx)

    @classmethod
    def every_kth(cls, n_cells: int, k: int, noise_std: float, start: int = 0) -> "LinearObserver":
        return cls(tuple(range(start, n_cells, k)), noise_std, n_cells)

    @property
    def n_data(self) -> int:
        return len(self.obs_indices)

    def __call__(self, m) -> np.ndarray:
        m = m.values if isinstance(m, Field) else np.asarray(m, dtype=float)
        return m[list(self.obs_indices)]

    def jacobian(self) -> np.ndarray:
        """The 0/1 selection matrix ``G_m``."""
        G = np.zeros((self.n_data, self.n_cells))
        G[np.arange(self.n_data), self.obs_indices] = 1.0
        return G


def linear_observe(m, obs: LinearObserver) -> np.ndarray:
    return obs(m)


@dataclass(frozen=True)
class ObsSet:
    d_obs: np.ndarray
    noise_std: np.ndarray
    well: np.ndarray | None = None  # producer index per datum (flow data)
    time: np.ndarray | None = None
    cell: np.ndarray | None = None  # flat cell index per datum (point data)
    noiseless: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        d = np.asarray(self.d_obs, dtype=float).ravel()
        std = np.broadcast_to(np.asarray(self.noise_std, dtype=float), d.shape).copy()
        if d.size == 0:
            raise ValueError("an observation set needs at least one datum")
        if np.any(std <= 0):
            raise ValueError("observation stds must be > 0")
        object.__setattr__(self, "d_obs", d)
        object.__setattr__(self, "noise_std", std)

    @property
    def n_data(self) -> int:
        return self.d_obs.size


def perturb_observations(noise_std, rng, size=None) -> np.ndarray:
    """Draws of ``eps' ~ N(0, diag(noise_std^2))``."""
    std = np.asarray(noise_std, dtype=float)
    if np.any(std <= 0):
        raise ValueError("noise stds must be > 0")
    shape = std.shape if size is None else (size,) + std.shape
    return rng.standard_normal(shape) * std


def generate_truth_and_data(
    grid: GridSpec,
    family: KernelFamily,
    params,
    m_pr,
    forward: Callable[[np.ndarray], np.ndarray],
    noise_std,
    rng,
    meta: dict | None = None,
) -> tuple[Field, ObsSet]:
    """Draw a truth ``m = m_pr + L z``, run ``forward`` and add noise.

    ``noise_std`` may be zero, giving noise-free data (the returned ObsSet
    then records a unit std placeholder so it stays usable).
    """
    L = build_L(grid, family, params).L
    z = rng.standard_normal(grid.size)
    m_pr = np.broadcast_to(np.asarray(m_pr, dtype=float), (grid.size,))
    truth = Field(grid, m_pr + L @ z)
    clean = np.asarray(forward(truth.values), dtype=float)
    std = np.broadcast_to(np.asarray(noise_std, dtype=float), clean.shape)
    noisy = clean + rng.standard_normal(clean.shape) * std
    obs_std = np.where(std > 0, std, 1.0)
    return truth, ObsSet(noisy, obs_std, noiseless=clean, **(meta or {}))


def write_obs_csv(path, obs: ObsSet) -> None:
    n = obs.n_data
    col = lambda a: a if a is not None else [""] * n  # noqa: E731
    clean = obs.noiseless if obs.noiseless is not None else [""] * n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "well", "time", "cell", "value", "noiseless", "std"])
        for k, (wl, t, c, v, nl, s) in enumerate(
            zip(col(obs.well), col(obs.time), col(obs.cell), obs.d_obs, clean, obs.noise_std)
        ):
            w.writerow([k, _fmt(wl), _fmt(t), _fmt(c), repr(float(v)), _fmt(nl), repr(float(s))])


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_obs_csv(path) -> ObsSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))

    def column(name, conv):
        vals = [r[name] for r in rows]
        return None if all(v == "" for v in vals) else np.array([conv(v) for v in vals])

    return ObsSet(
        column("value", float),
        column("std", float),
        well=column("well", int),
        time=column("time", float),
        cell=column("cell", int),
        noiseless=column("noiseless", float),
    )


def read_csv_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
