"""Experiment configuration, dispatch and artifact writing.

One JSON config describes one experiment; every artifact goes into a
single output directory together with ``manifest.json`` (config echo,
package versions, seeds, file checksums and a results summary). Nothing
depends on the wall clock, so reruns are bitwise identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import shutil
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__, _kernels
from .covariance import build_L, covariance_value
from .exact_oracle import mtc_sample, posterior_hyper_grid, write_hypergrid_csv
from .field_model import Field, write_field_csv, write_fields_binary
from .flow import simulate_flow, write_watercut_csv
from .forward import write_obs_csv
from .priors import sample_prior_ensemble
from .problems import DEFAULT_1D, DEFAULT_2D, TRUTH_STREAMS, flow2d_benchmark, kernel_params, linear1d_benchmark
from .sensitivity import DEFAULT_SENSITIVITY, sensitivity_study, write_grid_csv
from .smoothers import LocalizationSpec, SamplerConfig, run_sampler, write_mismatch_csv

__all__ = [
    "CONFIG_SCHEMA",
    "ConfigError",
    "OUTPUT_ROOT_ENV",
    "load_config",
    "validate_config",
    "resolve_output_dir",
    "run_experiment",
    "run_sensitivity_study",
]

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "HIERDA_OUTPUT_ROOT"
MANIFEST = "manifest.json"

_SMOOTHER = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lam0": {"type": "number", "exclusiveMinimum": 0},
        "factor": {"type": "number", "exclusiveMinimum": 1},
        "max_iter": {"type": "integer", "minimum": 1},
        "min_rel_reduction": {"type": "number", "minimum": 0},
        "max_increases": {"type": ["integer", "null"], "minimum": 1},
        "energy": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "shared_lambda": {"type": "boolean"},
        "exact_Gm": {"type": "boolean"},
        "localization": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "required": ["taper_range"],
            "properties": {"taper_range": {"type": "number", "exclusiveMinimum": 0}},
        },
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "hierda experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["problem", "seed"],
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "problem": {"enum": ["linear1d", "flow2d", "sensitivity2d"]},
        "method": {"enum": ["rml", "ies", "hybrid", "mtc"]},
        "seed": {"type": "integer", "minimum": 0},
        "ensemble_size": {"type": "integer", "minimum": 1},
        "covariance": {"enum": ["hierarchical", "fixed", "rotated"]},
        "backend": {"enum": ["numba", "numpy"]},
        "setup": {"type": "object"},
        "smoother": _SMOOTHER,
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "resolution": {"type": "integer", "minimum": 50},
                "width": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output_dir": {"type": "string"},
    },
}

_SETUP_KEYS = {"linear1d": DEFAULT_1D, "flow2d": DEFAULT_2D, "sensitivity2d": DEFAULT_SENSITIVITY}
_DEFAULT_SIZE = {"rml": 100, "ies": 200, "hybrid": 100, "mtc": 100}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    validate_config(cfg)
    cfg.setdefault("name", Path(path).stem)
    return cfg


def validate_config(cfg: dict) -> None:
    """Schema plus cross-field checks; raises :class:`ConfigError`."""
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "config" + "".join(f"[{p!r}]" if isinstance(p, int) else f".{p}" for p in e.path)
        raise ConfigError(f"{where}: {e.message}")
    problem = cfg["problem"]
    method = cfg.get("method")
    unknown = set(cfg.get("setup", {})) - set(_SETUP_KEYS[problem])
    if unknown:
        raise ConfigError(f"config.setup: unknown key(s) for {problem}: {', '.join(sorted(unknown))}")
    if problem in ("linear1d", "flow2d") and method is None:
        raise ConfigError(f"config.method: required for problem {problem!r}")
    if problem == "sensitivity2d" and method is not None:
        raise ConfigError("config.method: not used by the sensitivity study")
    if method == "mtc" and problem != "linear1d":
        raise ConfigError("config.method: the exact 'mtc' sampler exists only for linear1d")
    if method == "rml" and problem != "linear1d":
        raise ConfigError("config.method: 'rml' needs an analytic observation Jacobian (linear1d only)")
    if "covariance" in cfg and problem != "flow2d":
        raise ConfigError("config.covariance: only meaningful for flow2d")
    sm = cfg.get("smoother", {})
    if sm.get("localization") and method != "ies":
        raise ConfigError("config.smoother.localization: only applied in IES")
    if sm.get("exact_Gm") and problem != "linear1d":
        raise ConfigError("config.smoother.exact_Gm: needs a linear observer (linear1d)")
    if cfg.get("ensemble_size", 2) < 2 and method in ("ies", "hybrid"):
        raise ConfigError("config.ensemble_size: ensemble methods need at least two members")


def resolve_output_dir(cfg: dict, out: str | None = None) -> Path:
    if out:
        return Path(out)
    if "output_dir" in cfg:
        return Path(cfg["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV, "hierda-runs")
    return Path(root) / cfg.get("name", "experiment")


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"{path} is not empty; pass --force to overwrite")
        if (path / MANIFEST).exists():
            shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else None
    return v


def _write_manifest(out: Path, cfg: dict, backend: str, summary: dict, seeds: dict) -> dict:
    files = {p.name: _sha256(p) for p in sorted(out.iterdir()) if p.name != MANIFEST}
    manifest = {
        "config": cfg,
        "versions": {
            "hierda": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "backend": backend,
        "seeds": seeds,
        "files": files,
        "summary": _jsonable(summary),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class _Built:
    problem: object
    truth: np.ndarray
    bench: object


def _build(cfg, backend) -> _Built:
    setup = cfg.get("setup", {})
    if cfg["problem"] == "linear1d":
        b = linear1d_benchmark(cfg["seed"], setup)
        return _Built(b.problem, b.truth, b)
    b = flow2d_benchmark(cfg["seed"], setup, backend=backend)
    cov = cfg.get("covariance", "hierarchical")
    problem = {"hierarchical": b.problem, "fixed": None, "rotated": None}[cov]
    if cov == "fixed":
        problem = b.fixed_problem()
    elif cov == "rotated":
        problem = b.fixed_problem(np.pi / 2)
    return _Built(problem, b.truth, b)


def _sampler_config(cfg, problem, workers) -> SamplerConfig:
    sm = dict(cfg.get("smoother", {}))
    loc = sm.pop("localization", "default")
    method = cfg["method"]
    if loc == "default":
        # IES on the flow problem is localized by default, with the data-generating principal range
        loc = {"taper_range": float(cfg.get("setup", {}).get("truth", DEFAULT_2D["truth"])["rho"])} \
            if method == "ies" and cfg["problem"] == "flow2d" else None
    return SamplerConfig(method=method, workers=workers,
                         localization=LocalizationSpec(loc["taper_range"]) if loc else None, **sm)


def _write_hyper_csv(path, names, X, n_cells, extra: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["member", *names, *extra])
        for i, x in enumerate(X):
            row = [i, *(repr(float(v)) for v in x[n_cells:])]
            for col in extra.values():
                v = col[i]
                row.append(int(v) if isinstance(v, (bool, np.bool_)) else repr(float(v)))
            w.writerow(row)


def cov_error_map(problem, path) -> None:
    """``L L^T`` against the target covariance for the central cell, one row per cell."""
    grid = problem.grid
    fam, p = kernel_params(problem.family, problem.fixed)
    L = build_L(grid, fam, p, backend=problem.backend).L
    coords = grid.coords()
    c = grid.size // 2 if grid.ndim == 1 else grid.flat_index(tuple(d // 2 for d in grid.dims))
    llt = L[c] @ L.T
    dx = coords - coords[c]
    target = covariance_value(fam, dx[:, 0] if grid.ndim == 1 else dx, p)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", *[f"x{k}" for k in range(grid.ndim)], "llt", "cov", "diff"])
        for j in range(grid.size):
            w.writerow([j, *(repr(float(v)) for v in coords[j]), repr(float(llt[j])),
                        repr(float(target[j])), repr(float(llt[j] - target[j]))])


def run_experiment(cfg: dict, out_dir, workers: int = 1, force: bool = False, cov_error: bool = False) -> dict:
    """Run one experiment and write its artifacts; returns the manifest."""
    validate_config(cfg)
    if cfg["problem"] == "sensitivity2d":
        return run_sensitivity_study(cfg, out_dir, force=force)
    backend = cfg.get("backend") or _kernels.default_backend()
    out = Path(out_dir)
    _prepare_dir(out, force)
    built = _build(cfg, backend)
    problem = built.problem
    grid = problem.grid
    seed = int(cfg["seed"])
    method = cfg["method"]
    n = int(cfg.get("ensemble_size", _DEFAULT_SIZE[method]))

    write_obs_csv(out / "observations.csv", problem.obs)
    write_field_csv(out / "truth.csv", Field(grid, built.truth))
    if cfg["problem"] == "flow2d":
        write_watercut_csv(out / "truth_watercut.csv", simulate_flow(built.truth, built.bench.model, backend=backend))
    if cov_error:
        cov_error_map(problem, out / "cov_error.csv")

    names = problem.free_names
    summary: dict = {"problem": cfg["problem"], "method": method, "ensemble_size": n, "n_data": problem.n_data}
    if method == "mtc":
        oc = cfg.get("oracle", {})
        hg = posterior_hyper_grid(problem, int(oc.get("resolution", 101)), float(oc.get("width", 4.0)))
        write_hypergrid_csv(out / "hypergrid.csv", hg)
        X = mtc_sample(problem, hg, n, np.random.default_rng([seed, 2]))
        D = np.stack([problem.predict(x) for x in X])
        s_obs = 0.5 * np.sum(((D - problem.obs.d_obs) / problem.obs.noise_std) ** 2, axis=1)
        _write_hyper_csv(out / "hyperparameters.csv", names, X, grid.size, {"s_obs": s_obs})
        write_fields_binary(out / "ensemble_m.bin", [Field(grid, problem.m_of(x)) for x in X])
        summary.update({
            "mean_s_obs": float(s_obs.mean()),
            "grid_mean": {nm: hg.mean(k) for k, nm in enumerate(names)},
            "grid_std": {nm: hg.std(k) for k, nm in enumerate(names)},
        })
        seeds = {"experiment": seed, "truth": [seed, TRUTH_STREAMS[cfg["problem"]]], "mtc": [seed, 2]}
    else:
        ens = sample_prior_ensemble(n, problem.prior, grid.size, problem.obs.noise_std, seed)
        res = run_sampler(problem, ens, _sampler_config(cfg, problem, workers))
        write_mismatch_csv(out / "mismatch_history.csv", res)
        write_fields_binary(out / "prior_m.bin", [Field(grid, problem.m_of(x)) for x in ens.anchors])
        write_fields_binary(out / "ensemble_m.bin", [Field(grid, problem.m_of(x)) for x in res.members])
        fin = res.final
        _write_hyper_csv(out / "hyperparameters.csv", names, res.members, grid.size, {
            "s_pert": fin.s_pert, "s_obs": fin.s_obs, "failed": res.failed, "converged": res.converged,
        })
        ok = ~res.failed
        summary.update({
            "iterations": len(res.history) - 1,
            "stop_reason": res.stop_reason,
            "failed_members": int(res.failed.sum()),
            "converged_members": int(res.converged.sum()),
            "mean_s_obs": float(np.nanmean(fin.s_obs[ok])) if ok.any() else None,
            "mean_s_obs_converged": float(np.mean(fin.s_obs[res.converged])) if res.converged.any() else None,
            "mean_s_pert": fin.mean_pert,
            "hyper_mean": {nm: float(res.members[ok, grid.size + k].mean()) for k, nm in enumerate(names)},
            "hyper_std": {nm: float(res.members[ok, grid.size + k].std()) for k, nm in enumerate(names)},
        })
        seeds = {"experiment": seed, "truth": [seed, TRUTH_STREAMS[cfg["problem"]]], "members": "[seed, 0, member]"}
    return _write_manifest(out, cfg, backend, summary, seeds)


def run_sensitivity_study(cfg: dict, out_dir, force: bool = False) -> dict:
    validate_config(cfg)
    if cfg["problem"] != "sensitivity2d":
        raise ConfigError("config.problem: the sensitivity command needs problem 'sensitivity2d'")
    backend = cfg.get("backend") or _kernels.default_backend()
    out = Path(out_dir)
    _prepare_dir(out, force)
    res = sensitivity_study(int(cfg["seed"]), cfg.get("setup", {}), backend=backend)
    write_grid_csv(out / "exact_sensitivity.csv", res.grid, res.exact)
    write_grid_csv(out / "hybrid_exact_Gm.csv", res.grid, res.hybrid_exact_Gm)
    for n in sorted(res.ensemble):
        write_grid_csv(out / f"ensemble_Ne{n}.csv", res.grid, res.ensemble[n])
        write_grid_csv(out / f"hybrid_Ne{n}.csv", res.grid, res.hybrid[n])
    dist = res.distances()
    with open(out / "distances.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ensemble_size", "estimator", "frobenius"])
        for n, d in dist.items():
            for k in ("ensemble", "hybrid"):
                w.writerow([n, k, repr(d[k])])
    summary = {
        "problem": "sensitivity2d",
        "obs_cell": list(res.obs_cell),
        "realization_hyper": res.hyper,
        "exact_Gm_max_abs_diff": float(np.max(np.abs(res.hybrid_exact_Gm - res.exact))),
        "frobenius": dist,
    }
    return _write_manifest(out, cfg, backend, summary, {"experiment": int(cfg["seed"]), "members": "[seed, 0, member]"})
