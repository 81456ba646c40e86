"""Reproducible experiment drivers behind the command-line interface.

Each experiment is described by a single flat-key JSON config file (typed
scalars and lists only). Configs are schema-validated: unknown keys are
rejected and every parameter-object constraint is checked before any compute
starts. Each run writes

* ``manifest.json`` -- the fully resolved config (defaults materialized)
  plus the artifact version; parsing a manifest as a config reproduces the
  run byte for byte,
* ``report.json`` -- computed results, solver hygiene numbers and the
  verdicts of any ``check.*`` thresholds in the config,
* the experiment's data files (CSV tables with a schema-version header
  line, NDJSON for trajectories).

Independent (n, seed) jobs fan out to a process pool when ``threads > 1``
and are merged in input order, so the thread count never changes output.

Exit codes: 0 success, 2 config error (nothing computed), 3 numerical
failure, 4 one or more configured checks failed (outputs still written).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import (
    DegenerateInput,
    EmpiricalMeasure,
    fit_rate,
    wasserstein1_density,
    wasserstein1_vs_density,
)
from .model import (
    Atoms,
    BoundedConfidence,
    LinearDifference,
    ModelParams,
    NeighborValue,
    SeededStream,
    Uniform,
)
from .particles import (
    AnalyticLinear,
    AnalyticSlant,
    FrozenEmpirical,
    NonFiniteState,
    ParticleSystem,
    ProcessKind,
    SimConfig,
    coupling_experiment,
    run_trajectory,
)
from .pde import (
    BFamilyDensity,
    CflViolation,
    DegenerateParams,
    DomainOverflow,
    Grid1D,
    PdeConfig,
    aggregate,
    dirac_contraction_map,
    evolve,
    slant_contraction_atoms,
    slant_fixed_point,
    slant_fixed_point_alt,
    slant_mean,
    steady_state_mixture,
    steady_state_slant,
)

__all__ = [
    "ConfigError",
    "ResolvedConfig",
    "load_config",
    "resolve_config",
    "run_experiment",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_NUMERICAL",
    "EXIT_CHECKS",
]

log = logging.getLogger("opidyn")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECKS = 4

EXPERIMENTS = ("simulate", "pde", "steady", "converge", "coupling", "figures", "slant-mean")


class ConfigError(ValueError):
    """Config file rejected before any compute."""


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class _Field:
    kind: str  # int | float | bool | str | list_int | list_float | pairs
    required: bool = False
    default: object = None
    choices: tuple | None = None


_COMMON = {
    "experiment": _Field("str", required=True, choices=EXPERIMENTS),
    "seed": _Field("int", required=True),
    "artifact_version": _Field("str"),
    "params.omega": _Field("float", required=True),
    "params.alpha": _Field("float", required=True),
    "params.sigma": _Field("float", required=True),
    "params.lambda": _Field("float", default=1.0),
    "kernel.variant": _Field(
        "str", required=True, choices=("linear_difference", "bounded_confidence", "neighbor_value")
    ),
    "kernel.delta1": _Field("float"),
    "kernel.delta2": _Field("float"),
    "initial.variant": _Field("str", required=True, choices=("atoms", "uniform")),
    "initial.atoms": _Field("pairs"),
    "initial.lo": _Field("float"),
    "initial.hi": _Field("float"),
}

_GRID = {
    "grid.x_min": _Field("float", required=True),
    "grid.x_max": _Field("float", required=True),
    "grid.nx": _Field("int", required=True),
}

_PDE_CFG = {
    "pde.dt_max": _Field("float", default=0.5),
    "pde.cfl_safety": _Field("float", default=0.4),
}

_SCHEMAS: dict[str, dict[str, _Field]] = {
    "simulate": {
        **_COMMON,
        "sim.process": _Field(
            "str", default="interacting", choices=("interacting", "intermediate", "mckean")
        ),
        "sim.n": _Field("int", required=True),
        "sim.dt": _Field("float", required=True),
        "sim.t_end": _Field("float", required=True),
        "sim.record_stride": _Field("int", default=1),
        "sim.snapshots": _Field("bool", default=False),
        "sim.drift": _Field("str", default="analytic", choices=("analytic", "frozen_initial")),
    },
    "pde": {
        **_COMMON,
        **_GRID,
        **_PDE_CFG,
        "pde.t_end": _Field("float", required=True),
        "pde.record_times": _Field("list_float"),
        "initial.discretize_k": _Field("int", default=16),
    },
    "steady": {
        **_COMMON,
        **_GRID,
        "steady.m": _Field("float"),
        "steady.variance_form": _Field(
            "str", default="rate_linear", choices=("rate_linear", "rate_squared")
        ),
        "steady.sigma_zero": _Field("bool", default=False),
        "initial.discretize_k": _Field("int", default=16),
    },
    "converge": {
        **_COMMON,
        **_GRID,
        **_PDE_CFG,
        "sim.dt": _Field("float", required=True),
        "sim.t_end": _Field("float", required=True),
        "run.n_list": _Field("list_int", required=True),
        "run.seeds": _Field("list_int", required=True),
        "initial.discretize_k": _Field("int", default=16),
        "check.slope_min": _Field("float"),
        "check.slope_max": _Field("float"),
        "check.r2_min": _Field("float"),
    },
    "coupling": {
        **_COMMON,
        "sim.dt": _Field("float", required=True),
        "sim.t_end": _Field("float", required=True),
        "run.n_list": _Field("list_int", required=True),
        "run.seeds": _Field("list_int", required=True),
        "check.slope_max": _Field("float"),
        "check.monotone": _Field("bool"),
    },
    "figures": {
        **_COMMON,
        **_GRID,
        **_PDE_CFG,
        "initial.discretize_k": _Field("int", default=16),
        "figures.t_final": _Field("float", default=200.0),
        "figures.evolution_times": _Field("list_float"),
        "figures.relax_t_end": _Field("float", default=500.0),
        "check.mode_tol": _Field("float"),
        "check.basin_tol": _Field("float"),
        "check.w1_dx_mult": _Field("float"),
        "check.mean_drift_max": _Field("float"),
    },
    "slant-mean": {
        **_COMMON,
        "sim.n": _Field("int", required=True),
        "sim.dt": _Field("float", required=True),
        "slant.t_end": _Field("float", default=100.0),
        "slant.report_every": _Field("float", default=5.0),
        "run.seeds": _Field("list_int", required=True),
        "check.band_sigma": _Field("float"),
        "check.rk4_tol": _Field("float"),
    },
}


def _coerce(key: str, field: _Field, value):
    kind = field.kind
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        v = float(value)
        if not math.isfinite(v):
            raise ConfigError(f"{key}: must be finite, got {value!r}")
        return v
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        if field.choices and value not in field.choices:
            raise ConfigError(f"{key}: must be one of {field.choices}, got {value!r}")
        return value
    if kind in ("list_int", "list_float"):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{key}: expected a nonempty list")
        elem = _Field("int" if kind == "list_int" else "float")
        return [_coerce(f"{key}[{i}]", elem, v) for i, v in enumerate(value)]
    if kind == "pairs":
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{key}: expected a nonempty list of [point, weight] pairs")
        out = []
        elem = _Field("float")
        for i, pair in enumerate(value):
            if not isinstance(pair, list) or len(pair) != 2:
                raise ConfigError(f"{key}[{i}]: expected a [point, weight] pair")
            out.append([_coerce(f"{key}[{i}][0]", elem, pair[0]),
                        _coerce(f"{key}[{i}][1]", elem, pair[1])])
        return out
    raise AssertionError(f"unknown field kind {kind}")  # pragma: no cover


@dataclass
class ResolvedConfig:
    """Validated config with defaults materialized; ``flat`` is the exact
    mapping written to the manifest."""

    experiment: str
    flat: dict

    def __getitem__(self, key: str):
        return self.flat[key]

    def get(self, key: str, default=None):
        return self.flat.get(key, default)

    def params(self) -> ModelParams:
        f = self.flat
        return ModelParams(
            omega=f["params.omega"],
            alpha=f["params.alpha"],
            sigma=f["params.sigma"],
            lam=f["params.lambda"],
        )

    def kernel(self):
        v = self.flat["kernel.variant"]
        if v == "linear_difference":
            return LinearDifference()
        if v == "bounded_confidence":
            return BoundedConfidence(self.flat["kernel.delta1"], self.flat["kernel.delta2"])
        return NeighborValue()

    def initial(self):
        if self.flat["initial.variant"] == "atoms":
            return Atoms.from_pairs(self.flat["initial.atoms"])
        return Uniform(self.flat["initial.lo"], self.flat["initial.hi"])

    def initial_atoms(self) -> Atoms:
        return self.initial().discretize(self.flat.get("initial.discretize_k", 16))

    def grid(self) -> Grid1D:
        f = self.flat
        return Grid1D(f["grid.x_min"], f["grid.x_max"], f["grid.nx"])

    def sim(self, record_stride: int | None = None) -> SimConfig:
        f = self.flat
        t_end = f["slant.t_end"] if self.experiment == "slant-mean" else f["sim.t_end"]
        return SimConfig(
            dt=f["sim.dt"],
            t_end=t_end,
            record_stride=record_stride or f.get("sim.record_stride", 1),
        )

    def pde_cfg(self, check_positivity: bool = False) -> PdeConfig:
        f = self.flat
        return PdeConfig(
            dt_max=f.get("pde.dt_max", 0.5),
            cfl_safety=f.get("pde.cfl_safety", 0.4),
            check_positivity=check_positivity,
        )

    def seed_stream(self) -> SeededStream:
        return SeededStream(self.flat["seed"])


def _validate_conditionals(flat: dict) -> None:
    kv = flat["kernel.variant"]
    if kv == "bounded_confidence":
        if "kernel.delta1" not in flat or "kernel.delta2" not in flat:
            raise ConfigError("bounded_confidence needs kernel.delta1 and kernel.delta2")
    else:
        for key in ("kernel.delta1", "kernel.delta2"):
            if key in flat:
                raise ConfigError(f"{key} is only valid for kernel.variant=bounded_confidence")
    iv = flat["initial.variant"]
    if iv == "atoms":
        if "initial.atoms" not in flat:
            raise ConfigError("initial.variant=atoms needs initial.atoms")
        for key in ("initial.lo", "initial.hi"):
            if key in flat:
                raise ConfigError(f"{key} is only valid for initial.variant=uniform")
    else:
        if "initial.lo" not in flat or "initial.hi" not in flat:
            raise ConfigError("initial.variant=uniform needs initial.lo and initial.hi")
        if "initial.atoms" in flat:
            raise ConfigError("initial.atoms is only valid for initial.variant=atoms")


def _materialize(cfg: ResolvedConfig) -> None:
    """Experiment-specific derived defaults and cross-field validation.

    Also builds every parameter object once so that any constraint violation
    surfaces here, as a ConfigError, before compute starts.
    """
    flat = cfg.flat
    exp = cfg.experiment
    flat.setdefault("artifact_version", __version__)
    try:
        params = cfg.params()
        kernel = cfg.kernel()
        dist = cfg.initial()
        if exp in ("pde", "steady", "converge", "figures"):
            grid = cfg.grid()
            atoms = cfg.initial_atoms()
            lo, hi = atoms.support()
            if lo < grid.x_min or hi > grid.x_max:
                raise ConfigError("initial atoms must lie inside the grid domain")
        if exp in ("simulate", "converge", "coupling", "slant-mean"):
            sim = cfg.sim()
            if sim.n_steps < 1 or abs(sim.n_steps * sim.dt - sim.t_end) > 1e-9 * max(1.0, sim.t_end):
                raise ConfigError("the horizon must be a positive whole number of sim.dt steps")
            if params.lam * sim.dt > 0.1 * (1 + 1e-12):
                raise ConfigError("lam * sim.dt must not exceed 0.1")
        if exp in ("pde", "converge", "figures"):
            cfg.pde_cfg()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    if exp == "simulate":
        if flat["sim.n"] < 1:
            raise ConfigError("sim.n must be >= 1")
        if (
            flat["sim.process"] == "mckean"
            and flat["sim.drift"] == "analytic"
            and isinstance(kernel, BoundedConfidence)
        ):
            raise ConfigError(
                "bounded_confidence has no closed-form mean field; use sim.drift=frozen_initial"
            )
    elif exp == "pde":
        t_end = flat["pde.t_end"]
        times = flat.setdefault("pde.record_times", [0.0, t_end])
        if any(t < 0 or t > t_end for t in times):
            raise ConfigError("pde.record_times must lie in [0, pde.t_end]")
    elif exp == "steady":
        flat.setdefault("steady.m", dist.mean())
        if isinstance(kernel, BoundedConfidence):
            raise ConfigError("no closed-form steady state for bounded_confidence")
        if isinstance(kernel, NeighborValue):
            try:
                slant_fixed_point(params, dist.mean())
            except DegenerateParams as exc:
                raise ConfigError(str(exc)) from exc
    elif exp in ("converge", "coupling"):
        if any(n < 1 for n in flat["run.n_list"]):
            raise ConfigError("run.n_list entries must be >= 1")
        if not flat["run.seeds"]:
            raise ConfigError("run.seeds must be nonempty")
        has_fit_check = any(
            k in flat for k in ("check.slope_min", "check.slope_max", "check.r2_min")
        )
        if has_fit_check and len(flat["run.n_list"]) < 3:
            raise ConfigError("slope checks need at least three population sizes")
        if exp == "converge" and not isinstance(dist, Atoms) and "initial.discretize_k" not in flat:
            raise ConfigError("converge with a continuous initial law needs initial.discretize_k")
    elif exp == "figures":
        if not isinstance(kernel, LinearDifference):
            raise ConfigError("the figures experiment is defined for kernel.variant=linear_difference")
        t_final = flat["figures.t_final"]
        default_times = [t for t in (0.0, 5.0, 20.0, 50.0, 100.0) if t < t_final] + [t_final]
        times = flat.setdefault("figures.evolution_times", default_times)
        if any(t < 0 or t > t_final for t in times):
            raise ConfigError("figures.evolution_times must lie in [0, figures.t_final]")
    elif exp == "slant-mean":
        if not isinstance(kernel, NeighborValue):
            raise ConfigError("slant-mean requires kernel.variant=neighbor_value")
        try:
            slant_fixed_point(params, dist.mean())
        except DegenerateParams as exc:
            raise ConfigError(str(exc)) from exc
        every, dt = flat["slant.report_every"], flat["sim.dt"]
        stride = round(every / dt)
        if stride < 1 or abs(stride * dt - every) > 1e-9:
            raise ConfigError("slant.report_every must be a positive multiple of sim.dt")
        n_rep = round(flat["slant.t_end"] / every)
        if n_rep < 1 or abs(n_rep * every - flat["slant.t_end"]) > 1e-9:
            raise ConfigError("slant.t_end must be a positive multiple of slant.report_every")


def resolve_config(raw: dict) -> ResolvedConfig:
    """Validate a flat config mapping and materialize defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object of flat keys")
    exp = raw.get("experiment")
    if not isinstance(exp, str) or exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
    schema = _SCHEMAS[exp]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    flat: dict = {}
    for key, field in schema.items():
        if key in raw:
            flat[key] = _coerce(key, field, raw[key])
        elif field.required:
            raise ConfigError(f"missing required config key: {key}")
        elif field.default is not None:
            flat[key] = field.default
    _validate_conditionals(flat)
    cfg = ResolvedConfig(exp, flat)
    _materialize(cfg)
    return cfg


def load_config(path) -> ResolvedConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return resolve_config(raw)


# ---------------------------------------------------------------------------
# output writers


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, schema: str, header: list[str], rows) -> None:
    lines = [f"# schema=opidyn.{schema}.v1", ",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _write_ndjson(path: Path, schema: str, records) -> None:
    lines = [json.dumps({"schema": f"opidyn.{schema}.v1"}, sort_keys=True)]
    for rec in records:
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


def _jsonable(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def _write_manifest(out: Path, cfg: ResolvedConfig) -> None:
    (out / "manifest.json").write_text(json.dumps(_jsonable(cfg.flat), sort_keys=True, indent=2) + "\n")


def _write_report(out: Path, experiment: str, results: dict, checks: list[dict]) -> None:
    doc = {
        "schema": "opidyn.report.v1",
        "experiment": experiment,
        "results": _jsonable(results),
        "checks": _jsonable(checks),
    }
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _check(checks: list[dict], name: str, passed: bool, value, limit, detail: str = "") -> None:
    checks.append(
        {
            "name": name,
            "passed": bool(passed),
            "value": _jsonable(value),
            "limit": _jsonable(limit),
            "detail": detail,
        }
    )


# ---------------------------------------------------------------------------
# worker-pool plumbing (jobs must be top-level functions for pickling)


def _run_jobs(worker, jobs: list, threads: int) -> list:
    if threads <= 1 or len(jobs) <= 1:
        return [worker(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, jobs))


def _converge_job(job) -> tuple:
    flat, n, seed, agg, rows = job
    cfg = ResolvedConfig(flat["experiment"], flat)
    params, kernel, grid = cfg.params(), cfg.kernel(), cfg.grid()
    atoms = cfg.initial_atoms()
    sim = dataclasses.replace(cfg.sim(), record_stride=max(1, cfg.sim().n_steps))
    sys0 = ParticleSystem.from_initial(atoms, n, SeededStream(seed), ProcessKind.INTERACTING)
    traj = run_trajectory(sys0, params, kernel, sim, SeededStream(seed))
    x = traj.final.x
    w1 = wasserstein1_vs_density(EmpiricalMeasure(x), agg, grid)
    per_atom = []
    for k, bk in enumerate(atoms.points):
        sel = x[traj.final.b == bk]
        if sel.size:
            row = rows[k]
            row_mass = float(np.sum(row) * grid.dx)
            per_atom.append(wasserstein1_vs_density(EmpiricalMeasure(sel), row / row_mass, grid))
        else:
            per_atom.append(float("nan"))
    m2_max = float(np.max(traj.second_moments))
    return (n, seed, w1, per_atom, m2_max, float(traj.second_moments[0]))


def _coupling_job(job) -> tuple:
    flat, n, seed = job
    cfg = ResolvedConfig(flat["experiment"], flat)
    rows = coupling_experiment(
        cfg.params(), cfg.kernel(), cfg.initial(), cfg.sim(), [n], [seed]
    )
    return (n, seed, rows[0].sup_errors[0])


def _slant_job(job) -> tuple:
    flat, seed, stride = job
    cfg = ResolvedConfig(flat["experiment"], flat)
    sim = dataclasses.replace(cfg.sim(), record_stride=stride)
    sys0 = ParticleSystem.from_initial(
        cfg.initial(), flat["sim.n"], SeededStream(seed), ProcessKind.INTERACTING
    )
    traj = run_trajectory(sys0, cfg.params(), cfg.kernel(), sim, SeededStream(seed))
    return (seed, traj.means, float(np.max(traj.second_moments)), float(traj.second_moments[0]))


# ---------------------------------------------------------------------------
# experiment commands


def _family_hygiene(snaps: list[tuple[float, BFamilyDensity]], grid: Grid1D) -> dict:
    mass_drift = 0.0
    min_density = math.inf
    wall = 0.0
    asym = 0.0
    for _, fam in snaps:
        mass_drift = max(mass_drift, float(np.max(np.abs(fam.row_masses(grid) - 1.0))))
        min_density = min(min_density, float(fam.p.min()))
        agg = aggregate(fam)
        wall = max(wall, float((agg[0] + agg[-1]) * grid.dx))
        asym = max(asym, float(np.max(np.abs(agg - agg[::-1])) * grid.dx))
    return {
        "row_mass_drift_max": mass_drift,
        "min_density": min_density,
        "wall_mass_max": wall,
        "aggregate_asymmetry_max": asym,
    }


def cmd_simulate(cfg: ResolvedConfig, out: Path, threads: int) -> list[dict]:
    params, kernel, dist = cfg.params(), cfg.kernel(), cfg.initial()
    sim = cfg.sim()
    stream = cfg.seed_stream()
    process = cfg["sim.process"]
    kind = {
        "interacting": ProcessKind.INTERACTING,
        "intermediate": ProcessKind.INTERMEDIATE,
        "mckean": ProcessKind.MCKEAN_VLASOV,
    }[process]
    sys0 = ParticleSystem.from_initial(dist, cfg["sim.n"], stream, kind)
    drift = None
    if kind is ProcessKind.MCKEAN_VLASOV:
        if cfg["sim.drift"] == "frozen_initial":
            drift = FrozenEmpirical(sys0.x.copy())
        elif isinstance(kernel, NeighborValue):
            drift = AnalyticSlant(dist.mean())
        else:
            drift = AnalyticLinear(dist.mean())
    traj = run_trajectory(
        sys0, params, kernel, sim, stream,
        dist=dist, drift=drift, keep_snapshots=cfg["sim.snapshots"],
    )
    records = []
    for i, t in enumerate(traj.times):
        rec = {
            "t": float(t),
            "mean": float(traj.means[i]),
            "second_moment": float(traj.second_moments[i]),
            "min": float(traj.mins[i]),
            "max": float(traj.maxs[i]),
        }
        if traj.snapshots is not None:
            rec["x"] = [float(v) for v in traj.snapshots[i]]
        records.append(rec)
    _write_ndjson(out / "trajectory.ndjson", "trajectory", records)
    _write_csv(
        out / "summary.csv",
        "trajectory-summary",
        ["t", "mean", "second_moment", "min", "max"],
        zip(traj.times, traj.means, traj.second_moments, traj.mins, traj.maxs),
    )
    _write_report(
        out, cfg.experiment,
        {
            "n_records": len(records),
            "final_mean": float(traj.means[-1]),
            "final_second_moment": float(traj.second_moments[-1]),
            "second_moment_max": float(np.max(traj.second_moments)),
        },
        [],
    )
    return []


def _pde_snapshot_rows(snaps, grid: Grid1D):
    c = grid.centers()
    for t, fam in snaps:
        agg = aggregate(fam)
        for i in range(grid.nx):
            row = [t, c[i], float(agg[i])]
            row.extend(float(fam.p[k, i]) for k in range(fam.n_atoms))
            yield row


def cmd_pde(cfg: ResolvedConfig, out: Path, threads: int) -> list[dict]:
    params, kernel, grid = cfg.params(), cfg.kernel(), cfg.grid()
    atoms = cfg.initial_atoms()
    family = BFamilyDensity.initial_deltas(atoms, grid)
    snaps = evolve(
        family, params, kernel, grid, cfg.pde_cfg(check_positivity=True),
        cfg["pde.t_end"], cfg["pde.record_times"],
    )
    header = ["t", "x", "p_agg"] + [f"p_{k}" for k in range(atoms.points.size)]
    _write_csv(out / "snapshots.csv", "density-snapshots", header, _pde_snapshot_rows(snaps, grid))
    results = _family_hygiene(snaps, grid)
    c = grid.centers()
    results["aggregate_means"] = [float(np.sum(aggregate(fam) * c) * grid.dx) for _, fam in snaps]
    results["times"] = [t for t, _ in snaps]
    _write_report(out, cfg.experiment, results, [])
    return []


def cmd_steady(cfg: ResolvedConfig, out: Path, threads: int) -> list[dict]:
    params, kernel, grid = cfg.params(), cfg.kernel(), cfg.grid()
    atoms = cfg.initial_atoms()
    results: dict = {}
    if cfg["steady.sigma_zero"]:
        if isinstance(kernel, NeighborValue):
            limit = slant_contraction_atoms(params, atoms)
        else:
            limit = dirac_contraction_map(params, atoms, cfg["steady.m"])
        _write_csv(
            out / "steady_atoms.csv", "steady-atoms", ["b", "w"],
            zip(limit.points, limit.weights),
        )
        results["atoms"] = [[float(b), float(w)] for b, w in zip(limit.points, limit.weights)]
    else:
        if isinstance(kernel, NeighborValue):
            density = steady_state_slant(params, atoms, grid)
        else:
            density = steady_state_mixture(
                params, atoms, cfg["steady.m"], grid, cfg["steady.variance_form"]
            )
        _write_csv(
            out / "steady.csv", "steady-density", ["x", "p"],
            zip(grid.centers(), density),
        )
        c = grid.centers()
        results["mean"] = float(np.sum(density * c) * grid.dx)
        results["mass"] = float(np.sum(density) * grid.dx)
    _write_report(out, cfg.experiment, results, [])
    return []


def cmd_converge(cfg: ResolvedConfig, out: Path, threads: int) -> list[dict]:
    params, kernel, grid = cfg.params(), cfg.kernel(), cfg.grid()
    atoms = cfg.initial_atoms()
    t_end = cfg["sim.t_end"]
    family = BFamilyDensity.initial_deltas(atoms, grid)
    snaps = evolve(
        family, params, kernel, grid, cfg.pde_cfg(check_positivity=True), t_end, [t_end]
    )
    fam_end = snaps[-1][1]
    agg = aggregate(fam_end)
    hygiene = _family_hygiene(snaps, grid)

    n_list, seeds = cfg["run.n_list"], cfg["run.seeds"]
    jobs = [(cfg.flat, n, seed, agg, fam_end.p) for n in n_list for seed in seeds]
    rows = _run_jobs(_converge_job, jobs, threads)
    rows.sort(key=lambda r: (r[0], r[1]))

    k_atoms = atoms.points.size
    header = ["n", "seed", "w1"] + [f"w1_atom_{k}" for k in range(k_atoms)]
    _write_csv(
        out / "w1_table.csv", "w1-by-n",
        header,
        ([n, seed, w1] + per_atom for n, seed, w1, per_atom, _, _ in rows),
    )
    mean_w1 = [
        float(np.mean([w1 for n, _, w1, _, _, _ in rows if n == target])) for target in n_list
    ]
    results: dict = {
        "n_list": n_list,
        "mean_w1": mean_w1,
        "pde_hygiene": hygiene,
        "m2_ratio_max": max(m2max / m20 for _, _, _, _, m2max, m20 in rows),
    }
    checks: list[dict] = []
    fit = None
    if len(n_list) >= 3:
        fit = fit_rate(np.array(n_list, dtype=float), np.array(mean_w1))
        _write_csv(
            out / "rate_fit.csv", "rate-fit",
            ["slope", "intercept", "r2"],
            [[fit.slope, fit.intercept, fit.r2]],
        )
        results["rate_fit"] = {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2}
    else:
        results["rate_fit"] = None
        log.warning("rate fit skipped: needs at least three population sizes")
    if cfg.get("check.slope_min") is not None:
        _check(checks, "slope_min", fit.slope >= cfg["check.slope_min"], fit.slope, cfg["check.slope_min"])
    if cfg.get("check.slope_max") is not None:
        _check(checks, "slope_max", fit.slope <= cfg["check.slope_max"], fit.slope, cfg["check.slope_max"])
    if cfg.get("check.r2_min") is not None:
        _check(checks, "r2_min", fit.r2 >= cfg["check.r2_min"], fit.r2, cfg["check.r2_min"])
    _write_report(out, cfg.experiment, results, checks)
    return checks


def cmd_coupling(cfg: ResolvedConfig, out: Path, threads: int) -> list[dict]:
    n_list, seeds = cfg["run.n_list"], cfg["run.seeds"]
    jobs = [(cfg.flat, n, seed) for n in n_list for seed in seeds]
    rows = _run_jobs(_coupling_job, jobs, threads)
    rows.sort(key=lambda r: (r[0], r[1]))
    _write_csv(out / "coupling.csv", "coupling-error", ["n", "seed", "sup_error"], rows)
    mean_err = [
        float(np.mean([e for n, _, e in rows if n == target])) for target in n_list
    ]
    results: dict = {"n_list": n_list, "mean_sup_error": mean_err}
    checks: list[dict] = []
    if len(n_list) >= 3:
        fit = fit_rate(np.array(n_list, dtype=float), np.array(mean_err))
        _write_csv(
            out / "rate_fit.csv", "rate-fit",
            ["slope", "intercept", "r2"],
            [[fit.slope, fit.intercept, fit.r2]],
        )
        results["rate_fit"] = {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2}
        if cfg.get("check.slope_max") is not None:
            _check(checks, "slope_max", fit.slope <= cfg["check.slope_max"], fit.slope, cfg["check.slope_max"])
    else:
        results["rate_fit"] = None
    if cfg.get("check.monotone"):
        ok = all(a > b for a, b in zip(mean_err, mean_err[1:]))
        _check(checks, "monotone_decreasing", ok, mean_err, None,
               "mean sup error must strictly decrease along run.n_list")
    _write_report(out, cfg.experiment, results, checks)
    return checks


def _find_modes(density: np.ndarray, rel_floor: float = 0.01) -> np.ndarray:
    """Indices of strict local maxima above rel_floor * global max."""
    p = density
    inner = (p[1:-1] > p[:-2]) & (p[1:-1] > p[2:])
    idx = np.nonzero(inner)[0] + 1
    return idx[p[idx] >= rel_floor * p.max()]


def cmd_figures(cfg: ResolvedConfig, out: Path, threads: int) -> list[dict]:
    params, kernel, grid = cfg.params(), cfg.kernel(), cfg.grid()
    atoms = cfg.initial_atoms()
    pde_cfg = cfg.pde_cfg(check_positivity=True)
    c = grid.centers()
    m0 = atoms.mean()
    t_final = cfg["figures.t_final"]

    # evolution run (reversion on): snapshots along the way plus the final profile
    times = sorted(set(cfg["figures.evolution_times"]) | {t_final})
    family = BFamilyDensity.initial_deltas(atoms, grid)
    snaps = evolve(family, params, kernel, grid, pde_cfg, t_final, times)
    hygiene = _family_hygiene(snaps, grid)
    steady = steady_state_mixture(params, atoms, m0, grid, "rate_linear")
    steady_sq = steady_state_mixture(params, atoms, m0, grid, "rate_squared")

    k_atoms = atoms.points.size
    header = ["t", "x", "p_agg"] + [f"p_{k}" for k in range(k_atoms)] + ["steady"]
    def evolution_rows():
        for t, fam in snaps:
            agg = aggregate(fam)
            for i in range(grid.nx):
                yield [t, c[i], agg[i], *(fam.p[k, i] for k in range(k_atoms)), steady[i]]
    _write_csv(out / "fig1_evolution.csv", "figure-evolution", header, evolution_rows())

    fam_final = snaps[-1][1]
    agg_final = aggregate(fam_final)
    header3 = ["x", "p_agg"] + [f"p_{k}" for k in range(k_atoms)] + ["steady", "steady_rate_squared"]
    _write_csv(
        out / "fig3_profiles.csv", "figure-final-profiles", header3,
        ([c[i], agg_final[i], *(fam_final.p[k, i] for k in range(k_atoms)), steady[i], steady_sq[i]]
         for i in range(grid.nx)),
    )

    # relaxation run (reversion off): long-time aggregate against the single Gaussian
    params0 = dataclasses.replace(params, omega=0.0)
    relax_t = cfg["figures.relax_t_end"]
    family0 = BFamilyDensity.initial_deltas(atoms, grid)
    snaps0 = evolve(family0, params0, kernel, grid, pde_cfg, relax_t, [relax_t])
    agg_relax = aggregate(snaps0[-1][1])
    steady_relax = steady_state_mixture(params0, atoms, m0, grid, "rate_linear")
    _write_csv(
        out / "fig2_relaxed.csv", "figure-relaxed", ["x", "p_agg", "steady"],
        zip(c, agg_relax, steady_relax),
    )

    # reporting and configured checks
    contracted = dirac_contraction_map(params, atoms, m0)
    expected_modes, inverse = np.unique(contracted.points, return_inverse=True)
    mode_weights = np.bincount(inverse, weights=contracted.weights)
    mode_idx = _find_modes(agg_final)
    mode_locs = c[mode_idx]
    mean_series = [float(np.sum(aggregate(fam) * c) * grid.dx) for _, fam in snaps]
    w1_relax = wasserstein1_density(agg_relax, steady_relax, grid)

    splits = 0.5 * (expected_modes[1:] + expected_modes[:-1])
    edges = np.concatenate([[-np.inf], splits, [np.inf]])
    basin_mass = [
        float(np.sum(agg_final[(c > lo) & (c <= hi)]) * grid.dx)
        for lo, hi in zip(edges[:-1], edges[1:])
    ]

    results = {
        "pde_hygiene": hygiene,
        "mode_locations": [float(v) for v in mode_locs],
        "expected_modes": [float(v) for v in expected_modes],
        "basin_mass": basin_mass,
        "basin_weights": [float(w) for w in mode_weights],
        "aggregate_means": mean_series,
        "w1_relaxed_vs_steady": w1_relax,
        "initial_mean": float(m0),
    }
    checks: list[dict] = []
    if cfg.get("check.mode_tol") is not None:
        tol = cfg["check.mode_tol"]
        count_ok = mode_locs.size == expected_modes.size
        loc_ok = count_ok and bool(
            np.all(np.abs(np.sort(mode_locs) - expected_modes) <= tol)
        )
        _check(checks, "mode_count", count_ok, int(mode_locs.size), int(expected_modes.size))
        _check(checks, "mode_locations", loc_ok,
               [float(v) for v in np.sort(mode_locs)], [float(v) for v in expected_modes],
               f"each mode within {tol} of its closed-form position")
    if cfg.get("check.basin_tol") is not None:
        tol = cfg["check.basin_tol"]
        ok = all(abs(mass - w) <= tol for mass, w in zip(basin_mass, mode_weights))
        _check(checks, "basin_mass", ok, basin_mass, [float(w) for w in mode_weights],
               f"final mass near each limit atom within {tol} of its weight")
    if cfg.get("check.w1_dx_mult") is not None:
        limit = cfg["check.w1_dx_mult"] * grid.dx
        _check(checks, "relaxed_w1", w1_relax < limit, w1_relax, limit,
               "long-time reversion-free aggregate against its closed-form Gaussian")
    if cfg.get("check.mean_drift_max") is not None:
        drift = max(abs(m - m0) for m in mean_series)
        _check(checks, "mean_drift", drift <= cfg["check.mean_drift_max"],
               drift, cfg["check.mean_drift_max"])
    _write_report(out, cfg.experiment, results, checks)
    return checks


def _rk4_mean(params: ModelParams, m0: float, times: np.ndarray, h_max: float = 0.01) -> np.ndarray:
    """Classic fourth-order integration of dm/dt = (alpha lam - omega) m + omega m0."""
    d = params.interaction_rate - params.omega
    c = params.omega * m0

    def f(m):
        return d * m + c

    out = np.empty(times.size)
    out[0] = m = m0
    for i in range(1, times.size):
        span = times[i] - times[i - 1]
        n_sub = max(1, math.ceil(span / h_max))
        h = span / n_sub
        for _ in range(n_sub):
            k1 = f(m)
            k2 = f(m + 0.5 * h * k1)
            k3 = f(m + 0.5 * h * k2)
            k4 = f(m + h * k3)
            m = m + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i] = m
    return out


def cmd_slant_mean(cfg: ResolvedConfig, out: Path, threads: int) -> list[dict]:
    params, dist = cfg.params(), cfg.initial()
    m0 = dist.mean()
    every, dt = cfg["slant.report_every"], cfg["sim.dt"]
    stride = round(every / dt)
    n_rep = round(cfg["slant.t_end"] / every)
    times = np.arange(n_rep + 1) * every

    closed = np.asarray(slant_mean(times, params, m0))
    rk4 = _rk4_mean(params, m0, times)

    seeds = cfg["run.seeds"]
    jobs = [(cfg.flat, seed, stride) for seed in seeds]
    rows = _run_jobs(_slant_job, jobs, threads)
    rows.sort(key=lambda r: r[0])
    means = np.vstack([r[1] for r in rows])
    particle_mean = means.mean(axis=0)
    particle_se = means.std(axis=0, ddof=1) / math.sqrt(len(seeds)) if len(seeds) > 1 else np.zeros_like(particle_mean)

    _write_csv(
        out / "mean_curves.csv", "slant-mean",
        ["t", "closed_form", "rk4", "particle_mean", "particle_se"],
        zip(times, closed, rk4, particle_mean, particle_se),
    )

    fixed = slant_fixed_point(params, m0)
    fixed_alt = slant_fixed_point_alt(params, m0)
    results = {
        "fixed_point": fixed,
        "fixed_point_alt": fixed_alt,
        "closed_form_terminal": float(closed[-1]),
        "terminal_deviation_from_fixed_point": float(abs(closed[-1] - fixed)),
        "terminal_deviation_from_alt": float(abs(closed[-1] - fixed_alt)),
        "max_closed_vs_rk4": float(np.max(np.abs(closed - rk4))),
        "m2_ratio_max": max(m2max / m20 for _, _, m2max, m20 in rows),
    }
    checks: list[dict] = []
    if cfg.get("check.rk4_tol") is not None:
        err = results["max_closed_vs_rk4"]
        _check(checks, "closed_vs_rk4", err <= cfg["check.rk4_tol"], err, cfg["check.rk4_tol"])
    if cfg.get("check.band_sigma") is not None:
        k = cfg["check.band_sigma"]
        gaps = np.abs(particle_mean - closed)
        ok = bool(np.all(gaps <= k * particle_se + 1e-12))
        _check(checks, "particle_band", ok, float(np.max(gaps - k * particle_se)), 0.0,
               f"particle ensemble mean within {k} standard errors of the closed form")
    _write_report(out, cfg.experiment, results, checks)
    return checks


_COMMANDS = {
    "simulate": cmd_simulate,
    "pde": cmd_pde,
    "steady": cmd_steady,
    "converge": cmd_converge,
    "coupling": cmd_coupling,
    "figures": cmd_figures,
    "slant-mean": cmd_slant_mean,
}


def run_experiment(
    config,
    out_dir,
    seed_override: int | None = None,
    threads: int | None = None,
    expect_command: str | None = None,
) -> int:
    """Load, validate and run one experiment; returns the process exit code."""
    if threads is None:
        threads = int(os.environ.get("OPIDYN_THREADS", "1"))
    try:
        if isinstance(config, (str, Path)):
            raw = json.loads(Path(config).read_text())
        else:
            raw = dict(config)
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object of flat keys")
        if seed_override is not None:
            raw["seed"] = seed_override
        cfg = resolve_config(raw)
        if expect_command is not None and cfg.experiment != expect_command:
            raise ConfigError(
                f"config is for experiment {cfg.experiment!r}, not {expect_command!r}"
            )
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        log.error("config is not valid JSON: %s", exc)
        return EXIT_CONFIG

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, cfg)
    try:
        checks = _COMMANDS[cfg.experiment](cfg, out, threads)
    except (NonFiniteState, CflViolation, DomainOverflow, DegenerateParams,
            DegenerateInput, FloatingPointError, OverflowError) as exc:
        log.error("numerical failure: %s", exc)
        (out / "report.json").write_text(
            json.dumps(
                {"schema": "opidyn.report.v1", "experiment": cfg.experiment,
                 "error": f"{type(exc).__name__}: {exc}", "results": {}, "checks": []},
                sort_keys=True, indent=2,
            ) + "\n"
        )
        return EXIT_NUMERICAL
    failed = [c for c in checks if not c["passed"]]
    for c in checks:
        log.info("check %-24s %s (value=%s limit=%s)",
                 c["name"], "PASS" if c["passed"] else "FAIL", c["value"], c["limit"])
    if failed:
        log.error("%d configured check(s) failed", len(failed))
        return EXIT_CHECKS
    return EXIT_OK
