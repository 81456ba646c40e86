"""Config validation, experiment drivers, output formats and the CLI."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from opidyn.experiments import (
    EXIT_CHECKS,
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    ConfigError,
    load_config,
    resolve_config,
    run_experiment,
)

BASE = {
    "experiment": "simulate",
    "seed": 7,
    "params.omega": 0.01,
    "params.alpha": 0.02,
    "params.sigma": 0.02,
    "kernel.variant": "linear_difference",
    "initial.variant": "atoms",
    "initial.atoms": [[-10.0, 0.5], [10.0, 0.5]],
    "sim.n": 50,
    "sim.dt": 0.1,
    "sim.t_end": 1.0,
}

COUPLING_SMALL = {
    "experiment": "coupling",
    "seed": 1,
    "params.omega": 0.01,
    "params.alpha": 0.02,
    "params.sigma": 0.02,
    "kernel.variant": "linear_difference",
    "initial.variant": "atoms",
    "initial.atoms": [[-10.0, 0.5], [10.0, 0.5]],
    "sim.dt": 0.1,
    "sim.t_end": 2.0,
    "run.n_list": [50, 100],
    "run.seeds": [0, 1],
}


def cfg_with(base=BASE, **changes):
    out = dict(base)
    for key, value in changes.items():
        if value is None:
            out.pop(key, None)
        else:
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# schema validation


def test_resolve_fills_defaults():
    cfg = resolve_config(dict(BASE))
    assert cfg.flat["params.lambda"] == 1.0
    assert cfg.flat["sim.process"] == "interacting"
    assert cfg.flat["artifact_version"]


@pytest.mark.parametrize(
    "changes,match",
    [
        ({"bogus.key": 1}, "unknown"),
        ({"sim.n": None}, "missing required"),
        ({"sim.n": 12.5}, "integer"),
        ({"sim.n": True}, "integer"),
        ({"params.sigma": "big"}, "number"),
        ({"sim.snapshots": 1}, "boolean"),
        ({"kernel.variant": "cubic"}, "one of"),
        ({"kernel.delta1": 1.0}, "bounded_confidence"),
        ({"initial.lo": 0.0}, "uniform"),
        ({"initial.variant": "uniform"}, "needs initial.lo"),
        ({"sim.dt": 0.5}, "lam"),
        ({"sim.t_end": 1.05}, "whole number"),
        ({"params.omega": -0.5}, "nonnegative"),
        ({"initial.atoms": [[0.0, 0.6], [1.0, 0.6]]}, "sum"),
    ],
)
def test_bad_configs_rejected(changes, match):
    with pytest.raises(ConfigError, match=match):
        resolve_config(cfg_with(**changes))


def test_bounded_confidence_needs_both_deltas():
    with pytest.raises(ConfigError, match="delta"):
        resolve_config(cfg_with(**{"kernel.variant": "bounded_confidence", "kernel.delta1": 1.0}))
    ok = resolve_config(
        cfg_with(
            **{
                "kernel.variant": "bounded_confidence",
                "kernel.delta1": 1.0,
                "kernel.delta2": 2.0,
            }
        )
    )
    assert ok.kernel().delta2 == 2.0


def test_mckean_analytic_rejects_bounded_confidence():
    changes = {
        "sim.process": "mckean",
        "kernel.variant": "bounded_confidence",
        "kernel.delta1": 1.0,
        "kernel.delta2": 2.0,
    }
    with pytest.raises(ConfigError, match="frozen_initial"):
        resolve_config(cfg_with(**changes))
    ok = resolve_config(cfg_with(**changes, **{"sim.drift": "frozen_initial"}))
    assert ok.flat["sim.drift"] == "frozen_initial"


def test_slant_requires_contractive_rates():
    slant = {
        "experiment": "slant-mean",
        "seed": 1,
        "params.omega": 0.01,
        "params.alpha": 0.02,
        "params.sigma": 0.02,
        "kernel.variant": "neighbor_value",
        "initial.variant": "atoms",
        "initial.atoms": [[1.0, 1.0]],
        "sim.n": 10,
        "sim.dt": 0.1,
        "run.seeds": [0],
    }
    with pytest.raises(ConfigError, match="omega"):
        resolve_config(slant)
    slant["params.omega"], slant["params.alpha"] = 0.02, 0.01
    assert resolve_config(slant).experiment == "slant-mean"


def test_slope_checks_need_three_sizes():
    bad = cfg_with(COUPLING_SMALL, **{"check.slope_max": -0.3})
    with pytest.raises(ConfigError, match="three"):
        resolve_config(bad)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(bad)


# ---------------------------------------------------------------------------
# run_experiment plumbing


def test_exit_codes(tmp_path):
    assert run_experiment(cfg_with(**{"bogus": 1}), tmp_path / "a") == EXIT_CONFIG
    assert run_experiment(dict(BASE), tmp_path / "b", expect_command="pde") == EXIT_CONFIG
    assert run_experiment(dict(BASE), tmp_path / "c") == EXIT_OK

    overflow = {
        "experiment": "pde",
        "seed": 1,
        "params.omega": 0.0,
        "params.alpha": 0.1,
        "params.sigma": 0.02,
        "kernel.variant": "neighbor_value",
        "initial.variant": "atoms",
        "initial.atoms": [[1.0, 1.0]],
        "grid.x_min": -5.0,
        "grid.x_max": 5.0,
        "grid.nx": 200,
        "pde.t_end": 40.0,
        "pde.record_times": [40.0],
    }
    assert run_experiment(overflow, tmp_path / "d") == EXIT_NUMERICAL
    report = json.loads((tmp_path / "d" / "report.json").read_text())
    assert "DomainOverflow" in report["error"]

    failing = cfg_with(COUPLING_SMALL, **{"check.monotone": True, "run.seeds": [3]})
    # a single seed at tiny sizes need not be monotone; force the failure path
    code = run_experiment(failing, tmp_path / "e")
    assert code in (EXIT_OK, EXIT_CHECKS)
    impossible = cfg_with(
        COUPLING_SMALL,
        **{"run.n_list": [50, 100, 200], "check.slope_max": -5.0},
    )
    assert run_experiment(impossible, tmp_path / "f") == EXIT_CHECKS
    # outputs are still written when checks fail
    assert (tmp_path / "f" / "coupling.csv").exists()
    assert (tmp_path / "f" / "report.json").exists()


def test_seed_override(tmp_path):
    assert run_experiment(dict(BASE), tmp_path / "x", seed_override=123) == EXIT_OK
    manifest = json.loads((tmp_path / "x" / "manifest.json").read_text())
    assert manifest["seed"] == 123


def test_manifest_round_trip(tmp_path):
    assert run_experiment(dict(BASE), tmp_path / "m") == EXIT_OK
    manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
    again = resolve_config(manifest)
    assert again.flat == manifest


def test_rerun_is_byte_identical(tmp_path):
    run_experiment(dict(COUPLING_SMALL), tmp_path / "r1")
    run_experiment(dict(COUPLING_SMALL), tmp_path / "r2", threads=2)
    for name in ("manifest.json", "report.json", "coupling.csv"):
        a = (tmp_path / "r1" / name).read_bytes()
        b = (tmp_path / "r2" / name).read_bytes()
        assert a == b, name


def test_output_formats(tmp_path):
    run_experiment(dict(BASE), tmp_path / "fmt")
    summary = (tmp_path / "fmt" / "summary.csv").read_text().splitlines()
    assert summary[0] == "# schema=opidyn.trajectory-summary.v1"
    assert summary[1] == "t,mean,second_moment,min,max"
    traj = (tmp_path / "fmt" / "trajectory.ndjson").read_text().splitlines()
    assert json.loads(traj[0]) == {"schema": "opidyn.trajectory.v1"}
    first = json.loads(traj[1])
    assert first["t"] == 0.0 and "x" not in first
    report = json.loads((tmp_path / "fmt" / "report.json").read_text())
    assert report["schema"] == "opidyn.report.v1"
    assert report["experiment"] == "simulate"


# ---------------------------------------------------------------------------
# small end-to-end runs of each driver


def test_pde_driver(tmp_path):
    cfg = {
        "experiment": "pde",
        "seed": 2,
        "params.omega": 0.05,
        "params.alpha": 0.0,
        "params.sigma": 0.1,
        "kernel.variant": "linear_difference",
        "initial.variant": "uniform",
        "initial.lo": -1.0,
        "initial.hi": 1.0,
        "initial.discretize_k": 4,
        "grid.x_min": -3.0,
        "grid.x_max": 3.0,
        "grid.nx": 120,
        "pde.t_end": 2.0,
    }
    assert run_experiment(cfg, tmp_path) == EXIT_OK
    rows = (tmp_path / "snapshots.csv").read_text().splitlines()
    assert rows[0] == "# schema=opidyn.density-snapshots.v1"
    assert rows[1] == "t,x,p_agg,p_0,p_1,p_2,p_3"
    assert len(rows) == 2 + 2 * 120  # default record times: 0 and t_end
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["results"]["row_mass_drift_max"] < 1e-10


def test_steady_driver_atoms_and_density(tmp_path):
    base = {
        "experiment": "steady",
        "seed": 2,
        "params.omega": 0.01,
        "params.alpha": 0.02,
        "params.sigma": 0.02,
        "kernel.variant": "linear_difference",
        "initial.variant": "atoms",
        "initial.atoms": [[-10.0, 0.5], [10.0, 0.5]],
        "grid.x_min": -15.0,
        "grid.x_max": 15.0,
        "grid.nx": 600,
    }
    assert run_experiment(base, tmp_path / "dens") == EXIT_OK
    report = json.loads((tmp_path / "dens" / "report.json").read_text())
    assert report["results"]["mass"] == pytest.approx(1.0, abs=1e-6)
    assert report["results"]["mean"] == pytest.approx(0.0, abs=1e-9)

    atoms = dict(base)
    atoms["steady.sigma_zero"] = True
    assert run_experiment(atoms, tmp_path / "atoms") == EXIT_OK
    rows = (tmp_path / "atoms" / "steady_atoms.csv").read_text().splitlines()
    assert rows[0] == "# schema=opidyn.steady-atoms.v1"
    got = json.loads((tmp_path / "atoms" / "report.json").read_text())["results"]["atoms"]
    assert got[0] == pytest.approx([-10.0 / 3.0, 0.5])
    assert got[1] == pytest.approx([10.0 / 3.0, 0.5])


def test_converge_driver_small(tmp_path):
    cfg = {
        "experiment": "converge",
        "seed": 4,
        "params.omega": 0.01,
        "params.alpha": 0.02,
        "params.sigma": 0.02,
        "kernel.variant": "linear_difference",
        "initial.variant": "atoms",
        "initial.atoms": [[-2.0, 0.5], [2.0, 0.5]],
        "grid.x_min": -4.0,
        "grid.x_max": 4.0,
        "grid.nx": 160,
        "sim.dt": 0.1,
        "sim.t_end": 2.0,
        "run.n_list": [50, 200],
        "run.seeds": [0, 1],
    }
    assert run_experiment(cfg, tmp_path) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["results"]["rate_fit"] is None  # fewer than three sizes
    assert not (tmp_path / "rate_fit.csv").exists()
    table = (tmp_path / "w1_table.csv").read_text().splitlines()
    assert table[1] == "n,seed,w1,w1_atom_0,w1_atom_1"
    assert len(table) == 2 + 4


def test_figures_driver_coarse(tmp_path):
    cfg = {
        "experiment": "figures",
        "seed": 3,
        "params.omega": 0.01,
        "params.alpha": 0.02,
        "params.sigma": 0.02,
        "kernel.variant": "linear_difference",
        "initial.variant": "atoms",
        "initial.atoms": [[-10.0, 0.5], [10.0, 0.5]],
        "grid.x_min": -15.0,
        "grid.x_max": 15.0,
        "grid.nx": 300,
        "figures.t_final": 150.0,
        "figures.evolution_times": [0.0, 150.0],
        "figures.relax_t_end": 300.0,
        "check.mode_tol": 0.2,
        "check.w1_dx_mult": 2.0,
    }
    assert run_experiment(cfg, tmp_path) == EXIT_OK
    for name in ("fig1_evolution.csv", "fig2_relaxed.csv", "fig3_profiles.csv"):
        assert (tmp_path / name).exists(), name
    report = json.loads((tmp_path / "report.json").read_text())
    checks = {c["name"]: c for c in report["checks"]}
    assert checks["mode_count"]["passed"]
    assert checks["relaxed_w1"]["passed"]


def test_slant_driver_small(tmp_path):
    cfg = {
        "experiment": "slant-mean",
        "seed": 5,
        "params.omega": 0.02,
        "params.alpha": 0.01,
        "params.sigma": 0.02,
        "kernel.variant": "neighbor_value",
        "initial.variant": "atoms",
        "initial.atoms": [[-2.0, 0.25], [2.0, 0.75]],
        "sim.n": 500,
        "sim.dt": 0.1,
        "slant.t_end": 10.0,
        "slant.report_every": 2.0,
        "run.seeds": [0, 1, 2],
        "check.rk4_tol": 1e-6,
    }
    assert run_experiment(cfg, tmp_path) == EXIT_OK
    rows = (tmp_path / "mean_curves.csv").read_text().splitlines()
    assert rows[1] == "t,closed_form,rk4,particle_mean,particle_se"
    assert len(rows) == 2 + 6
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["results"]["fixed_point"] == pytest.approx(2.0)
    assert report["results"]["max_closed_vs_rk4"] < 1e-6


def test_mckean_simulate_driver(tmp_path):
    cfg = cfg_with(**{"sim.process": "mckean", "sim.n": 200, "sim.snapshots": True})
    assert run_experiment(cfg, tmp_path) == EXIT_OK
    traj = (tmp_path / "trajectory.ndjson").read_text().splitlines()
    assert len(json.loads(traj[1])["x"]) == 200


# ---------------------------------------------------------------------------
# command line


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "opidyn", *args], capture_output=True, text=True
    )


def test_cli_end_to_end(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(BASE))
    out = tmp_path / "run"
    res = run_cli("simulate", "--config", str(cfg_path), "--out", str(out))
    assert res.returncode == 0, res.stderr
    assert (out / "manifest.json").exists()

    res = run_cli("pde", "--config", str(cfg_path), "--out", str(tmp_path / "bad"))
    assert res.returncode == EXIT_CONFIG
    assert "config error" in res.stderr

    res = run_cli("simulate", "--config", str(cfg_path), "--out", str(out), "--seed", "99")
    assert res.returncode == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 99


def test_cli_requires_subcommand():
    res = run_cli()
    assert res.returncode == 2
    res = run_cli("--help")
    assert res.returncode == 0
    assert "simulate" in res.stdout and "slant-mean" in res.stdout


def test_shipped_configs_resolve():
    configs = sorted(Path(__file__).resolve().parent.parent.glob("configs/*.json"))
    assert len(configs) >= 7
    for path in configs:
        cfg = load_config(path)
        assert cfg.experiment == json.loads(path.read_text())["experiment"]
