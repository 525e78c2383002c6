"""End-to-end tests of the command-line interface.

Every test drives ``cli.main(argv)`` in-process so exit codes and written
files can be asserted without subprocesses.
"""

import json
import os

import numpy as np
import pytest

from mhetune import cli
from mhetune.data import load_dataset, load_manifest


def write_config(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    return str(path)


def sim_section(length=43, seed=0, n_traj=1):
    return {"system": "lti_scalar", "theta_star": [0.8], "length": length,
            "seed": seed, "n_traj": n_traj}


def identify_config(tmp_path, out="fit", **overrides):
    doc = {
        "output_dir": str(tmp_path / out),
        "model": {"name": "lti_scalar"},
        "dataset": {"sim": sim_section()},
        "m": 3,
        "theta0": [0.5],
    }
    doc.update(overrides)
    return write_config(tmp_path / f"{out}.json", doc)


# ---------------------------------------------------------------------------
# simulate


def test_simulate_writes_trajectories_and_manifest(tmp_path):
    out = tmp_path / "data"
    cfg = write_config(tmp_path / "sim.json", {
        "output_dir": str(out),
        "sim": sim_section(length=30, n_traj=3),
        "m": 3,
    })
    assert cli.main(["simulate", "--config", cfg]) == 0
    names = sorted(os.listdir(out))
    assert names == ["manifest.json", "traj_000.csv", "traj_001.csv",
                     "traj_002.csv"]
    doc = load_manifest(str(out / "manifest.json"))
    assert doc["m"] == 3 and len(doc["trajectories"]) == 3
    trajs = load_dataset(str(out / "manifest.json"))
    assert len(trajs) == 3 and trajs[0].length == 30


def test_simulate_seed_override_changes_data(tmp_path):
    outs = []
    for i, seed_args in enumerate([[], ["--seed", "5"]]):
        out = tmp_path / f"d{i}"
        cfg = write_config(tmp_path / f"s{i}.json",
                           {"output_dir": str(out), "sim": sim_section()})
        assert cli.main(["simulate", "--config", cfg] + seed_args) == 0
        outs.append(load_dataset(str(out / "manifest.json"))[0])
    assert not np.array_equal(outs[0].y, outs[1].y)


# ---------------------------------------------------------------------------
# identify


def test_identify_end_to_end(tmp_path, capsys):
    cfg = identify_config(tmp_path)
    assert cli.main(["identify", "--config", cfg]) == 0
    out = tmp_path / "fit"
    assert sorted(os.listdir(out)) == ["result.json", "trace.csv"]
    doc = json.loads((out / "result.json").read_text())
    assert doc["converged"] is True
    assert np.isfinite(doc["theta_hat"][0])
    assert (out / "trace.csv").read_text().splitlines()[0] == \
        "iter,V_N,step_norm,damping,accepted"
    assert "theta_hat" in capsys.readouterr().out


def test_identify_from_manifest_dataset(tmp_path):
    data_dir = tmp_path / "data"
    sim_cfg = write_config(tmp_path / "sim.json", {
        "output_dir": str(data_dir),
        "sim": sim_section(length=50),
        "m": 3,
    })
    assert cli.main(["simulate", "--config", sim_cfg]) == 0
    cfg = identify_config(
        tmp_path, dataset={"manifest": str(data_dir / "manifest.json")})
    assert cli.main(["identify", "--config", cfg]) == 0


def test_identify_is_deterministic_across_runs_and_workers(tmp_path):
    docs, traces = [], []
    for out, workers in [("a", 1), ("b", 1), ("c", 2)]:
        cfg = identify_config(tmp_path, out=out, workers=workers)
        assert cli.main(["identify", "--config", cfg]) == 0
        docs.append(json.loads((tmp_path / out / "result.json").read_text()))
        traces.append((tmp_path / out / "trace.csv").read_text())
    for doc in docs:
        doc.pop("wall_time")
    assert docs[0] == docs[1] == docs[2]
    assert traces[0] == traces[1] == traces[2]


# ---------------------------------------------------------------------------
# eval


def test_eval_writes_objective_and_residuals(tmp_path):
    out = tmp_path / "ev"
    cfg = write_config(tmp_path / "eval.json", {
        "output_dir": str(out),
        "model": {"name": "lti_scalar"},
        "dataset": {"sim": sim_section()},
        "m": 3,
        "theta": [0.8],
    })
    assert cli.main(["eval", "--config", cfg]) == 0
    doc = json.loads((out / "eval.json").read_text())
    assert doc["n_windows"] == 40 and doc["m"] == 3 and doc["stride"] == 1
    assert 0 < doc["v_n"] < 100
    lines = (out / "eps.csv").read_text().splitlines()
    assert lines[0] == "window,traj,offset,eps_0"
    assert len(lines) == 41

    from mhetune.arrival import default_arrival
    from mhetune.models import builtin_model
    from mhetune.pem import IdentifyOptions, as_window_batch, evaluate_objective
    from mhetune.sim import SimConfig, simulate

    traj = simulate(SimConfig(**sim_section()))
    batch = as_window_batch([traj], m=3)
    v_n, _ = evaluate_objective(batch, builtin_model("lti_scalar"), [0.8],
                                default_arrival(1), IdentifyOptions(m=3))
    assert doc["v_n"] == v_n


# ---------------------------------------------------------------------------
# check


def test_check_passes_for_builtin_model(tmp_path, capsys):
    out = tmp_path / "chk"
    cfg = write_config(tmp_path / "check.json", {
        "output_dir": str(out),
        "model": {"name": "lorenz"},
        "theta": [10.0, 28.0],
        "n_samples": 5,
    })
    assert cli.main(["check", "--config", cfg]) == 0
    doc = json.loads((out / "jacobian_report.json").read_text())
    assert doc["passed"] is True
    assert all(v < doc["threshold"] for v in doc["max_errors"].values())


# ---------------------------------------------------------------------------
# experiment


def test_experiment_tiny_consistency_run(tmp_path):
    out = tmp_path / "exp"
    cfg = write_config(tmp_path / "exp.json", {
        "output_dir": str(out),
        "experiment": "lti_consistency",
        "params": {"n_values": [40], "seeds": [0, 1], "modes": ["constant"]},
    })
    assert cli.main(["experiment", "--config", cfg]) == 0
    table = (out / "lti_consistency.csv").read_text().splitlines()
    assert table[0] == "mode,n_windows,seed,theta_hat,v_n,iterations,converged"
    assert len(table) == 3
    summary = (out / "lti_consistency_summary.csv").read_text().splitlines()
    assert len(summary) == 2


def test_experiment_rejects_unknown_name(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json", {
        "output_dir": str(tmp_path / "exp"),
        "experiment": "unknown_study",
    })
    assert cli.main(["experiment", "--config", cfg]) == 2
    assert "schema violation" in capsys.readouterr().err


def test_experiment_rejects_bad_params(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json", {
        "output_dir": str(tmp_path / "exp"),
        "experiment": "mc_curve",
        "params": {"grid_step": -0.1},
    })
    assert cli.main(["experiment", "--config", cfg]) == 2
    assert "params violation" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# failure contract


def test_exit_2_on_unknown_config_key(tmp_path, capsys):
    cfg = identify_config(tmp_path, horizon=3)
    assert cli.main(["identify", "--config", cfg]) == 2
    assert "schema violation" in capsys.readouterr().err


def test_exit_2_on_invalid_value(tmp_path, capsys):
    cfg = write_config(tmp_path / "sim.json", {
        "output_dir": str(tmp_path / "d"),
        "sim": dict(sim_section(), dt=0.0),
    })
    assert cli.main(["simulate", "--config", cfg]) == 2
    assert "dt" in capsys.readouterr().err


def test_exit_2_on_missing_required_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "fit.json", {
        "output_dir": str(tmp_path / "fit"),
        "model": {"name": "lti_scalar"},
        "dataset": {"sim": sim_section()},
    })
    assert cli.main(["identify", "--config", cfg]) == 2
    assert "theta0" in capsys.readouterr().err


def test_exit_2_on_unreadable_or_invalid_json(tmp_path, capsys):
    assert cli.main(["identify", "--config", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["identify", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "cannot read config" in err and "invalid JSON" in err


def test_exit_2_short_dataset_rejected_before_solving(tmp_path, capsys):
    cfg = identify_config(tmp_path, dataset={"sim": sim_section(length=20)},
                          m=50)
    assert cli.main(["identify", "--config", cfg]) == 2
    assert "needs at least" in capsys.readouterr().err


def test_exit_1_on_numeric_failure(tmp_path, capsys):
    cfg = identify_config(tmp_path, theta0=[1e200])
    assert cli.main(["identify", "--config", cfg]) == 1
    assert "numeric failure" in capsys.readouterr().err


def test_outputs_stay_inside_output_dir(tmp_path):
    before = set(os.listdir(tmp_path))
    cfg = identify_config(tmp_path, out="boxed")
    assert cli.main(["identify", "--config", cfg]) == 0
    after = set(os.listdir(tmp_path)) - before
    assert after == {"boxed", "boxed.json"}
