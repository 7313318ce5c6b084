import csv
import json
import shutil

import pytest

from ratiolab import cli, harness
from ratiolab.agent import AgentConfig, ConfigError, Trainer
from ratiolab.envs import make_env
from ratiolab.harness import (
    DATA_DIR,
    ExperimentSpec,
    ValidationError,
    content_hash,
    read_curve_csv,
    realize_ratio,
    reproduce_tables,
    resolve_spec,
    run,
    run_dir_for,
    sweep_ratio,
)

GRID = {"kind": "gridworld", "rows": 2, "cols": 3, "start": [0, 0], "goal": [1, 2], "max_steps": 8}
TINY_AGENT = {"batch_size": 4, "warmup": 16, "hidden": [8], "replay_capacity": 500, "eps_decay_period": 60,
              "tau_t": 20, "eval_episodes": 2}


def _cfg(tmp_path, **kw):
    base = {"env": GRID, "agent": dict(TINY_AGENT), "seeds": [0, 1], "max_interactions": 120, "eval_every": 40,
            "out": str(tmp_path / "runs"), "thresholds": [1.0]}
    base.update(kw)
    return base


def _write(tmp_path, cfg, name="exp.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


# config resolution

def test_precedence_flags_over_file_over_preset(tmp_path):
    cfg = _cfg(tmp_path, preset="OTDQN", agent={**TINY_AGENT, "tau_t": 7}, seeds=[3])
    spec = resolve_spec(cfg, seeds=[9], max_interactions=200)
    assert spec.seeds == [9] and spec.max_interactions == 200  # flags
    assert spec.agent.tau_t == 7  # file over preset
    assert spec.agent.k == 1 and spec.agent.tau_u == 1  # preset over defaults
    assert spec.agent.lr == AgentConfig().lr  # defaults


def test_preset_flag_overrides_file_preset(tmp_path):
    spec = resolve_spec(_cfg(tmp_path, preset="OTDQN"), preset_name="OTRainbow")
    assert spec.agent.k == 8 and spec.preset == "OTRainbow"


def test_validation_reports_every_violation(tmp_path):
    cfg = _cfg(tmp_path, seeds=[1, 1], max_interactions=10, bogus=True)
    cfg["agent"]["k"] = 0
    with pytest.raises(ValidationError) as info:
        resolve_spec(cfg)
    text = " | ".join(info.value.problems)
    for needle in ("bogus", "distinct", "must exceed warmup", "k must be"):
        assert needle in text


def test_unknown_agent_key(tmp_path):
    with pytest.raises(ValidationError, match="unknown agent keys"):
        resolve_spec(_cfg(tmp_path, agent={"learning_rate": 1.0}))


def test_spec_round_trip(tmp_path):
    spec = resolve_spec(_cfg(tmp_path, preset="OTRainbow", scale=100))
    again = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec


def test_content_hash_is_git_blob_sha1():
    # `printf '{"a":1}' | git hash-object --stdin`
    assert content_hash({"a": 1}) == "daa5053ecf5f9a37b2de733d0751cc1ab53ac010"


# run

def test_run_writes_complete_artifacts(tmp_path):
    spec = resolve_spec(_cfg(tmp_path))
    artifacts = run(spec)
    assert [a.seed for a in artifacts] == [0, 1]
    art = artifacts[0]
    resolved = json.loads((tmp_path / "runs" / art.run_dir.split("/")[-1] / "config.json").read_text())
    assert set(resolved["agent"]) == set(AgentConfig().to_dict())
    assert resolved["schema_version"] == 1
    with open(art.curve_csv) as f:
        header = next(csv.reader(f))
    assert header == ["schema_version", "interactions", "eval_return", "epsilon", "updates", "loss_mean"]
    summary = json.loads(open(art.summary_json).read())
    assert summary["schema_version"] == 1
    assert summary["updates"] == (120 - 16) // 4 + (1 if (120 - 16) % 4 else 0)
    assert "1.0" in summary["interactions_to_reach"]
    assert read_curve_csv(art.curve_csv).interactions == [40, 80, 120]


def test_same_spec_twice_byte_identical(tmp_path):
    a = run(resolve_spec(_cfg(tmp_path, seeds=[4], out=str(tmp_path / "a"))))[0]
    b = run(resolve_spec(_cfg(tmp_path, seeds=[4], out=str(tmp_path / "b"))))[0]
    assert open(a.curve_csv, "rb").read() == open(b.curve_csv, "rb").read()
    assert a.content_hash != b.content_hash  # output directory is part of the inputs


def test_parallel_workers_match_serial(tmp_path):
    serial = run(resolve_spec(_cfg(tmp_path, out=str(tmp_path / "s"))))
    parallel = run(resolve_spec(_cfg(tmp_path, out=str(tmp_path / "p"), workers=2)))
    for s, p in zip(serial, parallel):
        assert open(s.curve_csv, "rb").read() == open(p.curve_csv, "rb").read()


def test_resume_matches_uninterrupted(tmp_path):
    cfg = _cfg(tmp_path, seeds=[2], agent={**TINY_AGENT, "n_step": 3, "prioritized": True}, checkpoint_every=30)
    straight = run(resolve_spec({**cfg, "out": str(tmp_path / "straight")}))[0]

    spec = resolve_spec({**cfg, "out": str(tmp_path / "resumed")})
    run_dir = run_dir_for(spec, 2)
    run_dir.mkdir(parents=True)
    trainer = Trainer(make_env(GRID), make_env(GRID), spec.agent.replace(seed=2), spec.eval_schedule(),
                      spec.max_interactions)
    trainer.run(until=60)  # simulated interruption after the 60-interaction checkpoint
    (run_dir / "checkpoint.bin").write_bytes(trainer.checkpoint())
    resumed = run(spec, resume=True)[0]
    assert open(resumed.curve_csv, "rb").read() == open(straight.curve_csv, "rb").read()


def test_otrainbow_realized_ratio(tmp_path):
    cfg = _cfg(tmp_path, preset="OTRainbow", scale=100, seeds=[0], max_interactions=320, eval_every=320,
               agent={"hidden": [8], "eval_episodes": 1, "v_min": -1.0, "v_max": 1.0, "n_atoms": 11})
    spec = resolve_spec(cfg)
    assert spec.agent.warmup == 200
    summary = json.loads(open(run(spec)[0].summary_json).read())
    assert summary["realized_ratio"] == pytest.approx(8.0, rel=0.01)


# ratios and sweeps

@pytest.mark.parametrize("r, cadence", [("1/4", (1, 4)), (0.25, (1, 4)), ("1", (1, 1)), (8, (8, 1))])
def test_realize_ratio(r, cadence):
    assert realize_ratio(r) == cadence


def test_unrealizable_ratio_suggests_neighbours():
    with pytest.raises(ConfigError) as info:
        realize_ratio(0.3)
    assert "1/4" in str(info.value) and "1/3" in str(info.value)


def test_single_ratio_sweep_matches_run_summary(tmp_path):
    spec = resolve_spec(_cfg(tmp_path, seeds=[0]))
    report = sweep_ratio(spec, ["1/4"])
    (row,) = report["rows"]
    summary = json.loads(open(run(resolve_spec(_cfg(tmp_path, seeds=[0], out=str(tmp_path / "x"))))[0]
                              .summary_json).read())
    assert row["median_interactions_to_reach"] == summary["interactions_to_reach"]["1.0"]["interactions"]
    assert row["median_final_normalized"] == pytest.approx(summary["final_normalized"])
    assert (tmp_path / "runs" / "sweep_report.csv").exists()


# table reproduction

def test_reproduce_shipped_tables():
    report = reproduce_tables()
    assert report["passed"] and len(report["cells"]) == 26 * 8
    medians = {(m["algorithm"], m["interactions"]): round(m["computed"], 2) for m in report["medians"]}
    assert medians[("OTRainbow", 100000)] == 20.42
    assert medians[("OTRainbow", 500000)] == 32.85
    assert medians[("SimPLe", 100000)] == 10.17
    assert medians[("HRainbow", 100000)] == 2.27
    assert report["otrainbow_minus_simple_median_pp"] > 10


def test_perturbed_fixture_fails_exactly_one_cell(tmp_path):
    for name in harness.FIXTURE_FILES:
        shutil.copy(DATA_DIR / name, tmp_path / name)
    rows = list(csv.DictReader(open(tmp_path / "raw_scores.csv")))
    for r in rows:
        if r["game"] == "Krull" and r["algorithm"] == "OTRainbow" and r["interactions"] == "100000":
            r["score"] = str(float(r["score"]) + 50)
    with open(tmp_path / "raw_scores.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    report = reproduce_tables(tmp_path)
    assert [(c["game"], c["algorithm"]) for c in report["failed_cells"]] == [("Krull", "OTRainbow")]


def test_missing_fixture(tmp_path):
    with pytest.raises(FileNotFoundError, match="raw_scores.csv"):
        reproduce_tables(tmp_path)


# CLI

def test_cli_run_ok(tmp_path, capsys):
    path = _write(tmp_path, _cfg(tmp_path))
    assert cli.main(["run", "--config", path, "--seed", "5", "--max-steps", "60"]) == 0
    assert "seed 5" in capsys.readouterr().out


def test_cli_duplicate_seeds_exit_1(tmp_path, capsys):
    path = _write(tmp_path, _cfg(tmp_path))
    assert cli.main(["run", "--config", path, "--seed", "1", "--seed", "1"]) == 1
    assert "distinct" in capsys.readouterr().err


def test_cli_env_file_relative_to_config(tmp_path):
    (tmp_path / "grid.json").write_text(json.dumps(GRID))
    cfg = _cfg(tmp_path, seeds=[0], max_interactions=40)
    del cfg["env"]
    cfg["env_file"] = "grid.json"
    assert cli.main(["run", "--config", _write(tmp_path, cfg)]) == 0


def test_cli_unrealizable_sweep_exit_1(tmp_path, capsys):
    assert cli.main(["sweep", "--config", _write(tmp_path, _cfg(tmp_path)), "--ratios", "0.3"]) == 1
    assert "1/3" in capsys.readouterr().err


def test_cli_reproduce_tables(tmp_path, capsys):
    assert cli.main(["reproduce-tables", "--out", str(tmp_path / "r.json")]) == 0
    assert "208/208" in capsys.readouterr().out
    assert json.loads((tmp_path / "r.json").read_text())["passed"]


def test_cli_reproduce_tables_mismatch_exit_2(tmp_path):
    for name in harness.FIXTURE_FILES:
        shutil.copy(DATA_DIR / name, tmp_path / name)
    text = (tmp_path / "normalized_medians.csv").read_text().replace("20.42", "21.42")
    (tmp_path / "normalized_medians.csv").write_text(text)
    assert cli.main(["reproduce-tables", "--fixtures", str(tmp_path)]) == 2


def test_cli_baseline_random(tmp_path, capsys):
    env = tmp_path / "catch.json"
    env.write_text(json.dumps({"kind": "catch"}))
    assert cli.main(["baseline-random", "--env", str(env), "--episodes", "200"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["episodes"] == 200 and -1.0 <= out["mean_return"] <= 1.0


def test_cli_bad_json_exit_1(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert cli.main(["run", "--config", str(path)]) == 1
