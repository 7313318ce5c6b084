"""Experiment orchestration: resolve configs, run seeded jobs, write artifacts,
sweep the replay ratio, and re-derive the published normalized-score tables."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from . import metrics
from .agent import AgentConfig, ConfigError, LearningCurve, RunFailure, Trainer, preset, scale_schedule
from .envs import EnvSpecError, load_env_spec, make_env, random_agent_baseline

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CURVE_COLUMNS = ["interactions", "eval_return", "epsilon", "updates", "loss_mean"]
DATA_DIR = Path(__file__).parent / "data"
MAX_K = 64
MAX_TAU_U = 64

# Default solve thresholds used for interactions-to-reach at desk scale.
SOLVE_THRESHOLD = {"catch": 0.85, "gridworld": None}


class ValidationError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class ExperimentSpec:
    env: dict
    agent: AgentConfig
    seeds: list[int]
    max_interactions: int
    eval_every: int
    out: str
    thresholds: list[float] = field(default_factory=list)
    stop_at_return: float | None = None
    checkpoint_every: int = 0
    workers: int = 1
    preset: str | None = None
    scale: float = 1.0

    def violations(self) -> list[str]:
        out = []
        if not self.seeds:
            out.append("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            out.append(f"seeds must be distinct, got {self.seeds}")
        if self.max_interactions <= self.agent.warmup:
            out.append(f"max_interactions {self.max_interactions} must exceed warmup {self.agent.warmup}")
        if self.eval_every < 1:
            out.append("eval_every must be >= 1")
        if self.checkpoint_every < 0:
            out.append("checkpoint_every must be >= 0")
        out.extend(self.agent.violations())
        try:
            make_env(self.env)
        except (EnvSpecError, TypeError) as exc:
            out.append(f"env: {exc}")
        return out

    def validate(self) -> "ExperimentSpec":
        problems = self.violations()
        if problems:
            raise ValidationError(problems)
        return self

    def eval_schedule(self) -> list[int]:
        pts = list(range(self.eval_every, self.max_interactions + 1, self.eval_every))
        if not pts or pts[-1] != self.max_interactions:
            pts.append(self.max_interactions)
        return pts

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "env": self.env, "agent": self.agent.to_dict(), "seeds": list(self.seeds),
            "max_interactions": self.max_interactions, "eval_every": self.eval_every, "out": self.out,
            "thresholds": list(self.thresholds), "stop_at_return": self.stop_at_return,
            "checkpoint_every": self.checkpoint_every, "workers": self.workers,
            "preset": self.preset, "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d.pop("schema_version", None)
        d["agent"] = AgentConfig.from_dict(d["agent"])
        return cls(**d)


def resolve_spec(file_cfg: dict | None = None, *, preset_name: str | None = None, seeds=None,
                 max_interactions: int | None = None, out: str | None = None, base_dir=".") -> ExperimentSpec:
    """Merge defaults < preset < file < flags into a fully expanded spec."""
    cfg = copy.deepcopy(file_cfg or {})
    cfg.pop("schema_version", None)
    problems = []
    known = {"env", "env_file", "preset", "scale", "agent", "seeds", "max_interactions", "eval_every",
             "out", "thresholds", "stop_at_return", "checkpoint_every", "workers"}
    unknown = set(cfg) - known
    if unknown:
        problems.append(f"unknown experiment keys: {sorted(unknown)}")
    name = preset_name or cfg.get("preset")
    scale = float(cfg.get("scale", 1.0))
    try:
        agent = preset(name) if name else AgentConfig()
        if scale != 1.0:
            agent = scale_schedule(agent, scale)
        overrides = cfg.get("agent", {})
        unknown_agent = set(overrides) - set(AgentConfig().to_dict())
        if unknown_agent:
            raise ConfigError(f"unknown agent keys: {sorted(unknown_agent)}")
        agent = agent.replace(**overrides)
    except ConfigError as exc:
        problems.append(str(exc))
        agent = AgentConfig()
    if "env_file" in cfg:
        try:
            env = load_env_spec(Path(base_dir) / cfg["env_file"])
        except (OSError, EnvSpecError, json.JSONDecodeError) as exc:
            problems.append(f"env_file: {exc}")
            env = {"kind": "catch"}
    else:
        env = cfg.get("env", {"kind": "catch"})
    seeds = list(seeds) if seeds is not None else list(cfg.get("seeds", [0]))
    thresholds = cfg.get("thresholds")
    if thresholds is None:
        default = SOLVE_THRESHOLD.get(env.get("kind"))
        thresholds = [default] if default is not None else []
    spec = ExperimentSpec(
        env=env, agent=agent, seeds=seeds,
        max_interactions=int(max_interactions or cfg.get("max_interactions", 20000)),
        eval_every=int(cfg.get("eval_every", 500)),
        out=str(out or cfg.get("out", "runs")),
        thresholds=[float(x) for x in thresholds],
        stop_at_return=cfg.get("stop_at_return"),
        checkpoint_every=int(cfg.get("checkpoint_every", 0)),
        workers=int(cfg.get("workers", 1)),
        preset=name, scale=scale,
    )
    problems.extend(spec.violations())
    if problems:
        raise ValidationError(problems)
    return spec


def content_hash(payload: dict) -> str:
    """Git blob-style SHA-1 of the canonical JSON encoding."""
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


@dataclass
class RunArtifact:
    seed: int
    run_dir: str
    resolved_config: dict
    curve_csv: str
    summary_json: str
    wall_seconds: float
    content_hash: str
    failed: bool = False


def write_curve_csv(path, curve: LearningCurve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["schema_version"] + CURVE_COLUMNS)
        for t, ret, eps, upd, loss in curve.rows():
            w.writerow([SCHEMA_VERSION, t, repr(float(ret)), repr(float(eps)), upd, repr(float(loss))])


def read_curve_csv(path) -> LearningCurve:
    curve = LearningCurve()
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            curve.append(int(r["interactions"]), float(r["eval_return"]), float(r["epsilon"]),
                         int(r["updates"]), float(r["loss_mean"]))
    return curve


def reference_scores(env_spec: dict, episodes: int = 2000, seed: int = 12345) -> tuple[float, float]:
    """(random, human-proxy) scores; the proxy is the optimal-policy return."""
    env = make_env(env_spec)
    return random_agent_baseline(make_env(env_spec), episodes, seed), env.optimal_return()


def run_dir_for(spec: ExperimentSpec, seed: int) -> Path:
    label = (spec.preset or spec.agent.label).replace(" ", "_")
    return Path(spec.out) / f"{label}_r{spec.agent.k}-{spec.agent.tau_u}_seed{seed}"


def _run_seed(spec_dict: dict, seed: int, resume: bool) -> dict:
    spec = ExperimentSpec.from_dict(spec_dict)
    cfg = spec.agent.replace(seed=seed)
    run_dir = run_dir_for(spec, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = {**spec.to_dict(), "agent": cfg.to_dict(), "seeds": [seed]}
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    ckpt = run_dir / "checkpoint.bin"
    env, eval_env = make_env(spec.env), make_env(spec.env)
    start = time.perf_counter()
    if resume and ckpt.exists():
        trainer = Trainer.restore(ckpt.read_bytes(), env, eval_env)
        log.info("resumed %s at interaction %d", run_dir, trainer.t)
    else:
        trainer = Trainer(env, eval_env, cfg, spec.eval_schedule(), spec.max_interactions, spec.stop_at_return)

    def on_step(tr: Trainer):
        if spec.checkpoint_every and tr.t % spec.checkpoint_every == 0 and not tr.finished:
            tmp = ckpt.with_suffix(".tmp")
            tmp.write_bytes(tr.checkpoint())
            tmp.replace(ckpt)

    failure = None
    try:
        trainer.run(on_step=on_step)
    except RunFailure as exc:
        failure = exc.record
        (run_dir / "failure.json").write_text(json.dumps({"schema_version": SCHEMA_VERSION, **failure}, indent=2))
    curve = trainer.curve
    write_curve_csv(run_dir / "curve.csv", curve)
    st = trainer.state
    rand, human = reference_scores(spec.env)
    summary = {
        "seed": seed,
        "label": cfg.label,
        "interactions": st.t,
        "updates": st.u,
        "configured_ratio": cfg.ratio,
        "realized_ratio": st.u / max(1, st.t - cfg.warmup),
        "final_score": curve.eval_return[-1] if len(curve) else None,
        "random_score": rand,
        "human_proxy_score": human,
        "final_normalized": (metrics.human_normalized(curve.eval_return[-1], rand, human)
                             if len(curve) else None),
        "interactions_to_reach": {},
        "failed": failure is not None,
        "wall_seconds": time.perf_counter() - start,
    }
    for thr in spec.thresholds:
        if len(curve):
            value, clipped = metrics.interactions_to_reach(curve, thr, 0, spec.max_interactions)
            summary["interactions_to_reach"][repr(thr)] = {"interactions": value, "clipped": clipped}
    metrics.write_json(run_dir / "summary.json", summary)
    return {
        "seed": seed, "run_dir": str(run_dir), "resolved_config": resolved,
        "curve_csv": str(run_dir / "curve.csv"), "summary_json": str(run_dir / "summary.json"),
        "wall_seconds": summary["wall_seconds"], "content_hash": content_hash(resolved),
        "failed": failure is not None,
    }


def run(spec: ExperimentSpec, resume: bool = False) -> list[RunArtifact]:
    spec.validate()
    payload = spec.to_dict()
    if spec.workers > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_run_seed, [payload] * len(spec.seeds), spec.seeds,
                                    [resume] * len(spec.seeds)))
    else:
        results = [_run_seed(payload, seed, resume) for seed in spec.seeds]
    return [RunArtifact(**r) for r in results]


def parse_ratio(text) -> Fraction:
    if isinstance(text, Fraction):
        return text
    return Fraction(str(text).strip())


def realize_ratio(r) -> tuple[int, int]:
    """(k, tau_u) for a ratio of the form k/1 or 1/tau_u.

    The cadence is shortened first (tau_u down to 1) and only then are extra
    updates per trigger added, so ratios below one are 1/tau_u and ratios above
    one are whole numbers of updates.
    """
    r = parse_ratio(r)
    if r > 0 and r.numerator == 1 and r.denominator <= MAX_TAU_U:
        return 1, r.denominator
    if r >= 1 and r.denominator == 1 and r.numerator <= MAX_K:
        return r.numerator, 1
    lattice = sorted({Fraction(1, t) for t in range(1, MAX_TAU_U + 1)} | {Fraction(k) for k in range(1, MAX_K + 1)})
    below = [x for x in lattice if x < r]
    above = [x for x in lattice if x > r]
    nearest = [x for x in (below[-1] if below else None, above[0] if above else None) if x is not None]
    raise ConfigError(f"ratio {r} is not realizable as k/1 or 1/tau_u; nearest realizable: "
                      + ", ".join(str(x) for x in nearest))


def sweep_ratio(base: ExperimentSpec, r_values, threshold: float | None = None) -> dict:
    """Run ``base`` at each ratio and compare median interactions-to-reach."""
    cadences = [(parse_ratio(r), realize_ratio(r)) for r in r_values]
    if threshold is None:
        threshold = base.thresholds[0] if base.thresholds else SOLVE_THRESHOLD.get(base.env.get("kind"))
    if threshold is None:
        raise ValidationError(["sweep needs a solve threshold (set thresholds in the config)"])
    rand, human = reference_scores(base.env)
    rows = []
    for r, (k, tau_u) in cadences:
        spec = copy.deepcopy(base)
        spec.agent = spec.agent.replace(k=k, tau_u=tau_u)
        spec.thresholds = sorted(set(spec.thresholds) | {threshold})
        artifacts = run(spec)
        reach, finals, realized = [], [], []
        for art in artifacts:
            summary = json.loads(Path(art.summary_json).read_text())
            curve = read_curve_csv(art.curve_csv)
            reach.append(metrics.interactions_to_reach(curve, threshold, 0, spec.max_interactions)[0])
            finals.append(metrics.human_normalized(curve.eval_return[-1], rand, human))
            realized.append(summary["realized_ratio"])
        rows.append({
            "ratio": str(r), "ratio_value": float(r), "k": k, "tau_u": tau_u,
            "median_interactions_to_reach": statistics.median(reach),
            "interactions_to_reach": reach,
            "median_final_normalized": statistics.median(finals),
            "median_realized_ratio": statistics.median(realized),
            "run_dirs": [a.run_dir for a in artifacts],
        })
    report = {"schema_version": SCHEMA_VERSION, "threshold": threshold, "seeds": list(base.seeds),
              "environment": base.env, "agent_label": base.agent.label, "rows": rows}
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(out / "sweep_report.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["schema_version", "ratio", "k", "tau_u", "median_interactions_to_reach",
                    "median_final_normalized", "median_realized_ratio"])
        for row in rows:
            w.writerow([SCHEMA_VERSION, row["ratio"], row["k"], row["tau_u"], row["median_interactions_to_reach"],
                        row["median_final_normalized"], row["median_realized_ratio"]])
    return report


FIXTURE_FILES = ("raw_scores.csv", "baselines.csv", "normalized_scores.csv", "normalized_medians.csv")


def reproduce_tables(fixtures_dir=DATA_DIR, tolerance: float = 0.005) -> dict:
    """Recompute every normalized cell and median from raw scores and compare
    against the printed values after rounding to two decimals."""
    fixtures_dir = Path(fixtures_dir)
    for name in FIXTURE_FILES:
        if not (fixtures_dir / name).exists():
            raise FileNotFoundError(f"missing fixture {name} in {fixtures_dir}")
    scores = metrics.read_scores(fixtures_dir / "raw_scores.csv")
    baselines = metrics.read_baselines(fixtures_dir / "baselines.csv")
    tables = {col: metrics.normalized_table(recs, baselines)
              for col, recs in metrics.group_by_column(scores).items()}
    cells = []
    with open(fixtures_dir / "normalized_scores.csv", newline="") as f:
        for r in csv.DictReader(f):
            col = (r["algorithm"], int(r["interactions"]))
            computed = tables[col].percents[r["game"]]
            printed = float(r["percent"])
            cells.append({"game": r["game"], "algorithm": col[0], "interactions": col[1],
                          "printed": printed, "computed": computed,
                          "passed": abs(round(computed, 2) - printed) <= tolerance})
    medians = []
    with open(fixtures_dir / "normalized_medians.csv", newline="") as f:
        for r in csv.DictReader(f):
            col = (r["algorithm"], int(r["interactions"]))
            printed = float(r["median_percent"])
            computed = tables[col].median
            medians.append({"algorithm": col[0], "interactions": col[1], "printed": printed,
                            "computed": computed, "passed": abs(round(computed, 2) - printed) <= tolerance})
    med = {(m["algorithm"], m["interactions"]): m["computed"] for m in medians}
    gap = med.get(("OTRainbow", 100000), float("nan")) - med.get(("SimPLe", 100000), float("nan"))
    return {
        "schema_version": SCHEMA_VERSION,
        "cells": cells, "medians": medians,
        "failed_cells": [c for c in cells if not c["passed"]],
        "failed_medians": [m for m in medians if not m["passed"]],
        "otrainbow_minus_simple_median_pp": gap,
        "passed": all(c["passed"] for c in cells) and all(m["passed"] for m in medians),
        "means": {f"{a} ({n})": t.mean for (a, n), t in tables.items()},
    }
