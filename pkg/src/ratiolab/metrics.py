"""Evaluation calculus: human-normalized scores, medians, update ratios,
interactions-to-reach comparisons."""
from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

SCHEMA_VERSION = 1
DEFAULT_CLIP = (20_000, 500_000)


class MetricsError(ValueError):
    pass


class MissingBaselineError(KeyError):
    def __init__(self, game: str):
        super().__init__(game)
        self.game = game

    def __str__(self):
        return f"no random/human baseline row for game {self.game!r}"


@dataclass(frozen=True)
class ScoreRecord:
    game: str
    algorithm: str
    interactions: int
    score: float

    def __post_init__(self):
        if self.interactions < 0:
            raise MetricsError(f"interactions must be >= 0, got {self.interactions}")

    @property
    def column(self) -> tuple[str, int]:
        return (self.algorithm, self.interactions)


@dataclass(frozen=True)
class BaselineRow:
    game: str
    random_score: float
    human_score: float

    def __post_init__(self):
        if self.human_score == self.random_score:
            raise MetricsError(f"{self.game}: human and random scores coincide")


def human_normalized(score: float, random_score: float, human_score: float) -> float:
    if human_score == random_score:
        raise MetricsError("human score equals random score; normalization undefined")
    # divide first so a human-level score maps to exactly 100
    return (score - random_score) / (human_score - random_score) * 100.0


def median(values: Sequence[float]) -> float:
    """Middle value; mean of the two central values for even counts."""
    if not values:
        raise MetricsError("median of an empty list")
    return statistics.median(values)


@dataclass
class NormalizedTable:
    percents: dict[str, float]
    median: float
    mean: float


def normalized_table(scores: Iterable[ScoreRecord], baselines) -> NormalizedTable:
    if not isinstance(baselines, dict):
        baselines = {b.game: b for b in baselines}
    percents = {}
    for rec in scores:
        base = baselines.get(rec.game)
        if base is None:
            raise MissingBaselineError(rec.game)
        percents[rec.game] = human_normalized(rec.score, base.random_score, base.human_score)
    vals = list(percents.values())
    return NormalizedTable(percents, median(vals), statistics.fmean(vals))


def update_ratio(real_steps: float, simulated_steps: float, tau_u: int, k: int = 1) -> float:
    """Training updates per real interaction when simulated steps also trigger updates."""
    if real_steps <= 0:
        raise MetricsError("real_steps must be positive")
    if tau_u < 1 or k < 1:
        raise MetricsError("tau_u and k must be >= 1")
    return k * (real_steps + simulated_steps) / real_steps / tau_u


def interactions_to_reach(curve, target_score: float, clip_low: float = DEFAULT_CLIP[0],
                          clip_high: float = DEFAULT_CLIP[1]) -> tuple[float, bool]:
    """First interaction count at which the curve attains ``target_score``.

    ``curve`` is a sequence of ``(interactions, eval_return)`` pairs. The
    crossing is located by linear interpolation between the bracketing
    evaluations. Returns ``(value, clipped)``; a curve that never reaches the
    target reports ``clip_high`` with ``clipped`` set.
    """
    points = curve.points() if hasattr(curve, "points") else list(curve)
    if not points:
        raise MetricsError("empty learning curve")
    if not clip_low < clip_high:
        raise MetricsError("clip_low must be < clip_high")
    reached = None
    for i, (x, y) in enumerate(points):
        if y >= target_score:
            if i == 0:
                reached = float(x)
            else:
                x0, y0 = points[i - 1]
                reached = x0 + (target_score - y0) * (x - x0) / (y - y0)
            break
    if reached is None:
        return float(clip_high), True
    if reached < clip_low:
        return float(clip_low), True
    if reached > clip_high:
        return float(clip_high), True
    return reached, False


def relative_score(a: float, b: float) -> float:
    if b == 0:
        raise MetricsError("relative score against a zero reference")
    return 100.0 * a / b


# CSV / JSON I/O

def read_scores(path) -> list[ScoreRecord]:
    with open(path, newline="") as f:
        return [ScoreRecord(r["game"], r["algorithm"], int(r["interactions"]), float(r["score"]))
                for r in csv.DictReader(f)]


def read_baselines(path) -> dict[str, BaselineRow]:
    with open(path, newline="") as f:
        return {r["game"]: BaselineRow(r["game"], float(r["random"]), float(r["human"]))
                for r in csv.DictReader(f)}


def group_by_column(scores: Iterable[ScoreRecord]) -> dict[tuple[str, int], list[ScoreRecord]]:
    out: dict[tuple[str, int], list[ScoreRecord]] = {}
    for rec in scores:
        out.setdefault(rec.column, []).append(rec)
    return out


def write_normalized_csv(path, tables: dict[tuple[str, int], NormalizedTable]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["schema_version", "game", "algorithm", "interactions", "percent"])
        for (alg, n), table in tables.items():
            for game, pct in table.percents.items():
                w.writerow([SCHEMA_VERSION, game, alg, n, f"{pct:.6f}"])
            w.writerow([SCHEMA_VERSION, "Median", alg, n, f"{table.median:.6f}"])
            w.writerow([SCHEMA_VERSION, "Mean", alg, n, f"{table.mean:.6f}"])


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps({"schema_version": SCHEMA_VERSION, **payload}, indent=2, sort_keys=True) + "\n")
