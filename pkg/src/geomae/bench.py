"""Benchmark protocol: budgeted hyperparameter search, seeded repeats,
leave-one-year-out splits and an append-only results registry.
"""
from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .seeding import numpy_rng


# search space ----------------------------------------------------------------------
@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator) -> float:
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class Choice:
    values: tuple

    def sample(self, rng: np.random.Generator):
        v = self.values[int(rng.integers(len(self.values)))]
        return v.item() if isinstance(v, np.generic) else v


def default_space() -> dict[str, Any]:
    return {
        "lr": LogUniform(1e-5, 1e-3),
        "weight_decay": LogUniform(1e-3, 0.3),
        "decoder_depth": Choice((1, 2, 3, 4)),
    }


@dataclass
class Trial:
    trial_id: int
    config: dict
    score: float
    error: str | None = None
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None and not math.isnan(self.score)


class Strategy(Protocol):
    def propose(self, trial_id: int, history: Sequence[Trial], rng: np.random.Generator) -> dict: ...


@dataclass
class RandomSearch:
    space: Mapping[str, Any]

    def propose(self, trial_id, history, rng):
        return {k: v.sample(rng) for k, v in sorted(self.space.items())}


@dataclass
class SearchResult:
    best_config: dict | None
    best_score: float
    trials: list[Trial]


def hparam_search(
    objective: Callable[[dict], float],
    space: Mapping[str, Any] | None = None,
    budget: int = 10,
    seed: int = 0,
    strategy: Strategy | None = None,
) -> SearchResult:
    """Evaluate exactly ``budget`` configurations and return the best by score
    (higher is better). Failing trials are logged and never win.
    """
    if budget < 1:
        raise InvalidArgumentError("search budget must be at least 1")
    strategy = strategy or RandomSearch(space if space is not None else default_space())
    rng = numpy_rng(seed, "search")
    trials: list[Trial] = []
    for tid in range(budget):
        cfg = strategy.propose(tid, trials, rng)
        t0 = time.perf_counter()
        try:
            score, err = float(objective(cfg)), None
        except Exception as exc:  # trial failures are data, not crashes
            score, err = float("nan"), f"{type(exc).__name__}: {exc}"
        trials.append(Trial(tid, cfg, score, err, time.perf_counter() - t0))
    good = [t for t in trials if t.ok]
    if not good:
        return SearchResult(None, float("nan"), trials)
    best = max(good, key=lambda t: (t.score, -t.trial_id))
    return SearchResult(best.config, best.score, trials)


# seeded repeats ----------------------------------------------------------------------
@dataclass
class RunAggregate:
    seeds: list[int]
    scores: list[float]
    mean: float
    std: float  # sample (n - 1) standard deviation; 0 with std_defined=False when n < 2
    std_defined: bool = True
    failures: dict[int, str] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def repeat_eval(
    fn: Callable[[dict, int], float | Mapping[str, float]],
    config: dict,
    n_seeds: int = 10,
    seed0: int = 0,
    primary: str | None = None,
) -> RunAggregate:
    """Run ``fn(config, seed)`` for seeds ``seed0 .. seed0+n-1``.

    ``fn`` returns a score or a metrics mapping (``primary`` names the score).
    """
    if n_seeds < 1:
        raise InvalidArgumentError("n_seeds must be at least 1")
    seeds = list(range(seed0, seed0 + n_seeds))
    scores, metrics, failures = [], [], {}
    for s in seeds:
        try:
            out = fn(config, s)
        except Exception as exc:
            failures[s] = f"{type(exc).__name__}: {exc}"
            continue
        if isinstance(out, Mapping):
            metrics.append(dict(out))
            out = out[primary] if primary else next(iter(out.values()))
        scores.append(float(out))
    if not scores:
        return RunAggregate(seeds, [], float("nan"), 0.0, False, failures, metrics)
    mean = statistics.fmean(scores)
    if len(scores) > 1:
        return RunAggregate(seeds, scores, mean, statistics.stdev(scores), True, failures, metrics)
    return RunAggregate(seeds, scores, mean, 0.0, False, failures, metrics)


def aggregate_datasets(primary_scores: Mapping[str, float]) -> float:
    """Unweighted mean of per-dataset primary metrics (all in [0, 1])."""
    if not primary_scores:
        raise InvalidArgumentError("no datasets to aggregate")
    return statistics.fmean(primary_scores.values())


# leave-one-year-out ----------------------------------------------------------------------
@dataclass(frozen=True)
class YearSplit:
    test_year: int
    train_years: tuple[int, ...]
    train: list[int]
    test: list[int]


def loyo_splits(years: Sequence[int]) -> list[YearSplit]:
    """One split per distinct year: that year's indices are the test set."""
    years = [int(y) for y in years]
    distinct = sorted(set(years))
    if len(distinct) < 2:
        raise InvalidArgumentError("leave-one-year-out needs at least two distinct years")
    return [
        YearSplit(
            test_year=y,
            train_years=tuple(v for v in distinct if v != y),
            train=[i for i, v in enumerate(years) if v != y],
            test=[i for i, v in enumerate(years) if v == y],
        )
        for y in distinct
    ]


# registry --------------------------------------------------------------------------------
BASE_FIELDS = ["experiment", "kind", "trial_id", "seed"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, sort_keys=True)
    return str(v)


class Registry:
    """Append-only CSV of trial and repeat results for one experiment.

    Columns: ``experiment, kind, trial_id, seed, cfg_<key>..., m_<metric>...,
    error, wall_time``; the header is fixed by the first row written.
    """

    def __init__(self, path, experiment: str):
        self.path = Path(path)
        self.experiment = experiment

    def _header(self, config: Mapping, metrics: Mapping) -> list[str]:
        return (
            BASE_FIELDS
            + [f"cfg_{k}" for k in sorted(config)]
            + [f"m_{k}" for k in sorted(metrics)]
            + ["error", "wall_time"]
        )

    def append(self, kind: str, trial_id, seed, config: Mapping, metrics: Mapping, error: str = "", wall_time: float = 0.0):
        header = self._header(config, metrics)
        exists = self.path.exists() and self.path.stat().st_size > 0
        if exists:
            with open(self.path, newline="", encoding="utf-8") as fh:
                current = next(csv.reader(fh))
            if current != header:
                raise InvalidArgumentError(f"registry {self.path} has columns {current}, row has {header}")
        row = [self.experiment, kind, _fmt(trial_id), _fmt(seed)]
        row += [_fmt(config[k]) for k in sorted(config)]
        row += [_fmt(metrics[k]) for k in sorted(metrics)]
        row += [error or "", f"{wall_time:.3f}"]
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if not exists:
                w.writerow(header)
            w.writerow(row)

    def rows(self) -> list[dict[str, str]]:
        if not self.path.exists():
            return []
        with open(self.path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))


def markdown_report(experiment: str, search: SearchResult, agg: RunAggregate, metric: str) -> str:
    lines = [f"# {experiment}", "", "## Search", "", "| trial | score | config |", "|---|---|---|"]
    for t in search.trials:
        score = "failed" if not t.ok else f"{t.score:.4f}"
        lines.append(f"| {t.trial_id} | {score} | `{json.dumps(t.config, sort_keys=True)}` |")
    lines += ["", f"Best config: `{json.dumps(search.best_config, sort_keys=True)}`", ""]
    lines += ["## Repeated runs", "", f"| seed | {metric} |", "|---|---|"]
    for s, v in zip([s for s in agg.seeds if s not in agg.failures], agg.scores):
        lines.append(f"| {s} | {v:.4f} |")
    std = f"{agg.std:.4f}" if agg.std_defined else "n/a"
    lines += ["", f"**{metric}: mean {agg.mean:.4f}, sample std {std} over {len(agg.scores)} runs**"]
    if agg.failures:
        lines += ["", f"Partial aggregate: {len(agg.failures)} failed runs ({sorted(agg.failures)})."]
    return "\n".join(lines) + "\n"
