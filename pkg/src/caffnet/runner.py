"""Multi-seed scenario runs, metric aggregation and CSV artifacts.

One run = one scenario, one mode, a list of seeds.  Per-seed rows carry the
scenario's metric dict plus per-epoch training time and test-time inference
time in milliseconds; the aggregate appends mean and standard-deviation rows
in the same columns.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .constraints import ComboMode
from .experiments import PiecewiseScenario, SolverScenario, UnicycleScenario
from .training import MODE_CAFFNET, ConstrainedModel, Scenario, TrainConfig, TrainTrace, train

SCENARIO_NAMES = ("piecewise", "solver", "unicycle")

# desk-scale defaults; the paper-scale settings remain reachable via config
DESK_DEFAULTS = {
    "piecewise": {"epochs": 10_000, "batch_size": 500},
    "solver": {"epochs": 2_000, "batch_size": 1_000, "n_train": 200, "n_test": 200,
               "combo_mode": ComboMode.LITE},
    "unicycle": {"epochs": 200, "batch_size": 20, "n_starts": 20,
                 "lr": 3e-3, "out_scale": 0.2},
}


@dataclass
class RunSettings:
    """Resolved knobs for one scenario run."""

    scenario: str
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int | None = None
    batch_size: int | None = None
    mode: str = MODE_CAFFNET
    combo_mode: ComboMode | None = None
    p: float = 2.0
    feas_tol: float = 1e-9
    rank_tol: float = 1e-10
    lr: float | None = None
    penalty_weight: float = 100.0
    n_train: int | None = None
    n_test: int | None = None
    n_starts: int | None = None
    hidden: tuple[int, ...] = (200, 200, 200)
    out_scale: float | None = None

    def resolved(self) -> dict:
        if self.scenario not in SCENARIO_NAMES:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        base = dict(DESK_DEFAULTS[self.scenario])
        for key in ("epochs", "batch_size", "combo_mode", "n_train", "n_test",
                    "n_starts", "out_scale", "lr"):
            value = getattr(self, key)
            if value is not None:
                base[key] = value
        base.setdefault("combo_mode", ComboMode.FULL)
        base.setdefault("out_scale", 1.0)
        base.setdefault("lr", 1e-4)
        base.update(mode=self.mode, p=self.p, feas_tol=self.feas_tol,
                    rank_tol=self.rank_tol,
                    penalty_weight=self.penalty_weight, seeds=list(self.seeds),
                    scenario=self.scenario, hidden=list(self.hidden))
        return base


def build_scenario(settings: dict, seed: int) -> Scenario:
    name = settings["scenario"]
    if name == "piecewise":
        return PiecewiseScenario(seed=seed)
    if name == "solver":
        return SolverScenario(seed=seed, n_train=settings["n_train"],
                              n_test=settings["n_test"])
    return UnicycleScenario(seed=seed, n_starts=settings["n_starts"])


def train_config(settings: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=settings["epochs"], batch_size=settings["batch_size"], seed=seed,
        lr=settings["lr"], penalty_weight=settings["penalty_weight"],
        layer_mode=settings["mode"], combo_mode=settings["combo_mode"],
        feas_tol=settings["feas_tol"], rank_tol=settings["rank_tol"],
        p=settings["p"], hidden=tuple(settings["hidden"]),
        out_scale=settings["out_scale"],
    )


@dataclass
class SeedResult:
    seed: int
    metrics: dict
    trace: TrainTrace
    model: ConstrainedModel
    scenario: Scenario
    train_ms_per_epoch: float
    test_ms: float


@dataclass
class ScenarioReport:
    settings: dict
    results: list[SeedResult] = field(default_factory=list)

    def metric_columns(self) -> list[str]:
        return list(self.results[0].metrics.keys())

    def rows(self) -> list[dict]:
        return [{"seed": r.seed, **r.metrics} for r in self.results]

    def aggregate(self) -> tuple[dict, dict]:
        cols = self.metric_columns()
        rows = self.rows()
        mean, std = {"seed": "mean"}, {"seed": "std"}
        for c in cols:
            vals = np.asarray([float(r[c]) for r in rows])
            mean[c] = float(vals.mean())
            std[c] = float(vals.std())
        return mean, std

    def write_metrics_csv(self, path) -> None:
        """Deterministic metric table: per-seed rows plus mean/std rows.

        Wall-clock numbers go to the separate timings file so reruns of the
        same manifest stay byte-identical here.
        """
        cols = ["seed"] + self.metric_columns()
        mean, std = self.aggregate()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: _fmt(v) for k, v in row.items()})
            writer.writerow({k: _fmt(v) for k, v in mean.items()})
            writer.writerow({k: _fmt(v) for k, v in std.items()})

    def write_timings_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["seed", "t_train_ms_per_epoch", "t_test_ms"])
            rows = [(r.seed, r.train_ms_per_epoch, r.test_ms) for r in self.results]
            trains = np.asarray([r[1] for r in rows])
            tests = np.asarray([r[2] for r in rows])
            for row in rows:
                writer.writerow([row[0], repr(row[1]), repr(row[2])])
            writer.writerow(["mean", repr(float(trains.mean())), repr(float(tests.mean()))])
            writer.writerow(["std", repr(float(trains.std())), repr(float(tests.std()))])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return int(v)
    return v


def run_seed(settings: dict, seed: int) -> SeedResult:
    scenario = build_scenario(settings, seed)
    cfg = train_config(settings, seed)
    model = scenario.build_model(cfg)
    t0 = time.perf_counter()
    trace = train(model, scenario, cfg)
    train_ms = (time.perf_counter() - t0) * 1e3 / max(1, cfg.epochs)
    t0 = time.perf_counter()
    metrics = scenario.evaluate(model, seed)
    test_ms = (time.perf_counter() - t0) * 1e3
    return SeedResult(seed=seed, metrics=metrics, trace=trace, model=model,
                      scenario=scenario, train_ms_per_epoch=train_ms, test_ms=test_ms)


def worker_count() -> int:
    raw = os.environ.get("CAFFNET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_scenario(settings_in: RunSettings | dict) -> ScenarioReport:
    """Train and evaluate every seed; results are merged in seed order."""
    settings = settings_in.resolved() if isinstance(settings_in, RunSettings) else settings_in
    seeds = settings["seeds"]
    workers = min(worker_count(), len(seeds))
    report = ScenarioReport(settings=settings)
    if workers <= 1:
        report.results = [run_seed(settings, s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            report.results = list(pool.map(lambda s: run_seed(settings, s), seeds))
    return report
