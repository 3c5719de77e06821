"""Multi-seed experiment protocol: per-seed split/train/evaluate and the
mean, sample standard deviation and best-of-n aggregation."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .estimator import fit_evaluate
from .metrics import Metrics

log = logging.getLogger(__name__)

METRIC_NAMES = ("mae", "mse", "r2")
# metric -> the per-seed value counted as best
BEST = {"mae": min, "mse": min, "r2": max}


@dataclass
class SeedResult:
    seed: int
    metrics: Metrics | None = None
    best_epoch: int | None = None
    error: str | None = None

    @property
    def ok(self):
        return self.metrics is not None


@dataclass
class ExperimentSummary:
    results: list
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    best: dict = field(default_factory=dict)

    @property
    def failed_seeds(self):
        return [r.seed for r in self.results if not r.ok]

    @property
    def partial(self):
        return bool(self.failed_seeds)

    def to_table(self):
        """Tab-separated per-seed rows followed by mean, std and best rows."""
        lines = ["seed\tmae\tmse\tr2\tbest_epoch\tstatus"]
        for r in self.results:
            if r.ok:
                m = r.metrics
                lines.append(f"{r.seed}\t{m.mae:.6f}\t{m.mse:.6f}\t{m.r2:.6f}\t{r.best_epoch}\tok")
            else:
                lines.append(f"{r.seed}\tnan\tnan\tnan\t\tfailed: {r.error}")
        for name, row in (("mean", self.mean), ("std", self.std), ("best", self.best)):
            vals = "\t".join(f"{row.get(k, float('nan')):.6f}" for k in METRIC_NAMES)
            lines.append(f"{name}\t{vals}\t\t{'partial' if self.partial else 'complete'}")
        return "\n".join(lines) + "\n"


def aggregate(results):
    """Mean, sample (n-1) standard deviation and best value per metric over successful seeds."""
    ok = [r for r in results if r.ok]
    summary = ExperimentSummary(list(results))
    if not ok:
        return summary
    for name in METRIC_NAMES:
        vals = np.array([getattr(r.metrics, name) for r in ok])
        summary.mean[name] = float(vals.mean())
        summary.std[name] = float(vals.std(ddof=1)) if vals.size > 1 else float("nan")
        summary.best[name] = float(BEST[name](vals))
    return summary


def derive_seeds(master_seed, n):
    """Per-run seeds derived deterministically from a master seed."""
    states = np.random.SeedSequence(master_seed).generate_state(n)
    return [int(s) for s in states]


def multi_seed_run(X, y, n_seeds=10, master_seed=0, params=None, groups=None,
                   run=fit_evaluate, seeds=None):
    """Repeat split -> train -> evaluate for ``n_seeds`` seeds.

    A failing seed is recorded (the summary becomes partial) instead of
    aborting the experiment.
    """
    if n_seeds < 2:
        raise ValueError("a multi-seed run needs at least 2 seeds")
    seeds = list(seeds) if seeds is not None else derive_seeds(master_seed, n_seeds)
    results = []
    for seed in seeds:
        try:
            est, metrics = run(X, y, seed, params=params, groups=groups)
        except Exception as exc:  # noqa: BLE001 - recorded per seed
            log.warning("seed %d failed: %s", seed, exc)
            results.append(SeedResult(seed, error=f"{type(exc).__name__}: {exc}"))
            continue
        log.info("seed %d: %s", seed, metrics)
        results.append(SeedResult(seed, metrics, getattr(est, "best_epoch_", None)))
    return aggregate(results)
