"""Regression metrics reported in µg/m³."""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import UndefinedVarianceError


@dataclass(frozen=True)
class Metrics:
    mae: float
    mse: float
    r2: float

    def as_dict(self):
        return asdict(self)


def _pair(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions, {t.size} targets")
    if p.size == 0:
        raise ValueError("metrics need at least one prediction")
    return p, t


def mae(predictions, targets):
    p, t = _pair(predictions, targets)
    return float(np.mean(np.abs(p - t)))


def mse(predictions, targets):
    p, t = _pair(predictions, targets)
    return float(np.mean((p - t) ** 2))


def r2(predictions, targets):
    """Coefficient of determination, ``1 - SS_res / SS_tot``."""
    p, t = _pair(predictions, targets)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedVarianceError("r2 is undefined for constant targets")
    return 1.0 - float(np.sum((p - t) ** 2)) / ss_tot


def compute_metrics(predictions, targets):
    return Metrics(mae(predictions, targets), mse(predictions, targets), r2(predictions, targets))
