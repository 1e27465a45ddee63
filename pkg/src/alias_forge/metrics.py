"""Security and similarity metrics: trace spread, budgeted fitness and layer error rate."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .trace import FEATURES, TraceMatrix, total_latency

HINGE_EPS = 1e-6
FITNESS_MODES = ("verbatim", "hinge")


class DegenerateTraceError(ValueError):
    """Raised when a spread is requested over fewer than two values."""


def stdev(values: Sequence[float]) -> float:
    """Sample standard deviation with the N - 1 denominator."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise DegenerateTraceError(f"standard deviation needs at least 2 values, got {x.size}")
    return math.sqrt(float(np.sum((x - x.mean()) ** 2)) / (x.size - 1))


def stdev_per_feature(tm: TraceMatrix) -> tuple[float, float, float]:
    if len(tm) < 2:
        raise DegenerateTraceError(f"trace has {len(tm)} kernels; need at least 2")
    return tuple(stdev(tm.values[:, i]) for i in range(len(FEATURES)))  # type: ignore[return-value]


def budget_scaling(latency: float, baseline_latency: float, budget: float,
                   mode: str = "verbatim") -> float:
    """Budget term of the fitness: ((T - (1+B) T*) / T*)^2, or its one-sided hinge."""
    gap = (latency - (1.0 + budget) * baseline_latency) / baseline_latency
    if mode == "verbatim":
        return gap * gap
    if mode == "hinge":
        return max(0.0, gap) ** 2 + HINGE_EPS
    raise ValueError(f"unknown fitness mode {mode!r}; expected one of {FITNESS_MODES}")


@dataclass(frozen=True)
class FitnessReport:
    stdev_per_feature: tuple[float, float, float]
    stdev_sum: float
    latency: float
    baseline_latency: float
    budget: float
    scaling: float
    fitness: float

    @property
    def feasible(self) -> bool:
        return self.latency <= (1.0 + self.budget) * self.baseline_latency

    def as_dict(self) -> dict:
        d = asdict(self)
        d["stdev_per_feature"] = list(self.stdev_per_feature)
        return d


def fitness(tm: TraceMatrix, baseline_latency: float, budget: float,
            mode: str = "verbatim", bandwidth: float = 256.0) -> FitnessReport:
    """Lower is better: summed feature spread times the budget scaling."""
    if baseline_latency <= 0:
        raise ValueError(f"baseline latency must be positive, got {baseline_latency}")
    if budget < 0:
        raise ValueError(f"budget must be non-negative, got {budget}")
    per = stdev_per_feature(tm)
    s = sum(per)
    latency = total_latency(tm, bandwidth)
    scaling = budget_scaling(latency, baseline_latency, budget, mode)
    return FitnessReport(per, s, latency, baseline_latency, budget, scaling, s * scaling)


def budget_ok(tm: TraceMatrix, baseline_latency: float, budget: float,
              bandwidth: float = 256.0) -> bool:
    return total_latency(tm, bandwidth) <= (1.0 + budget) * baseline_latency


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for jj, y in enumerate(b, start=1):
            cur.append(min(prev[jj] + 1, cur[jj - 1] + 1, prev[jj - 1] + (x != y)))
        prev = cur
    return prev[-1]


def ler(predicted: Sequence, truth: Sequence) -> float:
    """Layer error rate: edit distance normalised by the true sequence length."""
    if len(truth) == 0:
        raise ValueError("LER is undefined for an empty ground-truth sequence")
    return edit_distance(predicted, truth) / len(truth)
