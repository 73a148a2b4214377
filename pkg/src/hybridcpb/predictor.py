"""EWMA blacklist forecasting and prediction metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import OrgLog

DEFAULT_ALPHA = 0.9
DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class ForecastParams:
    alpha: float = DEFAULT_ALPHA
    tau: float = DEFAULT_TAU
    binary: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.tau < 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")


@dataclass(frozen=True)
class AugmentedTrainingSet:
    """An org's own log plus events received from peers, kept per sender.

    Keeping each sender's contribution separate lets the daily series count
    one unit per (holder, day) in binary mode.
    """

    org: str
    base: OrgLog
    extra: Mapping[str, OrgLog] = field(default_factory=dict)

    def extra_count(self) -> int:
        return sum(len(chunk) for chunk in self.extra.values())

    def extra_sources(self) -> frozenset[int]:
        out: set[int] = set()
        for chunk in self.extra.values():
            out.update(chunk.unique_sources())
        return frozenset(out)


@dataclass(frozen=True)
class Blacklist:
    org: str
    predicted: frozenset[int]


def ewma_forecast(series: Sequence[float], alpha: float) -> float:
    """Sum of alpha * (1 - alpha)^(t - t') * r(t') over the series; no normalization."""
    if len(series) == 0:
        raise ValueError("series must be non-empty")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    t = len(series)
    return math.fsum(alpha * (1.0 - alpha) ** (t - 1 - i) * float(r) for i, r in enumerate(series))


def ewma_weights(n_days: int, alpha: float) -> np.ndarray:
    return alpha * (1.0 - alpha) ** np.arange(n_days - 1, -1, -1, dtype=float)


def daily_series(
    aug: AugmentedTrainingSet | OrgLog, train_days: Sequence[int], binary: bool = True
) -> dict[int, np.ndarray]:
    """Per-source daily series over ``train_days``.

    Binary mode counts 1 per (holder, day) where the holder logged the
    source at least once; count mode sums raw occurrences.
    """
    if isinstance(aug, OrgLog):
        aug = AugmentedTrainingSet(aug.org, aug)
    sources, rows = _series_matrix([aug.base, *aug.extra.values()], train_days, binary)
    return {s: row for s, row in zip(sources.tolist(), rows)}


def _series_matrix(chunks: Iterable[OrgLog], train_days: Sequence[int], binary: bool) -> tuple[np.ndarray, np.ndarray]:
    first = train_days[0]
    n_days = len(train_days)
    all_src, all_day = [], []
    for chunk in chunks:
        mask = (chunk.days >= first) & (chunk.days < first + n_days)
        src, day = chunk.sources[mask], chunk.days[mask] - first
        if binary and src.size:
            key = np.unique(src * n_days + day)
            src, day = key // n_days, key % n_days
        all_src.append(src)
        all_day.append(day)
    if not all_src:
        return np.zeros(0, dtype=np.int64), np.zeros((0, n_days))
    src = np.concatenate(all_src)
    day = np.concatenate(all_day)
    sources, inv = np.unique(src, return_inverse=True)
    rows = np.zeros((sources.size, n_days))
    np.add.at(rows, (inv, day), 1.0)
    return sources, rows


def ewma_scores(
    aug: AugmentedTrainingSet | OrgLog, train_days: Sequence[int], params: ForecastParams
) -> dict[int, float]:
    if isinstance(aug, OrgLog):
        aug = AugmentedTrainingSet(aug.org, aug)
    sources, rows = _series_matrix([aug.base, *aug.extra.values()], train_days, params.binary)
    scores = rows @ ewma_weights(len(train_days), params.alpha)
    return dict(zip(sources.tolist(), scores.tolist()))


def predict_blacklist(
    aug: AugmentedTrainingSet | OrgLog, train_days: Sequence[int], params: ForecastParams = ForecastParams()
) -> Blacklist:
    """Blacklist every source whose EWMA score is strictly above ``tau``."""
    org = aug.org
    scores = ewma_scores(aug, train_days, params)
    return Blacklist(org, frozenset(s for s, v in scores.items() if v > params.tau))


def score(blacklist: Blacklist | frozenset[int] | set[int], truth: Iterable[int]) -> tuple[int, int, int]:
    predicted = blacklist.predicted if isinstance(blacklist, Blacklist) else frozenset(blacklist)
    truth = frozenset(truth)
    tp = len(predicted & truth)
    return tp, len(predicted) - tp, len(truth) - tp


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def relative_metrics(
    baseline: tuple[int, int, int], collaborative: tuple[int, int, int]
) -> tuple[float | None, float | None, float | None]:
    """(TP_c - TP)/TP, (FP_c - FP)/FP, (FN_c - FN)/FN; ``None`` when undefined."""
    (tp, fp, fn), (tpc, fpc, fnc) = baseline, collaborative
    return _ratio(tpc - tp, tp), _ratio(fpc - fp, fp), _ratio(fnc - fn, fn)


@dataclass(frozen=True)
class PredictionMetrics:
    tp: int
    fp: int
    fn: int
    tpr: float
    ppv: float
    f1: float
    tp_impr: float | None = None
    fp_incr: float | None = None
    fn_incr: float | None = None

    @classmethod
    def from_counts(
        cls, counts: tuple[int, int, int], baseline: tuple[int, int, int] | None = None
    ) -> "PredictionMetrics":
        tp, fp, fn = counts
        tpr = tp / (tp + fn) if tp + fn else 0.0
        ppv = tp / (tp + fp) if tp + fp else 0.0
        f1 = 2 * ppv * tpr / (ppv + tpr) if ppv + tpr else 0.0
        rel = relative_metrics(baseline, counts) if baseline is not None else (None, None, None)
        return cls(tp, fp, fn, tpr, ppv, f1, *rel)


def mean_defined(values: Iterable[float | None]) -> float | None:
    """Mean of the values that are not ``None``; ``None`` if there are none."""
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def macro_average(per_window: Mapping[int, Sequence[float | None]]) -> float | None:
    """Average over orgs within each window, then over windows."""
    return mean_defined(mean_defined(vals) for vals in per_window.values())
