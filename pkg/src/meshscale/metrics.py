"""Distributed evaluation: padded eval datasets, globally-summed
accuracy, exact sort-based AUC, multi-step accumulation, round-robin
assignment.

Evaluation never sees ragged data: the dataset is padded with dummy
examples to fill every device's batches, and a validity mask keeps the
dummies out of every metric sum. Counts travel as f32 payloads through
the collectives all-reduce; they stay exact as long as they fit in
f32's contiguous integer range (2**24), far above any eval batch here.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .collectives import Payload, all_reduce

Coord = tuple[int, int]


def _abstract_ring(parts: int) -> tuple[Coord, ...]:
    return tuple((i, 0) for i in range(parts))


# ---------------------------------------------------------------------------
# Eval batches


@dataclass(frozen=True)
class EvalBatch:
    """Per-device predictions/labels plus the validity mask (True =
    real example, False = dummy pad slot)."""

    predictions: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.predictions)
        l = np.asarray(self.labels)
        m = np.asarray(self.mask, dtype=bool)
        if not (p.shape == l.shape == m.shape) or p.ndim != 1:
            raise ValueError("predictions, labels, mask must be equal-length vectors")
        object.__setattr__(self, "predictions", p)
        object.__setattr__(self, "labels", l)
        object.__setattr__(self, "mask", m)

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())

    @property
    def n_dummy(self) -> int:
        return int(self.mask.size - self.mask.sum())


def pad_eval_dataset(n_examples: int, n_devices: int, per_device_batch: int) -> list[EvalBatch]:
    """Skeleton batches sized to the smallest multiple of
    n_devices * per_device_batch that holds the dataset; dummy slots sit
    at the tail of the highest-index devices."""
    if n_examples < 0:
        raise ValueError("n_examples must be >= 0")
    if n_devices < 1 or per_device_batch < 1:
        raise ValueError("n_devices and per_device_batch must be >= 1")
    chunk = n_devices * per_device_batch
    total = math.ceil(n_examples / chunk) * chunk
    per_dev = total // n_devices
    out = []
    for i in range(n_devices):
        real = min(max(n_examples - i * per_dev, 0), per_dev)
        mask = np.arange(per_dev) < real
        zeros = np.zeros(per_dev, dtype=np.int64)
        out.append(EvalBatch(zeros, zeros.copy(), mask))
    return out


def distributed_accuracy(batches: list[EvalBatch], direction="bidirectional") -> float:
    """Fraction correct over real examples, summed with one all-reduce
    of per-device [correct, count] payloads."""
    if not batches:
        raise ValueError("need at least one device batch")
    payloads = []
    for b in batches:
        correct = int(np.sum((b.predictions == b.labels) & b.mask))
        payloads.append(Payload(np.array([correct, b.n_real], dtype=np.float32), "f32"))
    reduced, _ = all_reduce(_abstract_ring(len(batches)), payloads, direction=direction)
    correct, count = reduced[0].values
    if count == 0:
        raise ValueError("zero real examples across all devices")
    return float(correct) / float(count)


# ---------------------------------------------------------------------------
# AUC


def auc_roc(scores, labels) -> float:
    """Exact rank-based ROC AUC with ties credited 1/2.

    Scores and labels pack into one u64 key per example; a single sort
    plus one fused pass over the sorted keys yields the tie-averaged
    rank sum, from which the Mann-Whitney statistic gives the AUC as an
    exact integer ratio.
    """
    scores = np.array(scores, dtype=np.float32, copy=True).ravel()
    lab = np.asarray(labels).ravel()
    if scores.size != lab.size:
        raise ValueError("scores and labels must have equal length")
    if np.isnan(scores).any():
        raise ValueError("scores must not contain NaN")
    lab_u = np.asarray(lab, dtype=np.uint32)
    if not np.isin(lab_u, (0, 1)).all() or not np.array_equal(lab_u, np.asarray(lab, dtype=np.float64)):
        raise ValueError("labels must be 0 or 1")
    p = int(lab_u.sum())
    n_neg = scores.size - p
    if p == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative example")
    scores[scores == 0] = 0.0  # merge -0.0 with +0.0 before viewing bits
    keys = kernels.pack_auc_keys(scores.view(np.uint32), lab_u)
    keys.sort()
    twice_rank_sum, p_check = kernels.auc_rank_pass(keys)
    assert p_check == p
    u2 = twice_rank_sum - p * (p + 1)
    return u2 / (2 * p * n_neg)


# ---------------------------------------------------------------------------
# Accumulators


@dataclass(frozen=True)
class AccuracyAccumulator:
    correct: int = 0
    count: int = 0

    def __post_init__(self) -> None:
        if self.correct < 0 or self.count < 0 or self.correct > self.count:
            raise ValueError("need 0 <= correct <= count")

    @classmethod
    def from_batch(cls, batch: EvalBatch) -> "AccuracyAccumulator":
        correct = int(np.sum((batch.predictions == batch.labels) & batch.mask))
        return cls(correct=correct, count=batch.n_real)

    def merge(self, other: "AccuracyAccumulator") -> "AccuracyAccumulator":
        return AccuracyAccumulator(self.correct + other.correct, self.count + other.count)

    def value(self) -> float:
        if self.count == 0:
            raise ValueError("no real examples accumulated")
        return self.correct / self.count


@dataclass(frozen=True)
class AucAccumulator:
    scores: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.float32))
    labels: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.uint32))

    @classmethod
    def from_batch(cls, batch: EvalBatch) -> "AucAccumulator":
        # predictions are scores here; labels must be binary.
        m = batch.mask
        return cls(
            scores=np.asarray(batch.predictions, dtype=np.float32)[m],
            labels=np.asarray(batch.labels, dtype=np.uint32)[m],
        )

    def merge(self, other: "AucAccumulator") -> "AucAccumulator":
        return AucAccumulator(
            scores=np.concatenate([self.scores, other.scores]),
            labels=np.concatenate([self.labels, other.labels]),
        )

    def value(self) -> float:
        return auc_roc(self.scores, self.labels)


def multi_step_eval(batches: list[EvalBatch], steps_per_transfer: int, kind: str = "accuracy"):
    """Accumulate k on-device steps per host transfer; merges being
    associative, the result equals per-step merging exactly."""
    if steps_per_transfer < 1:
        raise ValueError("steps_per_transfer must be >= 1")
    acc_cls = {"accuracy": AccuracyAccumulator, "auc": AucAccumulator}.get(kind)
    if acc_cls is None:
        raise ValueError(f"unknown accumulator kind {kind!r}")
    total = acc_cls()
    local = acc_cls()
    pending = 0
    for batch in batches:
        local = local.merge(acc_cls.from_batch(batch))
        pending += 1
        if pending == steps_per_transfer:
            total = total.merge(local)
            local = acc_cls()
            pending = 0
    if pending:
        total = total.merge(local)
    return total


def round_robin_assign(n_events: int, n_workers: int) -> list[int]:
    """Worker index per event: event i runs on worker i mod n."""
    if n_workers < 1:
        raise ValueError("need at least one worker")
    if n_events < 0:
        raise ValueError("n_events must be >= 0")
    return [i % n_workers for i in range(n_events)]


# ---------------------------------------------------------------------------
# Structured result records


@dataclass(frozen=True)
class MetricRecord:
    metric: str
    value: float
    n_real: int
    n_dummy: int
    wall_time_s: float

    def record(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "n_real": self.n_real,
            "n_dummy": self.n_dummy,
            "wall_time_s": self.wall_time_s,
        }


METRIC_CSV_HEADER = "metric,value,n_real,n_dummy,wall_time_s"


def metrics_csv(records: list[MetricRecord]) -> str:
    out = [METRIC_CSV_HEADER]
    for r in records:
        out.append(f"{r.metric},{r.value!r},{r.n_real},{r.n_dummy},{r.wall_time_s:.6f}")
    return "\n".join(out) + "\n"


def timed_metric(metric: str, fn, n_real: int, n_dummy: int) -> MetricRecord:
    t0 = time.perf_counter()
    value = fn()
    return MetricRecord(metric, float(value), n_real, n_dummy, time.perf_counter() - t0)
