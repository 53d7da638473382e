"""Staleness-aware aggregation (AdaSGD) and its baselines.

Every submitted gradient gets the weight ``min(1, Lambda(tau) / sim)`` where
``Lambda`` dampens by staleness and ``sim`` is the Bhattacharyya coefficient
between the gradient's label distribution and the global one. After ``K``
gradients the model moves by ``-lr * sum(w_i * g_i)`` in a single clock tick.
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .coreml import ModelParams, apply_step


class Policy(str, Enum):
    ADASGD = "adasgd"      # exponential dampening, similarity boosting
    DYNSGD = "dynsgd"      # inverse dampening 1/(tau+1)
    FEDAVG = "fedavg"      # staleness-unaware gradient averaging
    SSGD = "ssgd"          # synchronous, staleness never occurs

    @classmethod
    def parse(cls, value: "str | Policy") -> "Policy":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(
                f"unknown policy {value!r}; expected one of {[p.value for p in cls]}"
            ) from None


class ThresholdNotReady(Exception):
    """tau_thres requested while the tracker is still bootstrapping."""


class StaleResultError(ValueError):
    """A result that cannot be applied at the current clock."""


@dataclass(frozen=True)
class GradientResult:
    worker_id: object
    pulled_clock: int
    grad: np.ndarray
    batch_size: int
    label_counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.label_counts, dtype=np.int64)
        if np.any(counts < 0):
            raise ValueError("label counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if int(counts.sum()) != self.batch_size:
            raise ValueError(
                f"label counts sum to {counts.sum()}, batch_size is {self.batch_size}"
            )
        grad = np.asarray(self.grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise ValueError("gradient must be finite")
        object.__setattr__(self, "label_counts", counts)
        object.__setattr__(self, "grad", grad)


def label_distribution(counts) -> np.ndarray:
    """Normalize counts; all-zero counts give the empty (all-zero) distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return np.zeros_like(counts)
    return counts / total


def bhattacharyya(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    if not p.any() or not q.any():
        return 0.0
    return float(min(1.0, np.sqrt(p * q).sum()))


def similarity(result: GradientResult, global_counts) -> float:
    if result.batch_size == 0:
        raise ValueError("empty result")
    return bhattacharyya(
        label_distribution(result.label_counts), label_distribution(global_counts)
    )


class StalenessTracker:
    """Sliding window of observed staleness with a nearest-rank percentile.

    The window is kept both in arrival order (for eviction) and sorted (for
    O(1) percentile lookup).
    """

    def __init__(self, window: int = 1000, s_percent: float = 99.7, bootstrap_len: int = 100):
        if window < 1:
            raise ValueError("window must be positive")
        if not 0 < s_percent <= 100:
            raise ValueError("s_percent must be in (0, 100]")
        if bootstrap_len < 0:
            raise ValueError("bootstrap_len must be non-negative")
        self.window = window
        self.s_percent = s_percent
        self.bootstrap_len = bootstrap_len
        self.observed_count = 0
        self._fifo: deque[int] = deque()
        self._sorted: list[int] = []

    @property
    def values(self) -> list[int]:
        return list(self._fifo)

    @property
    def ready(self) -> bool:
        return self.observed_count >= self.bootstrap_len and bool(self._fifo)

    def record(self, tau: int) -> None:
        if tau < 0:
            raise ValueError(f"staleness must be non-negative, got {tau}")
        self._fifo.append(tau)
        bisect.insort(self._sorted, tau)
        if len(self._fifo) > self.window:
            old = self._fifo.popleft()
            del self._sorted[bisect.bisect_left(self._sorted, old)]
        self.observed_count += 1

    def threshold(self) -> float:
        if not self.ready:
            raise ThresholdNotReady(
                f"{self.observed_count} of {self.bootstrap_len} bootstrap observations"
            )
        return float(self._sorted[nearest_rank_index(len(self._sorted), self.s_percent)])


def nearest_rank_index(n: int, percent: float) -> int:
    """0-based index of the nearest-rank percentile in a sorted list of n."""
    rank = math.ceil(percent / 100.0 * n)
    return min(max(rank, 1), n) - 1


def beta_for(tau_thres: float) -> float:
    """Rate at which exp(-beta*tau) meets 1/(tau+1) at tau = tau_thres/2."""
    if not tau_thres > 0:
        raise ValueError(f"tau_thres must be positive, got {tau_thres}")
    half = tau_thres / 2.0
    return math.log1p(half) / half


def dampening(policy: Policy, tau: float, tau_thres: float | None = None) -> float:
    """Lambda(tau). AdaSGD without a usable threshold falls back to 1/(tau+1)."""
    if tau < 0:
        raise ValueError("staleness must be non-negative")
    policy = Policy.parse(policy)
    if policy is Policy.ADASGD:
        if tau_thres is None or tau_thres <= 0:
            return 1.0 / (tau + 1.0)
        return math.exp(-beta_for(tau_thres) * tau)
    if policy is Policy.DYNSGD:
        return 1.0 / (tau + 1.0)
    return 1.0


def weight(lam: float, sim: float) -> float:
    """min(1, lam / sim); a zero similarity means maximal novelty, weight 1."""
    if sim <= 0.0:
        return 1.0
    return min(1.0, lam / sim)


def perturb(result: GradientResult, clip_norm: float, sigma: float,
            rng: np.random.Generator) -> GradientResult:
    """Clip to L2 norm `clip_norm`, then add N(0, (sigma*clip_norm)^2) noise."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    grad = result.grad
    norm = float(np.linalg.norm(grad))
    if norm > clip_norm:
        grad = grad * (clip_norm / norm)
    if sigma > 0:
        grad = grad + rng.normal(0.0, sigma * clip_norm, size=grad.shape)
    return replace(result, grad=grad)


@dataclass(frozen=True)
class Contribution:
    worker_id: object
    tau: int
    lam: float
    sim: float
    weight: float
    batch_size: int
    bootstrap: bool


@dataclass(frozen=True)
class UpdateReport:
    update_index: int
    policy: Policy
    tau_thres: float | None
    contributions: tuple[Contribution, ...]


@dataclass
class Aggregator:
    """Single-writer server-side model state.

    ``boost`` enables the similarity term; by default only AdaSGD uses it.
    """

    model: ModelParams
    num_classes: int
    policy: Policy = Policy.ADASGD
    K: int = 1
    lr: float = 0.05
    tracker: StalenessTracker = field(default_factory=StalenessTracker)
    boost: bool | None = None
    global_label_counts: np.ndarray = field(default=None)
    pending: list = field(default_factory=list)
    consumed: int = 0

    def __post_init__(self):
        self.policy = Policy.parse(self.policy)
        if self.K < 1:
            raise ValueError("K must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.boost is None:
            self.boost = self.policy is Policy.ADASGD
        if self.global_label_counts is None:
            self.global_label_counts = np.zeros(self.num_classes, dtype=np.int64)
        self._reports = 0

    @property
    def clock(self) -> int:
        return self.model.clock

    def submit(self, result: GradientResult) -> UpdateReport | None:
        if result.pulled_clock > self.clock:
            raise StaleResultError(
                f"result pulled clock {result.pulled_clock} is ahead of server clock {self.clock}"
            )
        if result.grad.shape != self.model.values.shape:
            raise ValueError(
                f"gradient length {result.grad.size} != model length {self.model.values.size}"
            )
        if result.label_counts.shape != (self.num_classes,):
            raise ValueError("label_counts length must equal num_classes")
        tau = self.clock - result.pulled_clock
        if self.policy is Policy.SSGD and tau != 0:
            raise StaleResultError(
                f"synchronous policy got a result from clock {result.pulled_clock} at {self.clock}"
            )

        self.tracker.record(tau)
        tau_thres = self.tracker.threshold() if self.tracker.ready else None
        bootstrap = self.policy is Policy.ADASGD and (tau_thres is None or tau_thres <= 0)
        lam = dampening(self.policy, tau, tau_thres)
        sim = similarity(result, self.global_label_counts)
        if self.policy in (Policy.FEDAVG, Policy.SSGD):
            w = 1.0 / self.K
        elif self.boost:
            w = weight(lam, sim)
        else:
            w = lam
        self.pending.append(
            (result, Contribution(result.worker_id, tau, lam, sim, w, result.batch_size, bootstrap))
        )
        if len(self.pending) < self.K:
            return None
        return self._flush(tau_thres)

    def _flush(self, tau_thres: float | None) -> UpdateReport:
        direction = np.zeros_like(self.model.values)
        for result, contrib in self.pending:
            direction += contrib.weight * result.grad
            self.global_label_counts += result.label_counts
        self.model = apply_step(self.model, direction, self.lr)
        self.consumed += len(self.pending)
        report = UpdateReport(
            update_index=self.model.clock,
            policy=self.policy,
            tau_thres=tau_thres,
            contributions=tuple(c for _, c in self.pending),
        )
        self.pending = []
        return report
