"""Server-side protocol and the simulation drivers.

The server only ever sees device features, label counts and gradients. Raw
examples stay inside `Worker` objects on the simulated device side.
"""

from __future__ import annotations

import heapq
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import coreml
from .aggregation import (
    Aggregator, GradientResult, Policy, StaleResultError, UpdateReport,
    bhattacharyya, label_distribution, nearest_rank_index, perturb,
)
from .coreml import ModelParams
from .data import Dataset, UserShard
from .fleet import DeviceState, StalenessModel, next_staleness, sample_latency, simulate_task
from .profiler import DeviceFeatures


# --- protocol types -----------------------------------------------------------

@dataclass(frozen=True)
class TaskRequest:
    worker_id: int
    device_model: str
    features: DeviceFeatures | None
    local_label_counts: np.ndarray
    local_size: int

    def __post_init__(self):
        counts = np.asarray(self.local_label_counts, dtype=np.int64)
        if np.any(counts < 0) or int(counts.sum()) != self.local_size:
            raise ValueError(
                f"worker {self.worker_id}: label counts {counts.tolist()} do not sum to {self.local_size}"
            )
        if self.local_size < 1:
            raise ValueError("local_size must be positive")
        object.__setattr__(self, "local_label_counts", counts)


@dataclass(frozen=True)
class TaskAssignment:
    model: ModelParams
    minibatch_n: int


@dataclass(frozen=True)
class Reject:
    reason: str        # "too_small" | "too_similar"
    value: float
    threshold: float


@dataclass(frozen=True)
class Threshold:
    """kind: "off", "fixed" (a value) or "percentile" (p in [0, 100))."""

    kind: str = "off"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("off", "fixed", "percentile"):
            raise ValueError(f"unknown threshold kind {self.kind!r}")
        if self.kind == "percentile" and not 0 <= self.value < 100:
            raise ValueError("percentile threshold must be in [0, 100)")

    @classmethod
    def parse(cls, spec) -> "Threshold":
        if spec is None or spec == "off":
            return cls()
        if isinstance(spec, Threshold):
            return spec
        if isinstance(spec, (int, float)):
            return cls("fixed", float(spec))
        if isinstance(spec, dict) and len(spec) == 1:
            (kind, value), = spec.items()
            return cls(kind, float(value))
        raise ValueError(f"cannot parse threshold {spec!r}")


@dataclass(frozen=True)
class ControllerConfig:
    size_threshold: Threshold = field(default_factory=Threshold)
    sim_threshold: Threshold = field(default_factory=Threshold)
    t_slo: float = 3.0
    e_slo: float = 0.075
    K: int = 1


def _percentile(history: list[float], p: float) -> float:
    ordered = sorted(history)
    return ordered[nearest_rank_index(len(ordered), p)]


class Server:
    """Protocol steps 1-5 around an `Aggregator`.

    `bound_fn(request)` supplies the mini-batch bound (the profiler, or a
    fixed/random size for experiments that do not exercise it).
    """

    def __init__(self, aggregator: Aggregator, bound_fn: Callable[[TaskRequest], int],
                 controller: ControllerConfig | None = None, history: int = 256):
        self.aggregator = aggregator
        self.bound_fn = bound_fn
        self.controller = controller or ControllerConfig(K=aggregator.K)
        self.size_history: list[float] = []
        self.sim_history: list[float] = []
        self.dropped_results = 0
        self.rejected = {"too_small": 0, "too_similar": 0}
        self._snapshots: deque[ModelParams] = deque([aggregator.model], maxlen=history + 1)

    @property
    def clock(self) -> int:
        return self.aggregator.clock

    @property
    def model(self) -> ModelParams:
        return self.aggregator.model

    def snapshot(self, lag: int = 0) -> ModelParams:
        """The model from `lag` updates ago (clipped to the retained history)."""
        lag = min(max(lag, 0), len(self._snapshots) - 1)
        return self._snapshots[-1 - lag]

    def _size_check(self, n: int) -> Reject | None:
        th = self.controller.size_threshold
        limit = None
        if th.kind == "fixed":
            limit = th.value
        elif th.kind == "percentile" and th.value > 0 and self.size_history:
            limit = _percentile(self.size_history, th.value)
        self.size_history.append(n)
        if limit is not None and n < limit:
            return Reject("too_small", n, limit)
        return None

    def _sim_check(self, sim: float) -> Reject | None:
        # Percentile p prunes the p% most similar requests.
        th = self.controller.sim_threshold
        limit = None
        if th.kind == "fixed":
            limit = th.value
        elif th.kind == "percentile" and th.value > 0 and self.sim_history:
            limit = _percentile(self.sim_history, 100.0 - th.value)
        self.sim_history.append(sim)
        if limit is not None and sim > limit:
            return Reject("too_similar", sim, limit)
        return None

    def handle_request(self, req: TaskRequest, lag: int = 0) -> TaskAssignment | Reject:
        """Admission control. `lag` > 0 serves an older snapshot; experiments use
        it to impose a controlled staleness."""
        if req.local_label_counts.shape != (self.aggregator.num_classes,):
            raise ValueError("label counts do not match the number of classes")
        n = min(int(self.bound_fn(req)), req.local_size)
        n = max(n, 1)
        sim = bhattacharyya(label_distribution(req.local_label_counts),
                            label_distribution(self.aggregator.global_label_counts))
        verdict = self._size_check(n) or self._sim_check(sim)
        if verdict is not None:
            self.rejected[verdict.reason] += 1
            return verdict
        return TaskAssignment(self.snapshot(lag), n)

    def handle_result(self, result: GradientResult) -> UpdateReport | None:
        if result.pulled_clock > self.clock:
            raise StaleResultError(
                f"result from clock {result.pulled_clock} is ahead of server clock {self.clock}"
            )
        if self.aggregator.policy is Policy.SSGD and result.pulled_clock != self.clock:
            self.dropped_results += 1
            return None
        report = self.aggregator.submit(result)
        if report is not None:
            self._snapshots.append(self.aggregator.model)
        return report


# --- worker side ----------------------------------------------------------------

@dataclass
class Worker:
    shard: UserShard
    device: DeviceState | None = None

    @property
    def worker_id(self) -> int:
        return self.shard.user_id

    def request(self) -> TaskRequest:
        return TaskRequest(
            worker_id=self.worker_id,
            device_model=self.device.profile.device_model if self.device else "generic",
            features=self.device.features() if self.device else None,
            local_label_counts=self.shard.label_counts(),
            local_size=len(self.shard),
        )

    def compute(self, assignment: TaskAssignment, rng: np.random.Generator,
                local_steps: int = 1, local_lr: float = 0.0) -> GradientResult:
        """One gradient on a fresh mini-batch. With local_steps > 1 the worker
        takes that many local SGD steps and returns the pseudo-gradient
        (start - end) / local_lr; label counts then cover every sample used."""
        model = assignment.model
        if local_steps == 1:
            batch = self.shard.sample(assignment.minibatch_n, rng)
            grad = coreml.gradient(model, batch)
            counts = np.bincount(batch.labels, minlength=self.shard.num_classes)
        else:
            if local_steps < 1 or not local_lr > 0:
                raise ValueError("local steps need local_steps >= 1 and local_lr > 0")
            counts = np.zeros(self.shard.num_classes, dtype=np.int64)
            local = model
            for _ in range(local_steps):
                batch = self.shard.sample(assignment.minibatch_n, rng)
                counts += np.bincount(batch.labels, minlength=self.shard.num_classes)
                local = coreml.apply_step(local, coreml.gradient(local, batch), local_lr)
            grad = (model.values - local.values) / local_lr
        return GradientResult(
            worker_id=self.worker_id,
            pulled_clock=model.clock,
            grad=grad,
            batch_size=int(counts.sum()),
            label_counts=counts,
        )


# --- metrics ----------------------------------------------------------------------

TRAINING_COLUMNS = (
    "run_id", "seed", "event", "update_index", "sim_time", "policy", "test_accuracy",
    "per_class_recall", "tau", "lambda", "sim", "weight", "batch_size",
    "dropped_results", "tau_thres",
)


@dataclass
class RunResult:
    rows: list[dict]
    server: Server | None
    consumed_label_counts: np.ndarray | None = None
    gradient_computations: int = 0
    evals: list[dict] = field(default_factory=list)

    @property
    def accuracy_curve(self) -> list[tuple[int, float]]:
        return [(e["update_index"], e["test_accuracy"]) for e in self.evals]

    def updates_to_reach(self, target: float) -> int | None:
        for step, acc in self.accuracy_curve:
            if acc >= target:
                return step
        return None


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(round(value, 10))
    return str(value)


class MetricsLog:
    def __init__(self, run_id: str, seed: int, policy: Policy):
        self.run_id, self.seed, self.policy = run_id, seed, policy
        self.rows: list[dict] = []
        self.evals: list[dict] = []

    def _base(self, event: str, update_index: int, sim_time: float, dropped: int) -> dict:
        row = dict.fromkeys(TRAINING_COLUMNS, "")
        row.update(run_id=self.run_id, seed=self.seed, event=event, update_index=update_index,
                   sim_time=_fmt(float(sim_time)), policy=self.policy.value,
                   dropped_results=dropped)
        return row

    def update(self, report: UpdateReport, sim_time: float, dropped: int) -> None:
        for c in report.contributions:
            row = self._base("update", report.update_index, sim_time, dropped)
            row.update(tau=c.tau, batch_size=c.batch_size, tau_thres=_fmt(report.tau_thres),
                       **{"lambda": _fmt(c.lam), "sim": _fmt(c.sim), "weight": _fmt(c.weight)})
            self.rows.append(row)

    def evaluate(self, model: ModelParams, test: Dataset, sim_time: float, dropped: int) -> None:
        acc = coreml.accuracy(model, test.features, test.labels)
        recall = coreml.per_class_recall(model, test.features, test.labels)
        row = self._base("eval", model.clock, sim_time, dropped)
        row.update(test_accuracy=_fmt(acc), per_class_recall=";".join(_fmt(float(r)) for r in recall))
        self.rows.append(row)
        self.evals.append({"update_index": model.clock, "test_accuracy": acc,
                           "per_class_recall": recall, "sim_time": sim_time})


# --- drivers --------------------------------------------------------------------------

@dataclass
class OnlineSetup:
    """Everything `run_online` needs besides the workers and the server."""

    test: Dataset
    max_updates: int
    eval_every: int = 50
    staleness: StalenessModel = field(default_factory=StalenessModel)
    mode: str = "controlled"           # "controlled" lag injection or "timed" event loop
    arrival_rate: float = 1.0 / 30.0   # per worker per second (timed mode)
    retry_delay: float | None = None   # timed mode; None = wait for the next arrival
    dp_clip: float | None = None
    dp_sigma: float = 0.0
    cadence_period: int | None = None  # None = online; P = batched(P)
    local_steps: int = 1
    profiler: object = None            # observes simulated task costs when set
    max_ticks: int | None = None
    run_id: str = "run"
    seed: int = 0


def run_online(setup: OnlineSetup, workers: list[Worker], server: Server) -> RunResult:
    rng = np.random.default_rng([setup.seed, 7])
    log = MetricsLog(setup.run_id, setup.seed, server.aggregator.policy)
    consumed = np.zeros(server.aggregator.num_classes, dtype=np.int64)
    state = {"grads": 0, "time": 0.0}

    def evaluate_if_due(force: bool = False):
        if force or server.clock % setup.eval_every == 0:
            log.evaluate(server.model, setup.test, state["time"], server.dropped_results)

    def deliver(result: GradientResult):
        pending = [r for r, _ in server.aggregator.pending]
        report = server.handle_result(result)
        if report is not None:
            for r in pending + [result]:
                consumed[:] += r.label_counts
            log.update(report, state["time"], server.dropped_results)
            evaluate_if_due()

    def finish_task(worker: Worker, assignment: TaskAssignment, req: TaskRequest):
        result = worker.compute(assignment, rng, setup.local_steps, server.aggregator.lr)
        state["grads"] += 1
        if setup.dp_clip is not None:
            result = perturb(result, setup.dp_clip, setup.dp_sigma, rng)
        if worker.device is not None:
            t_comp, energy, _ = simulate_task(worker.device, assignment.minibatch_n, rng)
            if setup.profiler is not None:
                setup.profiler.observe(req.device_model, req.features,
                                       assignment.minibatch_n, t_comp, energy)
            return result, t_comp
        return result, 0.0

    evaluate_if_due(force=True)
    if not workers or setup.max_updates <= 0:
        return _result(log, server, consumed, state)

    max_ticks = setup.max_ticks or 50 * setup.max_updates + 1000
    if server.aggregator.policy is Policy.SSGD:
        _run_lockstep(setup, workers, server, rng, finish_task, deliver, state, max_ticks)
    elif setup.mode == "controlled":
        _run_controlled(setup, workers, server, rng, finish_task, deliver, state, max_ticks)
    elif setup.mode == "timed":
        _run_timed(setup, workers, server, rng, finish_task, deliver, state, max_ticks)
    else:
        raise ValueError(f"unknown mode {setup.mode!r}")
    if server.clock % setup.eval_every != 0:
        evaluate_if_due(force=True)
    return _result(log, server, consumed, state)


def _result(log, server, consumed, state) -> RunResult:
    return RunResult(log.rows, server, consumed, state["grads"], log.evals)


def _run_lockstep(setup, workers, server, rng, finish_task, deliver, state, max_ticks):
    """Synchronous rounds: K distinct workers pull the same model, results are
    applied together, and no result is ever stale."""
    K = server.aggregator.K
    ticks = 0
    while server.clock < setup.max_updates and ticks < max_ticks:
        chosen = rng.permutation(len(workers))
        round_results = []
        for idx in chosen:
            if len(round_results) == K:
                break
            ticks += 1
            worker = workers[idx]
            req = worker.request()
            decision = server.handle_request(req)
            if isinstance(decision, Reject):
                continue
            result, _ = finish_task(worker, decision, req)
            round_results.append(result)
        if len(round_results) < K:
            ticks += 1
            continue
        state["time"] += 1.0
        for result in round_results:
            deliver(result)


def _run_controlled(setup, workers, server, rng, finish_task, deliver, state, max_ticks):
    """One request per tick from a uniformly drawn worker. The staleness model
    decides how many updates old the served snapshot is (from the worker's
    label info), so each consumed gradient has exactly the drawn staleness
    (clipped to the updates that exist so far)."""
    period = setup.cadence_period
    deferred: list = []
    ticks = 0
    while server.clock < setup.max_updates and ticks < max_ticks:
        ticks += 1
        state["time"] = float(ticks)
        worker = workers[int(rng.integers(len(workers)))]
        req = worker.request()
        lag = next_staleness(setup.staleness, req.local_label_counts, rng)
        if period is not None:
            deferred.append((worker, req))
            if len(deferred) < period:
                continue
            _apply_batched(deferred, server, rng, finish_task, deliver)
            deferred = []
            continue
        decision = server.handle_request(req, lag=lag)
        if isinstance(decision, Reject):
            continue
        result, _ = finish_task(worker, decision, req)
        deliver(result)


def _apply_batched(deferred, server, rng, finish_task, deliver):
    """All deferred tasks run against the period-start model, then apply in order."""
    results = []
    for worker, req in deferred:
        decision = server.handle_request(req)
        if isinstance(decision, Reject):
            continue
        result, _ = finish_task(worker, decision, req)
        results.append(result)
    for result in results:
        deliver(result)


def _run_timed(setup, workers, server, rng, finish_task, deliver, state, max_ticks):
    """Event loop in seconds: Poisson request arrivals per worker, results come
    back after the task's compute time plus a sampled round-trip latency."""
    seq = itertools.count()
    events: list = []
    for idx in range(len(workers)):
        heapq.heappush(events, (float(rng.exponential(1.0 / setup.arrival_rate)), next(seq), "arrival", idx))
    processed = 0
    while events and server.clock < setup.max_updates and processed < max_ticks:
        time, _, kind, payload = heapq.heappop(events)
        processed += 1
        state["time"] = time
        if kind == "result":
            deliver(payload)
            continue
        worker = workers[payload]
        req = worker.request()
        decision = server.handle_request(req)
        next_arrival = time + float(rng.exponential(1.0 / setup.arrival_rate))
        if isinstance(decision, Reject):
            if setup.retry_delay is not None:
                next_arrival = time + setup.retry_delay
            heapq.heappush(events, (next_arrival, next(seq), "arrival", payload))
            continue
        result, t_comp = finish_task(worker, decision, req)
        if setup.staleness.kind == "exponential":
            delay = sample_latency(setup.staleness, rng)
        else:
            delay = t_comp + float(next_staleness(setup.staleness, req.local_label_counts, rng))
        heapq.heappush(events, (time + delay, next(seq), "result", result))
        heapq.heappush(events, (max(next_arrival, time + delay), next(seq), "arrival", payload))


def run_stream(stream, spec: coreml.ModelSpec, lr: float, num_chunks: int,
               cadence_period: int | None, seed: int, policy: Policy = Policy.FEDAVG,
               run_id: str = "stream") -> RunResult:
    """Drifting-stream cadence comparison.

    Each chunk is first used as the test set for the current model, then as
    one user's mini-batch. Online applies that gradient immediately; batched(P)
    holds P chunks and applies their gradients at the period end, all computed
    against the period-start model.
    """
    agg = Aggregator(coreml.init_params(spec, seed), spec.num_classes, policy=policy, K=1, lr=lr,
                     boost=False)
    log = MetricsLog(run_id, seed, agg.policy)
    held: list[coreml.Batch] = []
    grads = 0

    def consume(batch: coreml.Batch, model: ModelParams):
        nonlocal grads
        grads += 1
        result = GradientResult("chunk", model.clock, coreml.gradient(model, batch), len(batch),
                                np.bincount(batch.labels, minlength=spec.num_classes))
        report = agg.submit(result)
        log.update(report, float(chunk_idx), 0)

    for chunk_idx in range(num_chunks):
        batch = stream.next_chunk()
        acc = coreml.accuracy(agg.model, batch.features, batch.labels)
        row = log._base("eval", agg.model.clock, float(chunk_idx), 0)
        row["test_accuracy"] = _fmt(acc)
        log.rows.append(row)
        log.evals.append({"update_index": agg.model.clock, "test_accuracy": acc,
                          "per_class_recall": None, "sim_time": float(chunk_idx)})
        if cadence_period is None:
            consume(batch, agg.model)
            continue
        held.append(batch)
        if len(held) == cadence_period:
            start = agg.model
            for b in held:
                consume(b, start)
            held = []
    return RunResult(log.rows, None, None, grads, log.evals)
