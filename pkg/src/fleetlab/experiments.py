"""Experiment configuration, shipped presets and the runners behind the CLI.

A config is a nested mapping (YAML on disk). `load_config` validates it into
an `ExperimentConfig`; unknown keys are rejected with their dotted path.
`arms` expands one config into several labelled variants that share a seed
and land in the same output directory.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from . import coreml, data, fleet
from .aggregation import Aggregator, Policy, StalenessTracker
from .orchestrator import (
    ControllerConfig, OnlineSetup, RunResult, Server, TaskRequest, Threshold, Worker,
    run_online, run_stream,
)
from .profiler import DEFAULT_EPSILON, ENERGY, TIME, MauiProfiler, Profiler


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the key path."""


# --- config schema -------------------------------------------------------------------

@dataclass
class DatasetConfig:
    kind: str = "digits"              # digits | mnist | synthetic | drifting
    images: str | None = None         # mnist: training IDX files
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_size: int | None = None     # mnist subset size (default 10000)
    test_size: int | None = None      # held-out size (digits 360, mnist 2000, synthetic 20%)
    num_classes: int | None = None
    dim: int | None = None
    size: int = 2000                  # synthetic
    spread: float = 1.0               # synthetic / drifting cluster spread
    drift_period: int | None = 24     # drifting; null disables drift
    drift_strength: float = 0.6
    samples_per_chunk: int = 100
    num_chunks: int = 240

    def check(self):
        if self.kind not in ("digits", "mnist", "synthetic", "drifting"):
            raise ValueError(f"kind: unknown dataset kind {self.kind!r}")
        if self.kind == "mnist":
            for name in ("images", "labels", "test_images", "test_labels"):
                if not getattr(self, name):
                    raise ValueError(f"{name}: required for the mnist dataset")
        for name in ("train_size", "test_size", "num_classes", "dim"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ValueError(f"{name}: must be a positive integer")
        if self.num_classes is not None and self.num_classes < 2:
            raise ValueError("num_classes: need at least 2 classes")
        if self.num_chunks < 1 or self.samples_per_chunk < 1:
            raise ValueError("num_chunks: stream sizes must be positive")


@dataclass
class StalenessConfig:
    kind: str = "none"                # none | gaussian | longtail | exponential
    mu: float = 0.0
    sigma: float = 0.0
    tail_labels: list = field(default_factory=list)
    tail_value: int | None = None
    min_s: float = 7.1
    mean_s: float = 8.45

    def check(self):
        self.model()

    def model(self) -> fleet.StalenessModel:
        return fleet.StalenessModel(self.kind, float(self.mu), float(self.sigma),
                                    tuple(self.tail_labels), self.tail_value,
                                    float(self.min_s), float(self.mean_s))


@dataclass
class ControllerSpec:
    size_threshold: object = "off"    # off | number | {percentile: p}
    sim_threshold: object = "off"
    t_slo: float = 3.0
    e_slo: float = 0.075

    def check(self):
        Threshold.parse(self.size_threshold)
        Threshold.parse(self.sim_threshold)
        if not (self.t_slo > 0 and self.e_slo > 0):
            raise ValueError("t_slo: SLOs must be positive")


@dataclass
class WeakWorkers:
    count: int = 0
    minibatch: int = 1
    size: int = 50                    # local examples drawn (IID) for each weak worker

    def check(self):
        if self.count < 0 or self.minibatch < 1 or self.size < 1:
            raise ValueError("count: weak worker settings must be non-negative / positive")


@dataclass
class DpConfig:
    clip: float | None = None
    sigma: float = 0.0

    def check(self):
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip: must be positive")
        if self.sigma < 0:
            raise ValueError("sigma: must be non-negative")


@dataclass
class ProfilerConfig:
    requests_per_device: int = 15
    objective: str = "time"           # time | energy | both
    local_size: int = 1000
    idle_s: float = 60.0
    retrain_every: int = 50
    epsilon_time: float = DEFAULT_EPSILON[TIME]
    epsilon_energy: float = DEFAULT_EPSILON[ENERGY]
    sweep_growth: float = 1.5
    offline_fleet: str = "offline"

    def check(self):
        if self.objective not in ("time", "energy", "both"):
            raise ValueError(f"objective: unknown objective {self.objective!r}")
        if self.requests_per_device < 1 or self.local_size < 1 or self.retrain_every < 1:
            raise ValueError("requests_per_device: counts must be positive")
        if not (self.epsilon_time > 0 and self.epsilon_energy > 0):
            raise ValueError("epsilon_time: PA epsilons must be positive")
        if not self.sweep_growth > 1:
            raise ValueError("sweep_growth: must exceed 1")


KINDS = ("online", "profiler", "stream")


@dataclass
class ExperimentConfig:
    preset: str = "custom"
    kind: str = "online"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: str = "noniid"
    num_users: int = 20
    fleet: str = "default"            # preset name or a fleet JSON path
    policy: str = "adasgd"
    s_percent: float = 99.7
    window: int = 1000
    bootstrap: int = 100
    K: object = 1                     # positive integer or "all" (every worker)
    lr: float = 0.2
    hidden: int = 64
    activation: str = "relu"
    minibatch: object = 100           # integer | "profiler" | {normal: [mean, std]}
    local_steps: int = 1
    staleness: StalenessConfig = field(default_factory=StalenessConfig)
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    cadence: object = "online"        # online | {batched: period}
    mode: str = "controlled"          # controlled | timed
    arrival_rate: float = 1.0 / 30.0
    retry_delay: float | None = None
    weak_workers: WeakWorkers = field(default_factory=WeakWorkers)
    dp: DpConfig = field(default_factory=DpConfig)
    profiler: ProfilerConfig = field(default_factory=ProfilerConfig)
    max_updates: int = 1000
    eval_every: int = 25
    arms: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [1])
    output_dir: str | None = None

    def check(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind: expected one of {KINDS}, got {self.kind!r}")
        if self.partition not in ("noniid", "iid"):
            raise ValueError(f"partition: expected noniid or iid, got {self.partition!r}")
        try:
            Policy.parse(self.policy)
        except ValueError as exc:
            raise ValueError(f"policy: {exc}") from None
        if not isinstance(self.num_users, int) or self.num_users < 0:
            raise ValueError("num_users: must be a non-negative integer")
        if not (isinstance(self.K, int) and self.K >= 1) and self.K != "all":
            raise ValueError("K: must be a positive integer or 'all'")
        if not self.lr > 0:
            raise ValueError("lr: must be positive")
        if not 0 < self.s_percent <= 100:
            raise ValueError("s_percent: must be in (0, 100]")
        if self.window < 1 or self.bootstrap < 0:
            raise ValueError("window: window must be positive and bootstrap non-negative")
        if self.hidden < 0:
            raise ValueError("hidden: must be non-negative")
        if self.activation not in ("relu", "tanh"):
            raise ValueError("activation: expected relu or tanh")
        minibatch_kind(self.minibatch)
        if self.local_steps < 1:
            raise ValueError("local_steps: must be positive")
        cadence_period(self.cadence)
        if self.mode not in ("controlled", "timed"):
            raise ValueError("mode: expected controlled or timed")
        if not self.arrival_rate > 0:
            raise ValueError("arrival_rate: must be positive")
        if self.max_updates < 0 or self.eval_every < 1:
            raise ValueError("max_updates: budget must be non-negative and eval_every positive")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ValueError("seeds: need a non-empty list of non-negative integers")
        if self.kind == "stream" and self.dataset.kind != "drifting":
            raise ValueError("dataset.kind: stream experiments need the drifting dataset")
        if self.kind == "online" and self.dataset.kind == "drifting":
            raise ValueError("dataset.kind: the drifting dataset is only for stream experiments")
        if self.kind == "online" and self.mode == "timed" and cadence_period(self.cadence):
            raise ValueError("cadence: batched cadence runs in controlled mode only")

    @property
    def policy_enum(self) -> Policy:
        return Policy.parse(self.policy)


_NESTED = {
    "dataset": DatasetConfig,
    "staleness": StalenessConfig,
    "controller": ControllerSpec,
    "weak_workers": WeakWorkers,
    "dp": DpConfig,
    "profiler": ProfilerConfig,
}


def minibatch_kind(spec) -> str:
    if isinstance(spec, bool):
        raise ValueError("minibatch: expected an integer, 'profiler' or {normal: [mean, std]}")
    if isinstance(spec, int):
        if spec < 1:
            raise ValueError("minibatch: must be positive")
        return "fixed"
    if spec == "profiler":
        return "profiler"
    if isinstance(spec, dict) and set(spec) == {"normal"}:
        pair = spec["normal"]
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2 and pair[1] >= 0):
            raise ValueError("minibatch.normal: expected [mean, std] with std >= 0")
        return "normal"
    raise ValueError("minibatch: expected an integer, 'profiler' or {normal: [mean, std]}")


def cadence_period(spec) -> int | None:
    if spec == "online" or spec is None:
        return None
    if isinstance(spec, dict) and set(spec) == {"batched"}:
        period = spec["batched"]
        if isinstance(period, int) and period >= 1:
            return period
    raise ValueError("cadence: expected 'online' or {batched: positive integer}")


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"{where}: unknown key")
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if cls is ExperimentConfig and key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value or {}, where)
        else:
            kwargs[key] = value
    obj = cls(**kwargs)
    try:
        obj.check()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        head, sep, tail = msg.partition(": ")
        if sep and " " not in head:
            raise ConfigError(f"{path + '.' if path else ''}{head}: {tail}") from None
        raise ConfigError(f"{path or 'config'}: {msg}") from None
    return obj


def deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in ("minibatch", "cadence"):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(raw: dict, dotted: str, value) -> dict:
    out = copy.deepcopy(raw)
    parts = dotted.split(".")
    node = out
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"{dotted}: {part} is not a mapping")
        node = child
    node[parts[-1]] = value
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping (and every arm it expands to)."""
    cfg = _build(ExperimentConfig, raw, "")
    for i, arm in enumerate(cfg.arms):
        if not isinstance(arm, dict) or "name" not in arm:
            raise ConfigError(f"arms[{i}]: each arm needs a name")
        overrides = {k: v for k, v in arm.items() if k != "name"}
        if "arms" in overrides or "seeds" in overrides:
            raise ConfigError(f"arms[{i}]: arms cannot set arms or seeds")
        try:
            _build(ExperimentConfig, deep_merge({k: v for k, v in raw.items() if k != "arms"}, overrides), "")
        except ConfigError as exc:
            raise ConfigError(f"arms[{i}].{exc}") from None
    names = [arm["name"] for arm in cfg.arms]
    if len(set(names)) != len(names):
        raise ConfigError("arms: arm names must be unique")
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def expand_arms(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    base = to_dict(cfg)
    base["arms"] = []
    if not cfg.arms:
        return [(cfg.policy, cfg)]
    out = []
    for arm in cfg.arms:
        overrides = {k: v for k, v in arm.items() if k != "name"}
        out.append((str(arm["name"]), config_from_dict(deep_merge(base, overrides))))
    return out


# --- presets ------------------------------------------------------------------------------

_STALENESS_ARMS = [{"name": p, "policy": p} for p in ("ssgd", "adasgd", "dynsgd", "fedavg")]

PRESETS: dict[str, tuple[str, dict]] = {
    "staleness-d1": (
        "Non-IID digits, 20 users, staleness N(6, 2): SSGD / AdaSGD / DynSGD / FedAvg",
        {"staleness": {"kind": "gaussian", "mu": 6, "sigma": 2},
         "max_updates": 1000, "arms": _STALENESS_ARMS},
    ),
    "staleness-d2": (
        "Non-IID digits, 20 users, staleness N(12, 4): SSGD / AdaSGD / DynSGD / FedAvg",
        {"staleness": {"kind": "gaussian", "mu": 12, "sigma": 4},
         "max_updates": 1000, "arms": _STALENESS_ARMS},
    ),
    "longtail": (
        "Staleness N(6, 2) with every class-0 gradient 48 updates stale: AdaSGD vs DynSGD",
        {"staleness": {"kind": "longtail", "mu": 6, "sigma": 2, "tail_labels": [0]},
         "max_updates": 2000, "eval_every": 50,
         "arms": [{"name": "adasgd", "policy": "adasgd"}, {"name": "dynsgd", "policy": "dynsgd"}]},
    ),
    "weak-workers": (
        "Lockstep averaging: 10 strong workers (n=128) with and without 2 weak ones (n=1)",
        {"partition": "iid", "num_users": 10, "policy": "ssgd", "K": "all", "minibatch": 128,
         "max_updates": 100, "eval_every": 10,
         "arms": [{"name": "strong-only", "weak_workers": {"count": 0}},
                  {"name": "with-weak", "weak_workers": {"count": 2, "minibatch": 1}}]},
    ),
    "profiler-slo": (
        "I-PROF vs MAUI on 10 simulated devices, 15 requests each, time and energy SLOs",
        {"kind": "profiler", "arms": [{"name": "time", "profiler": {"objective": "time"}},
                                      {"name": "energy", "profiler": {"objective": "energy"}}]},
    ),
    "threshold-pruning": (
        "Mini-batch sizes ~ N(100, 33); 20th-percentile size threshold vs none",
        {"partition": "iid", "num_users": 10, "minibatch": {"normal": [100, 33]},
         "staleness": {"kind": "gaussian", "mu": 6, "sigma": 2}, "max_updates": 500,
         "arms": [{"name": "no-threshold"},
                  {"name": "p20", "controller": {"size_threshold": {"percentile": 20}}}]},
    ),
    "cadence": (
        "Drifting synthetic stream: online updates vs batched(24) at equal gradient budget",
        {"kind": "stream", "policy": "fedavg", "hidden": 0, "lr": 0.5,
         "dataset": {"kind": "drifting", "num_classes": 5, "dim": 10, "spread": 0.8,
                     "drift_period": 24, "num_chunks": 240},
         "arms": [{"name": "online", "cadence": "online"},
                  {"name": "batched-24", "cadence": {"batched": 24}}]},
    ),
    "dp-noise": (
        "IID digits, staleness N(12, 4), clipped and noised gradients: AdaSGD vs DynSGD",
        {"partition": "iid", "staleness": {"kind": "gaussian", "mu": 12, "sigma": 4},
         "dp": {"clip": 1.0, "sigma": 0.01}, "max_updates": 1000,
         "arms": [{"name": "adasgd", "policy": "adasgd"}, {"name": "dynsgd", "policy": "dynsgd"}]},
    ),
}


def presets() -> list[tuple[str, str]]:
    return [(name, desc) for name, (desc, _) in PRESETS.items()]


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r}; known: {sorted(PRESETS)}")
    return deep_merge({"preset": name}, PRESETS[name][1])


def default_output_dir() -> str:
    return os.environ.get("FLEETLAB_OUT", "out")


# --- data and fleet plumbing ------------------------------------------------------------

def load_dataset(cfg: DatasetConfig, seed: int) -> tuple[data.Dataset, data.Dataset]:
    if cfg.kind == "digits":
        ds = data.load_digits_dataset()
        return data.train_test_split(ds, cfg.test_size or 360, seed)
    if cfg.kind == "mnist":
        train = data.load_idx(cfg.images, cfg.labels)
        test = data.load_idx(cfg.test_images, cfg.test_labels)
        rng = np.random.default_rng([seed, 11])
        n_train = min(cfg.train_size or 10000, len(train))
        n_test = min(cfg.test_size or 2000, len(test))
        return (train.subset(np.sort(rng.choice(len(train), n_train, replace=False))),
                test.subset(np.sort(rng.choice(len(test), n_test, replace=False))))
    if cfg.kind == "synthetic":
        ds = data.gaussian_clusters(cfg.num_classes or 10, cfg.dim or 20, cfg.size, seed, cfg.spread)
        return data.train_test_split(ds, cfg.test_size or max(1, cfg.size // 5), seed)
    raise ConfigError(f"dataset.kind: {cfg.kind!r} is not a static dataset")


def load_profiles(name: str, seed: int) -> list[fleet.DeviceProfile]:
    if name in ("default", "offline"):
        return fleet.preset_fleet(name, seed)
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"fleet: no preset or file named {name!r}")
    return fleet.load_fleet(path)


def _weak_shards(train: data.Dataset, spec: WeakWorkers, first_id: int, seed: int):
    rng = np.random.default_rng([seed, 13])
    out = []
    for j in range(spec.count):
        idx = np.sort(rng.choice(len(train), size=min(spec.size, len(train)), replace=False))
        out.append(data.UserShard(first_id + j, train.features[idx], train.labels[idx],
                                  train.num_classes))
    return out


class RecordingProfiler:
    """Forwards observations to the profiler and keeps a CSV row per task."""

    def __init__(self, profiler: Profiler, t_slo: float, e_slo: float, run_id: str, seed: int):
        self.profiler = profiler
        self.t_slo, self.e_slo = t_slo, e_slo
        self.run_id, self.seed = run_id, seed
        self.rows: list[dict] = []

    def predict_bound(self, device_model, x, t_slo, e_slo) -> int:
        return self.profiler.predict_bound(device_model, x, t_slo, e_slo)

    def observe(self, device_model, x, n, t_comp, energy) -> None:
        self.rows.append(profiler_row(self.run_id, self.seed, len(self.rows), device_model, n,
                                      self.t_slo, self.e_slo, t_comp, energy, "iprof"))
        self.profiler.observe(device_model, x, n, t_comp, energy)


def _pretrained(profiles_offline, pcfg: ProfilerConfig, t_slo: float, seed: int):
    rng = np.random.default_rng([seed, 17])
    log = fleet.offline_sweep(profiles_offline, t_slo, rng, growth=pcfg.sweep_growth)
    iprof = Profiler.pretrain(log, epsilon={TIME: pcfg.epsilon_time, ENERGY: pcfg.epsilon_energy},
                              retrain_every=pcfg.retrain_every)
    maui = MauiProfiler.pretrain(log, retrain_every=pcfg.retrain_every)
    return iprof, maui


# --- runners -------------------------------------------------------------------------------

@dataclass
class ArmOutput:
    name: str
    result: RunResult | None = None
    profiler_rows: list = field(default_factory=list)


def run_online_arm(cfg: ExperimentConfig, seed: int, run_id: str) -> ArmOutput:
    train, test = load_dataset(cfg.dataset, seed)
    num_classes = train.num_classes
    if cfg.num_users == 0:
        shards = []
    elif cfg.partition == "noniid":
        shards = data.partition_noniid(train, cfg.num_users, seed)
    else:
        shards = data.partition_iid(train, cfg.num_users, seed)
    weak = _weak_shards(train, cfg.weak_workers, len(shards), seed)
    weak_ids = {s.user_id for s in weak}
    shards = shards + weak

    kind = minibatch_kind(cfg.minibatch)
    needs_devices = kind == "profiler" or cfg.mode == "timed"
    workers = []
    profiles = load_profiles(cfg.fleet, seed) if needs_devices else []
    for shard in shards:
        device = fleet.DeviceState(profiles[shard.user_id % len(profiles)]) if profiles else None
        workers.append(Worker(shard, device))

    K = len(workers) if cfg.K == "all" else cfg.K
    if K < 1:
        raise ConfigError("K: 'all' needs at least one worker")
    spec = coreml.ModelSpec(train.dim, cfg.hidden, num_classes, cfg.activation)
    agg = Aggregator(
        coreml.init_params(spec, seed), num_classes, policy=cfg.policy_enum, K=K, lr=cfg.lr,
        tracker=StalenessTracker(cfg.window, cfg.s_percent, cfg.bootstrap),
    )
    controller = ControllerConfig(
        size_threshold=Threshold.parse(cfg.controller.size_threshold),
        sim_threshold=Threshold.parse(cfg.controller.sim_threshold),
        t_slo=cfg.controller.t_slo, e_slo=cfg.controller.e_slo, K=K,
    )

    recorder = None
    if kind == "profiler":
        iprof, _ = _pretrained(load_profiles(cfg.profiler.offline_fleet, seed), cfg.profiler,
                               controller.t_slo, seed)
        recorder = RecordingProfiler(iprof, controller.t_slo, controller.e_slo, run_id, seed)

    size_rng = np.random.default_rng([seed, 19])

    def bound(req: TaskRequest) -> int:
        if req.worker_id in weak_ids:
            return cfg.weak_workers.minibatch
        if kind == "fixed":
            return cfg.minibatch
        if kind == "normal":
            mean, std = cfg.minibatch["normal"]
            return max(1, int(round(size_rng.normal(mean, std))))
        return recorder.predict_bound(req.device_model, req.features, controller.t_slo, controller.e_slo)

    server = Server(agg, bound, controller)
    setup = OnlineSetup(
        test=test, max_updates=cfg.max_updates, eval_every=cfg.eval_every,
        staleness=cfg.staleness.model(), mode=cfg.mode, arrival_rate=cfg.arrival_rate,
        retry_delay=cfg.retry_delay, dp_clip=cfg.dp.clip, dp_sigma=cfg.dp.sigma,
        cadence_period=cadence_period(cfg.cadence), local_steps=cfg.local_steps,
        profiler=recorder, run_id=run_id, seed=seed,
    )
    result = run_online(setup, workers, server)
    return ArmOutput(run_id, result, recorder.rows if recorder else [])


def run_stream_arm(cfg: ExperimentConfig, seed: int, run_id: str) -> ArmOutput:
    d = cfg.dataset
    stream = data.DriftingStream(
        num_classes=d.num_classes or 5, dim=d.dim or 10, drift_period=d.drift_period,
        samples_per_chunk=d.samples_per_chunk, drift_strength=d.drift_strength,
        spread=d.spread, seed=seed,
    )
    spec = coreml.ModelSpec(stream.dim, cfg.hidden, stream.num_classes, cfg.activation)
    result = run_stream(stream, spec, cfg.lr, d.num_chunks, cadence_period(cfg.cadence), seed,
                        policy=cfg.policy_enum, run_id=run_id)
    return ArmOutput(run_id, result)


PROFILER_COLUMNS = (
    "run_id", "seed", "request_index", "device_model", "predicted_n", "t_slo", "e_slo",
    "actual_t", "actual_e", "deviation_t", "deviation_e", "predictor",
)


def profiler_row(run_id, seed, index, device_model, n, t_slo, e_slo, t, e, predictor) -> dict:
    return {
        "run_id": run_id, "seed": seed, "request_index": index, "device_model": device_model,
        "predicted_n": n, "t_slo": t_slo, "e_slo": e_slo, "actual_t": t, "actual_e": e,
        "deviation_t": t - t_slo if math.isfinite(t_slo) else None,
        "deviation_e": e - e_slo if math.isfinite(e_slo) else None,
        "predictor": predictor,
    }


def slos_for(objective: str, t_slo: float, e_slo: float) -> tuple[float, float]:
    if objective == "time":
        return t_slo, math.inf
    if objective == "energy":
        return math.inf, e_slo
    return t_slo, e_slo


def run_profiler_arm(cfg: ExperimentConfig, seed: int, run_id: str) -> ArmOutput:
    """Requests visit the devices round-robin; request r of every device is
    served by I-PROF when r is even and by MAUI when odd. Both profilers
    observe every completed task."""
    pcfg = cfg.profiler
    t_slo, e_slo = slos_for(pcfg.objective, cfg.controller.t_slo, cfg.controller.e_slo)
    iprof, maui = _pretrained(load_profiles(pcfg.offline_fleet, seed), pcfg,
                              cfg.controller.t_slo, seed)
    states = [fleet.DeviceState(p) for p in load_profiles(cfg.fleet, seed)]
    rng = np.random.default_rng([seed, 23])
    rows = []
    for r in range(pcfg.requests_per_device):
        for state in states:
            name = state.profile.device_model
            x = state.features()
            predictor = "iprof" if r % 2 == 0 else "maui"
            chosen = iprof if predictor == "iprof" else maui
            n = min(chosen.predict_bound(name, x, t_slo, e_slo), pcfg.local_size)
            t, e, _ = fleet.simulate_task(state, n, rng)
            iprof.observe(name, x, n, t, e)
            maui.observe(name, x, n, t, e)
            rows.append(profiler_row(run_id, seed, r, name, n, t_slo, e_slo, t, e, predictor))
            state.cool(pcfg.idle_s)
            state.jitter_memory(rng)
    return ArmOutput(run_id, None, rows)


_RUNNERS = {"online": run_online_arm, "stream": run_stream_arm, "profiler": run_profiler_arm}


def run_seed(cfg: ExperimentConfig, seed: int) -> list[ArmOutput]:
    """Every arm of `cfg` for one seed."""
    out = []
    for name, arm_cfg in expand_arms(cfg):
        run_id = f"{cfg.preset}-{name}-{seed}"
        out.append(_RUNNERS[arm_cfg.kind](arm_cfg, seed, run_id))
    return out


def profiler_summary(rows: list[dict], objective: str) -> dict:
    """90th-percentile absolute deviation per predictor and per-device
    mean |deviation| of I-PROF requests 1-3 and 4-6."""
    key = "deviation_t" if objective == "time" else "deviation_e"
    p90 = {}
    for predictor in ("iprof", "maui"):
        values = np.abs([row[key] for row in rows if row["predictor"] == predictor])
        p90[predictor] = float(np.percentile(values, 90)) if values.size else math.nan
    early_late = {}
    for device in sorted({row["device_model"] for row in rows}):
        own = [abs(row[key]) for row in rows
               if row["device_model"] == device and row["predictor"] == "iprof"]
        early_late[device] = (float(np.mean(own[0:3])), float(np.mean(own[3:6])))
    return {"p90": p90, "early_late": early_late}
