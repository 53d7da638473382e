"""Simulated heterogeneous devices and staleness/latency models.

A device has hidden ground-truth per-sample cost slopes. Running a task heats
it up; above a nominal temperature the slopes inflate linearly. Idle time
cools it exponentially toward ambient. Observed features (what a real phone
would report) are exposed separately from the hidden coefficients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

from .profiler import DeviceFeatures


@dataclass(frozen=True)
class ThermalParams:
    heat_per_sample: float = 0.02     # deg C per processed sample
    cool_rate: float = 0.01           # 1/s, exponential decay toward ambient
    ambient: float = 30.0
    nominal: float = 35.0
    max_temp: float = 80.0
    alpha_temp_slope: float = 0.01    # relative slope inflation per deg C above nominal


@dataclass(frozen=True)
class DeviceProfile:
    device_model: str
    true_alpha_time: float            # s / sample
    true_alpha_energy: float          # % battery / sample
    feature_base: DeviceFeatures
    noise_cv: float = 0.05
    thermal: ThermalParams = field(default_factory=ThermalParams)
    mem_jitter: float = 0.1           # fraction of total memory that fluctuates

    def __post_init__(self):
        if not (self.true_alpha_time > 0 and self.true_alpha_energy > 0):
            raise ValueError(f"{self.device_model}: true slopes must be positive")
        if self.noise_cv < 0:
            raise ValueError("noise_cv must be non-negative")


@dataclass
class DeviceState:
    """Mutable runtime state of one simulated device."""

    profile: DeviceProfile
    temperature: float = None
    avail_mem: float = None

    def __post_init__(self):
        if self.temperature is None:
            self.temperature = self.profile.thermal.ambient
        if self.avail_mem is None:
            self.avail_mem = self.profile.feature_base.avail_mem

    def features(self) -> DeviceFeatures:
        return replace(self.profile.feature_base, temperature=self.temperature,
                       avail_mem=self.avail_mem)

    def slope_factor(self) -> float:
        th = self.profile.thermal
        return 1.0 + th.alpha_temp_slope * max(0.0, self.temperature - th.nominal)

    def cool(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("idle time must be non-negative")
        th = self.profile.thermal
        self.temperature = th.ambient + (self.temperature - th.ambient) * math.exp(-th.cool_rate * seconds)

    def jitter_memory(self, rng: np.random.Generator) -> None:
        base = self.profile.feature_base
        span = self.profile.mem_jitter * base.total_mem
        self.avail_mem = float(np.clip(base.avail_mem + rng.uniform(-span, span) / 2,
                                       0.0, base.total_mem))


def lognormal_unit_mean(cv: float, rng: np.random.Generator) -> float:
    if cv == 0:
        return 1.0
    sigma2 = math.log1p(cv * cv)
    return float(rng.lognormal(-sigma2 / 2.0, math.sqrt(sigma2)))


def simulate_task(state: DeviceState, n: int, rng: np.random.Generator):
    """Run a task of n samples. Returns (t_comp, energy, features after the task).

    The slope is set by the temperature at task start; the task then heats
    the device.
    """
    if n < 1:
        raise ValueError("mini-batch size must be positive")
    prof = state.profile
    factor = state.slope_factor()
    t_comp = prof.true_alpha_time * factor * n * lognormal_unit_mean(prof.noise_cv, rng)
    energy = prof.true_alpha_energy * factor * n * lognormal_unit_mean(prof.noise_cv, rng)
    th = prof.thermal
    state.temperature = min(th.max_temp, state.temperature + th.heat_per_sample * n)
    return t_comp, energy, state.features()


# --- fleet presets -------------------------------------------------------------

# (name, cores, max MHz, total MB, energy per cpu-second, hidden energy factor,
#  hidden speed factor, thermal slope). Slope law: 170 / cpu_freq_sum * hidden speed.
# Speeds span ~7x; energy per CPU second grows with chip size. The hidden factors are what the features cannot see.
_PRESET_TABLE = [
    ("sim-s6",  8, 1500, 3000, 0.024, 1.25, 1.00, 0.009),
    ("sim-s7",  8, 2100, 4000, 0.028, 0.85, 1.25, 0.011),
    ("sim-s8",  8, 2300, 4000, 0.030, 1.15, 0.95, 0.007),
    ("sim-s10", 8, 2700, 8000, 0.036, 0.80, 0.60, 0.005),
    ("sim-h9",  8, 2400, 4000, 0.030, 1.30, 1.20, 0.010),
    ("sim-h10", 8, 2360, 6000, 0.032, 0.75, 0.85, 0.011),
    ("sim-e3",  4, 1200, 1000, 0.020, 0.90, 0.80, 0.008),
    ("sim-s4m", 2, 1700, 1500, 0.016, 1.20, 0.70, 0.009),
    ("sim-p3",  8, 2500, 4000, 0.034, 1.35, 0.70, 0.006),
    ("sim-mi9", 8, 2840, 6000, 0.038, 0.70, 1.30, 0.008),
]

_SPEED_CONSTANT = 170.0


def _energy_slope(time_slope: float, energy_per_cpu: float, hidden: float) -> float:
    # % battery per sample = (cpu-seconds per sample) * (% per cpu-second) * hidden
    return time_slope * energy_per_cpu * hidden * 4.0


def preset_fleet(name: str = "default", seed: int = 0) -> list[DeviceProfile]:
    """Device presets. `default`: the 10-profile test fleet; `offline`: 15
    distinct training devices drawn from the same family law (seeded)."""
    if name == "default":
        out = []
        for (model, cores, mhz, mem, epc, h_e, h_s, slope) in _PRESET_TABLE:
            a_t = _SPEED_CONSTANT / (cores * mhz) * h_s
            out.append(DeviceProfile(
                device_model=model,
                true_alpha_time=a_t,
                true_alpha_energy=_energy_slope(a_t, epc, h_e),
                feature_base=DeviceFeatures(
                    avail_mem=0.5 * mem, total_mem=float(mem), temperature=30.0,
                    cpu_freq_sum=float(cores * mhz), energy_per_cpu_time=epc),
                thermal=ThermalParams(alpha_temp_slope=slope),
            ))
        return out
    if name == "offline":
        return random_fleet(15, seed=seed, prefix="train")
    raise ValueError(f"unknown fleet preset {name!r}")


def random_fleet(count: int, seed: int, prefix: str = "dev") -> list[DeviceProfile]:
    """Synthetic profiles: slope roughly inverse in total CPU frequency, times a
    hidden per-model factor."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        cores = int(rng.choice([2, 4, 8]))
        mhz = float(rng.uniform(1200, 2900))
        freq = cores * mhz
        a_t = _SPEED_CONSTANT / freq * float(rng.uniform(0.6, 1.4))
        # bigger, faster chips draw more energy per busy CPU second
        epc = float(np.clip(0.014 + 1e-6 * freq + rng.uniform(-0.004, 0.004), 0.012, 0.045))
        h_e = float(rng.uniform(0.7, 1.35))
        mem = float(rng.choice([1000, 2000, 3000, 4000, 6000, 8000]))
        out.append(DeviceProfile(
            device_model=f"{prefix}-{i:02d}",
            true_alpha_time=a_t,
            true_alpha_energy=_energy_slope(a_t, epc, h_e),
            feature_base=DeviceFeatures(
                avail_mem=0.5 * mem, total_mem=mem, temperature=30.0,
                cpu_freq_sum=freq, energy_per_cpu_time=epc),
            thermal=ThermalParams(alpha_temp_slope=float(rng.uniform(0.004, 0.011))),
        ))
    return out


def save_fleet(profiles, path) -> None:
    Path(path).write_text(json.dumps([asdict(p) for p in profiles], indent=2))


def load_fleet(path) -> list[DeviceProfile]:
    """Read a fleet file: a JSON list of DeviceProfile objects."""
    raw = json.loads(Path(path).read_text())
    out = []
    for entry in raw:
        entry = dict(entry)
        entry["feature_base"] = DeviceFeatures(**entry["feature_base"])
        entry["thermal"] = ThermalParams(**entry.get("thermal", {}))
        out.append(DeviceProfile(**entry))
    return out


def offline_sweep(profiles, t_slo: float, rng: np.random.Generator,
                  growth: float = 1.5, idle: float = 20.0):
    """Profile each device with geometrically growing mini-batches until the
    computation time reaches twice the SLO. Returns profiler log entries."""
    from .profiler import LogEntry

    log = []
    for prof in profiles:
        state = DeviceState(prof)
        n = 1.0
        while True:
            size = max(1, int(round(n)))
            x = state.features()
            t, e, _ = simulate_task(state, size, rng)
            log.append(LogEntry(x, size, t, e, prof.device_model))
            if t >= 2.0 * t_slo:
                break
            state.cool(idle)
            n *= growth
    return log


# --- staleness and latency ------------------------------------------------------

STALENESS_KINDS = ("none", "gaussian", "longtail", "exponential")


@dataclass(frozen=True)
class StalenessModel:
    kind: str = "none"
    mu: float = 0.0
    sigma: float = 0.0
    tail_labels: tuple = ()
    tail_value: int | None = None
    min_s: float = 7.1
    mean_s: float = 8.45

    def __post_init__(self):
        if self.kind not in STALENESS_KINDS:
            raise ValueError(f"unknown staleness kind {self.kind!r}; expected {STALENESS_KINDS}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind == "exponential" and not self.mean_s > self.min_s >= 0:
            raise ValueError("exponential latency needs mean_s > min_s >= 0")
        object.__setattr__(self, "tail_labels", tuple(int(c) for c in self.tail_labels))

    @property
    def resolved_tail_value(self) -> int:
        """4 * (mu + 3 sigma) unless set explicitly."""
        if self.tail_value is not None:
            return int(self.tail_value)
        return int(round(4 * (self.mu + 3 * self.sigma)))

    @classmethod
    def d1(cls) -> "StalenessModel":
        return cls("gaussian", mu=6.0, sigma=2.0)

    @classmethod
    def d2(cls) -> "StalenessModel":
        return cls("gaussian", mu=12.0, sigma=4.0)


def next_staleness(model: StalenessModel, label_counts, rng: np.random.Generator) -> int:
    """Staleness (in model updates) for a result with the given label counts."""
    if model.kind == "none":
        return 0
    if model.kind == "exponential":
        raise ValueError("exponential mode yields latencies; use sample_latency")
    if model.kind == "longtail" and model.tail_labels:
        counts = np.asarray(label_counts)
        if any(counts[c] > 0 for c in model.tail_labels if c < counts.size):
            return model.resolved_tail_value
    if model.sigma == 0:
        return max(0, int(round(model.mu)))
    return max(0, int(round(rng.normal(model.mu, model.sigma))))


def sample_latency(model: StalenessModel, rng: np.random.Generator) -> float:
    """Shifted exponential round-trip latency in seconds."""
    if model.kind != "exponential":
        raise ValueError("sample_latency needs an exponential staleness model")
    return model.min_s + float(rng.exponential(model.mean_s - model.min_s))
