"""I-PROF workload profiler and the MAUI-style baseline.

Both predict a per-sample slope (seconds or energy units per sample) and turn
an SLO into a mini-batch bound ``max(1, floor(SLO / slope))``. I-PROF
predicts the slope from device features with a cold-start least-squares model
and a passive-aggressive regressor per device model; MAUI fits one global
through-origin slope on (n, cost) pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, astuple

import numpy as np

TIME = "time"
ENERGY = "energy"
KINDS = (TIME, ENERGY)

# Predictions below this are treated as this before dividing the SLO.
MIN_SLOPE = 1e-9

# 0.1 ms/sample; slopes are in s/sample here. Energy slopes are in % battery/sample.
DEFAULT_EPSILON = {TIME: 1e-4, ENERGY: 6e-5}


@dataclass(frozen=True)
class DeviceFeatures:
    avail_mem: float
    total_mem: float
    temperature: float
    cpu_freq_sum: float
    energy_per_cpu_time: float
    bias: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in astuple(self)):
            raise ValueError("device features must be finite")
        if not self.total_mem >= self.avail_mem >= 0:
            raise ValueError("need total_mem >= avail_mem >= 0")

    def vector(self, kind: str) -> np.ndarray:
        """Raw feature vector; energy_per_cpu_time only feeds the energy predictor."""
        base = [self.avail_mem, self.total_mem, self.temperature, self.cpu_freq_sum]
        if kind == ENERGY:
            base.append(self.energy_per_cpu_time)
        elif kind != TIME:
            raise ValueError(f"unknown predictor kind {kind!r}")
        return np.array(base + [self.bias], dtype=np.float64)


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-scoring frozen from an offline log. The bias column is kept."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Standardizer":
        rows = np.asarray(rows, dtype=np.float64)
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        # last column is the constant bias
        mean[-1], std[-1] = 0.0, 1.0
        return cls(mean, std)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass(frozen=True)
class LinearCoefModel:
    theta: np.ndarray
    kind: str

    def predict(self, x: np.ndarray) -> float:
        return max(float(np.dot(x, self.theta)), MIN_SLOPE)


@dataclass(frozen=True)
class PaModel:
    theta: np.ndarray
    epsilon: float
    update_count: int = 0

    def predict(self, x: np.ndarray) -> float:
        return max(float(np.dot(x, self.theta)), MIN_SLOPE)


def pa_loss(theta: np.ndarray, x: np.ndarray, alpha: float, epsilon: float) -> float:
    """Epsilon-insensitive absolute loss."""
    err = abs(float(np.dot(x, theta)) - alpha)
    return 0.0 if err <= epsilon else err - epsilon


def pa_update(model: PaModel, x, alpha: float) -> PaModel:
    x = np.asarray(x, dtype=np.float64)
    sq_norm = float(np.dot(x, x))
    if sq_norm == 0.0:
        raise ValueError("passive-aggressive update needs a non-zero feature vector")
    f = pa_loss(model.theta, x, alpha, model.epsilon)
    if f == 0.0:
        return model
    direction = math.copysign(1.0, alpha - float(np.dot(x, model.theta)))
    theta = model.theta + (f / sq_norm) * direction * x
    return PaModel(theta, model.epsilon, model.update_count + 1)


@dataclass(frozen=True)
class LogEntry:
    features: DeviceFeatures
    n: int
    t_comp: float
    energy: float
    device_model: str

    @property
    def alpha_time(self) -> float:
        return self.t_comp / self.n

    @property
    def alpha_energy(self) -> float:
        return self.energy / self.n

    def alpha(self, kind: str) -> float:
        return self.alpha_time if kind == TIME else self.alpha_energy


def ols_fit(entries, kind: str, ridge: float = 1e-8,
            scaler: Standardizer | None = None) -> LinearCoefModel:
    """Least squares on (features, slope) via ridge-stabilised normal equations."""
    entries = list(entries)
    if not entries:
        raise ValueError("ols_fit needs at least one observation")
    X = np.array([e.features.vector(kind) for e in entries])
    if scaler is not None:
        X = scaler(X)
    y = np.array([e.alpha(kind) for e in entries])
    gram = X.T @ X + ridge * np.eye(X.shape[1])
    try:
        theta = np.linalg.solve(gram, X.T @ y)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular normal equations for {kind} model") from exc
    return LinearCoefModel(theta, kind)


def maui_fit(entries, kind: str) -> float:
    """Through-origin least squares slope of cost on mini-batch size."""
    entries = list(entries)
    if not entries:
        raise ValueError("maui_fit needs at least one observation")
    n = np.array([e.n for e in entries], dtype=np.float64)
    cost = np.array([e.t_comp if kind == TIME else e.energy for e in entries])
    denom = float(np.dot(n, n))
    if denom == 0.0:
        raise ValueError("all mini-batch sizes are zero")
    return float(np.dot(n, cost) / denom)


def maui_predict(theta0: float, n: float) -> float:
    return theta0 * n


def bound_from_slopes(slope_t: float, slope_e: float, t_slo: float, e_slo: float) -> int:
    if not (t_slo > 0 and e_slo > 0):
        raise ValueError("SLOs must be positive")
    slope_t = max(slope_t, MIN_SLOPE)
    slope_e = max(slope_e, MIN_SLOPE)
    n = min(t_slo / slope_t, e_slo / slope_e)
    if not math.isfinite(n):
        raise ValueError("non-finite mini-batch bound")
    return max(1, math.floor(n))


@dataclass
class Profiler:
    """I-PROF state. Observations for distinct device models are independent."""

    cold_time: LinearCoefModel
    cold_energy: LinearCoefModel
    scalers: dict = field(default_factory=dict)
    epsilon: dict = field(default_factory=lambda: dict(DEFAULT_EPSILON))
    retrain_every: int = 50
    ridge: float = 1e-8
    per_model_time: dict = field(default_factory=dict)
    per_model_energy: dict = field(default_factory=dict)
    training_log: list = field(default_factory=list)

    @classmethod
    def pretrain(cls, offline_log, standardize: bool = True, **kwargs) -> "Profiler":
        """Fit the cold-start models (and frozen feature scalers) on an offline log."""
        offline_log = list(offline_log)
        scalers = {}
        for kind in KINDS:
            rows = np.array([e.features.vector(kind) for e in offline_log])
            scalers[kind] = Standardizer.fit(rows) if standardize else Standardizer.identity(rows.shape[1])
        ridge = kwargs.get("ridge", 1e-8)
        return cls(
            cold_time=ols_fit(offline_log, TIME, ridge, scalers[TIME]),
            cold_energy=ols_fit(offline_log, ENERGY, ridge, scalers[ENERGY]),
            scalers=scalers,
            training_log=offline_log,
            **kwargs,
        )

    def features(self, x: DeviceFeatures, kind: str) -> np.ndarray:
        scaler = self.scalers.get(kind)
        vec = x.vector(kind)
        return scaler(vec) if scaler is not None else vec

    def slope(self, device_model: str, x: DeviceFeatures, kind: str) -> float:
        personal = (self.per_model_time if kind == TIME else self.per_model_energy).get(device_model)
        model = personal if personal is not None else (
            self.cold_time if kind == TIME else self.cold_energy)
        return model.predict(self.features(x, kind))

    def predict_bound(self, device_model: str, x: DeviceFeatures,
                      t_slo: float, e_slo: float) -> int:
        return bound_from_slopes(
            self.slope(device_model, x, TIME), self.slope(device_model, x, ENERGY),
            t_slo, e_slo,
        )

    def observe(self, device_model: str, x: DeviceFeatures, n: int,
                t_comp: float, energy: float) -> None:
        if n < 1:
            raise ValueError("mini-batch size must be positive")
        if not t_comp > 0 or energy < 0:
            raise ValueError("need t_comp > 0 and energy >= 0")
        entry = LogEntry(x, n, t_comp, energy, device_model)
        self.training_log.append(entry)
        for kind, table, cold in (
            (TIME, self.per_model_time, self.cold_time),
            (ENERGY, self.per_model_energy, self.cold_energy),
        ):
            if device_model not in table:
                table[device_model] = PaModel(cold.theta.copy(), self.epsilon[kind])
            table[device_model] = pa_update(table[device_model], self.features(x, kind), entry.alpha(kind))
        if len(self.training_log) % self.retrain_every == 0:
            self.retrain()

    def retrain(self) -> None:
        self.cold_time = ols_fit(self.training_log, TIME, self.ridge, self.scalers.get(TIME))
        self.cold_energy = ols_fit(self.training_log, ENERGY, self.ridge, self.scalers.get(ENERGY))


@dataclass
class MauiProfiler:
    """Device-blind baseline: one global slope per cost kind."""

    theta_time: float
    theta_energy: float
    retrain_every: int = 50
    training_log: list = field(default_factory=list)

    @classmethod
    def pretrain(cls, offline_log, **kwargs) -> "MauiProfiler":
        offline_log = list(offline_log)
        return cls(maui_fit(offline_log, TIME), maui_fit(offline_log, ENERGY),
                   training_log=offline_log, **kwargs)

    def predict_bound(self, device_model: str, x: DeviceFeatures,
                      t_slo: float, e_slo: float) -> int:
        return bound_from_slopes(self.theta_time, self.theta_energy, t_slo, e_slo)

    def observe(self, device_model: str, x: DeviceFeatures, n: int,
                t_comp: float, energy: float) -> None:
        if n < 1:
            raise ValueError("mini-batch size must be positive")
        self.training_log.append(LogEntry(x, n, t_comp, energy, device_model))
        if len(self.training_log) % self.retrain_every == 0:
            self.theta_time = maui_fit(self.training_log, TIME)
            self.theta_energy = maui_fit(self.training_log, ENERGY)
