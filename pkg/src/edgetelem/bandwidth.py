"""Synthetic cellular traces, bandwidth prediction, and placement decisions.

The trace generator draws modem metrics per regime and derives the downlink
rate from a linear model over standardized radio features plus a throughput
EWMA.  The predictor fits the same 5-feature linear form by ridge-regularized
least squares over a sliding window, so on clean traces it can recover the
generating coefficients exactly.

Radio features are standardized with fixed affine normalizers (module
constants below) rather than per-window statistics: the fit must be stable
under a sliding window, and dBm-scale features would otherwise dominate.
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .telemetry import NetworkMetrics

__all__ = [
    "Placement",
    "FeatureScaler",
    "DEFAULT_SCALER",
    "LinearCoeffs",
    "RegimeSpec",
    "NetTraceConfig",
    "NetTrace",
    "gen_trace",
    "PredictorConfig",
    "BandwidthPredictor",
    "FitError",
    "decide_placement",
    "trace_config_from_dict",
]


class Placement(str, Enum):
    """Where inference for a device's stream runs."""

    EDGE = "Edge"
    DEVICE = "Device"


@dataclass(frozen=True)
class FeatureScaler:
    """Fixed affine normalization for the three radio features."""

    rsrp_center: float = -100.0
    rsrp_scale: float = 20.0
    rsrq_center: float = -12.0
    rsrq_scale: float = 6.0
    rssi_center: float = -70.0
    rssi_scale: float = 20.0

    def standardize(self, net: NetworkMetrics) -> tuple:
        return (
            (net.rsrp_dbm - self.rsrp_center) / self.rsrp_scale,
            (net.rsrq_db - self.rsrq_center) / self.rsrq_scale,
            (net.rssi_dbm - self.rssi_center) / self.rssi_scale,
        )


DEFAULT_SCALER = FeatureScaler()


@dataclass(frozen=True)
class LinearCoeffs:
    """Coefficients of the downlink model: intercept, radio terms, EWMA term."""

    b0: float
    b_rsrp: float = 0.0
    b_rsrq: float = 0.0
    b_rssi: float = 0.0
    b_hist: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.b0, self.b_rsrp, self.b_rsrq, self.b_rssi, self.b_hist])


@dataclass(frozen=True)
class RegimeSpec:
    """One stationary stretch of the synthetic trace.

    ``rssi_jitter_std`` adds variation to RSSI beyond its RSRP-derived base
    so the three radio features are not collinear.
    """

    duration_ticks: int
    rsrp_mean_dbm: float
    rsrp_std: float
    rsrq_mean_db: float
    rsrq_std: float
    rssi_offset_db: float
    true_coeffs: LinearCoeffs
    noise_std_mbps: float
    rssi_jitter_std: float = 2.0

    def __post_init__(self):
        if self.duration_ticks <= 0:
            raise ValueError("duration_ticks must be > 0")
        for name in ("rsrp_std", "rsrq_std", "noise_std_mbps", "rssi_jitter_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class NetTraceConfig:
    seed: int
    regimes: tuple
    ewma_alpha: float = 0.3
    modem_temp_base_c: float = 38.0
    ul_fraction: float = 0.12

    def __post_init__(self):
        if not self.regimes:
            raise ValueError("regimes must be non-empty")
        if not 0.0 < self.ewma_alpha <= 1.0:
            raise ValueError("ewma_alpha must be in (0, 1]")


def _clamp(v: float, lo: float, hi: float) -> float:
    return min(hi, max(lo, v))


def _z(x: float, mean: float, std: float) -> float:
    return (x - mean) / std if std > 0 else 0.0


class NetTrace:
    """Deterministic per-tick generator of (NetworkMetrics, true downlink Mbps).

    Regimes are consumed in order; past the last regime's duration it keeps
    producing from the last regime, so unbounded agent runs stay supplied.
    """

    def __init__(self, cfg: NetTraceConfig):
        self.cfg = cfg
        self._rng = random.Random(cfg.seed)
        self._ewma = 0.0
        self._tick = 0

    def _regime_at(self, tick: int) -> RegimeSpec:
        remaining = tick
        for regime in self.cfg.regimes:
            if remaining < regime.duration_ticks:
                return regime
            remaining -= regime.duration_ticks
        return self.cfg.regimes[-1]

    def tick(self) -> tuple:
        r = self._regime_at(self._tick)
        rng = self._rng
        rsrp = _clamp(rng.gauss(r.rsrp_mean_dbm, r.rsrp_std), -140.0, -40.0)
        rsrq = _clamp(rng.gauss(r.rsrq_mean_db, r.rsrq_std), -25.0, 0.0)
        rssi = _clamp(rsrp + r.rssi_offset_db + rng.gauss(0.0, r.rssi_jitter_std), -120.0, 0.0)
        dl_noise = rng.gauss(0.0, r.noise_std_mbps)
        modem_temp = self.cfg.modem_temp_base_c + rng.gauss(0.0, 0.5)

        # RSSI standardizes with the configured RSRP spread: its location is
        # RSRP-derived and the jitter only exists to keep the features
        # linearly independent.
        rssi_std = r.rsrp_std
        c = r.true_coeffs
        true_dl = (
            c.b0
            + c.b_rsrp * _z(rsrp, r.rsrp_mean_dbm, r.rsrp_std)
            + c.b_rsrq * _z(rsrq, r.rsrq_mean_db, r.rsrq_std)
            + c.b_rssi * _z(rssi, r.rsrp_mean_dbm + r.rssi_offset_db, rssi_std)
            + c.b_hist * self._ewma
            + dl_noise
        )
        true_dl = max(0.0, true_dl)

        net = NetworkMetrics(
            rssi_dbm=rssi,
            rsrq_db=rsrq,
            rsrp_dbm=rsrp,
            modem_temp_c=modem_temp,
            dl_mbps=true_dl,
            ul_mbps=self.cfg.ul_fraction * true_dl,
        )
        alpha = self.cfg.ewma_alpha
        self._ewma = alpha * true_dl + (1.0 - alpha) * self._ewma
        self._tick += 1
        return net, true_dl


def gen_trace(cfg: NetTraceConfig, n_ticks: int) -> list:
    """Materialize ``n_ticks`` samples from a fresh generator."""
    if n_ticks < 0:
        raise ValueError("n_ticks must be >= 0")
    trace = NetTrace(cfg)
    return [trace.tick() for _ in range(n_ticks)]


class FitError(ValueError):
    """Least-squares system is singular (only possible with ridge_lambda=0)."""


@dataclass(frozen=True)
class PredictorConfig:
    window: int = 30
    ridge_lambda: float = 1e-3
    ewma_alpha: float = 0.3
    min_window: int = 5
    scaler: FeatureScaler = field(default_factory=FeatureScaler)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be >= 0")
        if not 0.0 < self.ewma_alpha <= 1.0:
            raise ValueError("ewma_alpha must be in (0, 1]")


class BandwidthPredictor:
    """Sliding-window ridge regression over radio features + throughput EWMA.

    Feature row is ``[1, z(rsrp), z(rsrq), z(rssi), ewma]`` where the EWMA is
    the value *before* the paired observation, matching what is available at
    prediction time.  Until ``min_window`` pairs have been seen, predictions
    fall back to the EWMA itself.
    """

    def __init__(self, config: PredictorConfig | None = None):
        self.config = config if config is not None else PredictorConfig()
        self.coefficients = np.zeros(5)
        self.ewma_throughput = 0.0
        self._rows: deque = deque(maxlen=self.config.window)

    def __len__(self) -> int:
        return len(self._rows)

    def _feature_row(self, net: NetworkMetrics) -> np.ndarray:
        z1, z2, z3 = self.config.scaler.standardize(net)
        return np.array([1.0, z1, z2, z3, self.ewma_throughput])

    def update(self, net: NetworkMetrics, observed_dl_mbps: float) -> None:
        if not math.isfinite(observed_dl_mbps) or observed_dl_mbps < 0:
            raise ValueError(f"observed_dl_mbps must be finite and >= 0, got {observed_dl_mbps}")
        self._rows.append((self._feature_row(net), observed_dl_mbps))
        alpha = self.config.ewma_alpha
        self.ewma_throughput = alpha * observed_dl_mbps + (1.0 - alpha) * self.ewma_throughput
        self._refit()

    def _refit(self) -> None:
        x = np.stack([row for row, _ in self._rows])
        y = np.array([obs for _, obs in self._rows])
        lam = self.config.ridge_lambda
        gram = x.T @ x + lam * np.eye(5)
        if lam == 0.0 and np.linalg.matrix_rank(gram) < 5:
            raise FitError("normal matrix is rank-deficient and ridge_lambda is 0")
        self.coefficients = np.linalg.solve(gram, x.T @ y)
        if not np.all(np.isfinite(self.coefficients)):
            raise FitError("fit produced non-finite coefficients")

    def predict(self, net: NetworkMetrics) -> float:
        """Predicted downlink rate in Mbps, clamped to be non-negative."""
        if len(self._rows) < self.config.min_window:
            return max(0.0, self.ewma_throughput)
        return max(0.0, float(self.coefficients @ self._feature_row(net)))


def decide_placement(
    predicted_dl_mbps: float,
    required_mbps: float,
    current: Placement,
    reentry_margin: float = 1.25,
) -> Placement:
    """Hysteretic edge/device placement decision.

    Moves Edge->Device when the predicted rate falls below the requirement;
    returns Device->Edge only once the prediction clears the requirement by
    ``reentry_margin``, so predictions oscillating inside the band
    [required, required*margin) never flap.
    """
    if required_mbps <= 0:
        raise ValueError(f"required_mbps must be > 0, got {required_mbps}")
    if reentry_margin < 1.0:
        raise ValueError(f"reentry_margin must be >= 1, got {reentry_margin}")
    if current == Placement.EDGE and predicted_dl_mbps < required_mbps:
        return Placement.DEVICE
    if current == Placement.DEVICE and predicted_dl_mbps >= required_mbps * reentry_margin:
        return Placement.EDGE
    return current


def trace_config_from_dict(d: dict) -> NetTraceConfig:
    """Build a NetTraceConfig from parsed JSON."""
    regimes = []
    for r in d["regimes"]:
        c = r["true_coeffs"]
        regimes.append(
            RegimeSpec(
                duration_ticks=r["duration_ticks"],
                rsrp_mean_dbm=r["rsrp_mean_dbm"],
                rsrp_std=r["rsrp_std"],
                rsrq_mean_db=r["rsrq_mean_db"],
                rsrq_std=r["rsrq_std"],
                rssi_offset_db=r["rssi_offset_db"],
                true_coeffs=LinearCoeffs(
                    b0=c["b0"],
                    b_rsrp=c.get("b_rsrp", 0.0),
                    b_rsrq=c.get("b_rsrq", 0.0),
                    b_rssi=c.get("b_rssi", 0.0),
                    b_hist=c.get("b_hist", 0.0),
                ),
                noise_std_mbps=r["noise_std_mbps"],
                rssi_jitter_std=r.get("rssi_jitter_std", 2.0),
            )
        )
    return NetTraceConfig(
        seed=d["seed"],
        regimes=tuple(regimes),
        ewma_alpha=d.get("ewma_alpha", 0.3),
        modem_temp_base_c=d.get("modem_temp_base_c", 38.0),
        ul_fraction=d.get("ul_fraction", 0.12),
    )


#: Default single-regime trace used when an agent is started without one.
DEFAULT_TRACE_CONFIG = NetTraceConfig(
    seed=7,
    regimes=(
        RegimeSpec(
            duration_ticks=1_000_000,
            rsrp_mean_dbm=-95.0,
            rsrp_std=4.0,
            rsrq_mean_db=-10.0,
            rsrq_std=1.5,
            rssi_offset_db=17.0,
            true_coeffs=LinearCoeffs(b0=20.0, b_rsrp=2.0, b_rsrq=1.0, b_rssi=0.5, b_hist=0.2),
            noise_std_mbps=1.0,
        ),
    ),
)
