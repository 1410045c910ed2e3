"""Telemetry domain types and the canonical JSON snapshot encoding.

Every sample that crosses the wire is a :class:`TelemetrySnapshot` serialized
by :func:`encode_snapshot`: UTF-8 JSON with a fixed key order and shortest
round-trip float form, so encodings are byte-stable across processes and can
be digested, diffed, or replayed.

Wire schema (exact key names, in order)::

    device_id, platform_kind, seq, device_time_ms,
    app     {ee_latency_ms, fps},
    model   {accel_utilization, mem_throughput_gbps, cpu_utilization,
             mem_utilization, model_efficiency, model_id},
    energy  {power_w, temp_c, fps_per_watt},
    network {rssi_dbm, rsrq_db, rsrp_dbm, modem_temp_c, dl_mbps, ul_mbps}
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum

__all__ = [
    "TelemetryError",
    "ValidationError",
    "SchemaError",
    "ParseError",
    "PlatformKind",
    "DeviceIdentity",
    "AppMetrics",
    "ModelMetrics",
    "EnergyMetrics",
    "NetworkMetrics",
    "ModelProfile",
    "TelemetrySnapshot",
    "model_efficiency",
    "fps_per_watt",
    "encode_snapshot",
    "decode_snapshot",
]

DEVICE_ID_RE = re.compile(r"[A-Za-z0-9_-]{1,64}")
SHA256_HEX_RE = re.compile(r"[0-9a-f]{64}")

# fps may be a windowed average, so it is allowed to drift from 1000/latency
# by at most this relative amount.
FPS_COHERENCE_SLACK = 0.05


class TelemetryError(ValueError):
    """Base class for snapshot parse, schema, and validation failures."""


class ValidationError(TelemetryError):
    """A field value violates a type invariant."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class SchemaError(TelemetryError):
    """A JSON document does not match the snapshot schema (missing/extra key)."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ParseError(TelemetryError):
    """Input is not well-formed JSON; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


def _as_float(field: str, value, *, ge=None, gt=None, le=None, lt=None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(field, "must be a real number")
    v = float(value)
    if not math.isfinite(v):
        raise ValidationError(field, "must be finite")
    if ge is not None and v < ge:
        raise ValidationError(field, f"must be >= {ge}, got {v}")
    if gt is not None and v <= gt:
        raise ValidationError(field, f"must be > {gt}, got {v}")
    if le is not None and v > le:
        raise ValidationError(field, f"must be <= {le}, got {v}")
    if lt is not None and v >= lt:
        raise ValidationError(field, f"must be < {lt}, got {v}")
    return v


def _as_int(field: str, value, *, ge=None, gt=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(field, "must be an integer")
    if ge is not None and value < ge:
        raise ValidationError(field, f"must be >= {ge}, got {value}")
    if gt is not None and value <= gt:
        raise ValidationError(field, f"must be > {gt}, got {value}")
    return value


def _as_str(field: str, value) -> str:
    if not isinstance(value, str):
        raise ValidationError(field, "must be a string")
    return value


def _set(obj, name, value) -> None:
    object.__setattr__(obj, name, value)


class PlatformKind(str, Enum):
    """Kind of edge platform reporting telemetry (extensible)."""

    SIMULATED_DPU = "SimulatedDPU"


@dataclass(frozen=True)
class DeviceIdentity:
    """Opaque per-agent identity; ``device_id`` is unique within a deployment."""

    device_id: str
    platform_kind: PlatformKind = PlatformKind.SIMULATED_DPU

    def __post_init__(self):
        did = _as_str("device_id", self.device_id)
        if not DEVICE_ID_RE.fullmatch(did):
            raise ValidationError(
                "device_id", "must match [A-Za-z0-9_-]{1,64}"
            )
        kind = self.platform_kind
        if not isinstance(kind, PlatformKind):
            try:
                kind = PlatformKind(_as_str("platform_kind", kind))
            except ValueError:
                raise ValidationError("platform_kind", f"unknown kind {kind!r}") from None
            _set(self, "platform_kind", kind)


@dataclass(frozen=True)
class AppMetrics:
    """Application-level metrics: per-frame latency and throughput."""

    ee_latency_ms: float  # end-to-end latency per frame, milliseconds
    fps: float

    def __post_init__(self):
        _set(self, "ee_latency_ms", _as_float("ee_latency_ms", self.ee_latency_ms, gt=0.0))
        _set(self, "fps", _as_float("fps", self.fps, ge=0.0))
        if self.fps > 0:
            derived = 1000.0 / self.ee_latency_ms
            if abs(self.fps - derived) / self.fps > FPS_COHERENCE_SLACK:
                raise ValidationError(
                    "fps",
                    f"{self.fps} deviates more than {FPS_COHERENCE_SLACK:.0%} "
                    f"from 1000/ee_latency_ms = {derived:.6g}",
                )


@dataclass(frozen=True)
class ModelMetrics:
    """Accelerator and memory utilization of the active AI model.

    ``model_efficiency`` is carried as reported by the producer; it can only
    be cross-checked where the active model profile is known.
    """

    accel_utilization: float
    mem_throughput_gbps: float
    cpu_utilization: float
    mem_utilization: float
    model_efficiency: float
    model_id: str

    def __post_init__(self):
        _set(self, "accel_utilization", _as_float("accel_utilization", self.accel_utilization, ge=0.0, le=1.0))
        _set(self, "mem_throughput_gbps", _as_float("mem_throughput_gbps", self.mem_throughput_gbps, ge=0.0))
        _set(self, "cpu_utilization", _as_float("cpu_utilization", self.cpu_utilization, ge=0.0, le=1.0))
        _set(self, "mem_utilization", _as_float("mem_utilization", self.mem_utilization, ge=0.0, le=1.0))
        _set(self, "model_efficiency", _as_float("model_efficiency", self.model_efficiency, ge=0.0))
        if not _as_str("model_id", self.model_id):
            raise ValidationError("model_id", "must be non-empty")


@dataclass(frozen=True)
class EnergyMetrics:
    """Whole-platform power draw and derived energy efficiency."""

    power_w: float
    temp_c: float
    fps_per_watt: float

    def __post_init__(self):
        _set(self, "power_w", _as_float("power_w", self.power_w, gt=0.0))
        _set(self, "temp_c", _as_float("temp_c", self.temp_c))
        _set(self, "fps_per_watt", _as_float("fps_per_watt", self.fps_per_watt, ge=0.0))


@dataclass(frozen=True)
class NetworkMetrics:
    """Cellular modem measurements, constrained to standard LTE reporting ranges."""

    rssi_dbm: float
    rsrq_db: float
    rsrp_dbm: float
    modem_temp_c: float
    dl_mbps: float
    ul_mbps: float

    def __post_init__(self):
        _set(self, "rssi_dbm", _as_float("rssi_dbm", self.rssi_dbm, ge=-120.0, le=0.0))
        _set(self, "rsrq_db", _as_float("rsrq_db", self.rsrq_db, ge=-25.0, le=0.0))
        _set(self, "rsrp_dbm", _as_float("rsrp_dbm", self.rsrp_dbm, ge=-140.0, le=-40.0))
        _set(self, "modem_temp_c", _as_float("modem_temp_c", self.modem_temp_c))
        _set(self, "dl_mbps", _as_float("dl_mbps", self.dl_mbps, ge=0.0))
        _set(self, "ul_mbps", _as_float("ul_mbps", self.ul_mbps, ge=0.0))


@dataclass(frozen=True)
class ModelProfile:
    """Deployable AI-model descriptor.

    ``workload_gops`` is the compute cost of one frame; ``base_latency_ms``
    the calibrated end-to-end latency at maximum clock.  ``accel_utilization``
    is the nominal accelerator duty the model sustains, used by the platform
    power model.
    """

    model_id: str
    workload_gops: float
    base_latency_ms: float
    artifact_digest: str
    artifact_size_bytes: int
    accel_utilization: float = 1.0

    def __post_init__(self):
        if not _as_str("model_id", self.model_id):
            raise ValidationError("model_id", "must be non-empty")
        _set(self, "workload_gops", _as_float("workload_gops", self.workload_gops, gt=0.0))
        _set(self, "base_latency_ms", _as_float("base_latency_ms", self.base_latency_ms, gt=0.0))
        digest = _as_str("artifact_digest", self.artifact_digest)
        if not SHA256_HEX_RE.fullmatch(digest):
            raise ValidationError("artifact_digest", "must be 64 lowercase hex chars")
        _as_int("artifact_size_bytes", self.artifact_size_bytes, gt=0)
        _set(self, "accel_utilization", _as_float("accel_utilization", self.accel_utilization, ge=0.0, le=1.0))


@dataclass(frozen=True)
class TelemetrySnapshot:
    """One timestamped sample of app + model + energy + network metrics.

    Immutable after construction; construction enforces every invariant, so a
    snapshot instance is always safe to encode and share between threads.
    """

    device: DeviceIdentity
    seq: int
    device_time_ms: int
    app: AppMetrics
    model: ModelMetrics
    energy: EnergyMetrics
    network: NetworkMetrics

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.device, DeviceIdentity):
            raise ValidationError("device", "must be a DeviceIdentity")
        _as_int("seq", self.seq, ge=0)
        _as_int("device_time_ms", self.device_time_ms, ge=0)
        for name, typ in (
            ("app", AppMetrics),
            ("model", ModelMetrics),
            ("energy", EnergyMetrics),
            ("network", NetworkMetrics),
        ):
            if not isinstance(getattr(self, name), typ):
                raise ValidationError(name, f"must be a {typ.__name__}")
        expected = self.app.fps / self.energy.power_w
        if not math.isclose(self.energy.fps_per_watt, expected, rel_tol=1e-9, abs_tol=1e-12):
            raise ValidationError(
                "fps_per_watt",
                f"{self.energy.fps_per_watt} != fps/power_w = {expected!r}",
            )


def model_efficiency(fps: float, workload_gops: float, peak_gops_per_s: float) -> float:
    """Fraction of the accelerator's peak compute the model actually achieves.

    Defined as achieved frames/s divided by the frame rate the accelerator
    could theoretically sustain (peak rate / per-frame workload).
    """
    if workload_gops <= 0:
        raise ValueError(f"workload_gops must be > 0, got {workload_gops}")
    if peak_gops_per_s <= 0:
        raise ValueError(f"peak_gops_per_s must be > 0, got {peak_gops_per_s}")
    if fps < 0:
        raise ValueError(f"fps must be >= 0, got {fps}")
    return fps * workload_gops / peak_gops_per_s


def fps_per_watt(fps: float, power_w: float) -> float:
    """Frames processed per second per watt of platform power."""
    if power_w <= 0:
        raise ValueError(f"power_w must be > 0, got {power_w}")
    if fps < 0:
        raise ValueError(f"fps must be >= 0, got {fps}")
    return fps / power_w


# --- canonical JSON encoding -------------------------------------------------

TOP_KEYS = ("device_id", "platform_kind", "seq", "device_time_ms", "app", "model", "energy", "network")
APP_KEYS = ("ee_latency_ms", "fps")
MODEL_KEYS = ("accel_utilization", "mem_throughput_gbps", "cpu_utilization", "mem_utilization", "model_efficiency", "model_id")
ENERGY_KEYS = ("power_w", "temp_c", "fps_per_watt")
NETWORK_KEYS = ("rssi_dbm", "rsrq_db", "rsrp_dbm", "modem_temp_c", "dl_mbps", "ul_mbps")

#: All dotted numeric paths a feedback rule may reference.
NUMERIC_PATHS = (
    ("seq",),
    ("device_time_ms",),
    *(("app", k) for k in APP_KEYS),
    *(("model", k) for k in MODEL_KEYS if k != "model_id"),
    *(("energy", k) for k in ENERGY_KEYS),
    *(("network", k) for k in NETWORK_KEYS),
)


def snapshot_to_wire(s: TelemetrySnapshot) -> dict:
    """Build the wire dict with keys in the documented order."""
    return {
        "device_id": s.device.device_id,
        "platform_kind": s.device.platform_kind.value,
        "seq": s.seq,
        "device_time_ms": s.device_time_ms,
        "app": {"ee_latency_ms": s.app.ee_latency_ms, "fps": s.app.fps},
        "model": {
            "accel_utilization": s.model.accel_utilization,
            "mem_throughput_gbps": s.model.mem_throughput_gbps,
            "cpu_utilization": s.model.cpu_utilization,
            "mem_utilization": s.model.mem_utilization,
            "model_efficiency": s.model.model_efficiency,
            "model_id": s.model.model_id,
        },
        "energy": {
            "power_w": s.energy.power_w,
            "temp_c": s.energy.temp_c,
            "fps_per_watt": s.energy.fps_per_watt,
        },
        "network": {
            "rssi_dbm": s.network.rssi_dbm,
            "rsrq_db": s.network.rsrq_db,
            "rsrp_dbm": s.network.rsrp_dbm,
            "modem_temp_c": s.network.modem_temp_c,
            "dl_mbps": s.network.dl_mbps,
            "ul_mbps": s.network.ul_mbps,
        },
    }


def encode_snapshot(s: TelemetrySnapshot) -> bytes:
    """Serialize a snapshot to canonical UTF-8 JSON bytes.

    Deterministic: fixed key order, compact separators, shortest round-trip
    decimal form for floats.  Re-validates before encoding so a snapshot
    mutated through non-public means is caught here.
    """
    s.validate()
    return json.dumps(snapshot_to_wire(s), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _check_keys(obj: dict, expected: tuple, where: str) -> None:
    present = set(obj)
    for key in expected:
        if key not in present:
            raise SchemaError(where + key, "missing field")
    for key in obj:
        if key not in expected:
            raise SchemaError(where + key, "unknown field")


def _as_object(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(where, "must be a JSON object")
    return value


def decode_snapshot(data) -> TelemetrySnapshot:
    """Parse and validate canonical snapshot bytes.

    Inverse of :func:`encode_snapshot` for all valid snapshots.  Rejects
    unknown keys, wrong types, and any invariant violation.
    """
    if isinstance(data, (bytes, bytearray, memoryview)):
        try:
            text = bytes(data).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError("invalid UTF-8", e.start) from None
    else:
        text = data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, len(text[: e.pos].encode("utf-8"))) from None
    return snapshot_from_wire(obj)


def snapshot_from_wire(obj) -> TelemetrySnapshot:
    """Validate an already-parsed wire document against the snapshot schema."""
    top = _as_object(obj, "$")
    _check_keys(top, TOP_KEYS, "")
    app = _as_object(top["app"], "app")
    _check_keys(app, APP_KEYS, "app.")
    model = _as_object(top["model"], "model")
    _check_keys(model, MODEL_KEYS, "model.")
    energy = _as_object(top["energy"], "energy")
    _check_keys(energy, ENERGY_KEYS, "energy.")
    network = _as_object(top["network"], "network")
    _check_keys(network, NETWORK_KEYS, "network.")

    return TelemetrySnapshot(
        device=DeviceIdentity(device_id=top["device_id"], platform_kind=top["platform_kind"]),
        seq=top["seq"],
        device_time_ms=top["device_time_ms"],
        app=AppMetrics(**app),
        model=ModelMetrics(**model),
        energy=EnergyMetrics(**energy),
        network=NetworkMetrics(**network),
    )
