"""Cloud-side service: ingest, enrichment, data lake, rules, dispatch, model store.

Snapshots arriving over either transport converge on one serialized ingest
path per service: decode, enrich with a server timestamp and a dense record
id, append to the lake, evaluate feedback rules, dispatch any fired actions.
Payloads that fail validation are preserved in a dead-letter file instead of
being persisted or silently dropped.

The lake is newline-delimited JSON partitioned as
``<root>/<device_id>/<yyyymmdd>.jsonl`` -- append-only, greppable, and
byte-reproducible when driven from a logical clock.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .agent import ActionKind, ActionMessage, ModelNotFound
from .bandwidth import BandwidthPredictor, Placement, PredictorConfig, decide_placement
from .bus import RequestRejected
from .telemetry import (
    NUMERIC_PATHS,
    TelemetryError,
    TelemetrySnapshot,
    decode_snapshot,
    snapshot_from_wire,
    snapshot_to_wire,
)

log = logging.getLogger(__name__)

__all__ = [
    "Transport",
    "LakeRecord",
    "LakeError",
    "Lake",
    "Comparator",
    "ActionTemplate",
    "Rule",
    "RuleState",
    "RuleConfigError",
    "Firing",
    "evaluate_rules",
    "initial_rule_state",
    "BandwidthRuleConfig",
    "RuleSet",
    "rules_from_dict",
    "IngestRejected",
    "DispatchDown",
    "CloudService",
    "ModelStore",
    "ModelStoreHttpServer",
]


class Transport(str, Enum):
    PUBSUB = "PubSub"
    HTTP = "Http"


@dataclass(frozen=True)
class LakeRecord:
    """A snapshot enriched with server-side ingest metadata."""

    snapshot: TelemetrySnapshot
    ingest_time_ms: int
    transport: Transport
    record_id: int


RECORD_KEYS = ("record_id", "ingest_time_ms", "transport", "snapshot")


def encode_record(rec: LakeRecord) -> bytes:
    doc = {
        "record_id": rec.record_id,
        "ingest_time_ms": rec.ingest_time_ms,
        "transport": rec.transport.value,
        "snapshot": snapshot_to_wire(rec.snapshot),
    }
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode_record(line: bytes) -> LakeRecord:
    doc = json.loads(line)
    if set(doc) != set(RECORD_KEYS):
        raise ValueError(f"unexpected record keys {sorted(doc)}")
    return LakeRecord(
        snapshot=snapshot_from_wire(doc["snapshot"]),
        ingest_time_ms=doc["ingest_time_ms"],
        transport=Transport(doc["transport"]),
        record_id=doc["record_id"],
    )


class LakeError(Exception):
    """Lake file unreadable or corrupted; carries the file path."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class Lake:
    """Append-only telemetry record store partitioned per device and day."""

    DEAD_LETTER_FILE = "dead_letter.jsonl"

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.torn_lines = 0
        self.dead_letters = 0

    def _partition(self, device_id: str, ingest_time_ms: int) -> Path:
        day = datetime.fromtimestamp(ingest_time_ms / 1000.0, tz=timezone.utc).strftime("%Y%m%d")
        directory = self.root / device_id
        directory.mkdir(parents=True, exist_ok=True)
        return directory / f"{day}.jsonl"

    def append(self, rec: LakeRecord) -> None:
        # One write per record keeps appends line-atomic on POSIX.
        line = encode_record(rec) + b"\n"
        path = self._partition(rec.snapshot.device.device_id, rec.ingest_time_ms)
        with open(path, "ab") as fh:
            fh.write(line)
            fh.flush()

    def dead_letter(self, ingest_time_ms: int, transport: Transport, error: str, payload: bytes) -> None:
        entry = {
            "ingest_time_ms": ingest_time_ms,
            "transport": transport.value,
            "error": error,
            "payload_hex": payload.hex(),
        }
        with open(self.root / self.DEAD_LETTER_FILE, "ab") as fh:
            fh.write(json.dumps(entry, separators=(",", ":")).encode("utf-8") + b"\n")
            fh.flush()
        self.dead_letters += 1

    def scan(self, device_id: str) -> list:
        """All records for a device in record_id (write) order."""
        directory = self.root / device_id
        if not directory.exists():
            return []
        records = []
        for path in sorted(directory.glob("*.jsonl")):
            try:
                data = path.read_bytes()
            except OSError as e:
                raise LakeError(path, f"unreadable: {e}") from e
            lines = data.split(b"\n")
            tail = lines.pop()
            if tail:
                self.torn_lines += 1
                log.warning("tolerating torn trailing record in %s", path)
            for lineno, line in enumerate(lines, start=1):
                try:
                    records.append(decode_record(line))
                except (ValueError, TelemetryError) as e:
                    raise LakeError(path, f"corrupt record at line {lineno}: {e}") from e
        return records

    def query(self, device_id: str, from_ms: int, to_ms: int) -> list:
        """Records with from_ms <= ingest_time_ms < to_ms, in record_id order."""
        return [r for r in self.scan(device_id) if from_ms <= r.ingest_time_ms < to_ms]

    def device_ids(self) -> list:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())


# --- feedback rules -----------------------------------------------------------


class Comparator(str, Enum):
    GT = "GT"
    LT = "LT"
    GE = "GE"
    LE = "LE"

    def holds(self, value: float, threshold: float) -> bool:
        if self is Comparator.GT:
            return value > threshold
        if self is Comparator.LT:
            return value < threshold
        if self is Comparator.GE:
            return value >= threshold
        return value <= threshold


class RuleConfigError(ValueError):
    pass


_PATH_SET = {".".join(p) for p in NUMERIC_PATHS}


def resolve_metric(snapshot: TelemetrySnapshot, path: str) -> float:
    parts = path.split(".")
    value = snapshot
    for part in parts:
        value = getattr(value, part)
    return value


@dataclass(frozen=True)
class ActionTemplate:
    """The command a rule emits when it fires; digest may be resolved at dispatch."""

    kind: ActionKind
    model_id: str | None = None
    expected_digest: str | None = None
    placement: Placement | None = None


@dataclass(frozen=True)
class Rule:
    rule_id: str
    metric_path: str
    comparator: Comparator
    threshold: float
    action: ActionTemplate
    cooldown_ticks: int = 3
    consecutive_required: int = 2

    def __post_init__(self):
        if not self.rule_id:
            raise RuleConfigError("rule_id must be non-empty")
        if self.metric_path not in _PATH_SET:
            raise RuleConfigError(
                f"rule {self.rule_id}: metric_path {self.metric_path!r} does not "
                f"resolve to a numeric snapshot field"
            )
        if self.cooldown_ticks < 1:
            raise RuleConfigError(f"rule {self.rule_id}: cooldown_ticks must be >= 1")
        if self.consecutive_required < 1:
            raise RuleConfigError(f"rule {self.rule_id}: consecutive_required must be >= 1")

    def predicate(self, snapshot: TelemetrySnapshot) -> bool:
        return self.comparator.holds(resolve_metric(snapshot, self.metric_path), self.threshold)


@dataclass(frozen=True)
class RuleState:
    """Per (device, rule) hysteresis counters."""

    consecutive_hits: int = 0
    ticks_since_fire: int = 0

    def __post_init__(self):
        if self.consecutive_hits < 0 or self.ticks_since_fire < 0:
            raise ValueError("rule-state counters must be non-negative")


def initial_rule_state(rule: Rule) -> RuleState:
    # Start with the cooldown already elapsed so the first qualifying streak fires.
    return RuleState(consecutive_hits=0, ticks_since_fire=rule.cooldown_ticks)


@dataclass(frozen=True)
class Firing:
    rule_id: str
    action: ActionTemplate


def evaluate_rules(snapshot: TelemetrySnapshot, rules, states) -> tuple:
    """Evaluate one snapshot against a rule set.

    Pure function of its inputs.  A rule fires when its predicate has held
    for ``consecutive_required`` consecutive snapshots of the device and at
    least ``cooldown_ticks`` snapshots have passed since it last fired.
    Returns (firings ordered by rule_id, new per-rule states).
    """
    firings = []
    new_states = {}
    for rule in sorted(rules, key=lambda r: r.rule_id):
        state = states.get(rule.rule_id)
        if state is None:
            state = initial_rule_state(rule)
        ticks_since_fire = state.ticks_since_fire + 1
        hits = state.consecutive_hits + 1 if rule.predicate(snapshot) else 0
        if hits >= rule.consecutive_required and ticks_since_fire >= rule.cooldown_ticks:
            firings.append(Firing(rule_id=rule.rule_id, action=rule.action))
            ticks_since_fire = 0
        new_states[rule.rule_id] = RuleState(consecutive_hits=hits, ticks_since_fire=ticks_since_fire)
    return firings, new_states


@dataclass(frozen=True)
class BandwidthRuleConfig:
    """Placement feedback driven by the bandwidth predictor.

    The device is sent to local inference when the predicted downlink rate
    stays below ``required_mbps`` for ``consecutive_required`` snapshots, and
    back to the edge when it clears ``required_mbps * reentry_margin`` the
    same way.  Inactive until the predictor window holds ``min_window``
    samples, so cold-start fallback predictions never flip placement.
    """

    rule_id: str = "r3-placement"
    required_mbps: float = 6.0
    reentry_margin: float = 1.25
    consecutive_required: int = 2
    predictor: PredictorConfig = field(default_factory=PredictorConfig)

    def __post_init__(self):
        if self.required_mbps <= 0:
            raise RuleConfigError("required_mbps must be > 0")
        if self.reentry_margin < 1.0:
            raise RuleConfigError("reentry_margin must be >= 1")
        if self.consecutive_required < 1:
            raise RuleConfigError("consecutive_required must be >= 1")


@dataclass(frozen=True)
class RuleSet:
    rules: tuple = ()
    bandwidth: BandwidthRuleConfig | None = None

    def __post_init__(self):
        ids = [r.rule_id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise RuleConfigError("duplicate rule_id in rule set")
        if self.bandwidth is not None and self.bandwidth.rule_id in ids:
            raise RuleConfigError("bandwidth rule_id collides with a threshold rule")


def _template_from_dict(d: dict, rule_id: str) -> ActionTemplate:
    try:
        kind = ActionKind(d["action"])
    except KeyError:
        raise RuleConfigError(f"rule {rule_id}: action requires an 'action' kind") from None
    except ValueError as e:
        raise RuleConfigError(f"rule {rule_id}: {e}") from None
    placement = Placement(d["placement"]) if "placement" in d else None
    if kind == ActionKind.SWAP_MODEL and not d.get("model_id"):
        raise RuleConfigError(f"rule {rule_id}: SwapModel action requires model_id")
    if kind == ActionKind.SET_PLACEMENT and placement is None:
        raise RuleConfigError(f"rule {rule_id}: SetPlacement action requires placement")
    return ActionTemplate(
        kind=kind,
        model_id=d.get("model_id"),
        expected_digest=d.get("expected_digest"),
        placement=placement,
    )


def rules_from_dict(doc: dict) -> RuleSet:
    """Load a rule set from parsed JSON config."""
    rules = []
    for rd in doc.get("rules", ()):
        try:
            rule = Rule(
                rule_id=rd["rule_id"],
                metric_path=rd["metric_path"],
                comparator=Comparator(rd["comparator"]),
                threshold=float(rd["threshold"]),
                action=_template_from_dict(rd["action"], rd.get("rule_id", "?")),
                cooldown_ticks=rd.get("cooldown_ticks", 3),
                consecutive_required=rd.get("consecutive_required", 2),
            )
        except KeyError as e:
            raise RuleConfigError(f"rule is missing field {e.args[0]!r}") from None
        except ValueError as e:
            raise RuleConfigError(str(e)) from None
        rules.append(rule)
    bandwidth = None
    if "bandwidth" in doc:
        bd = doc["bandwidth"]
        bandwidth = BandwidthRuleConfig(
            rule_id=bd.get("rule_id", "r3-placement"),
            required_mbps=bd.get("required_mbps", 6.0),
            reentry_margin=bd.get("reentry_margin", 1.25),
            consecutive_required=bd.get("consecutive_required", 2),
            predictor=PredictorConfig(
                window=bd.get("window", 30),
                ridge_lambda=bd.get("ridge_lambda", 1e-3),
                ewma_alpha=bd.get("ewma_alpha", 0.3),
                min_window=bd.get("min_window", 5),
            ),
        )
    return RuleSet(rules=tuple(rules), bandwidth=bandwidth)


# --- model store ----------------------------------------------------------------


class ModelStore:
    """Directory of model blobs with a digest manifest.

    Layout: ``<root>/<model_id>.bin`` plus ``<root>/manifest.json`` mapping
    model_id to {digest, size}.
    """

    MANIFEST = "manifest.json"

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / self.MANIFEST
        if not manifest_path.exists():
            raise FileNotFoundError(f"model store manifest not found: {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())

    @classmethod
    def create(cls, root, blobs: dict) -> "ModelStore":
        """Write blobs and a manifest with their true digests."""
        rootp = Path(root)
        rootp.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for model_id, blob in blobs.items():
            (rootp / f"{model_id}.bin").write_bytes(blob)
            manifest[model_id] = {"digest": hashlib.sha256(blob).hexdigest(), "size": len(blob)}
        (rootp / cls.MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return cls(rootp)

    def ids(self) -> list:
        return sorted(self.manifest)

    def digest(self, model_id: str) -> str:
        try:
            return self.manifest[model_id]["digest"]
        except KeyError:
            raise ModelNotFound(model_id) from None

    def get(self, model_id: str) -> tuple:
        """Returns (blob bytes, manifest digest); digest is a claim, not proof."""
        digest = self.digest(model_id)
        path = self.root / f"{model_id}.bin"
        if not path.exists():
            raise ModelNotFound(model_id)
        return path.read_bytes(), digest


class ModelStoreHttpServer:
    """Serves ``GET /models/<model_id>`` with the manifest digest in a header."""

    def __init__(self, store: ModelStore, host: str = "127.0.0.1", port: int = 0):
        outer_store = store

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                log.debug("model-store %s", fmt % args)

            def do_GET(self):
                if not self.path.startswith("/models/"):
                    self.send_response(404)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                model_id = self.path[len("/models/") :]
                try:
                    blob, digest = outer_store.get(model_id)
                except ModelNotFound:
                    self.send_response(404)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                self.send_response(200)
                self.send_header("Content-Type", "application/octet-stream")
                self.send_header("Content-Length", str(len(blob)))
                self.send_header("X-Model-Digest", digest)
                self.end_headers()
                self.wfile.write(blob)

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="model-store", daemon=True)

    def start(self) -> "ModelStoreHttpServer":
        self._thread.start()
        return self

    @property
    def address(self) -> tuple:
        return self._httpd.server_address[:2]

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


# --- the service ------------------------------------------------------------------


class IngestRejected(RequestRejected):
    """Payload failed decoding/validation; it was dead-lettered, not persisted."""


class DispatchDown(Exception):
    """Raised by a dispatcher when the action channel is unavailable."""


class _DeviceState:
    def __init__(self, bandwidth: BandwidthRuleConfig | None):
        self.rule_states: dict = {}
        self.last_ingest_ms = 0
        self.predictor = BandwidthPredictor(bandwidth.predictor) if bandwidth else None
        self.placement = Placement.EDGE
        self.switch_hits = 0


class CloudService:
    """Single ingest pipeline feeding the lake, the rules engine, and dispatch.

    ``dispatcher(device_id, ActionMessage)`` sends feedback; raising
    :class:`DispatchDown` drops the action (control actions are never
    replayed stale).  ``clock_ms`` defaults to the wall clock; scenario runs
    inject a logical clock for byte-exact replay.
    """

    def __init__(
        self,
        lake: Lake,
        rules: RuleSet | None = None,
        dispatcher=None,
        store: ModelStore | None = None,
        clock_ms=None,
        ingest_delay_fn=None,
    ):
        self.lake = lake
        self.rules = rules if rules is not None else RuleSet()
        self.store = store
        self._dispatcher = dispatcher
        self._clock_ms = clock_ms if clock_ms is not None else (lambda: int(time.time() * 1000))
        self._ingest_delay_fn = ingest_delay_fn
        self._lock = threading.Lock()
        self._devices: dict = {}
        self._record_id = 0
        self._action_seq = 0
        self.dispatched = 0
        self.dropped_dispatches = 0
        self.dispatch_log: list = []  # (device_id, ActionMessage)

    @property
    def dead_letters(self) -> int:
        return self.lake.dead_letters

    def _device(self, device_id: str) -> _DeviceState:
        state = self._devices.get(device_id)
        if state is None:
            state = _DeviceState(self.rules.bandwidth)
            self._devices[device_id] = state
        return state

    def ingest(self, payload: bytes, transport: Transport) -> LakeRecord:
        """Persist one snapshot and run the feedback loop for its device."""
        with self._lock:
            now = int(self._clock_ms())
            if self._ingest_delay_fn is not None:
                now += int(self._ingest_delay_fn())
            try:
                snapshot = decode_snapshot(payload)
            except TelemetryError as e:
                self.lake.dead_letter(now, transport, str(e), bytes(payload))
                raise IngestRejected(str(e)) from None
            device = self._device(snapshot.device.device_id)
            ingest_time = max(now, device.last_ingest_ms)  # per-device non-decreasing
            device.last_ingest_ms = ingest_time
            record = LakeRecord(
                snapshot=snapshot,
                ingest_time_ms=ingest_time,
                transport=transport,
                record_id=self._record_id,
            )
            self._record_id += 1
            self.lake.append(record)
            self._feedback(snapshot, device, ingest_time)
            return record

    def http_backend(self, payload: bytes) -> dict:
        """Adapter for :class:`edgetelem.bus.IngestHttpServer`."""
        rec = self.ingest(payload, Transport.HTTP)
        return {"record_id": rec.record_id, "ingest_time_ms": rec.ingest_time_ms}

    # -- feedback

    def _feedback(self, snapshot: TelemetrySnapshot, device: _DeviceState, now_ms: int) -> None:
        firings, device.rule_states = evaluate_rules(snapshot, self.rules.rules, device.rule_states)
        pending = [(f.rule_id, f.action) for f in firings]
        placement_firing = self._bandwidth_feedback(snapshot, device)
        if placement_firing is not None:
            pending.append(placement_firing)
            pending.sort(key=lambda item: item[0])
        for rule_id, template in pending:
            self._dispatch(snapshot.device.device_id, rule_id, template, now_ms)

    def _bandwidth_feedback(self, snapshot: TelemetrySnapshot, device: _DeviceState):
        cfg = self.rules.bandwidth
        if cfg is None or device.predictor is None:
            return None
        net = snapshot.network
        warm = len(device.predictor) >= cfg.predictor.min_window
        predicted = device.predictor.predict(net)
        device.predictor.update(net, net.dl_mbps)
        if not warm:
            return None
        target = decide_placement(predicted, cfg.required_mbps, device.placement, cfg.reentry_margin)
        if target == device.placement:
            device.switch_hits = 0
            return None
        device.switch_hits += 1
        if device.switch_hits < cfg.consecutive_required:
            return None
        device.placement = target
        device.switch_hits = 0
        return (cfg.rule_id, ActionTemplate(kind=ActionKind.SET_PLACEMENT, placement=target))

    def _dispatch(self, device_id: str, rule_id: str, template: ActionTemplate, now_ms: int) -> None:
        expected_digest = template.expected_digest
        if template.kind == ActionKind.SWAP_MODEL and expected_digest is None:
            if self.store is None:
                log.error("rule %s: no model store to resolve digest for %s", rule_id, template.model_id)
                self.dropped_dispatches += 1
                return
            try:
                expected_digest = self.store.digest(template.model_id)
            except ModelNotFound:
                log.error("rule %s: model %s not in store manifest", rule_id, template.model_id)
                self.dropped_dispatches += 1
                return
        message = ActionMessage(
            action=template.kind,
            rule_id=rule_id,
            issued_at_ms=now_ms,
            seq=self._action_seq,
            model_id=template.model_id,
            expected_digest=expected_digest,
            placement=template.placement,
        )
        self._action_seq += 1
        if self._dispatcher is None:
            self.dropped_dispatches += 1
            return
        try:
            self._dispatcher(device_id, message)
        except DispatchDown as e:
            log.warning("dropping action %s for %s: %s", message.action.value, device_id, e)
            self.dropped_dispatches += 1
            return
        self.dispatched += 1
        self.dispatch_log.append((device_id, message))


def make_bus_dispatcher(session):
    """Dispatcher publishing action JSON to ``actions/<device_id>``."""
    from .agent import encode_action
    from .bus import BusError

    def dispatch(device_id: str, message: ActionMessage) -> None:
        try:
            session.publish(f"actions/{device_id}", encode_action(message))
        except (BusError, OSError) as e:
            raise DispatchDown(str(e)) from e

    return dispatch
