"""Edge-side telemetry agent: samples the platform, publishes snapshots,
applies feedback actions received from the cloud.

The agent is a single sampling loop.  Incoming actions are enqueued by the
receive path and drained at tick boundaries, so every snapshot reflects one
consistent platform state and bounded runs replay deterministically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from http.client import HTTPConnection

from .bandwidth import DEFAULT_TRACE_CONFIG, NetTrace, Placement
from .simulator import Platform, builtin_profiles
from .telemetry import DeviceIdentity, SHA256_HEX_RE, TelemetrySnapshot, encode_snapshot

log = logging.getLogger(__name__)

__all__ = [
    "ActionKind",
    "ActionMessage",
    "ActionError",
    "ActionResult",
    "encode_action",
    "decode_action",
    "AgentConfig",
    "AgentReport",
    "PublishDown",
    "DirectPublisher",
    "BusPublisher",
    "ModelNotFound",
    "StoreUnavailable",
    "fetch_model",
    "TelemetryAgent",
]

SNAPSHOT_BUFFER_SIZE = 64
RECONNECT_BASE_S = 0.5
RECONNECT_CAP_S = 8.0

PLACEMENT_TAGS = {Placement.EDGE: "@edge", Placement.DEVICE: "@device"}


class ActionKind(str, Enum):
    STEP_FREQUENCY_DOWN = "StepFrequencyDown"
    STEP_FREQUENCY_UP = "StepFrequencyUp"
    SWAP_MODEL = "SwapModel"
    SET_PLACEMENT = "SetPlacement"


class ActionError(ValueError):
    """Malformed action message."""


@dataclass(frozen=True)
class ActionMessage:
    """A feedback command dispatched by the cloud to one device."""

    action: ActionKind
    rule_id: str
    issued_at_ms: int
    seq: int
    model_id: str | None = None
    expected_digest: str | None = None
    placement: Placement | None = None

    def __post_init__(self):
        if self.action == ActionKind.SWAP_MODEL:
            if not self.model_id:
                raise ActionError("SwapModel requires model_id")
            if not (self.expected_digest and SHA256_HEX_RE.fullmatch(self.expected_digest)):
                raise ActionError("SwapModel requires a 64-hex expected_digest")
        if self.action == ActionKind.SET_PLACEMENT and self.placement is None:
            raise ActionError("SetPlacement requires placement")


def encode_action(msg: ActionMessage) -> bytes:
    doc = {
        "action": msg.action.value,
        "rule_id": msg.rule_id,
        "issued_at_ms": msg.issued_at_ms,
        "seq": msg.seq,
    }
    if msg.model_id is not None:
        doc["model_id"] = msg.model_id
    if msg.expected_digest is not None:
        doc["expected_digest"] = msg.expected_digest
    if msg.placement is not None:
        doc["placement"] = msg.placement.value
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def decode_action(data: bytes) -> ActionMessage:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise ActionError(f"invalid action JSON: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ActionError("action message must be a JSON object")
    allowed = {"action", "rule_id", "issued_at_ms", "seq", "model_id", "expected_digest", "placement"}
    unknown = set(doc) - allowed
    if unknown:
        raise ActionError(f"unknown action field {sorted(unknown)[0]!r}")
    try:
        kind = ActionKind(doc["action"])
        placement = Placement(doc["placement"]) if "placement" in doc else None
        return ActionMessage(
            action=kind,
            rule_id=doc["rule_id"],
            issued_at_ms=doc["issued_at_ms"],
            seq=doc["seq"],
            model_id=doc.get("model_id"),
            expected_digest=doc.get("expected_digest"),
            placement=placement,
        )
    except KeyError as e:
        raise ActionError(f"missing action field {e.args[0]!r}") from None
    except ValueError as e:
        raise ActionError(str(e)) from None


@dataclass(frozen=True)
class ActionResult:
    message: ActionMessage
    applied: bool
    reason: str = ""

    REJECT_AT_BOUND = "at_bound"
    REJECT_INTEGRITY = "integrity"
    REJECT_NOT_FOUND = "not_found"
    REJECT_STORE_DOWN = "store_down"


@dataclass(frozen=True)
class AgentConfig:
    device: DeviceIdentity
    sample_period_ms: int = 1000
    broker_address: tuple | None = None
    model_store_address: tuple | None = None
    initial_model_id: str = "yolov3"
    max_ticks: int | None = None

    def __post_init__(self):
        if self.sample_period_ms < 10:
            raise ValueError("sample_period_ms must be >= 10")
        if self.max_ticks is not None and self.max_ticks <= 0:
            raise ValueError("max_ticks must be positive when set")


@dataclass
class AgentReport:
    ticks: int
    published: int
    dropped_snapshots: int
    actions_applied: int
    actions_rejected: int
    final_fps: float
    final_power_w: float
    final_model_id: str
    placement: str | None

    def to_dict(self) -> dict:
        return {
            "ticks": self.ticks,
            "published": self.published,
            "dropped_snapshots": self.dropped_snapshots,
            "actions_applied": self.actions_applied,
            "actions_rejected": self.actions_rejected,
            "final_fps": self.final_fps,
            "final_power_w": self.final_power_w,
            "final_model_id": self.final_model_id,
            "placement": self.placement,
        }


class PublishDown(Exception):
    """The publish path is currently unavailable; snapshot should be buffered."""


class DirectPublisher:
    """In-process publish path used by the scenario harness and tests."""

    def __init__(self, deliver):
        self._deliver = deliver
        self.down = False

    def publish(self, topic: str, payload: bytes) -> None:
        if self.down:
            raise PublishDown("publish path down (injected outage)")
        self._deliver(topic, payload)

    def close(self) -> None:
        pass


class BusPublisher:
    """Publish path over a broker session, reconnecting on demand.

    ``on_action(ActionMessage)`` is invoked from the session receive thread
    for every message on the device's action topic; a reconnect re-subscribes.
    """

    def __init__(self, broker_address: tuple, device_id: str, on_action=None, timeout: float = 5.0):
        from . import bus

        self._bus = bus
        self._address = broker_address
        self._device_id = device_id
        self._on_action = on_action
        self._timeout = timeout
        self._session = None

    def _handle_action(self, _topic: str, payload: bytes) -> None:
        if self._on_action is None:
            return
        try:
            self._on_action(decode_action(payload))
        except ActionError as e:
            log.warning("dropping malformed action for %s: %s", self._device_id, e)

    def _ensure_session(self):
        if self._session is not None and not self._session.closed:
            return self._session
        session = self._bus.connect(self._address, self._device_id, timeout=self._timeout)
        session.subscribe(f"actions/{self._device_id}", self._handle_action)
        self._session = session
        return session

    def publish(self, topic: str, payload: bytes) -> None:
        try:
            self._ensure_session().publish(topic, payload)
        except self._bus.BusError as e:
            raise PublishDown(str(e)) from e
        except OSError as e:
            raise PublishDown(str(e)) from e

    def close(self) -> None:
        if self._session is not None:
            self._session.close()
            self._session = None


class ModelNotFound(Exception):
    pass


class StoreUnavailable(Exception):
    pass


def fetch_model(store_address: tuple, model_id: str, timeout: float = 10.0) -> tuple:
    """Download a model blob; returns (blob, server-claimed digest).

    The caller is responsible for verifying the digest it expects against
    the actual blob bytes.
    """
    host, port = store_address
    try:
        conn = HTTPConnection(host, port, timeout=timeout)
        conn.request("GET", f"/models/{model_id}", headers={"Connection": "close"})
        resp = conn.getresponse()
        blob = resp.read()
        conn.close()
    except OSError as e:
        raise StoreUnavailable(f"model store unreachable: {e}") from e
    if resp.status == 404:
        raise ModelNotFound(model_id)
    if resp.status != 200:
        raise StoreUnavailable(f"model store returned {resp.status}")
    return blob, resp.headers.get("X-Model-Digest", "")


class TelemetryAgent:
    """The device-resident loop: advance, sample, publish, apply feedback.

    ``publisher`` provides publish(topic, bytes) raising :class:`PublishDown`
    on outage; ``fetch_fn(model_id) -> (blob, digest)`` resolves model
    downloads.  ``clock_ms`` paces reconnect backoff and stamps the action
    log; it defaults to the platform's simulated clock, which tracks wall
    time in a paced :meth:`run` loop and keeps bounded runs deterministic.
    """

    def __init__(
        self,
        cfg: AgentConfig,
        platform: Platform,
        publisher,
        fetch_fn=None,
        net_source: NetTrace | None = None,
        profiles: dict | None = None,
        clock_ms=None,
    ):
        self.cfg = cfg
        self.platform = platform
        self.publisher = publisher
        self.fetch_fn = fetch_fn
        self.net_source = net_source if net_source is not None else NetTrace(DEFAULT_TRACE_CONFIG)
        self.profiles = profiles if profiles is not None else builtin_profiles()
        self._clock_ms = clock_ms if clock_ms is not None else (lambda: platform.sim_time_ms)

        self.placement: Placement | None = None
        self.ticks = 0
        self.published = 0
        self.dropped_snapshots = 0
        self.action_log: list = []  # (time_ms, ActionResult)
        self._queue: deque = deque()
        self._qlock = threading.Lock()
        self._buffer: deque = deque(maxlen=SNAPSHOT_BUFFER_SIZE)
        self._backoff_s = 0.0
        self._retry_at_ms = float("-inf")
        self.topic = f"telemetry/{cfg.device.device_id}"

    # -- action intake (any thread)

    def enqueue_action(self, msg: ActionMessage) -> None:
        with self._qlock:
            self._queue.append(msg)

    # -- feedback actions

    def apply_action(self, msg: ActionMessage) -> ActionResult:
        """Apply one action; a rejected action leaves the platform untouched."""
        if msg.action in (ActionKind.STEP_FREQUENCY_DOWN, ActionKind.STEP_FREQUENCY_UP):
            step = -1 if msg.action == ActionKind.STEP_FREQUENCY_DOWN else 1
            target = self.platform.level.index + step
            if not 0 <= target < len(self.platform.config.levels):
                return ActionResult(msg, applied=False, reason=ActionResult.REJECT_AT_BOUND)
            self.platform.set_level(target)
            return ActionResult(msg, applied=True)

        if msg.action == ActionKind.SWAP_MODEL:
            profile = self.profiles.get(msg.model_id)
            if profile is None or self.fetch_fn is None:
                return ActionResult(msg, applied=False, reason=ActionResult.REJECT_NOT_FOUND)
            try:
                blob, _claimed = self.fetch_fn(msg.model_id)
            except ModelNotFound:
                return ActionResult(msg, applied=False, reason=ActionResult.REJECT_NOT_FOUND)
            except StoreUnavailable:
                return ActionResult(msg, applied=False, reason=ActionResult.REJECT_STORE_DOWN)
            if hashlib.sha256(blob).hexdigest() != msg.expected_digest:
                return ActionResult(msg, applied=False, reason=ActionResult.REJECT_INTEGRITY)
            self.platform.load_model(profile)
            return ActionResult(msg, applied=True)

        # SetPlacement: the decision is executed by tagging; inference stays
        # simulated on this platform either way.
        self.placement = msg.placement
        return ActionResult(msg, applied=True)

    def _drain_actions(self) -> None:
        while True:
            with self._qlock:
                if not self._queue:
                    return
                msg = self._queue.popleft()
            result = self.apply_action(msg)
            self.action_log.append((self._clock_ms(), result))
            if not result.applied:
                log.info("action %s rejected: %s", msg.action.value, result.reason)

    # -- snapshot publishing with outage buffering

    def _tag_placement(self, snapshot: TelemetrySnapshot) -> TelemetrySnapshot:
        if self.placement is None:
            return snapshot
        tagged = snapshot.model.model_id + PLACEMENT_TAGS[self.placement]
        return replace(snapshot, model=replace(snapshot.model, model_id=tagged))

    def _publish_or_buffer(self, payload: bytes) -> None:
        now = self._clock_ms()
        if now < self._retry_at_ms:
            self._buffer_snapshot(payload)
            return
        try:
            while self._buffer:
                self.publisher.publish(self.topic, self._buffer[0])
                self._buffer.popleft()
                self.published += 1
            self.publisher.publish(self.topic, payload)
            self.published += 1
            self._backoff_s = 0.0
        except PublishDown as e:
            self._buffer_snapshot(payload)
            self._backoff_s = min(RECONNECT_CAP_S, self._backoff_s * 2 if self._backoff_s else RECONNECT_BASE_S)
            self._retry_at_ms = now + self._backoff_s * 1000.0
            log.warning("publish down (%s); retry in %.1fs, %d buffered", e, self._backoff_s, len(self._buffer))

    def _buffer_snapshot(self, payload: bytes) -> None:
        if len(self._buffer) == self._buffer.maxlen:
            self.dropped_snapshots += 1  # deque drops the oldest on append
        self._buffer.append(payload)

    # -- the loop

    def tick(self) -> TelemetrySnapshot:
        """One sampling cycle: apply queued actions, advance, sample, publish."""
        self._drain_actions()
        self.platform.advance(self.cfg.sample_period_ms)
        net, _true_dl = self.net_source.tick()
        snapshot = self._tag_placement(self.platform.sample(self.cfg.device, net))
        self._publish_or_buffer(encode_snapshot(snapshot))
        self.ticks += 1
        return snapshot

    def run(self) -> AgentReport:
        """Wall-clock loop; bounded by ``max_ticks`` when configured."""
        period_s = self.cfg.sample_period_ms / 1000.0
        next_at = time.monotonic()
        try:
            while self.cfg.max_ticks is None or self.ticks < self.cfg.max_ticks:
                self.tick()
                next_at += period_s
                delay = next_at - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
        finally:
            self.publisher.close()
        return self.report()

    def report(self) -> AgentReport:
        applied = sum(1 for _, r in self.action_log if r.applied)
        rejected = len(self.action_log) - applied
        return AgentReport(
            ticks=self.ticks,
            published=self.published,
            dropped_snapshots=self.dropped_snapshots,
            actions_applied=applied,
            actions_rejected=rejected,
            final_fps=self.platform.fps(),
            final_power_w=self.platform.power_w(),
            final_model_id=self.platform.active_model.model_id,
            placement=self.placement.value if self.placement is not None else None,
        )
