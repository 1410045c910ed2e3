"""Desk-scale edge AI telemetry pipeline.

A simulated FPGA-class edge platform streams typed telemetry snapshots over a
minimal pub/sub protocol (or an HTTP ingest path) to a cloud-side service that
persists them to an append-only lake, evaluates feedback rules, and sends
control actions (frequency scaling, model swap, inference placement) back to
the edge.
"""

__version__ = "0.1.0"

from .telemetry import (  # noqa: F401
    DeviceIdentity,
    ModelProfile,
    TelemetrySnapshot,
    decode_snapshot,
    encode_snapshot,
    fps_per_watt,
    model_efficiency,
)
