"""Validation of sensor ingestion payloads.

Total by construction: any JSON object maps to either a validated reading
plus warnings, or a list of field-level errors. Nothing out of bounds ever
reaches the store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .timeseries import MEASUREMENT_FIELDS, SensorReading, parse_timestamp

REQUIRED_FIELDS = ("device_id", "captured_at") + MEASUREMENT_FIELDS

_BOUNDS_CHECKS = (
    ("humidity", lambda v: 0 <= v <= 100, "must be between 0 and 100"),
    ("co2", lambda v: v >= 0, "must be non-negative"),
    ("pm1_0", lambda v: v >= 0, "must be non-negative"),
    ("pm2_5", lambda v: v >= 0, "must be non-negative"),
    ("pm10", lambda v: v >= 0, "must be non-negative"),
    ("temperature", lambda v: -90 <= v <= 90, "must be between -90 and 90"),
)


@dataclass(frozen=True)
class IngestResult:
    stored_id: int
    warnings: tuple

    def to_dict(self) -> dict:
        return {"stored_id": self.stored_id, "warnings": list(self.warnings)}


class IngestValidationError(ValueError):
    """Carries one (field, message) pair per problem."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.errors))

    def to_dict(self) -> dict:
        return {"errors": [{"field": f, "message": m} for f, m in self.errors]}


def validate_sensor_payload(body) -> SensorReading:
    """Turn a decoded JSON body into a SensorReading or raise with every
    field-level problem found."""
    errors = []
    if not isinstance(body, dict):
        raise IngestValidationError([("body", "must be a JSON object")])

    for name in REQUIRED_FIELDS:
        if name not in body:
            errors.append((name, "is required"))
    if errors:
        raise IngestValidationError(errors)

    device_id = body["device_id"]
    if not isinstance(device_id, str) or not device_id.strip():
        errors.append(("device_id", "must be a non-empty string"))

    captured_at = None
    try:
        captured_at = parse_timestamp(body["captured_at"])
    except ValueError:
        errors.append(("captured_at", "must be an RFC 3339 timestamp or epoch seconds"))

    values = {}
    for name in MEASUREMENT_FIELDS:
        raw = body[name]
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or not math.isfinite(raw):
            errors.append((name, "must be a finite number"))
        else:
            values[name] = float(raw)

    for name, check, message in _BOUNDS_CHECKS:
        if name in values and not check(values[name]):
            errors.append((name, message))

    if errors:
        raise IngestValidationError(errors)
    return SensorReading.new(device_id=device_id.strip(), captured_at=captured_at, **values)


def ingest_reading(store, body) -> IngestResult:
    """Validate then insert; warnings mirror the reading's flags."""
    reading = validate_sensor_payload(body)
    stored_id = store.insert(reading)
    return IngestResult(stored_id=stored_id, warnings=tuple(sorted(reading.flags)))
