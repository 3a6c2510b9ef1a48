"""Sensor reading storage: validated readings, range/recent/aggregate queries, CSV export.

Two store implementations share one query engine: an in-memory store for tests
and an append-log store (one JSON object per line) that replays the log on
startup. All queries run against a snapshot taken under the store lock, so
concurrent readers never observe a torn write.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional

MEASUREMENT_FIELDS = ("temperature", "humidity", "co2", "pm1_0", "pm2_5", "pm10")

PM_ORDERING_FLAG = "pm-ordering"

CSV_HEADER = "device_id,captured_at,temperature,humidity,co2,pm1_0,pm2_5,pm10"

JSON_SEPARATORS = (",", ":")


class StorageError(Exception):
    """Raised when the backing file cannot be read or written."""


class UnknownFieldError(ValueError):
    """Raised for aggregate queries over a field that is not a measurement."""


class InvalidRangeError(ValueError):
    """Raised when a time range has start > end."""


def utc_second(value: datetime) -> datetime:
    """Normalize a datetime to UTC at whole-second resolution."""
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc).replace(microsecond=0)


def parse_timestamp(value) -> datetime:
    """Parse an RFC 3339 string or epoch seconds into a UTC datetime.

    Raises ValueError for anything else.
    """
    if isinstance(value, bool):
        raise ValueError("timestamp must be a string or a number")
    if isinstance(value, (int, float)):
        if not math.isfinite(value):
            raise ValueError("timestamp is not finite")
        return datetime.fromtimestamp(int(value), tz=timezone.utc)
    if isinstance(value, str):
        text = value.strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        try:
            parsed = datetime.fromisoformat(text)
        except ValueError:
            raise ValueError(f"unparseable timestamp: {value!r}") from None
        return utc_second(parsed)
    raise ValueError("timestamp must be a string or a number")


def format_timestamp(value: datetime) -> str:
    """RFC 3339 with Z suffix, second resolution."""
    return utc_second(value).strftime("%Y-%m-%dT%H:%M:%SZ")


def format_measurement(value: float) -> str:
    """Up to 6 decimal places, no trailing zeros, no negative zero."""
    text = f"{value:.6f}".rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


@dataclass(frozen=True)
class SensorReading:
    """One validated air-quality measurement.

    Bounds: humidity in [0, 100], co2 >= 0, pm fields >= 0, temperature in
    [-90, 90]. ``flags`` carries "pm-ordering" exactly when the particulate
    fractions are not cumulative (pm1_0 <= pm2_5 <= pm10 violated).
    """

    device_id: str
    captured_at: datetime
    temperature: float
    humidity: float
    co2: float
    pm1_0: float
    pm2_5: float
    pm10: float
    flags: frozenset = frozenset()

    def __post_init__(self):
        if not self.device_id:
            raise ValueError("device_id must be non-empty")
        if not (0 <= self.humidity <= 100):
            raise ValueError("humidity must be between 0 and 100")
        if not self.co2 >= 0:
            raise ValueError("co2 must be non-negative")
        for name in ("pm1_0", "pm2_5", "pm10"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if not (-90 <= self.temperature <= 90):
            raise ValueError("temperature must be between -90 and 90")
        ordered = self.pm1_0 <= self.pm2_5 <= self.pm10
        if (PM_ORDERING_FLAG in self.flags) == ordered:
            raise ValueError("flags must carry pm-ordering exactly when the pm fields are unordered")

    @classmethod
    def new(cls, device_id: str, captured_at: datetime, temperature: float,
            humidity: float, co2: float, pm1_0: float, pm2_5: float, pm10: float) -> "SensorReading":
        """Build a reading, normalizing the timestamp and deriving flags."""
        flags = set()
        if not (pm1_0 <= pm2_5 <= pm10):
            flags.add(PM_ORDERING_FLAG)
        return cls(
            device_id=device_id,
            captured_at=utc_second(captured_at),
            temperature=float(temperature),
            humidity=float(humidity),
            co2=float(co2),
            pm1_0=float(pm1_0),
            pm2_5=float(pm2_5),
            pm10=float(pm10),
            flags=frozenset(flags),
        )

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "captured_at": format_timestamp(self.captured_at),
            "temperature": self.temperature,
            "humidity": self.humidity,
            "co2": self.co2,
            "pm1_0": self.pm1_0,
            "pm2_5": self.pm2_5,
            "pm10": self.pm10,
            "flags": sorted(self.flags),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SensorReading":
        return cls.new(
            device_id=data["device_id"],
            captured_at=parse_timestamp(data["captured_at"]),
            temperature=data["temperature"],
            humidity=data["humidity"],
            co2=data["co2"],
            pm1_0=data["pm1_0"],
            pm2_5=data["pm2_5"],
            pm10=data["pm10"],
        )


@dataclass(frozen=True)
class TimeRange:
    """Inclusive UTC time range; start must not be after end."""

    start: datetime
    end: datetime

    def __post_init__(self):
        object.__setattr__(self, "start", _as_utc(self.start))
        object.__setattr__(self, "end", _as_utc(self.end))
        if self.start > self.end:
            raise InvalidRangeError("range start must not be after end")

    def contains(self, moment: datetime) -> bool:
        return self.start <= moment <= self.end


def _as_utc(value: datetime) -> datetime:
    if value.tzinfo is None:
        return value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc)


FULL_RANGE = TimeRange(
    datetime(1, 1, 1, tzinfo=timezone.utc),
    datetime(9999, 12, 31, 23, 59, 59, tzinfo=timezone.utc),
)


@dataclass(frozen=True)
class AggregateStats:
    """Min/max/mean summary of one measurement field over a range."""

    field_name: str
    count: int
    min: Optional[float] = None
    max: Optional[float] = None
    mean: Optional[float] = None

    def __post_init__(self):
        if self.count == 0:
            if not (self.min is None and self.max is None and self.mean is None):
                raise ValueError("empty aggregate must not carry stats")
        else:
            if None in (self.min, self.max, self.mean):
                raise ValueError("non-empty aggregate must carry min/max/mean")
            if not (self.min <= self.mean <= self.max):
                raise ValueError("mean must lie within [min, max]")

    def to_dict(self) -> dict:
        payload = {"field": self.field_name, "count": self.count}
        if self.count > 0:
            payload.update({"min": self.min, "max": self.max, "mean": self.mean})
        return payload


def readings_payload(readings: Iterable[SensorReading]) -> dict:
    """The canonical JSON-facing shape for a list of readings."""
    return {"readings": [r.to_dict() for r in readings]}


class ReadingStore:
    """Store contract: monotone-id insert plus snapshot-consistent queries."""

    def insert(self, reading: SensorReading) -> int:
        raise NotImplementedError

    def _snapshot(self) -> list:
        """Return [(stored_id, reading), ...] in insertion order."""
        raise NotImplementedError

    def close(self):
        pass

    def __len__(self) -> int:
        return len(self._snapshot())

    def get(self, stored_id: int) -> SensorReading:
        for sid, reading in self._snapshot():
            if sid == stored_id:
                return reading
        raise KeyError(stored_id)

    def query_recent(self, limit: int) -> list:
        if limit < 1:
            raise ValueError("limit must be at least 1")
        rows = self._snapshot()
        rows.sort(key=lambda row: (row[1].captured_at, row[0]), reverse=True)
        return [reading for _, reading in rows[:limit]]

    def query_range(self, rng: TimeRange) -> list:
        rows = [row for row in self._snapshot() if rng.contains(row[1].captured_at)]
        rows.sort(key=lambda row: (row[1].captured_at, row[0]))
        return [reading for _, reading in rows]

    def aggregate(self, rng: TimeRange, field_name: str) -> AggregateStats:
        if field_name not in MEASUREMENT_FIELDS:
            raise UnknownFieldError(f"unknown field: {field_name}")
        values = [getattr(r, field_name) for r in self.query_range(rng)]
        if not values:
            return AggregateStats(field_name=field_name, count=0)
        mean = math.fsum(values) / len(values)
        # fsum can land a hair outside [min, max] on equal values; clamp.
        mean = min(max(mean, min(values)), max(values))
        return AggregateStats(
            field_name=field_name,
            count=len(values),
            min=min(values),
            max=max(values),
            mean=mean,
        )

    def export_csv(self, rng: TimeRange) -> bytes:
        lines = [CSV_HEADER]
        for r in self.query_range(rng):
            lines.append(",".join([
                _csv_escape(r.device_id),
                format_timestamp(r.captured_at),
                format_measurement(r.temperature),
                format_measurement(r.humidity),
                format_measurement(r.co2),
                format_measurement(r.pm1_0),
                format_measurement(r.pm2_5),
                format_measurement(r.pm10),
            ]))
        return ("\n".join(lines) + "\n").encode("utf-8")


def _csv_escape(text: str) -> str:
    if any(ch in text for ch in ',"\n\r'):
        return '"' + text.replace('"', '""') + '"'
    return text


class MemoryReadingStore(ReadingStore):
    """In-memory store; the reference implementation for tests."""

    def __init__(self):
        self._lock = threading.Lock()
        self._rows = []

    def insert(self, reading: SensorReading) -> int:
        with self._lock:
            stored_id = len(self._rows) + 1
            self._rows.append((stored_id, reading))
            return stored_id

    def _snapshot(self) -> list:
        with self._lock:
            return list(self._rows)


class AppendLogReadingStore(ReadingStore):
    """Single-file append log with startup replay.

    Format: one compact JSON object per line, keys exactly the SensorReading
    field names. Replay order defines the stored ids (1..n).
    """

    def __init__(self, path):
        self._path = Path(path)
        self._lock = threading.Lock()
        self._rows = []
        self._path.parent.mkdir(parents=True, exist_ok=True)
        if self._path.exists():
            self._replay()
        try:
            self._fh = self._path.open("a", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot open {self._path}: {exc}") from exc

    def _replay(self):
        try:
            with self._path.open("r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        reading = SensorReading.from_dict(json.loads(line))
                    except (ValueError, KeyError) as exc:
                        raise StorageError(f"{self._path}:{lineno}: bad log record: {exc}") from exc
                    self._rows.append((len(self._rows) + 1, reading))
        except OSError as exc:
            raise StorageError(f"cannot read {self._path}: {exc}") from exc

    def insert(self, reading: SensorReading) -> int:
        with self._lock:
            line = json.dumps(reading.to_dict(), separators=JSON_SEPARATORS)
            try:
                self._fh.write(line + "\n")
                self._fh.flush()
            except (OSError, ValueError) as exc:
                raise StorageError(f"cannot append to {self._path}: {exc}") from exc
            stored_id = len(self._rows) + 1
            self._rows.append((stored_id, reading))
            return stored_id

    def _snapshot(self) -> list:
        with self._lock:
            return list(self._rows)

    def close(self):
        with self._lock:
            if not self._fh.closed:
                self._fh.close()
