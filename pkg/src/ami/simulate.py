"""Synthetic sensor traffic: posts daily-cycle readings to the ingestion
endpoint. With a seed, timestamps start from a fixed epoch and the payload
sequence is fully reproducible."""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone

import httpx

from .timeseries import format_timestamp

SEEDED_BASE = datetime(2025, 1, 1, tzinfo=timezone.utc)

TWO_PI = 2 * math.pi


@dataclass
class SimulationReport:
    posted: int = 0
    failed: int = 0
    errors: list = field(default_factory=list)

    @property
    def failure_rate(self) -> float:
        total = self.posted + self.failed
        return self.failed / total if total else 0.0


def generate_payloads(devices: int, interval: float, rounds: int, seed=None):
    """The deterministic payload sequence: rounds x devices readings."""
    rng = random.Random(seed)
    base = SEEDED_BASE if seed is not None else datetime.now(timezone.utc)
    payloads = []
    for step in range(rounds):
        captured = base.timestamp() + step * interval
        hour = (captured % 86400.0) / 3600.0
        stamp = format_timestamp(datetime.fromtimestamp(int(captured), tz=timezone.utc))
        for device in range(devices):
            temperature = 21.0 + 4.0 * math.sin(TWO_PI * hour / 24.0) + rng.gauss(0.0, 0.3)
            humidity = 45.0 + 10.0 * math.sin(TWO_PI * hour / 24.0 + math.pi / 3.0)
            humidity = min(100.0, max(0.0, humidity))
            co2 = max(400.0, 500.0 + rng.gauss(0.0, 40.0))
            # Cumulative positive increments keep pm1_0 <= pm2_5 <= pm10.
            pm1_0 = rng.uniform(0.5, 6.0)
            pm2_5 = pm1_0 + rng.uniform(0.2, 8.0)
            pm10 = pm2_5 + rng.uniform(0.2, 12.0)
            payloads.append({
                "device_id": f"sim-{device + 1}",
                "captured_at": stamp,
                "temperature": round(temperature, 2),
                "humidity": round(humidity, 2),
                "co2": round(co2, 1),
                "pm1_0": round(pm1_0, 2),
                "pm2_5": round(pm2_5, 2),
                "pm10": round(pm10, 2),
            })
    return payloads


def run_simulation(target_url: str, devices: int, interval: float, duration: float,
                   seed=None, device_key=None, sleeper=time.sleep,
                   client=None) -> SimulationReport:
    """Post one reading per device every interval seconds for the duration."""
    rounds = max(1, int(duration / interval + 1e-9))
    payloads = generate_payloads(devices, interval, rounds, seed)
    endpoint = target_url.rstrip("/") + "/sensor_data/"
    headers = {"X-Device-Key": device_key} if device_key else {}
    report = SimulationReport()
    owns_client = client is None
    client = client or httpx.Client(timeout=10.0)
    try:
        for index, payload in enumerate(payloads):
            if index and index % devices == 0:
                sleeper(interval)
            try:
                response = client.post(endpoint, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                report.failed += 1
                report.errors.append(f"{payload['device_id']}@{payload['captured_at']}: {exc}")
                continue
            if response.status_code == 201:
                report.posted += 1
            else:
                report.failed += 1
                report.errors.append(
                    f"{payload['device_id']}@{payload['captured_at']}: "
                    f"HTTP {response.status_code} {response.text[:120]}")
    finally:
        if owns_client:
            client.close()
    return report
