import sys
from datetime import datetime, timedelta, timezone
from pathlib import Path

import httpx
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ami.mcp import McpServer, ToolDefinition, ToolRegistry, ToolResult
from ami.timeseries import MemoryReadingStore, SensorReading
from ami.tools import AmiTools, IssueStore, ProfileStore, UserProfile, build_registry

BASE_TIME = datetime(2025, 1, 1, tzinfo=timezone.utc)


def seed_reading(offset_s=0, device_id="s1", **overrides):
    fields = dict(temperature=21.5, humidity=40.0, co2=600.0, pm1_0=3.0, pm2_5=8.0, pm10=12.0)
    fields.update(overrides)
    return SensorReading.new(device_id=device_id,
                             captured_at=BASE_TIME + timedelta(seconds=offset_s), **fields)


def _probe_handler(args, caller):
    if args.get("mode") == "b":
        raise RuntimeError("probe exploded")
    return ToolResult(content={"mode": args.get("mode"), "caller": caller})


PROBE_TOOL = ToolDefinition(
    name="probe",
    description="Synthetic tool exercising the schema subset.",
    parameters={
        "type": "object",
        "properties": {
            "mode": {"type": "string", "enum": ["a", "b"]},
            "level": {"type": "integer", "minimum": 1, "maximum": 10},
            "note": {"type": "string"},
        },
        "required": ["mode"],
    },
)


class Backend:
    """In-memory wiring of stores + tools + registry used across suites."""

    def __init__(self, users=("alice", "bob")):
        self.readings = MemoryReadingStore()
        self.issues = IssueStore(clock=lambda: BASE_TIME)
        self.profiles = ProfileStore()
        for user in users:
            self.profiles.seed(UserProfile(user_id=user, display_name=user.title(),
                                           email=f"{user}@example.com"))
        self.tools = AmiTools(self.readings, self.issues, self.profiles)
        self.registry = build_registry(self.tools)
        self.mcp = McpServer(self.registry)

    def with_probe(self):
        self.registry.register(PROBE_TOOL, _probe_handler)
        return self


def app_client(app, base="http://ami.test") -> httpx.Client:
    """An httpx client routed straight into AmiApp.handle (no sockets)."""

    def route(request: httpx.Request) -> httpx.Response:
        target = request.url.raw_path.decode()
        response = app.handle(request.method, target, dict(request.headers),
                              request.content)
        return httpx.Response(status_code=response.status, content=response.body,
                              headers=response.headers)

    return httpx.Client(transport=httpx.MockTransport(route), base_url=base)


@pytest.fixture
def backend():
    return Backend()


@pytest.fixture
def conformance_backend():
    b = Backend().with_probe()
    b.readings.insert(seed_reading())
    return b


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    marker = "PASS" if report.passed else "FAIL"
    sys.stderr.write(f"[acceptance] {marker} {name}\n")
