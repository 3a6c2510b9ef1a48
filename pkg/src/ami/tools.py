"""The tool suite behind the registry: data queries, issue reporting, and
profile management, plus the identity-enforcement layer.

Handlers never trust identity arguments: the acting user always comes from
the authenticated caller, and ``enforce_identity`` rewrites declared identity
parameters so the argument object a handler observes agrees with the session.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .mcp import ToolDefinition, ToolRegistry, ToolResult, UnknownToolError
from .timeseries import (
    JSON_SEPARATORS,
    MEASUREMENT_FIELDS,
    InvalidRangeError,
    ReadingStore,
    TimeRange,
    parse_timestamp,
    readings_payload,
)

ISSUE_STATUSES = ("open", "closed")

TOOL_RECENT = "get_recent_sensor_data"
TOOL_STATS = "get_sensor_stats"
TOOL_REPORT_ISSUE = "report_issue"
TOOL_UPDATE_PROFILE = "update_user_profile"


@dataclass(frozen=True)
class IssueTicket:
    """A reported problem; ids are dense and sequential from 1."""

    id: int
    reporter_user_id: str
    description: str
    status: str
    created_at: datetime

    def __post_init__(self):
        if self.id < 1:
            raise ValueError("ticket id must be positive")
        if not self.description:
            raise ValueError("description must be non-empty")
        if self.status not in ISSUE_STATUSES:
            raise ValueError(f"bad status: {self.status}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "reporter_user_id": self.reporter_user_id,
            "description": self.description,
            "status": self.status,
            "created_at": self.created_at.strftime("%Y-%m-%dT%H:%M:%SZ"),
        }


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    display_name: str = ""
    email: str = ""
    notification_threshold_pm2_5: Optional[float] = None

    def __post_init__(self):
        if not self.user_id:
            raise ValueError("user_id must be non-empty")
        if self.email and "@" not in self.email:
            raise ValueError("email must contain '@'")
        if self.notification_threshold_pm2_5 is not None and self.notification_threshold_pm2_5 < 0:
            raise ValueError("notification_threshold_pm2_5 must be non-negative")

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "display_name": self.display_name,
            "email": self.email,
            "notification_threshold_pm2_5": self.notification_threshold_pm2_5,
        }


class ProfileUpdateError(ValueError):
    """A rejected profile edit; the message is safe to surface to users."""


class IssueStore:
    """Tickets with atomic id allocation; optional append-log persistence."""

    def __init__(self, path=None, clock=None):
        self._lock = threading.Lock()
        self._tickets = []
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._fh = None
        if path is not None:
            p = Path(path)
            p.parent.mkdir(parents=True, exist_ok=True)
            if p.exists():
                with p.open("r", encoding="utf-8") as fh:
                    for line in fh:
                        line = line.strip()
                        if line:
                            self._tickets.append(_ticket_from_dict(json.loads(line)))
            self._fh = p.open("a", encoding="utf-8")

    def create(self, reporter_user_id: str, description: str) -> IssueTicket:
        description = description.strip()
        if not description:
            raise ValueError("description must be non-empty")
        with self._lock:
            ticket = IssueTicket(
                id=len(self._tickets) + 1,
                reporter_user_id=reporter_user_id,
                description=description,
                status="open",
                created_at=self._clock().replace(microsecond=0),
            )
            if self._fh is not None:
                self._fh.write(json.dumps(ticket.to_dict(), separators=JSON_SEPARATORS) + "\n")
                self._fh.flush()
            self._tickets.append(ticket)
            return ticket

    def list_for(self, user_id: str) -> list:
        with self._lock:
            return [t for t in self._tickets if t.reporter_user_id == user_id]

    def all(self) -> list:
        with self._lock:
            return list(self._tickets)

    def close(self):
        with self._lock:
            if self._fh is not None and not self._fh.closed:
                self._fh.close()


def _ticket_from_dict(data: dict) -> IssueTicket:
    return IssueTicket(
        id=data["id"],
        reporter_user_id=data["reporter_user_id"],
        description=data["description"],
        status=data["status"],
        created_at=parse_timestamp(data["created_at"]),
    )


class ProfileStore:
    """Per-user profiles; updates are last-writer-wins per field set.

    Persistence writes the full profile per update; replay keeps the last
    snapshot per user on top of the seeded defaults.
    """

    def __init__(self, path=None):
        self._lock = threading.Lock()
        self._profiles = {}
        self._fh = None
        if path is not None:
            p = Path(path)
            p.parent.mkdir(parents=True, exist_ok=True)
            if p.exists():
                with p.open("r", encoding="utf-8") as fh:
                    for line in fh:
                        line = line.strip()
                        if line:
                            data = json.loads(line)
                            self._profiles[data["user_id"]] = UserProfile(**data)
            self._fh = p.open("a", encoding="utf-8")

    def seed(self, profile: UserProfile) -> None:
        """Insert a default profile unless the user already has one."""
        with self._lock:
            self._profiles.setdefault(profile.user_id, profile)

    def known_users(self) -> set:
        with self._lock:
            return set(self._profiles)

    def get(self, user_id: str) -> UserProfile:
        with self._lock:
            return self._profiles[user_id]

    def update(self, user_id: str, *, display_name=None, email=None,
               notification_threshold_pm2_5=None) -> UserProfile:
        changes = {}
        if display_name is not None:
            if not isinstance(display_name, str):
                raise ProfileUpdateError("display_name must be a string")
            changes["display_name"] = display_name
        if email is not None:
            if not isinstance(email, str) or "@" not in email:
                raise ProfileUpdateError("email must contain '@'")
            changes["email"] = email
        if notification_threshold_pm2_5 is not None:
            if isinstance(notification_threshold_pm2_5, bool) or \
                    not isinstance(notification_threshold_pm2_5, (int, float)):
                raise ProfileUpdateError("notification_threshold_pm2_5 must be a number")
            if notification_threshold_pm2_5 < 0:
                raise ProfileUpdateError("notification_threshold_pm2_5 must be non-negative")
            changes["notification_threshold_pm2_5"] = float(notification_threshold_pm2_5)
        if not changes:
            raise ProfileUpdateError("no profile fields to update")
        with self._lock:
            current = self._profiles[user_id]
            updated = replace(current, **changes)
            self._profiles[user_id] = updated
            if self._fh is not None:
                self._fh.write(json.dumps(updated.to_dict(), separators=JSON_SEPARATORS) + "\n")
                self._fh.flush()
            return updated

    def close(self):
        with self._lock:
            if self._fh is not None and not self._fh.closed:
                self._fh.close()


def enforce_identity(registry: ToolRegistry, tool_name: str, args: dict, session_user: str) -> dict:
    """Rewrite every declared identity parameter to the session user.

    Pure: returns a fresh dict, leaves non-identity arguments untouched,
    and is idempotent. Raises UnknownToolError for unregistered tools.
    """
    definition = registry.get(tool_name)
    rewritten = dict(args)
    for param in definition.identity_params:
        rewritten[param] = session_user
    return rewritten


class AmiTools:
    """Handlers for the four backend tools, bound to the three stores."""

    def __init__(self, readings: ReadingStore, issues: IssueStore, profiles: ProfileStore):
        self.readings = readings
        self.issues = issues
        self.profiles = profiles

    def recent_sensor_data(self, args: dict, caller: str) -> ToolResult:
        limit = args.get("limit", 1)
        if not isinstance(limit, int) or isinstance(limit, bool) or not 1 <= limit <= 100:
            return _tool_error("limit must be an integer between 1 and 100")
        return ToolResult(content=readings_payload(self.readings.query_recent(limit)))

    def sensor_stats(self, args: dict, caller: str) -> ToolResult:
        try:
            start = parse_timestamp(args["start"])
        except ValueError:
            return _tool_error(f"start is not a valid timestamp: {args['start']!r}")
        try:
            end = parse_timestamp(args["end"])
        except ValueError:
            return _tool_error(f"end is not a valid timestamp: {args['end']!r}")
        field = args["field"]
        if field not in MEASUREMENT_FIELDS:
            return _tool_error(f"field must be one of: {', '.join(MEASUREMENT_FIELDS)}")
        try:
            window = TimeRange(start, end)
        except InvalidRangeError:
            return _tool_error("start must not be after end")
        stats = self.readings.aggregate(window, field)
        return ToolResult(content=stats.to_dict())

    def report_issue(self, args: dict, caller: str) -> ToolResult:
        description = args.get("description", "").strip()
        if not description:
            return _tool_error("description must be non-empty")
        ticket = self.issues.create(caller, description)
        return ToolResult(content={"id": ticket.id, "description": ticket.description,
                                   "status": ticket.status})

    def update_user_profile(self, args: dict, caller: str) -> ToolResult:
        fields = {k: args[k] for k in ("display_name", "email", "notification_threshold_pm2_5")
                  if k in args}
        if not fields:
            return _tool_error("no profile fields to update")
        try:
            profile = self.profiles.update(caller, **fields)
        except ProfileUpdateError as exc:
            return _tool_error(str(exc))
        except KeyError:
            return _tool_error(f"unknown user: {caller}")
        return ToolResult(content=profile.to_dict())

    def list_issues(self, caller: str) -> list:
        """Tickets reported by the caller, ascending id. Backs GET /api/issues."""
        return self.issues.list_for(caller)


def _tool_error(message: str) -> ToolResult:
    return ToolResult(content={"message": message}, is_error=True)


def build_registry(tools: AmiTools) -> ToolRegistry:
    """Register the four backend tools with their schemas and identity params."""
    registry = ToolRegistry()
    registry.register(
        ToolDefinition(
            name=TOOL_RECENT,
            description=(
                "Fetch the most recent air-quality readings, newest first. "
                "limit: how many readings to return (1-100, default 1)."
            ),
            parameters={
                "type": "object",
                "properties": {"limit": {"type": "integer"}},
                "required": [],
            },
        ),
        tools.recent_sensor_data,
    )
    registry.register(
        ToolDefinition(
            name=TOOL_STATS,
            description=(
                "Aggregate one measurement field over a time window: count, min, "
                "max, and mean. Fields: temperature, humidity, co2, pm1_0, pm2_5, "
                "pm10. Timestamps are RFC 3339 strings."
            ),
            parameters={
                "type": "object",
                "properties": {
                    "start": {"type": "string"},
                    "end": {"type": "string"},
                    "field": {"type": "string"},
                },
                "required": ["start", "end", "field"],
            },
        ),
        tools.sensor_stats,
    )
    registry.register(
        ToolDefinition(
            name=TOOL_REPORT_ISSUE,
            description="File an issue ticket describing a problem with the system or a sensor.",
            parameters={
                "type": "object",
                "properties": {
                    "description": {"type": "string"},
                    "user_id": {"type": "string"},
                },
                "required": ["description", "user_id"],
            },
            identity_params=("user_id",),
        ),
        tools.report_issue,
    )
    registry.register(
        ToolDefinition(
            name=TOOL_UPDATE_PROFILE,
            description=(
                "Update the logged-in user's profile. Any subset of display_name, "
                "email, and notification_threshold_pm2_5 may be provided."
            ),
            parameters={
                "type": "object",
                "properties": {
                    "user_id": {"type": "string"},
                    "display_name": {"type": "string"},
                    "email": {"type": "string"},
                    "notification_threshold_pm2_5": {"type": "number"},
                },
                "required": ["user_id"],
            },
            identity_params=("user_id",),
        ),
        tools.update_user_profile,
    )
    return registry
