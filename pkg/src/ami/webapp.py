"""The HTTP surface: sensor ingestion, session auth, dashboard REST routes,
the chat endpoint, the tool server's HTTP transport, and static assets.

``AmiApp.handle`` is a pure request-to-response function so the whole surface
is testable in-process; ``AmiHttpServer`` adapts it onto a threading HTTP
server. Read endpoints are thin wrappers: they serialize the underlying core
operation's result exactly once, so their bytes match the core by
construction.
"""

from __future__ import annotations

import hmac
import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlsplit

from .agent import (
    AgentLoopExceededError,
    ConversationStore,
    Orchestrator,
    PlannerUnreachableError,
    RemotePlanner,
    ScriptedPlanner,
)
from .auth import SessionManager, UserStore, bearer_token
from .config import Config, ConfigError
from .ingest import IngestValidationError, ingest_reading
from .mcp import McpServer
from .openapi import openapi_json_bytes, registry_to_openapi
from .timeseries import (
    FULL_RANGE,
    AppendLogReadingStore,
    InvalidRangeError,
    MemoryReadingStore,
    TimeRange,
    UnknownFieldError,
    parse_timestamp,
    readings_payload,
)
from .tools import AmiTools, IssueStore, ProfileStore, UserProfile, build_registry

JSON_SEPARATORS = (",", ":")

STATIC_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
    ".map": "application/json",
    ".txt": "text/plain; charset=utf-8",
}


@dataclass
class Response:
    status: int
    body: bytes = b""
    headers: dict = field(default_factory=dict)


def json_response(status: int, payload) -> Response:
    body = json.dumps(payload, separators=JSON_SEPARATORS).encode("utf-8")
    return Response(status, body, {"Content-Type": "application/json"})


def error_response(status: int, message: str) -> Response:
    return json_response(status, {"error": message})


class AmiApp:
    """Routes requests to the stores, tool server, and orchestrator."""

    def __init__(self, *, readings, issues, profiles, conversations, users,
                 sessions, registry, mcp, orchestrator, planner,
                 device_key=None, static_dir=None):
        self.readings = readings
        self.issues = issues
        self.profiles = profiles
        self.conversations = conversations
        self.users = users
        self.sessions = sessions
        self.registry = registry
        self.mcp = mcp
        self.orchestrator = orchestrator
        self.planner = planner
        self.device_key = device_key
        self.static_dir = Path(static_dir).resolve() if static_dir else None
        self._tools = AmiTools(readings, issues, profiles)
        self._chat_locks = {}
        self._chat_locks_guard = threading.Lock()

    # -- plumbing ---------------------------------------------------------

    def handle(self, method: str, target: str, headers: dict, body: bytes) -> Response:
        parts = urlsplit(target)
        path = parts.path
        query = {k: v[-1] for k, v in parse_qs(parts.query).items()}
        try:
            return self._route(method, path, query, headers, body)
        except Exception as exc:  # pragma: no cover - last-resort guard
            return error_response(500, f"internal error: {type(exc).__name__}")

    def _route(self, method, path, query, headers, body) -> Response:
        if path in ("/sensor_data", "/sensor_data/"):
            if method != "POST":
                return error_response(405, "method not allowed")
            return self._post_sensor_data(headers, body)
        if path == "/api/login":
            if method != "POST":
                return error_response(405, "method not allowed")
            return self._login(headers, body)
        if path == "/api/openapi.json":
            if method != "GET":
                return error_response(405, "method not allowed")
            document = registry_to_openapi(self.registry.definitions())
            return Response(200, openapi_json_bytes(document),
                            {"Content-Type": "application/json"})

        if path == "/mcp":
            if method != "POST":
                return error_response(405, "method not allowed")
            session = self.sessions.resolve(bearer_token(headers))
            if session is None:
                return error_response(401, "unauthorized")
            return self._mcp(session.user_id, body)

        if path.startswith("/api/"):
            session = self.sessions.resolve(bearer_token(headers))
            if session is None:
                return error_response(401, "unauthorized")
            return self._api(method, path, query, body, session.user_id)

        if method == "GET":
            return self._static(path)
        return error_response(404, "not found")

    # -- ingestion --------------------------------------------------------

    def _post_sensor_data(self, headers, body) -> Response:
        if self.device_key:
            provided = _header(headers, "x-device-key") or ""
            if not hmac.compare_digest(provided.encode(), self.device_key.encode()):
                return error_response(401, "bad device key")
        content_type = (_header(headers, "content-type") or "").split(";")[0].strip().lower()
        if content_type and content_type != "application/json" and not content_type.endswith("+json"):
            return error_response(415, "expected application/json")
        try:
            payload = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return error_response(415, "body is not valid JSON")
        try:
            result = ingest_reading(self.readings, payload)
        except IngestValidationError as exc:
            return json_response(400, exc.to_dict())
        return json_response(201, result.to_dict())

    # -- auth & chat ------------------------------------------------------

    def _login(self, headers, body) -> Response:
        payload = _json_object(body)
        if payload is None:
            return error_response(400, "expected a JSON object")
        username = payload.get("username")
        password = payload.get("password")
        if not isinstance(username, str) or not isinstance(password, str):
            return error_response(400, "username and password are required")
        if not self.users.check(username, password):
            return error_response(401, "bad credentials")
        session = self.sessions.create(username)
        return json_response(200, {
            "token": session.token,
            "user_id": session.user_id,
            "expires_at": session.expires_at.strftime("%Y-%m-%dT%H:%M:%SZ"),
        })

    def _chat(self, user_id: str, body) -> Response:
        payload = _json_object(body)
        if payload is None:
            return error_response(400, "expected a JSON object")
        message = payload.get("message")
        if not isinstance(message, str) or not message.strip():
            return error_response(400, "message must be a non-empty string")
        with self._chat_lock(user_id):
            conversation = self.conversations.get_or_create(
                user_id, self.orchestrator.build_system_prompt(user_id))
            mark = len(conversation.messages)
            try:
                reply, audit = self.orchestrator.run_turn(conversation, message, self.planner)
            except AgentLoopExceededError:
                self.conversations.record(user_id, conversation.messages[mark:])
                return error_response(409, "agent-loop-exceeded")
            except PlannerUnreachableError:
                self.conversations.record(user_id, conversation.messages[mark:])
                return error_response(502, "planner-unreachable")
            self.conversations.record(user_id, conversation.messages[mark:])
        return json_response(200, {
            "reply": reply,
            "tool_calls": [
                {"id": call.id, "tool_name": call.tool_name, "args": call.args,
                 "result": result["content"], "is_error": result["is_error"]}
                for call, result in audit
            ],
        })

    def _chat_lock(self, user_id: str) -> threading.Lock:
        with self._chat_locks_guard:
            lock = self._chat_locks.get(user_id)
            if lock is None:
                lock = self._chat_locks[user_id] = threading.Lock()
            return lock

    # -- REST wrappers ----------------------------------------------------

    def _api(self, method, path, query, body, user_id) -> Response:
        if path == "/api/chat" and method == "POST":
            return self._chat(user_id, body)
        if path == "/api/readings/recent" and method == "GET":
            limit_text = query.get("limit", "10")
            try:
                limit = int(limit_text)
                if limit < 1:
                    raise ValueError
            except ValueError:
                return error_response(400, "limit must be a positive integer")
            return json_response(200, readings_payload(self.readings.query_recent(limit)))
        if path == "/api/readings/range" and method == "GET":
            window, problem = self._window_from(query, required=True)
            if problem:
                return problem
            return json_response(200, readings_payload(self.readings.query_range(window)))
        if path == "/api/readings/aggregate" and method == "GET":
            window, problem = self._window_from(query, required=True)
            if problem:
                return problem
            field_name = query.get("field", "")
            try:
                stats = self.readings.aggregate(window, field_name)
            except UnknownFieldError as exc:
                return error_response(400, str(exc))
            return json_response(200, stats.to_dict())
        if path == "/api/export.csv" and method == "GET":
            window, problem = self._window_from(query, required=False)
            if problem:
                return problem
            return Response(200, self.readings.export_csv(window), {
                "Content-Type": "text/csv; charset=utf-8",
                "Content-Disposition": 'attachment; filename="export.csv"',
            })
        if path == "/api/issues" and method == "GET":
            tickets = self._tools.list_issues(user_id)
            return json_response(200, {"issues": [t.to_dict() for t in tickets]})
        if path == "/api/profile":
            if method == "GET":
                return json_response(200, self.profiles.get(user_id).to_dict())
            if method == "PUT":
                return self._put_profile(user_id, body)
        return error_response(404, "not found")

    def _put_profile(self, user_id, body) -> Response:
        payload = _json_object(body)
        if payload is None:
            return error_response(400, "expected a JSON object")
        # Identity in the body is ignored: updates apply to the session user.
        args = {k: payload[k] for k in
                ("display_name", "email", "notification_threshold_pm2_5") if k in payload}
        args["user_id"] = user_id
        result = self.registry.call("update_user_profile", args, user_id)
        if result.is_error:
            return json_response(400, result.content)
        return json_response(200, result.content)

    def _window_from(self, query, required: bool):
        start_text, end_text = query.get("start"), query.get("end")
        if not required and start_text is None and end_text is None:
            return FULL_RANGE, None
        if start_text is None or end_text is None:
            return None, error_response(400, "start and end are required")
        try:
            start = parse_timestamp(start_text)
        except ValueError:
            return None, error_response(400, "start is not a valid timestamp")
        try:
            end = parse_timestamp(end_text)
        except ValueError:
            return None, error_response(400, "end is not a valid timestamp")
        try:
            return TimeRange(start, end), None
        except InvalidRangeError:
            return None, error_response(400, "start must not be after end")

    # -- tool server transport --------------------------------------------

    def _mcp(self, caller: str, body: bytes) -> Response:
        response = self.mcp.handle_message(body, caller)
        if response is None:
            return Response(202, b"", {"Content-Type": "application/json"})
        status = 400 if self.mcp.is_transport_error(response) else 200
        return Response(status, response, {"Content-Type": "application/json"})

    # -- static assets ----------------------------------------------------

    def _static(self, path: str) -> Response:
        if self.static_dir is None:
            return error_response(404, "not found")
        relative = path.lstrip("/") or "index.html"
        candidate = (self.static_dir / relative).resolve()
        if not str(candidate).startswith(str(self.static_dir)) or not candidate.is_file():
            return error_response(404, "not found")
        content_type = STATIC_TYPES.get(candidate.suffix, "application/octet-stream")
        return Response(200, candidate.read_bytes(), {"Content-Type": content_type})

    def close(self):
        for store in (self.readings, self.issues, self.profiles, self.conversations):
            close = getattr(store, "close", None)
            if close:
                close()


def _header(headers: dict, name: str):
    for key, value in headers.items():
        if key.lower() == name:
            return value
    return None


def _json_object(body: bytes):
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return None
    return payload if isinstance(payload, dict) else None


def build_app(config: Config, planner=None, session_clock=None) -> AmiApp:
    """Wire stores, tool registry, and planner from a Config."""
    if config.data_dir:
        data = Path(config.data_dir)
        data.mkdir(parents=True, exist_ok=True)
        readings = AppendLogReadingStore(data / "readings.log")
        issues = IssueStore(data / "issues.log")
        profiles = ProfileStore(data / "profiles.log")
        conversations = ConversationStore(data / "conversations.log")
    else:
        readings = MemoryReadingStore()
        issues = IssueStore()
        profiles = ProfileStore()
        conversations = ConversationStore()

    users = UserStore()
    for seed in config.seed_users:
        users.add(seed.username, seed.password_hash)
        profiles.seed(UserProfile(
            user_id=seed.username,
            display_name=seed.display_name or seed.username,
            email=seed.email,
            notification_threshold_pm2_5=seed.notification_threshold_pm2_5,
        ))

    tools = AmiTools(readings, issues, profiles)
    registry = build_registry(tools)
    mcp = McpServer(registry)
    orchestrator = Orchestrator(mcp, profiles)

    if planner is None:
        if config.planner_mode == "scripted":
            rules_path = Path(config.scripted_rules_path)
            if not rules_path.is_file():
                raise ConfigError(f"scripted_rules_path: no such file: {rules_path}")
            planner = ScriptedPlanner.from_file(rules_path)
        else:
            planner = RemotePlanner(endpoint=config.remote.endpoint,
                                    api_key=config.remote.api_key(),
                                    model=config.remote.model)

    sessions = SessionManager(clock=session_clock) if session_clock else SessionManager()
    return AmiApp(
        readings=readings, issues=issues, profiles=profiles,
        conversations=conversations, users=users, sessions=sessions,
        registry=registry, mcp=mcp, orchestrator=orchestrator, planner=planner,
        device_key=config.device_key, static_dir=config.static_dir,
    )


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    app: AmiApp = None

    def _dispatch(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        response = self.app.handle(self.command, self.path, dict(self.headers), body)
        self.send_response(response.status)
        for key, value in response.headers.items():
            self.send_header(key, value)
        self.send_header("Content-Length", str(len(response.body)))
        self.end_headers()
        if response.body:
            self.wfile.write(response.body)

    do_GET = _dispatch
    do_POST = _dispatch
    do_PUT = _dispatch
    do_DELETE = _dispatch

    def log_message(self, fmt, *args):  # quiet; the CLI logs at a higher level
        pass


class AmiHttpServer:
    """Threaded HTTP server over an AmiApp."""

    def __init__(self, app: AmiApp, host: str = "127.0.0.1", port: int = 0):
        handler = type("BoundHandler", (_Handler,), {"app": app})
        self._server = ThreadingHTTPServer((host, port), handler)
        self._thread = None
        self.app = app

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def serve_forever(self):
        self._server.serve_forever(poll_interval=0.1)

    def start_background(self) -> "AmiHttpServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)
        self.app.close()
