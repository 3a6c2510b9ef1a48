"""Tool server core: JSON-RPC 2.0 engine, tool registry, and the stdio transport.

Methods: ``initialize``, ``tools/list``, ``tools/call``. One compact JSON
message per line on stdio; the HTTP transport (POST /mcp) lives in the web
app and feeds the same ``handle_message`` so both transports produce
identical payloads by construction.

Error codes follow JSON-RPC 2.0: -32700 parse error, -32600 invalid request,
-32601 method not found, -32602 invalid params. Handler exceptions are not
protocol errors; they come back as a tool result with ``is_error`` true.
"""

from __future__ import annotations

import json
import re
import sys
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from . import __version__

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602

PROTOCOL_VERSION = "ami-mcp/1"

JSON_SEPARATORS = (",", ":")

TOOL_NAME_RE = re.compile(r"[a-z][a-z0-9_]*\Z")

SCHEMA_TYPES = ("string", "number", "integer", "boolean")


class DuplicateToolError(ValueError):
    pass


class MalformedSchemaError(ValueError):
    pass


class UnknownToolError(KeyError):
    pass


@dataclass(frozen=True)
class ToolDefinition:
    """A registered tool: name, description, JSON-Schema parameters, and the
    parameter names that denote the acting user (rewritten at dispatch)."""

    name: str
    description: str
    parameters: dict
    identity_params: tuple = ()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": self.parameters,
            "identity_params": list(self.identity_params),
        }


@dataclass(frozen=True)
class ToolResult:
    content: object
    is_error: bool = False

    def to_dict(self) -> dict:
        return {"content": self.content, "is_error": self.is_error}


ToolHandler = Callable[[dict, str], ToolResult]


def check_schema(parameters: dict) -> None:
    """Reject schemas outside the supported subset (type/required/enum/min/max).

    Unknown keywords are tolerated; structural garbage is not.
    """
    if not isinstance(parameters, dict):
        raise MalformedSchemaError("parameters must be an object")
    if parameters.get("type", "object") != "object":
        raise MalformedSchemaError("parameters.type must be 'object'")
    props = parameters.get("properties", {})
    if not isinstance(props, dict):
        raise MalformedSchemaError("parameters.properties must be an object")
    for name, spec in props.items():
        if not isinstance(spec, dict):
            raise MalformedSchemaError(f"property {name} must be an object")
        declared = spec.get("type")
        if declared is not None and declared not in SCHEMA_TYPES:
            raise MalformedSchemaError(f"property {name}: unsupported type {declared!r}")
        if "enum" in spec and not isinstance(spec["enum"], list):
            raise MalformedSchemaError(f"property {name}: enum must be a list")
        for bound in ("minimum", "maximum"):
            if bound in spec and isinstance(spec[bound], bool):
                raise MalformedSchemaError(f"property {name}: {bound} must be a number")
            if bound in spec and not isinstance(spec[bound], (int, float)):
                raise MalformedSchemaError(f"property {name}: {bound} must be a number")
    required = parameters.get("required", [])
    if not isinstance(required, list) or not all(isinstance(n, str) for n in required):
        raise MalformedSchemaError("parameters.required must be a list of names")
    unknown = [n for n in required if n not in props]
    if unknown:
        raise MalformedSchemaError(f"required names missing from properties: {unknown}")


def _type_ok(value, declared: str) -> bool:
    if declared == "string":
        return isinstance(value, str)
    if declared == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if declared == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if declared == "boolean":
        return isinstance(value, bool)
    return True


def validate_args(parameters: dict, args: dict) -> Optional[str]:
    """Check args against the schema subset; return a message naming the
    offending argument, or None when valid."""
    for name in parameters.get("required", []):
        if name not in args:
            return f"missing required argument: {name}"
    props = parameters.get("properties", {})
    for name, value in args.items():
        spec = props.get(name)
        if spec is None:
            continue
        declared = spec.get("type")
        if declared and not _type_ok(value, declared):
            return f"argument {name} must be of type {declared}"
        if "enum" in spec and value not in spec["enum"]:
            allowed = ", ".join(repr(v) for v in spec["enum"])
            return f"argument {name} must be one of: {allowed}"
        if "minimum" in spec and isinstance(value, (int, float)) and not isinstance(value, bool):
            if value < spec["minimum"]:
                return f"argument {name} must be >= {spec['minimum']}"
        if "maximum" in spec and isinstance(value, (int, float)) and not isinstance(value, bool):
            if value > spec["maximum"]:
                return f"argument {name} must be <= {spec['maximum']}"
    return None


class SchemaValidationError(ValueError):
    pass


class ToolRegistry:
    """Named tools with handlers. Registration happens at startup; dispatch
    is read-only and safe under concurrent calls."""

    def __init__(self):
        self._lock = threading.Lock()
        self._tools = {}

    def register(self, definition: ToolDefinition, handler: ToolHandler) -> None:
        if not TOOL_NAME_RE.match(definition.name):
            raise MalformedSchemaError(f"bad tool name: {definition.name!r}")
        check_schema(definition.parameters)
        props = definition.parameters.get("properties", {})
        stray = [p for p in definition.identity_params if p not in props]
        if stray:
            raise MalformedSchemaError(f"identity params missing from schema: {stray}")
        with self._lock:
            if definition.name in self._tools:
                raise DuplicateToolError(f"tool already registered: {definition.name}")
            self._tools[definition.name] = (definition, handler)

    def get(self, name: str) -> ToolDefinition:
        with self._lock:
            try:
                return self._tools[name][0]
            except KeyError:
                raise UnknownToolError(name) from None

    def definitions(self) -> list:
        with self._lock:
            return [definition for definition, _ in self._tools.values()]

    def call(self, name: str, args: dict, caller: str) -> ToolResult:
        """Validate and dispatch one tool call.

        Identity parameters are overwritten with the caller before schema
        validation, so no handler can observe a foreign user id regardless
        of which transport the call arrived on.
        """
        with self._lock:
            try:
                definition, handler = self._tools[name]
            except KeyError:
                raise UnknownToolError(name) from None
        effective = dict(args)
        for param in definition.identity_params:
            effective[param] = caller
        problem = validate_args(definition.parameters, effective)
        if problem is not None:
            raise SchemaValidationError(problem)
        try:
            return handler(effective, caller)
        except Exception as exc:
            return ToolResult(content={"message": f"{type(exc).__name__}: {exc}"}, is_error=True)


def _dump(payload: dict) -> bytes:
    return json.dumps(payload, separators=JSON_SEPARATORS).encode("utf-8")


def _result_bytes(request_id, result) -> bytes:
    return _dump({"jsonrpc": "2.0", "id": request_id, "result": result})


def _error_bytes(request_id, code: int, message: str) -> bytes:
    return _dump({"jsonrpc": "2.0", "id": request_id, "error": {"code": code, "message": message}})


def _valid_id(value) -> bool:
    return value is None or isinstance(value, str) or (
        isinstance(value, int) and not isinstance(value, bool))


class McpServer:
    """JSON-RPC front end over a ToolRegistry."""

    def __init__(self, registry: ToolRegistry, server_name: str = "ami",
                 server_version: str = __version__):
        self.registry = registry
        self.server_name = server_name
        self.server_version = server_version

    def handle_message(self, raw, caller: str) -> Optional[bytes]:
        """Process one JSON-RPC message; returns response bytes, or None for
        notifications."""
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError:
                return _error_bytes(None, PARSE_ERROR, "Parse error")
        try:
            message = json.loads(raw)
        except json.JSONDecodeError:
            return _error_bytes(None, PARSE_ERROR, "Parse error")

        if isinstance(message, list):
            return _error_bytes(None, INVALID_REQUEST, "Batch requests are not supported")
        if not isinstance(message, dict):
            return _error_bytes(None, INVALID_REQUEST, "Request must be an object")

        notification = "id" not in message
        request_id = message.get("id")
        if not _valid_id(request_id):
            return _error_bytes(None, INVALID_REQUEST, "Request id must be an integer, string, or null")

        def reply_error(code, text):
            return None if notification else _error_bytes(request_id, code, text)

        if message.get("jsonrpc") != "2.0":
            return reply_error(INVALID_REQUEST, "jsonrpc must be the string '2.0'")
        method = message.get("method")
        if not isinstance(method, str):
            return reply_error(INVALID_REQUEST, "method must be a string")
        params = message.get("params", {})
        if not isinstance(params, dict):
            return reply_error(INVALID_PARAMS, "params must be an object")

        if method == "initialize":
            result = {
                "protocol_version": PROTOCOL_VERSION,
                "server_name": self.server_name,
                "server_version": self.server_version,
                "capabilities": {"tools": {}},
            }
            return None if notification else _result_bytes(request_id, result)

        if method == "tools/list":
            result = {"tools": [d.to_dict() for d in self.registry.definitions()]}
            return None if notification else _result_bytes(request_id, result)

        if method == "tools/call":
            name = params.get("name")
            if not isinstance(name, str):
                return reply_error(INVALID_PARAMS, "missing required parameter: name")
            arguments = params.get("arguments", {})
            if not isinstance(arguments, dict):
                return reply_error(INVALID_PARAMS, "arguments must be an object")
            try:
                result = self.registry.call(name, arguments, caller)
            except UnknownToolError:
                return reply_error(INVALID_PARAMS, f"unknown tool: {name}")
            except SchemaValidationError as exc:
                return reply_error(INVALID_PARAMS, str(exc))
            return None if notification else _result_bytes(request_id, result.to_dict())

        return reply_error(METHOD_NOT_FOUND, f"Method not found: {method}")

    def is_transport_error(self, response: bytes) -> bool:
        """True for parse/invalid-request responses; the HTTP transport maps
        these to status 400."""
        try:
            payload = json.loads(response)
        except (json.JSONDecodeError, TypeError):
            return False
        code = payload.get("error", {}).get("code")
        return code in (PARSE_ERROR, INVALID_REQUEST)

    def serve_stdio(self, caller: str, stdin=None, stdout=None) -> int:
        """Newline-delimited JSON-RPC over the standard streams.

        Caller identity comes from server configuration; stdio trusts the
        launching process. Blank lines are skipped. Returns the number of
        responses written.
        """
        stdin = stdin if stdin is not None else sys.stdin.buffer
        stdout = stdout if stdout is not None else sys.stdout.buffer
        written = 0
        for line in stdin:
            if not line.strip():
                continue
            response = self.handle_message(line, caller)
            if response is not None:
                stdout.write(response + b"\n")
                stdout.flush()
                written += 1
        return written
