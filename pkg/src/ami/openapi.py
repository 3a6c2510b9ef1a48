"""Convert the tool registry to an OpenAPI 3.1 document and back to the
planner-facing tool specs.

Identity parameters never reach the planner: they are stripped from the
exposed schemas (the backend fills them in) and recorded on each operation
as ``x-identity-params`` for auditing.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

from . import __version__

OPENAPI_VERSION = "3.1.0"

JSON_SEPARATORS = (",", ":")


class MalformedDocumentError(ValueError):
    """Raised when a document lacks the expected shape; names the path."""


@dataclass(frozen=True)
class PlannerToolSpec:
    """The (name, description, parameters) triple handed to the planner."""

    name: str
    description: str
    parameters: dict


def strip_identity_params(parameters: dict, identity_params) -> dict:
    """Planner-facing schema: the declared schema minus identity parameters."""
    stripped = copy.deepcopy(parameters)
    hidden = set(identity_params)
    props = stripped.get("properties")
    if isinstance(props, dict):
        stripped["properties"] = {k: v for k, v in props.items() if k not in hidden}
    required = stripped.get("required")
    if isinstance(required, list):
        stripped["required"] = [n for n in required if n not in hidden]
    return stripped


def registry_to_openapi(tools, title: str = "AMI tools", version: str = __version__) -> dict:
    """Build a deterministic OpenAPI document: one POST path per tool at
    /tools/{name}, sorted by tool name."""
    paths = {}
    for definition in sorted(tools, key=lambda d: d.name):
        paths[f"/tools/{definition.name}"] = {
            "post": {
                "operationId": definition.name,
                "description": definition.description,
                "x-identity-params": list(definition.identity_params),
                "requestBody": {
                    "required": True,
                    "content": {
                        "application/json": {
                            "schema": strip_identity_params(
                                definition.parameters, definition.identity_params),
                        },
                    },
                },
                "responses": {"200": {"description": "Tool result"}},
            },
        }
    return {
        "openapi": OPENAPI_VERSION,
        "info": {"title": title, "version": version},
        "paths": paths,
    }


def openapi_to_planner_specs(document: dict) -> list:
    """Project each path back to a PlannerToolSpec, preserving order."""
    paths = document.get("paths")
    if not isinstance(paths, dict):
        raise MalformedDocumentError("document has no paths object")
    specs = []
    for path, item in paths.items():
        post = item.get("post") if isinstance(item, dict) else None
        if not isinstance(post, dict):
            raise MalformedDocumentError(f"path {path}: missing post operation")
        try:
            schema = post["requestBody"]["content"]["application/json"]["schema"]
        except (KeyError, TypeError):
            raise MalformedDocumentError(f"path {path}: missing requestBody schema") from None
        if not isinstance(schema, dict):
            raise MalformedDocumentError(f"path {path}: schema must be an object")
        prefix, _, name = path.rpartition("/")
        if prefix != "/tools" or not name:
            raise MalformedDocumentError(f"path {path}: expected /tools/{{name}}")
        specs.append(PlannerToolSpec(
            name=name,
            description=post.get("description", ""),
            parameters=copy.deepcopy(schema),
        ))
    return specs


def openapi_json_bytes(document: dict) -> bytes:
    """Canonical serialization; equal registries yield identical bytes."""
    return json.dumps(document, separators=JSON_SEPARATORS).encode("utf-8")
