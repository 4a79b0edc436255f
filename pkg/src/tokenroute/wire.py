"""Routing wire schema: request/response types and canonical JSON encoding.

The request body carries the small model's internal state and the routing
history alongside the plain-text context, so the serving side needs no
session affinity: every request is self-contained. Field names and nesting
are normative; serialization is canonical (fixed field order, compact
separators, shortest-round-trip float formatting) so identical messages
produce identical bytes and responses can be replayed byte-for-byte.

Absent optional fields encode as explicit ``null``. Unknown extra fields
are ignored on parse for forward compatibility but never emitted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

from .types import Route, TokenRouteError

SCHEMA_VERSION = "1"


class WireError(TokenRouteError):
    pass


class InvariantViolation(WireError):
    def __init__(self, field_name: str, detail: str):
        super().__init__(f"invalid {field_name}: {detail}")
        self.field_name = field_name


class MalformedEncoding(WireError):
    def __init__(self, detail: str):
        super().__init__(f"malformed message: {detail}")


class MissingField(WireError):
    def __init__(self, name: str):
        super().__init__(f"missing required field {name!r}")
        self.name = name


class FieldOutOfRange(WireError):
    def __init__(self, name: str, detail: str = ""):
        super().__init__(f"field {name!r} out of range" + (f": {detail}" if detail else ""))
        self.name = name


@dataclass(frozen=True)
class PreviousDecision:
    token: str
    route: Route


@dataclass(frozen=True)
class RoutingRequest:
    """One routed-token request.

    ``hidden_states`` is the single last-position hidden vector (bounded
    payload); ``attention_states`` is carried opaquely and defaults to
    absent. ``llm_state`` is reserved and always null in this version.
    """

    context: str
    current_token: str
    token_index: int
    routing_threshold: float
    session_id: str
    request_id: str
    hidden_states: tuple[float, ...] | None = None
    attention_states: Any = None
    history: tuple[PreviousDecision, ...] = ()


@dataclass(frozen=True)
class ResponseToken:
    text: str
    token: int


@dataclass(frozen=True)
class RoutingResponse:
    """Serving-side reply: the burst of large-model tokens, the serving time
    (compute plus injected latency), the echoed request id, and the request
    history extended with the new LLM-tagged tokens."""

    tokens: tuple[ResponseToken, ...]
    llm_time_seconds: float
    request_id: str
    updated_history: tuple[PreviousDecision, ...] = ()


def _canonical_bytes(doc: dict) -> bytes:
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _history_doc(decisions: tuple[PreviousDecision, ...]) -> list[dict]:
    return [{"token": d.token, "route": d.route.serialize()} for d in decisions]


def serialize_request(req: RoutingRequest) -> bytes:
    """Canonical encoding with the normative field order."""
    if req.token_index < 0:
        raise InvariantViolation("token_index", f"must be >= 0, got {req.token_index}")
    if not (0.0 <= req.routing_threshold <= 1.0):
        raise InvariantViolation("routing_threshold", f"must lie in [0, 1], got {req.routing_threshold}")
    if not req.session_id:
        raise InvariantViolation("meta_data.session_id", "must be non-empty")
    if not req.request_id:
        raise InvariantViolation("meta_data.request_id", "must be non-empty")
    if req.hidden_states is not None and len(req.hidden_states) == 0:
        raise InvariantViolation("slm_state.hidden_states", "present but empty")
    doc = {
        "context": req.context,
        "current_token": req.current_token,
        "token_index": req.token_index,
        "routing_threshold": req.routing_threshold,
        "slm_state": {
            "hidden_states": list(req.hidden_states) if req.hidden_states is not None else None,
            "attention_states": req.attention_states,
        },
        "llm_state": None,
        "history": {"previous_decisions": _history_doc(req.history)},
        "meta_data": {
            "session_id": req.session_id,
            "request_id": req.request_id,
            "schema_version": SCHEMA_VERSION,
        },
    }
    try:
        return _canonical_bytes(doc)
    except (TypeError, ValueError) as exc:
        raise InvariantViolation("slm_state.attention_states", f"not JSON-encodable: {exc}") from exc


def _load_object(data: bytes | str) -> dict:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedEncoding(str(exc)) from exc
    if not isinstance(doc, dict):
        raise MalformedEncoding(f"top-level value is {type(doc).__name__}, expected object")
    return doc


def _require(doc: dict, name: str, parent: str = ""):
    if name not in doc:
        raise MissingField(parent + name)
    return doc[name]


def _check_str(value, name: str, allow_empty: bool = True) -> str:
    if not isinstance(value, str):
        raise FieldOutOfRange(name, f"expected string, got {type(value).__name__}")
    if not allow_empty and not value:
        raise FieldOutOfRange(name, "must be non-empty")
    return value


def _parse_history(doc, name: str) -> tuple[PreviousDecision, ...]:
    if not isinstance(doc, dict):
        raise FieldOutOfRange(name, "expected object")
    entries = _require(doc, "previous_decisions", name + ".")
    if not isinstance(entries, list):
        raise FieldOutOfRange(name + ".previous_decisions", "expected array")
    decisions = []
    for i, entry in enumerate(entries):
        where = f"{name}.previous_decisions[{i}]"
        if not isinstance(entry, dict):
            raise FieldOutOfRange(where, "expected object")
        token = _check_str(_require(entry, "token", where + "."), where + ".token")
        try:
            route = Route.parse(_check_str(_require(entry, "route", where + "."), where + ".route"))
        except ValueError as exc:
            raise FieldOutOfRange(where + ".route", str(exc)) from exc
        decisions.append(PreviousDecision(token=token, route=route))
    return tuple(decisions)


def parse_request(data: bytes | str, expected_dim: int | None = None) -> RoutingRequest:
    """Validated request or a machine-readable error.

    ``expected_dim`` enforces the hidden-vector length when the caller knows
    the engine dimension; without it any non-empty vector is accepted.
    """
    doc = _load_object(data)
    context = _check_str(_require(doc, "context"), "context")
    current_token = _check_str(_require(doc, "current_token"), "current_token")
    token_index = _require(doc, "token_index")
    if not isinstance(token_index, int) or isinstance(token_index, bool) or token_index < 0:
        raise FieldOutOfRange("token_index", f"expected integer >= 0, got {token_index!r}")
    threshold = _require(doc, "routing_threshold")
    if not isinstance(threshold, (int, float)) or isinstance(threshold, bool) or not (0.0 <= threshold <= 1.0):
        raise FieldOutOfRange("routing_threshold", f"expected real in [0, 1], got {threshold!r}")

    slm_state = _require(doc, "slm_state")
    if not isinstance(slm_state, dict):
        raise FieldOutOfRange("slm_state", "expected object")
    hidden_raw = slm_state.get("hidden_states")
    hidden: tuple[float, ...] | None = None
    if hidden_raw is not None:
        if not isinstance(hidden_raw, list) or not hidden_raw:
            raise FieldOutOfRange("slm_state.hidden_states", "expected non-empty array or null")
        try:
            hidden = tuple(float(x) for x in hidden_raw)
        except (TypeError, ValueError) as exc:
            raise FieldOutOfRange("slm_state.hidden_states", "entries must be numbers") from exc
        if expected_dim is not None and len(hidden) != expected_dim:
            raise FieldOutOfRange(
                "slm_state.hidden_states", f"expected length {expected_dim}, got {len(hidden)}"
            )
    attention_states = slm_state.get("attention_states")

    if doc.get("llm_state") is not None:
        raise FieldOutOfRange("llm_state", "reserved field must be null")

    history = _parse_history(_require(doc, "history"), "history")

    meta = _require(doc, "meta_data")
    if not isinstance(meta, dict):
        raise FieldOutOfRange("meta_data", "expected object")
    session_id = _check_str(_require(meta, "session_id", "meta_data."), "meta_data.session_id", allow_empty=False)
    request_id = _check_str(_require(meta, "request_id", "meta_data."), "meta_data.request_id", allow_empty=False)

    return RoutingRequest(
        context=context,
        current_token=current_token,
        token_index=token_index,
        routing_threshold=float(threshold),
        session_id=session_id,
        request_id=request_id,
        hidden_states=hidden,
        attention_states=attention_states,
        history=history,
    )


def serialize_response(resp: RoutingResponse) -> bytes:
    if resp.llm_time_seconds < 0:
        raise InvariantViolation("llm_time_seconds", f"must be >= 0, got {resp.llm_time_seconds}")
    if not resp.request_id:
        raise InvariantViolation("request_id", "must be non-empty")
    doc = {
        "tokens": [{"text": t.text, "token": t.token} for t in resp.tokens],
        "llm_time_seconds": resp.llm_time_seconds,
        "request_id": resp.request_id,
        "updated_history": {"previous_decisions": _history_doc(resp.updated_history)},
    }
    return _canonical_bytes(doc)


def parse_response(data: bytes | str) -> RoutingResponse:
    doc = _load_object(data)
    tokens_raw = _require(doc, "tokens")
    if not isinstance(tokens_raw, list):
        raise FieldOutOfRange("tokens", "expected array")
    tokens = []
    for i, entry in enumerate(tokens_raw):
        where = f"tokens[{i}]"
        if not isinstance(entry, dict):
            raise FieldOutOfRange(where, "expected object")
        text = _check_str(_require(entry, "text", where + "."), where + ".text")
        token = _require(entry, "token", where + ".")
        if not isinstance(token, int) or isinstance(token, bool) or token < 0:
            raise FieldOutOfRange(where + ".token", f"expected integer >= 0, got {token!r}")
        tokens.append(ResponseToken(text=text, token=token))
    llm_time = _require(doc, "llm_time_seconds")
    if not isinstance(llm_time, (int, float)) or isinstance(llm_time, bool) or llm_time < 0:
        raise FieldOutOfRange("llm_time_seconds", f"expected real >= 0, got {llm_time!r}")
    request_id = _check_str(_require(doc, "request_id"), "request_id", allow_empty=False)
    updated = _parse_history(_require(doc, "updated_history"), "updated_history")
    return RoutingResponse(
        tokens=tuple(tokens),
        llm_time_seconds=float(llm_time),
        request_id=request_id,
        updated_history=updated,
    )
