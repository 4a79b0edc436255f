"""Cloud-side serving: session state, backends, and latency injection.

The server parses routing requests, continues the context with its backend
(a reference engine with its own weights, or a scripted oracle), and
answers with a burst of LLM-tagged tokens. The wire schema is self-contained,
so a session evicted between requests is rebuilt from the request's context
with no observable difference; warm sessions only save compute. Replaying a
(session_id, request_id) pair returns the stored response byte-for-byte
without re-running the backend.

Injected delays model a deployment (network round-trip, large-model serving
latency) through the clock abstraction: with a simulated clock the metrics
carry the configured seconds while the process never actually sleeps.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

from .clock import MonotonicClock, SimulatedClock
from .engine import (
    EOS_ID,
    ByteTokenizer,
    KvCache,
    ModelWeights,
    StepOutput,
    decode_step,
    greedy_next,
    prefill,
)
from .types import TokenRouteError
from .wire import (
    PreviousDecision,
    ResponseToken,
    Route,
    RoutingRequest,
    RoutingResponse,
    WireError,
    parse_request,
    parse_response,
    serialize_response,
)

logger = logging.getLogger(__name__)


class ServerError(TokenRouteError):
    pass


class SessionLimitExceeded(ServerError):
    def __init__(self, limit: int):
        super().__init__(f"session limit {limit} exceeded")


class BackendFailure(ServerError):
    def __init__(self, detail: str):
        super().__init__(f"backend failure: {detail}")


class MalformedRequest(ServerError):
    def __init__(self, cause: WireError):
        super().__init__(str(cause))
        self.cause = cause


class Backend:
    """Anything that can continue a text context by n tokens.

    ``session_key`` is an optional hint for cache reuse; results must never
    depend on it. ``token_index`` is the continuation position declared by
    the request, which disambiguates contexts whose text representation is
    not byte-unique.
    """

    name = "backend"

    def generate(
        self,
        context: str,
        n_tokens: int,
        current_token: str | None = None,
        session_key: str | None = None,
        token_index: int | None = None,
    ) -> list[ResponseToken]:
        raise NotImplementedError

    def drop_session(self, session_key: str) -> None:
        pass

    def describe(self) -> dict:
        return {"name": self.name}


class EngineBackend(Backend):
    """Reference engine standing in for the large model.

    Keeps a per-session KV cache: when the request context extends what the
    session has already processed only the delta is decoded, otherwise the
    full context is re-prefilled. Either way the tokens are identical; warm
    sessions only save compute.
    """

    name = "reference-engine"

    def __init__(self, weights: ModelWeights):
        self.weights = weights
        self.tokenizer = ByteTokenizer()
        self._caches: dict[str, tuple[list[int], KvCache, StepOutput]] = {}
        self._lock = threading.Lock()

    def describe(self) -> dict:
        return {"name": self.name, "d": self.weights.d, "n_layers": self.weights.n_layers, "seed": self.weights.seed}

    def _advance(self, session_key: str | None, ids: list[int]) -> tuple[KvCache, StepOutput]:
        if session_key is not None:
            with self._lock:
                cached = self._caches.get(session_key)
            if cached is not None:
                prev_ids, cache, out = cached
                if ids == prev_ids:
                    return cache, out
                if len(ids) > len(prev_ids) and ids[: len(prev_ids)] == prev_ids:
                    for token in ids[len(prev_ids) :]:
                        cache, out = decode_step(self.weights, cache, token)
                    with self._lock:
                        self._caches[session_key] = (list(ids), cache, out)
                    return cache, out
        cache, out = prefill(self.weights, ids)
        if session_key is not None:
            with self._lock:
                self._caches[session_key] = (list(ids), cache, out)
        return cache, out

    def generate(
        self,
        context: str,
        n_tokens: int,
        current_token: str | None = None,
        session_key: str | None = None,
        token_index: int | None = None,
    ) -> list[ResponseToken]:
        ids = [self.tokenizer.bos_id] + self.tokenizer.encode(context)
        cache, out = self._advance(session_key, ids)
        tokens: list[ResponseToken] = []
        for _ in range(n_tokens):
            token = greedy_next(out.logits)
            tokens.append(ResponseToken(text=self.tokenizer.token_text(token), token=token))
            if token == EOS_ID:
                break
            cache, out = decode_step(self.weights, cache, token)
            ids.append(token)
        if session_key is not None and tokens and tokens[-1].token != EOS_ID:
            with self._lock:
                self._caches[session_key] = (ids, cache, out)
        return tokens

    def drop_session(self, session_key: str) -> None:
        with self._lock:
            self._caches.pop(session_key, None)


class OracleBackend(Backend):
    """Scripted oracle: a callable (context -> next tokens) or answer table.

    Used where the demo needs a 'large model' that is correct by
    construction, e.g. the synthetic benchmark task.
    """

    name = "scripted-oracle"

    def __init__(
        self,
        continuation: Callable[[str, int, int | None], list[ResponseToken]] | None = None,
        table: dict[str, str] | None = None,
    ):
        if continuation is None and table is None:
            raise ServerError("oracle backend needs a continuation function or an answer table")
        self._fn = continuation
        self._table = table or {}
        self.tokenizer = ByteTokenizer()

    def generate(
        self,
        context: str,
        n_tokens: int,
        current_token: str | None = None,
        session_key: str | None = None,
        token_index: int | None = None,
    ) -> list[ResponseToken]:
        if self._fn is not None:
            return self._fn(context, n_tokens, token_index)
        text = self._table.get(context)
        if text is None:
            raise BackendFailure(f"no scripted continuation for context of length {len(context)}")
        ids = self.tokenizer.encode(text)[:n_tokens]
        return [ResponseToken(text=self.tokenizer.token_text(t), token=t) for t in ids]


class EchoBackend(Backend):
    """Returns the small model's own candidate; handy for wiring demos."""

    name = "echo"

    def __init__(self):
        self.tokenizer = ByteTokenizer()

    def generate(
        self,
        context: str,
        n_tokens: int,
        current_token: str | None = None,
        session_key: str | None = None,
        token_index: int | None = None,
    ) -> list[ResponseToken]:
        text = current_token if current_token else "?"
        ids = self.tokenizer.encode(text)[:n_tokens] or [ord("?")]
        return [ResponseToken(text=self.tokenizer.token_text(t), token=t) for t in ids]


@dataclass
class ServingConfig:
    """Serving-side knobs, with deployment-shaped latency defaults:
    ~170 ms client/server round trip, ~0.9 s per large-model request, and a
    ~4 ms re-prefill penalty per call on the device side."""

    backend: Backend
    llm_burst: int = 1
    comm_delay_s: float = 0.170
    llm_latency_s: float = 0.9
    reprefill_delay_s_per_call: float = 0.004
    max_sessions: int = 64
    inject_latency: bool = True

    def validate(self) -> "ServingConfig":
        if self.llm_burst < 1:
            raise ServerError(f"llm_burst must be >= 1, got {self.llm_burst}")
        for name in ("comm_delay_s", "llm_latency_s", "reprefill_delay_s_per_call"):
            if getattr(self, name) < 0:
                raise ServerError(f"{name} must be >= 0, got {getattr(self, name)}")
        return self

    def describe(self) -> dict:
        return {
            "backend": self.backend.describe(),
            "llm_burst": self.llm_burst,
            "comm_delay_s": self.comm_delay_s,
            "llm_latency_s": self.llm_latency_s,
            "reprefill_delay_s_per_call": self.reprefill_delay_s_per_call,
            "max_sessions": self.max_sessions,
            "inject_latency": self.inject_latency,
        }


@dataclass
class SessionState:
    session_id: str
    context: str = ""
    history: tuple[PreviousDecision, ...] = ()
    last_request_id: str | None = None
    last_active: float = 0.0
    backend_calls: int = 0
    responses: dict[str, bytes] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


class TokenServer:
    """The serving module: many concurrent sessions, per-session ordering.

    The client's ``context`` field is authoritative; if it disagrees with
    stored session state the server logs the divergence and rebuilds from
    the request (the device owns the canonical transcript).
    """

    def __init__(self, cfg: ServingConfig, clock: MonotonicClock | None = None):
        self.cfg = cfg.validate()
        self.clock = clock if clock is not None else SimulatedClock()
        self._sessions: dict[str, SessionState] = {}
        self._registry_lock = threading.Lock()

    def _session(self, session_id: str) -> SessionState:
        with self._registry_lock:
            state = self._sessions.get(session_id)
            if state is None:
                if len(self._sessions) >= self.cfg.max_sessions:
                    raise SessionLimitExceeded(self.cfg.max_sessions)
                state = SessionState(session_id=session_id, last_active=self.clock.now())
                self._sessions[session_id] = state
            return state

    def serve(self, request: RoutingRequest) -> RoutingResponse:
        """Generate one burst of large-model tokens for a routed position."""
        state = self._session(request.session_id)
        with state.lock:
            stored = state.responses.get(request.request_id)
            if stored is not None:
                return parse_response(stored)
            return self._serve_locked(state, request)

    def serve_bytes(self, body: bytes) -> bytes:
        """Byte-level entry point used by the transport layer."""
        try:
            request = parse_request(body)
        except WireError as exc:
            raise MalformedRequest(exc) from exc
        state = self._session(request.session_id)
        with state.lock:
            stored = state.responses.get(request.request_id)
            if stored is not None:
                return stored
            response = self._serve_locked(state, request)
            return state.responses[request.request_id]

    def _serve_locked(self, state: SessionState, request: RoutingRequest) -> RoutingResponse:
        if state.context and request.context != state.context:
            if not request.context.startswith(state.context):
                logger.warning(
                    "session %s: client context diverged from stored state; rebuilding from request",
                    state.session_id,
                )
        t_start = self.clock.now()
        if self.cfg.inject_latency:
            self.clock.sleep(self.cfg.llm_latency_s)
        try:
            tokens = self.cfg.backend.generate(
                request.context,
                self.cfg.llm_burst,
                current_token=request.current_token,
                session_key=state.session_id,
                token_index=request.token_index,
            )
        except ServerError:
            raise
        except Exception as exc:  # backend bugs surface as a typed failure
            raise BackendFailure(str(exc)) from exc
        llm_time = self.clock.now() - t_start

        new_history = request.history + tuple(
            PreviousDecision(token=t.text, route=Route.LLM) for t in tokens
        )
        response = RoutingResponse(
            tokens=tuple(tokens),
            llm_time_seconds=llm_time,
            request_id=request.request_id,
            updated_history=new_history,
        )
        state.context = request.context + "".join(t.text for t in tokens)
        state.history = new_history
        state.last_request_id = request.request_id
        state.last_active = self.clock.now()
        state.backend_calls += 1
        state.responses[request.request_id] = serialize_response(response)
        return response

    def session_gc(self, max_idle_s: float) -> int:
        """Drop sessions idle longer than ``max_idle_s``; returns the count.

        Evicted sessions lose nothing observable: the next request rebuilds
        state from its own context field.
        """
        now = self.clock.now()
        evicted = 0
        with self._registry_lock:
            idle = [s for s, st in self._sessions.items() if now - st.last_active > max_idle_s]
            for session_id in idle:
                del self._sessions[session_id]
                evicted += 1
        for session_id in idle:
            self.cfg.backend.drop_session(session_id)
        return evicted

    @property
    def session_count(self) -> int:
        with self._registry_lock:
            return len(self._sessions)

    def session_snapshot(self, session_id: str) -> SessionState | None:
        with self._registry_lock:
            return self._sessions.get(session_id)
