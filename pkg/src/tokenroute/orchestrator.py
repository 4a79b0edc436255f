"""The collaborative decoding loop on the device side.

Drives small-model decoding, consults the router per position, ships
low-confidence positions to the serving endpoint, reconciles the local KV
cache under either policy, and logs every phase of the session as timed
events. The emitted token sequence is identical under both KV policies;
they differ only in events and latency.
"""

from __future__ import annotations

import codecs
import json
import uuid
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .clock import MonotonicClock, SimulatedClock
from .engine import (
    BOS_ID,
    EOS_ID,
    ByteTokenizer,
    EngineError,
    ModelWeights,
    decode_step,
    greedy_next,
    prefill,
)
from .router import CiterThreshold, DimensionMismatch, RouterModel, route_token
from .server import ServerError, TokenServer
from .types import (
    GenerationConfig,
    KvPolicy,
    Mode,
    Route,
    TaggedToken,
    TokenRouteError,
    validate_config,
)
from .wire import (
    PreviousDecision,
    RoutingRequest,
    RoutingResponse,
    parse_response,
    serialize_request,
)

# Event kinds recorded in a SessionRecord. Fallback marks a routed position
# served locally after transport failure; consumers must tolerate kinds they
# do not know.
PREFILL_START = "PrefillStart"
PREFILL_END = "PrefillEnd"
SLM_STEP_START = "SlmStepStart"
SLM_STEP_END = "SlmStepEnd"
ROUTE_DECISION = "RouteDecision"
LLM_CALL_START = "LlmCallStart"
LLM_CALL_END = "LlmCallEnd"
REPREFILL_START = "RePrefillStart"
REPREFILL_END = "RePrefillEnd"
FALLBACK = "Fallback"
DONE = "Done"


class EmptyPrompt(TokenRouteError):
    def __init__(self) -> None:
        super().__init__("prompt is empty after tokenization")


class ServerUnreachable(TokenRouteError):
    def __init__(self, detail: str):
        super().__init__(f"server unreachable: {detail}")


@dataclass(frozen=True)
class Event:
    kind: str
    t: float
    payload: dict = field(default_factory=dict)


@dataclass
class SessionRecord:
    """Ordered, timestamped event log of one generation session."""

    session_id: str
    events: list[Event] = field(default_factory=list)

    def append(self, kind: str, t: float, **payload) -> Event:
        event = Event(kind=kind, t=t, payload=payload)
        self.events.append(event)
        return event


def write_event_log(record: SessionRecord, path) -> None:
    """Line-delimited event file: one JSON object per event."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"session_id": record.session_id}) + "\n")
        for ev in record.events:
            fh.write(json.dumps({"kind": ev.kind, "t": ev.t, **ev.payload}) + "\n")


def read_event_log(path) -> SessionRecord:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        record = SessionRecord(session_id=header.get("session_id", "unknown"))
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            kind = doc.pop("kind")
            t = doc.pop("t")
            record.events.append(Event(kind=kind, t=t, payload=doc))
    return record


@dataclass(frozen=True)
class LatencyModel:
    """Device-side injected delays, normally read off the serving config."""

    comm_delay_s: float = 0.170
    reprefill_delay_s: float = 0.004

    @classmethod
    def from_serving_config(cls, cfg) -> "LatencyModel":
        if not cfg.inject_latency:
            return cls(comm_delay_s=0.0, reprefill_delay_s=0.0)
        return cls(comm_delay_s=cfg.comm_delay_s, reprefill_delay_s=cfg.reprefill_delay_s_per_call)


class ServerClient:
    """Transport to the serving endpoint; raises ServerUnreachable on failure."""

    def route_token(self, request: RoutingRequest) -> RoutingResponse:
        raise NotImplementedError


class LocalClient(ServerClient):
    """In-process transport: full wire round trip (serialize, parse) against
    a TokenServer, with the communication delay injected on the shared clock."""

    def __init__(self, server: TokenServer, fail_times: int = 0):
        self.server = server
        self.clock = server.clock
        self.comm_delay_s = server.cfg.comm_delay_s if server.cfg.inject_latency else 0.0
        self._fail_times = fail_times  # test hook: fail the first N calls

    def route_token(self, request: RoutingRequest) -> RoutingResponse:
        if self._fail_times > 0:
            self._fail_times -= 1
            raise ServerUnreachable("injected transport failure")
        body = serialize_request(request)
        self.clock.sleep(self.comm_delay_s / 2.0)
        try:
            raw = self.server.serve_bytes(body)
        except ServerError as exc:
            raise ServerUnreachable(str(exc)) from exc
        self.clock.sleep(self.comm_delay_s / 2.0)
        return parse_response(raw)


class HttpClient(ServerClient):
    """HTTP transport to a remote serving process."""

    def __init__(self, base_url: str, timeout_s: float = 30.0):
        import httpx

        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout_s)

    def route_token(self, request: RoutingRequest) -> RoutingResponse:
        import httpx

        body = serialize_request(request)
        try:
            resp = self._client.post("/v1/route_token", content=body, headers={"content-type": "application/json"})
        except httpx.HTTPError as exc:
            raise ServerUnreachable(str(exc)) from exc
        if resp.status_code != 200:
            raise ServerUnreachable(f"status {resp.status_code}: {resp.text[:200]}")
        return parse_response(resp.content)

    def fetch_config(self) -> dict:
        import httpx

        try:
            resp = self._client.get("/v1/config")
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise ServerUnreachable(str(exc)) from exc
        return resp.json()


@dataclass
class GenerationResult:
    """Everything a client needs after a generation: provenance-tagged
    tokens, the final text, the event log, and the config echo. ``error``
    is set when generation aborted, leaving a well-formed partial result."""

    tokens: list[TaggedToken]
    text: str
    events: SessionRecord
    config: GenerationConfig
    session_id: str
    error: str | None = None
    stop_reason: str = ""
    logits_trace: list[np.ndarray] | None = None

    def summary(self) -> dict:
        llm_tokens = sum(1 for t in self.tokens if t.source is Route.LLM)
        return {
            "session_id": self.session_id,
            "text": self.text,
            "mode": self.config.mode.value,
            "threshold": self.config.threshold,
            "total_tokens": len(self.tokens),
            "llm_tokens": llm_tokens,
            "slm_tokens": len(self.tokens) - llm_tokens,
            "stop_reason": self.stop_reason,
            "error": self.error,
            "tokens": [
                {
                    "index": i,
                    "text": t.text,
                    "source": t.source.serialize(),
                    "confidence": t.confidence,
                }
                for i, t in enumerate(self.tokens)
            ],
        }


@dataclass
class LoopState:
    """Mutable state of one generation loop; exposed so routed-request
    construction is testable in isolation."""

    prompt: str
    session_id: str
    emitted: list[TaggedToken]
    candidate_text: str
    hidden: np.ndarray
    request_counter: int = 0

    def next_request_id(self) -> str:
        self.request_counter += 1
        return f"req-{self.request_counter:04d}"


def build_routing_request(state: LoopState, cfg: GenerationConfig) -> RoutingRequest:
    """Request for the current routed position.

    The context is the full transcript so far, ``current_token`` is the
    small model's rejected greedy candidate (the counterfactual the server
    may inspect), and the history mirrors every prior emission with its
    route.
    """
    context = state.prompt + "".join(t.text for t in state.emitted)
    history = tuple(PreviousDecision(token=t.text, route=t.source) for t in state.emitted)
    return RoutingRequest(
        context=context,
        current_token=state.candidate_text,
        token_index=len(state.emitted),
        routing_threshold=cfg.threshold,
        session_id=state.session_id,
        request_id=state.next_request_id(),
        hidden_states=tuple(float(x) for x in state.hidden),
        history=history,
    )


class TokenStream:
    """Iterator of TaggedTokens; ``result`` holds the aggregate once drained."""

    def __init__(self, gen: Iterator[TaggedToken], holder: dict):
        self._gen = gen
        self._holder = holder

    def __iter__(self) -> Iterator[TaggedToken]:
        return self._gen

    @property
    def result(self) -> GenerationResult:
        res = self._holder.get("result")
        if res is None:
            raise TokenRouteError("stream not finished; drain the iterator first")
        return res


def stream_generate(
    prompt: str,
    cfg: GenerationConfig,
    weights: ModelWeights,
    router: RouterModel | None,
    client: ServerClient | None,
    clock: MonotonicClock | None = None,
    latency: LatencyModel | None = None,
    session_id: str | None = None,
    collect_logits: bool = False,
) -> TokenStream:
    """Incremental variant of ``generate``: yields each token as produced.

    The aggregate result (available after the stream is drained) equals the
    non-streaming result for identical inputs.
    """
    holder: dict = {}
    gen = _run_loop(
        prompt, cfg, weights, router, client, clock, latency, session_id, collect_logits, holder
    )
    return TokenStream(gen, holder)


def generate(
    prompt: str,
    cfg: GenerationConfig,
    weights: ModelWeights,
    router: RouterModel | None,
    client: ServerClient | None,
    clock: MonotonicClock | None = None,
    latency: LatencyModel | None = None,
    session_id: str | None = None,
    collect_logits: bool = False,
) -> GenerationResult:
    """Run one collaborative generation to completion.

    In SMALL_ONLY mode the router and server are never consulted. In JOINT
    mode each position is scored from the last-layer hidden state and the
    position is routed when the confidence falls strictly below the
    threshold. Engine and router failures do not raise; they close the
    event log with an error payload and return the partial result.
    """
    stream = stream_generate(
        prompt, cfg, weights, router, client, clock, latency, session_id, collect_logits
    )
    for _ in stream:
        pass
    return stream.result


def _run_loop(
    prompt: str,
    cfg: GenerationConfig,
    weights: ModelWeights,
    router: RouterModel | None,
    client: ServerClient | None,
    clock: MonotonicClock | None,
    latency: LatencyModel | None,
    session_id: str | None,
    collect_logits: bool,
    holder: dict,
) -> Iterator[TaggedToken]:
    cfg = validate_config(cfg)
    clock = clock if clock is not None else SimulatedClock()
    if latency is None:
        if isinstance(client, LocalClient):
            latency = LatencyModel.from_serving_config(client.server.cfg)
        else:
            latency = LatencyModel(comm_delay_s=0.0, reprefill_delay_s=0.0)
    if cfg.mode is Mode.JOINT and router is None:
        raise TokenRouteError("joint mode requires a router")
    if cfg.mode is Mode.JOINT and client is None:
        raise TokenRouteError("joint mode requires a server client")

    tokenizer = ByteTokenizer()
    sid = session_id or f"session-{uuid.uuid4().hex[:12]}"
    record = SessionRecord(session_id=sid)
    prompt_ids = tokenizer.encode(prompt)
    if not prompt_ids:
        raise EmptyPrompt()

    decoder = codecs.getincrementaldecoder("utf-8")("replace")
    state = LoopState(prompt=prompt, session_id=sid, emitted=[], candidate_text="", hidden=np.zeros(weights.d))
    logits_trace: list[np.ndarray] | None = [] if collect_logits else None
    policy = CiterThreshold(cfg.threshold)
    error: str | None = None
    stop_reason = "max_tokens"
    fallbacks = 0

    def finish() -> GenerationResult:
        record.append(
            DONE,
            clock.now(),
            reason=stop_reason,
            n_tokens=len(state.emitted),
            fallbacks=fallbacks,
            error=error,
        )
        text = "".join(t.text for t in state.emitted) + decoder.decode(b"", final=True)
        result = GenerationResult(
            tokens=list(state.emitted),
            text=text,
            events=record,
            config=cfg,
            session_id=sid,
            error=error,
            stop_reason=stop_reason,
            logits_trace=logits_trace,
        )
        holder["result"] = result
        return result

    all_ids = [BOS_ID] + list(prompt_ids)
    record.append(PREFILL_START, clock.now(), n_tokens=len(all_ids))
    try:
        cache, out = prefill(weights, all_ids)
    except EngineError as exc:
        error, stop_reason = str(exc), "error"
        record.append(PREFILL_END, clock.now(), error=str(exc))
        finish()
        return
    record.append(PREFILL_END, clock.now(), cache_len=cache.length)

    while len(state.emitted) < cfg.max_tokens:
        # the decide phase (greedy candidate + router scoring) is device-side
        # work; it opens an SLM step span so latency accounting attributes it
        record.append(SLM_STEP_START, clock.now(), phase="decide")
        if collect_logits:
            # one entry per decision position: the logits the router saw
            logits_trace.append(np.array(out.logits))
        candidate = greedy_next(out.logits)
        confidence: float | None = None
        route = Route.SLM
        if cfg.mode is Mode.JOINT:
            try:
                decision = route_token(router, out.hidden, policy, len(state.emitted))
            except DimensionMismatch as exc:
                error, stop_reason = str(exc), "error"
                record.append(SLM_STEP_END, clock.now(), phase="decide", emitted=False)
                break
            confidence, route = decision.confidence, decision.route
            record.append(
                ROUTE_DECISION,
                clock.now(),
                token_index=decision.token_index,
                confidence=decision.confidence,
                threshold=decision.threshold,
                route=decision.route.serialize(),
            )

        if route is Route.LLM:
            record.append(SLM_STEP_END, clock.now(), phase="decide", emitted=False)
            state.candidate_text = tokenizer.token_text(candidate)
            state.hidden = out.hidden
            request = build_routing_request(state, cfg)
            record.append(
                LLM_CALL_START, clock.now(), request_id=request.request_id, token_index=request.token_index
            )
            response = None
            failure = ""
            for _attempt in range(2):  # one retry on transport failure
                try:
                    response = client.route_token(request)
                    break
                except ServerUnreachable as exc:
                    failure = str(exc)
            if response is None:
                record.append(LLM_CALL_END, clock.now(), request_id=request.request_id, ok=False, error=failure)
                record.append(FALLBACK, clock.now(), token_index=len(state.emitted), detail=failure)
                fallbacks += 1
                # degrade gracefully: accept the local candidate
                if candidate == EOS_ID:
                    stop_reason = "eos"
                    break
                tagged, cache, out = _emit_slm(state, record, clock, weights, cache, out, candidate, confidence, decoder)
                all_ids.append(candidate)
                yield tagged
                continue
            # plan acceptance before closing the call event so the event
            # carries the count of tokens that actually enter the output
            planned: list = []
            hit_eos = False
            for rt in response.tokens:
                if rt.token == EOS_ID:
                    hit_eos = True
                    break
                if len(state.emitted) + len(planned) >= cfg.max_tokens:
                    break
                planned.append(rt)
            record.append(
                LLM_CALL_END,
                clock.now(),
                request_id=request.request_id,
                ok=True,
                n_tokens=len(planned),
                n_served=len(response.tokens),
                llm_time_seconds=response.llm_time_seconds,
            )
            accepted: list[int] = []
            for i, rt in enumerate(planned):
                tagged = TaggedToken(
                    token=rt.token,
                    text=decoder.decode(bytes([rt.token]) if rt.token < 256 else b""),
                    source=Route.LLM,
                    confidence=confidence if i == 0 else None,
                    emitted_at=clock.now(),
                )
                state.emitted.append(tagged)
                accepted.append(rt.token)
                yield tagged
            if hit_eos:
                stop_reason = "eos"
                break
            if not accepted:
                break
            if cfg.kv_policy is KvPolicy.INCREMENTAL:
                for token in accepted:
                    record.append(SLM_STEP_START, clock.now(), phase="extend")
                    cache, out = decode_step(weights, cache, token)
                    record.append(SLM_STEP_END, clock.now(), phase="extend", emitted=False, token=token)
                    all_ids.append(token)
            else:
                all_ids.extend(accepted)
                record.append(REPREFILL_START, clock.now(), n_tokens=len(all_ids))
                clock.sleep(latency.reprefill_delay_s)
                cache, out = prefill(weights, all_ids)
                record.append(REPREFILL_END, clock.now(), cache_len=cache.length)
            continue

        # local path: the decide span stays open through the decode step and
        # token staging, so the emission timestamp closes the span
        if candidate == EOS_ID:
            record.append(SLM_STEP_END, clock.now(), phase="decide", emitted=False)
            stop_reason = "eos"
            break
        cache, out = decode_step(weights, cache, candidate)
        text = decoder.decode(bytes([candidate]))
        all_ids.append(candidate)
        t_end = clock.now()
        tagged = TaggedToken(
            token=candidate, text=text, source=Route.SLM, confidence=confidence, emitted_at=t_end
        )
        state.emitted.append(tagged)
        record.append(SLM_STEP_END, t_end, phase="decode", emitted=True, token=candidate)
        yield tagged

    finish()


def _emit_slm(state, record, clock, weights, cache, out, candidate, confidence, decoder):
    """Advance the engine by an accepted local token outside the main span
    flow (the transport-fallback path); emission time is the end of the step
    that produced it."""
    record.append(SLM_STEP_START, clock.now(), phase="decode")
    cache, new_out = decode_step(weights, cache, candidate)
    t_end = clock.now()
    tagged = TaggedToken(
        token=candidate,
        text=decoder.decode(bytes([candidate])),
        source=Route.SLM,
        confidence=confidence,
        emitted_at=t_end,
    )
    state.emitted.append(tagged)
    record.append(SLM_STEP_END, t_end, phase="decode", emitted=True, token=candidate)
    return tagged, cache, new_out
