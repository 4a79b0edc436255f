import numpy as np
import pytest

from tokenroute.clock import SimulatedClock
from tokenroute.engine import EOS_ID, ByteTokenizer
from tokenroute.orchestrator import (
    DONE,
    FALLBACK,
    LLM_CALL_END,
    LLM_CALL_START,
    REPREFILL_START,
    ROUTE_DECISION,
    EmptyPrompt,
    LoopState,
    LocalClient,
    build_routing_request,
    generate,
    read_event_log,
    stream_generate,
    write_event_log,
)
from tokenroute.router import random_router
from tokenroute.server import EngineBackend, OracleBackend, ServingConfig, TokenServer
from tokenroute.types import GenerationConfig, KvPolicy, Mode, Route, TaggedToken
from tokenroute.wire import ResponseToken


def make_server(llm_weights, burst=1, inject=True):
    cfg = ServingConfig(backend=EngineBackend(llm_weights), llm_burst=burst, inject_latency=inject)
    return TokenServer(cfg, clock=SimulatedClock())


def run_joint(slm_weights, llm_weights, router, threshold=0.5, max_tokens=25, kv=KvPolicy.INCREMENTAL,
              prompt="tell me a story ", burst=1, collect_logits=False, session_id="test-session"):
    server = make_server(llm_weights, burst=burst)
    client = LocalClient(server)
    cfg = GenerationConfig(mode=Mode.JOINT, threshold=threshold, max_tokens=max_tokens, kv_policy=kv)
    return generate(
        prompt, cfg, slm_weights, router, client,
        clock=server.clock, collect_logits=collect_logits, session_id=session_id,
    )


class TestSmallOnly:
    def test_no_llm_events_and_no_router_consultations(self, slm_weights):
        cfg = GenerationConfig(mode=Mode.SMALL_ONLY, max_tokens=20)
        result = generate("a quiet afternoon ", cfg, slm_weights, None, None)
        kinds = {ev.kind for ev in result.events.events}
        assert LLM_CALL_START not in kinds and LLM_CALL_END not in kinds
        assert ROUTE_DECISION not in kinds
        assert all(t.source is Route.SLM for t in result.tokens)
        assert all(t.confidence is None for t in result.tokens)

    def test_zero_threshold_joint_matches_small_only(self, slm_weights, llm_weights, seeded_router):
        joint = run_joint(slm_weights, llm_weights, seeded_router, threshold=0.0, max_tokens=20)
        cfg = GenerationConfig(mode=Mode.SMALL_ONLY, max_tokens=20)
        small = generate("tell me a story ", cfg, slm_weights, None, None)
        assert [t.token for t in joint.tokens] == [t.token for t in small.tokens]
        assert joint.text == small.text
        assert all(t.source is Route.SLM for t in joint.tokens)
        # router was consulted in joint mode, so confidences are recorded
        assert all(t.confidence is not None for t in joint.tokens)


class TestJoint:
    def test_mixed_provenance_and_confidence_tagging(self, slm_weights, llm_weights, seeded_router):
        result = run_joint(slm_weights, llm_weights, seeded_router, threshold=0.55, max_tokens=30)
        sources = {t.source for t in result.tokens}
        assert sources == {Route.SLM, Route.LLM}
        assert result.error is None
        assert len(result.tokens) == 30

    def test_provenance_soundness(self, slm_weights, llm_weights, seeded_router):
        for burst in (1, 2):
            result = run_joint(slm_weights, llm_weights, seeded_router, threshold=0.55, burst=burst)
            llm_tokens = sum(1 for t in result.tokens if t.source is Route.LLM)
            ok_calls = [
                ev for ev in result.events.events if ev.kind == LLM_CALL_END and ev.payload.get("ok")
            ]
            served = sum(int(ev.payload["n_tokens"]) for ev in ok_calls)
            assert llm_tokens == served  # truncated bursts would still match n_tokens accepted
            assert llm_tokens <= len(ok_calls) * burst

    def test_text_equals_detokenization(self, slm_weights, llm_weights, seeded_router):
        result = run_joint(slm_weights, llm_weights, seeded_router, threshold=0.55)
        tok = ByteTokenizer()
        assert result.text == tok.decode([t.token for t in result.tokens])

    def test_determinism(self, slm_weights, llm_weights, seeded_router):
        a = run_joint(slm_weights, llm_weights, seeded_router, threshold=0.55)
        b = run_joint(slm_weights, llm_weights, seeded_router, threshold=0.55)
        assert [(t.token, t.source, t.confidence) for t in a.tokens] == [
            (t.token, t.source, t.confidence) for t in b.tokens
        ]

    def test_empty_prompt_rejected(self, slm_weights):
        with pytest.raises(EmptyPrompt):
            generate("", GenerationConfig(mode=Mode.SMALL_ONLY), slm_weights, None, None)

    def test_eos_from_llm_terminates(self, slm_weights, seeded_router):
        backend = OracleBackend(continuation=lambda ctx, n, idx=None: [ResponseToken(text="<eos>", token=EOS_ID)])
        server = TokenServer(ServingConfig(backend=backend), clock=SimulatedClock())
        cfg = GenerationConfig(mode=Mode.JOINT, threshold=1.0, max_tokens=10)
        result = generate("halt now ", cfg, slm_weights, seeded_router, LocalClient(server), clock=server.clock)
        assert result.stop_reason == "eos"
        assert result.tokens == []

    def test_router_dimension_mismatch_leaves_partial_result(self, slm_weights, llm_weights):
        bad_router = random_router(16, seed=2)
        result = run_joint(slm_weights, llm_weights, bad_router)
        assert result.error is not None
        assert result.tokens == []
        done = result.events.events[-1]
        assert done.kind == DONE and done.payload["error"]


class TestKvPolicyEquivalence:
    def test_tokens_and_logits_agree_across_policies(self, slm_weights, llm_weights, seeded_router):
        incremental = run_joint(
            slm_weights, llm_weights, seeded_router, threshold=0.55, kv=KvPolicy.INCREMENTAL,
            collect_logits=True,
        )
        reprefill = run_joint(
            slm_weights, llm_weights, seeded_router, threshold=0.55, kv=KvPolicy.REPREFILL_ON_ROUTE,
            collect_logits=True,
        )
        assert [t.token for t in incremental.tokens] == [t.token for t in reprefill.tokens]
        assert [t.source for t in incremental.tokens] == [t.source for t in reprefill.tokens]
        assert len(incremental.logits_trace) == len(reprefill.logits_trace)
        for a, b in zip(incremental.logits_trace, reprefill.logits_trace):
            np.testing.assert_allclose(a, b, atol=1e-5)

    def test_reprefill_policy_records_reprefill_events(self, slm_weights, llm_weights, seeded_router):
        result = run_joint(
            slm_weights, llm_weights, seeded_router, threshold=0.55, kv=KvPolicy.REPREFILL_ON_ROUTE
        )
        routed_calls = sum(
            1 for ev in result.events.events if ev.kind == LLM_CALL_END and ev.payload.get("ok")
        )
        reprefills = sum(1 for ev in result.events.events if ev.kind == REPREFILL_START)
        assert routed_calls > 0
        assert reprefills == routed_calls


class TestStreaming:
    def test_stream_matches_batch(self, slm_weights, llm_weights, seeded_router):
        server = make_server(llm_weights)
        cfg = GenerationConfig(mode=Mode.JOINT, threshold=0.55, max_tokens=25)
        stream = stream_generate(
            "tell me a story ", cfg, slm_weights, seeded_router, LocalClient(server),
            clock=server.clock, session_id="stream-a",
        )
        streamed = list(stream)
        batch = run_joint(slm_weights, llm_weights, seeded_router, threshold=0.55, session_id="batch-a")
        # concatenated stream text equals the aggregate text (modulo the
        # final decoder flush, which lands in .text)
        assert stream.result.text.startswith("".join(t.text for t in streamed))
        assert stream.result.text == batch.text
        assert [t.token for t in streamed] == [t.token for t in batch.tokens]
        assert all(t.source in (Route.SLM, Route.LLM) for t in streamed)

    def test_llm_tags_exactly_where_confidence_below_threshold(self, slm_weights, llm_weights, seeded_router):
        result = run_joint(slm_weights, llm_weights, seeded_router, threshold=0.55, burst=1)
        decisions = [ev for ev in result.events.events if ev.kind == ROUTE_DECISION]
        assert len(decisions) == len(result.tokens)
        for token, decision in zip(result.tokens, decisions):
            expect_llm = decision.payload["confidence"] < decision.payload["threshold"]
            assert (token.source is Route.LLM) == expect_llm

    def test_result_unavailable_before_drain(self, slm_weights):
        cfg = GenerationConfig(mode=Mode.SMALL_ONLY, max_tokens=5)
        stream = stream_generate("wait for it ", cfg, slm_weights, None, None)
        from tokenroute.types import TokenRouteError

        with pytest.raises(TokenRouteError):
            _ = stream.result


class TestRetryAndFallback:
    def test_single_transport_failure_is_retried(self, slm_weights, llm_weights, seeded_router):
        server = make_server(llm_weights)
        client = LocalClient(server, fail_times=1)
        cfg = GenerationConfig(mode=Mode.JOINT, threshold=1.0, max_tokens=5)
        result = generate("retry me ", cfg, slm_weights, seeded_router, client, clock=server.clock)
        assert result.error is None
        assert not [ev for ev in result.events.events if ev.kind == FALLBACK]
        assert result.tokens[0].source is Route.LLM

    def test_exhausted_retries_fall_back_to_local_token(self, slm_weights, llm_weights, seeded_router):
        server = make_server(llm_weights)
        client = LocalClient(server, fail_times=2)
        cfg = GenerationConfig(mode=Mode.JOINT, threshold=1.0, max_tokens=5)
        result = generate("degrade me ", cfg, slm_weights, seeded_router, client, clock=server.clock)
        fallbacks = [ev for ev in result.events.events if ev.kind == FALLBACK]
        assert len(fallbacks) == 1
        assert result.tokens[0].source is Route.SLM
        # later calls succeed again
        assert any(t.source is Route.LLM for t in result.tokens[1:])
        failed_end = [
            ev for ev in result.events.events
            if ev.kind == LLM_CALL_END and ev.payload.get("ok") is False
        ]
        assert len(failed_end) == 1


class TestBuildRoutingRequest:
    def _fig_state(self):
        words = ["The", "mitochondria", "is", "the", "powerhouse", "of"]
        emitted = []
        for i in range(13):
            emitted.append(TaggedToken(token=i, text=f"w{i} ", source=Route.SLM, confidence=0.9, emitted_at=float(i)))
        emitted.append(
            TaggedToken(token=900, text="mitochondria ", source=Route.SLM, confidence=0.92, emitted_at=13.0)
        )
        emitted.append(
            TaggedToken(token=901, text="powerhouse ", source=Route.LLM, confidence=0.31, emitted_at=14.0)
        )
        return LoopState(
            prompt="Finish the sentence: ",
            session_id="session123",
            emitted=emitted,
            candidate_text="cell",
            hidden=np.arange(4.0),
        )

    def test_fig_scenario_fields(self):
        state = self._fig_state()
        cfg = GenerationConfig(mode=Mode.JOINT, threshold=0.7)
        request = build_routing_request(state, cfg)
        assert request.token_index == 15  # count of already-emitted tokens
        assert request.current_token == "cell"
        assert request.routing_threshold == 0.7
        assert request.context == state.prompt + "".join(t.text for t in state.emitted)
        assert len(request.history) == 15
        assert request.history[13].token == "mitochondria " and request.history[13].route is Route.SLM
        assert request.history[14].token == "powerhouse " and request.history[14].route is Route.LLM
        assert request.hidden_states == (0.0, 1.0, 2.0, 3.0)

    def test_first_routed_token_history_lists_all_prior(self):
        state = self._fig_state()
        request = build_routing_request(state, GenerationConfig())
        assert [d.token for d in request.history] == [t.text for t in state.emitted]

    def test_request_ids_increment(self):
        state = self._fig_state()
        first = build_routing_request(state, GenerationConfig())
        second = build_routing_request(state, GenerationConfig())
        assert first.request_id != second.request_id


class TestEventLogFile:
    def test_round_trip(self, tmp_path, slm_weights):
        cfg = GenerationConfig(mode=Mode.SMALL_ONLY, max_tokens=8)
        result = generate("log me ", cfg, slm_weights, None, None)
        path = tmp_path / "events.jsonl"
        write_event_log(result.events, path)
        loaded = read_event_log(path)
        assert loaded.session_id == result.events.session_id
        assert [ev.kind for ev in loaded.events] == [ev.kind for ev in result.events.events]
        assert [ev.t for ev in loaded.events] == [ev.t for ev in result.events.events]
