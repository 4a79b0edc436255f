import threading

import pytest

from tokenroute.clock import SimulatedClock
from tokenroute.engine import ByteTokenizer, greedy_next, prefill
from tokenroute.server import (
    BackendFailure,
    EngineBackend,
    MalformedRequest,
    OracleBackend,
    ServingConfig,
    SessionLimitExceeded,
    TokenServer,
)
from tokenroute.types import Route
from tokenroute.wire import PreviousDecision, ResponseToken, RoutingRequest

PAPER_CONTEXT = "The mitochondria is the powerhouse of the"


def make_request(context="hello ", session="s1", request="r1", index=0, history=()):
    return RoutingRequest(
        context=context,
        current_token="x",
        token_index=index,
        routing_threshold=0.7,
        session_id=session,
        request_id=request,
        history=tuple(history),
    )


def cell_oracle(context, n_tokens, token_index=None):
    tok = ByteTokenizer()
    ids = tok.encode("cell")[:n_tokens]
    return [ResponseToken(text=tok.token_text(t), token=t) for t in ids]


@pytest.fixture()
def oracle_server():
    cfg = ServingConfig(backend=OracleBackend(continuation=cell_oracle))
    return TokenServer(cfg, clock=SimulatedClock())


@pytest.fixture()
def engine_server(llm_weights):
    cfg = ServingConfig(backend=EngineBackend(llm_weights))
    return TokenServer(cfg, clock=SimulatedClock())


class TestServe:
    def test_scripted_oracle_returns_cell_with_llm_history(self, oracle_server):
        request = make_request(context=PAPER_CONTEXT, history=[
            PreviousDecision(token="mitochondria", route=Route.SLM),
            PreviousDecision(token="powerhouse", route=Route.LLM),
        ])
        response = oracle_server.serve(request)
        assert [t.text for t in response.tokens] == ["c"]  # burst of 1 byte token
        assert response.updated_history[-1].route is Route.LLM
        assert response.updated_history[:2] == request.history
        assert response.request_id == request.request_id

    def test_burst_contract(self, llm_weights):
        for burst in (1, 3):
            cfg = ServingConfig(backend=EngineBackend(llm_weights), llm_burst=burst)
            server = TokenServer(cfg, clock=SimulatedClock())
            response = server.serve(make_request())
            assert len(response.tokens) == burst

    def test_reference_backend_matches_local_engine_run(self, engine_server, llm_weights):
        # oracle: run the same engine locally on the same context
        tok = ByteTokenizer()
        context = "route this please"
        response = engine_server.serve(make_request(context=context))
        cache, out = prefill(llm_weights, [tok.bos_id] + tok.encode(context))
        assert response.tokens[0].token == greedy_next(out.logits)

    def test_latency_injection_floor(self, oracle_server):
        response = oracle_server.serve(make_request())
        assert response.llm_time_seconds >= oracle_server.cfg.llm_latency_s

    def test_latency_injection_can_be_disabled(self, llm_weights):
        cfg = ServingConfig(backend=EngineBackend(llm_weights), inject_latency=False)
        server = TokenServer(cfg, clock=SimulatedClock())
        response = server.serve(make_request())
        assert response.llm_time_seconds < 0.5

    def test_malformed_body_raises_typed_error(self, oracle_server):
        with pytest.raises(MalformedRequest):
            oracle_server.serve_bytes(b"{broken")

    def test_session_limit(self, llm_weights):
        cfg = ServingConfig(backend=EngineBackend(llm_weights), max_sessions=2)
        server = TokenServer(cfg, clock=SimulatedClock())
        server.serve(make_request(session="a"))
        server.serve(make_request(session="b"))
        with pytest.raises(SessionLimitExceeded):
            server.serve(make_request(session="c"))

    def test_backend_failure_is_typed(self):
        cfg = ServingConfig(backend=OracleBackend(table={"known": "x"}))
        server = TokenServer(cfg, clock=SimulatedClock())
        with pytest.raises(BackendFailure):
            server.serve(make_request(context="unknown"))


class TestIdempotency:
    def test_replay_returns_identical_bytes_without_backend_rerun(self, llm_weights):
        calls = {"n": 0}

        class CountingBackend(EngineBackend):
            def generate(self, *args, **kwargs):
                calls["n"] += 1
                return super().generate(*args, **kwargs)

        cfg = ServingConfig(backend=CountingBackend(llm_weights))
        server = TokenServer(cfg, clock=SimulatedClock())
        from tokenroute.wire import serialize_request

        body = serialize_request(make_request(session="s", request="dup"))
        first = server.serve_bytes(body)
        second = server.serve_bytes(body)
        assert first == second
        assert calls["n"] == 1

    def test_replay_through_object_interface(self, oracle_server):
        request = make_request(session="s", request="same")
        a = oracle_server.serve(request)
        b = oracle_server.serve(request)
        assert a == b


class TestStatelessness:
    def test_cold_session_equals_warm_session(self, llm_weights):
        tok = ByteTokenizer()
        warm = TokenServer(ServingConfig(backend=EngineBackend(llm_weights)), clock=SimulatedClock())
        cold = TokenServer(ServingConfig(backend=EngineBackend(llm_weights)), clock=SimulatedClock())

        context = "step one "
        responses_warm, responses_cold = [], []
        for i in range(4):
            req_warm = make_request(context=context, session="warm", request=f"r{i}", index=i)
            resp = warm.serve(req_warm)
            responses_warm.append(resp)
            # the cold server gets a brand-new session every time
            req_cold = make_request(context=context, session=f"cold{i}", request=f"r{i}", index=i)
            responses_cold.append(cold.serve(req_cold))
            context += "".join(t.text for t in resp.tokens) + " and"
        for a, b in zip(responses_warm, responses_cold):
            assert [t.token for t in a.tokens] == [t.token for t in b.tokens]

    def test_evicted_session_served_identically(self, llm_weights):
        server = TokenServer(ServingConfig(backend=EngineBackend(llm_weights)), clock=SimulatedClock())
        twin = TokenServer(ServingConfig(backend=EngineBackend(llm_weights)), clock=SimulatedClock())

        first = make_request(context="abc ", session="s", request="r1")
        server.serve(first)
        twin.serve(first)

        server.clock.sleep(100.0)
        assert server.session_gc(max_idle_s=10.0) == 1

        follow_up = make_request(context="abc def ", session="s", request="r2", index=1)
        evicted_resp = server.serve(follow_up)
        never_evicted = twin.serve(follow_up)
        assert [t.token for t in evicted_resp.tokens] == [t.token for t in never_evicted.tokens]


class TestSessionGc:
    def test_no_sessions_evicts_zero(self, oracle_server):
        assert oracle_server.session_gc(10.0) == 0

    def test_selective_eviction(self, oracle_server):
        oracle_server.serve(make_request(session="idle", request="r1"))
        oracle_server.clock.sleep(50.0)
        oracle_server.serve(make_request(session="active", request="r1"))
        assert oracle_server.session_gc(max_idle_s=20.0) == 1
        assert oracle_server.session_snapshot("active") is not None
        assert oracle_server.session_snapshot("idle") is None


class TestConcurrency:
    def test_parallel_sessions_match_serial_replay(self, llm_weights):
        n_sessions, n_requests = 16, 5
        parallel = TokenServer(
            ServingConfig(backend=EngineBackend(llm_weights), max_sessions=64), clock=SimulatedClock()
        )
        serial = TokenServer(
            ServingConfig(backend=EngineBackend(llm_weights), max_sessions=64), clock=SimulatedClock()
        )

        transcripts: dict[str, list[int]] = {}
        lock = threading.Lock()
        errors: list[Exception] = []

        def worker(session_idx: int):
            session = f"fuzz-{session_idx}"
            context = f"session {session_idx} starts "
            tokens: list[int] = []
            try:
                for i in range(n_requests):
                    resp = parallel.serve(
                        make_request(context=context, session=session, request=f"r{i}", index=i)
                    )
                    got = [t.token for t in resp.tokens]
                    tokens.extend(got)
                    context += "".join(t.text for t in resp.tokens) + f" more{i} "
            except Exception as exc:  # surfaced after join
                with lock:
                    errors.append(exc)
                return
            with lock:
                transcripts[session] = tokens

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(n_sessions)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert len(transcripts) == n_sessions

        for session_idx in range(n_sessions):
            session = f"fuzz-{session_idx}"
            context = f"session {session_idx} starts "
            serial_tokens: list[int] = []
            for i in range(n_requests):
                resp = serial.serve(
                    make_request(context=context, session=session, request=f"r{i}", index=i)
                )
                serial_tokens.extend(t.token for t in resp.tokens)
                context += "".join(t.text for t in resp.tokens) + f" more{i} "
            assert transcripts[session] == serial_tokens, f"transcript mismatch for {session}"
