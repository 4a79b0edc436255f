import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from tokenroute.router import (
    CiterThreshold,
    CollmDeferral,
    DimensionMismatch,
    RouterModel,
    decide,
    effective_threshold,
    load_router,
    random_router,
    route_token,
    save_router,
    score,
    score_batch,
)
from tokenroute.types import Route


def zero_router(d: int, h: int = 4) -> RouterModel:
    return RouterModel(w1=np.zeros((d, h)), b1=np.zeros(h), w2=np.zeros((h, 1)), b2=np.zeros(1))


class TestScore:
    def test_all_zero_weights_give_half(self, rng):
        model = zero_router(8)
        for _ in range(10):
            assert score(model, rng.normal(size=8)) == 0.5

    def test_symmetry_cancellation(self):
        # single effective linear unit w=[1,-1], b=0 on hidden [2,2]
        model = RouterModel(
            w1=np.array([[1.0], [-1.0]]),
            b1=np.zeros(1),
            w2=np.array([[1.0]]),
            b2=np.zeros(1),
        )
        assert score(model, np.array([2.0, 2.0])) == 0.5

    def test_hand_computed_forward_pass(self):
        # independent desk calculation: z1 = [1.1, 0.3], z2 = 2*1.1 - 0.3 - 0.5 = 1.4
        model = RouterModel(
            w1=np.array([[1.0, 0.5], [-1.0, 0.25]]),
            b1=np.array([0.1, -0.2]),
            w2=np.array([[2.0], [-1.0]]),
            b2=np.array([-0.5]),
        )
        got = score(model, np.array([1.0, 0.0]))
        by_hand = 1.0 / (1.0 + math.exp(-(2.0 * 1.1 - 1.0 * 0.3 - 0.5)))
        assert got == pytest.approx(by_hand, abs=1e-15)
        assert got == pytest.approx(0.8021838885585818, abs=1e-15)

    def test_dimension_mismatch(self, seeded_router):
        with pytest.raises(DimensionMismatch) as info:
            score(seeded_router, np.zeros(7))
        assert info.value.expected == seeded_router.input_dim
        assert info.value.got == 7

    def test_scores_strictly_inside_unit_interval(self, rng):
        model = random_router(16, seed=5)
        hiddens = rng.normal(scale=50.0, size=(200, 16))
        confs = score_batch(model, hiddens)
        assert np.all(confs > 0.0) and np.all(confs < 1.0)

    def test_batch_matches_scalar(self, rng):
        model = random_router(12, seed=9)
        hiddens = rng.normal(size=(20, 12))
        batch = score_batch(model, hiddens)
        for i in range(20):
            assert batch[i] == pytest.approx(score(model, hiddens[i]), abs=1e-12)


class TestDecide:
    def test_below_threshold_routes_to_llm(self):
        assert decide(0.65, CiterThreshold(0.7)) is Route.LLM

    def test_above_threshold_stays_local(self):
        assert decide(0.90, CiterThreshold(0.7)) is Route.SLM

    def test_tie_stays_local(self):
        assert decide(0.70, CiterThreshold(0.7)) is Route.SLM

    def test_collm_deferral_rule(self):
        # defer when deferral score 1 - confidence exceeds eta
        assert decide(0.2, CollmDeferral(0.5)) is Route.LLM
        assert decide(0.8, CollmDeferral(0.5)) is Route.SLM
        assert decide(0.5, CollmDeferral(0.5)) is Route.SLM  # tie

    @given(conf=st.floats(0.0, 1.0), tau=st.floats(0.0, 1.0))
    def test_policy_equivalence(self, conf, tau):
        # documented exemption: exact ties (and the one-ulp window that
        # 1 - (1 - tau) introduces) may differ between the two policies
        assume(abs(conf - tau) > 1e-9)
        citer = decide(conf, CiterThreshold(tau))
        collm = decide(conf, CollmDeferral(1.0 - tau))
        assert citer is collm

    def test_effective_threshold(self):
        assert effective_threshold(CiterThreshold(0.3)) == 0.3
        assert effective_threshold(CollmDeferral(0.3)) == pytest.approx(0.7)


class TestRouteToken:
    def test_zero_threshold_never_routes(self, seeded_router, rng):
        for i in range(20):
            decision = route_token(seeded_router, rng.normal(size=64), CiterThreshold(0.0), i)
            assert decision.route is Route.SLM

    def test_threshold_one_always_routes(self, seeded_router, rng):
        for i in range(20):
            decision = route_token(seeded_router, rng.normal(size=64), CiterThreshold(1.0), i)
            assert decision.route is Route.LLM  # scores are strictly < 1

    def test_decision_records_inputs(self, seeded_router, rng):
        hidden = rng.normal(size=64)
        decision = route_token(seeded_router, hidden, CiterThreshold(0.6), 17)
        assert decision.token_index == 17
        assert decision.threshold == 0.6
        assert (decision.route is Route.LLM) == (decision.confidence < 0.6)

    def test_purity(self, seeded_router, rng):
        hidden = rng.normal(size=64)
        a = route_token(seeded_router, hidden, CiterThreshold(0.5), 3)
        b = route_token(seeded_router, hidden, CiterThreshold(0.5), 3)
        assert a == b

    def test_route_counts_monotone_over_fixed_trace(self, seeded_router, rng):
        # fixed 100-token trace of hidden states; grid mirrors the serving table
        hiddens = rng.normal(size=(100, 64))
        confs = score_batch(seeded_router, hiddens)
        grid = [0.40, 0.50, 0.60, 0.70, 0.72, 0.76, 0.80, 0.90]
        counts = [int(np.sum(confs < tau)) for tau in grid]
        assert counts == sorted(counts)

    @given(tau1=st.floats(0.0, 1.0), tau2=st.floats(0.0, 1.0))
    @settings(max_examples=50)
    def test_routed_set_is_monotone_in_threshold(self, tau1, tau2):
        if tau1 > tau2:
            tau1, tau2 = tau2, tau1
        rng = np.random.default_rng(99)
        confs = rng.uniform(size=200)
        routed1 = {i for i, c in enumerate(confs) if decide(c, CiterThreshold(tau1)) is Route.LLM}
        routed2 = {i for i, c in enumerate(confs) if decide(c, CiterThreshold(tau2)) is Route.LLM}
        assert routed1 <= routed2


class TestRouterFile:
    def test_save_load_round_trip(self, tmp_path, seeded_router):
        path = tmp_path / "router.npz"
        save_router(path, seeded_router)
        loaded = load_router(path, expected_dim=64)
        assert loaded.layer_dims == seeded_router.layer_dims
        for name in ("w1", "b1", "w2", "b2"):
            assert getattr(loaded, name).tobytes() == getattr(seeded_router, name).tobytes()

    def test_dimension_mismatch_rejected_at_load(self, tmp_path, seeded_router):
        path = tmp_path / "router.npz"
        save_router(path, seeded_router)
        with pytest.raises(DimensionMismatch):
            load_router(path, expected_dim=32)
