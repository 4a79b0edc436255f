"""Confidence scoring and routing decisions.

The router is a one-hidden-layer MLP over the small model's last-layer
hidden state at the current position (no pooling over context). Its sigmoid
output is the confidence that the small model's token suffices; a token is
routed to the large model exactly when that confidence falls strictly below
the active cutoff, so ties stay on the cheap path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorio
from .types import Route, TokenRouteError


class DimensionMismatch(TokenRouteError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"hidden state has dimension {got}, router expects {expected}")
        self.expected = expected
        self.got = got


@dataclass
class RouterModel:
    """MLP weights: rectifier hidden layer, sigmoid output.

    Layer dims are [d, h, 1] with h = d // 2 by default. Immutable after
    load or training; ``score`` is pure and callable concurrently.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def layer_dims(self) -> tuple[int, int, int]:
        return (self.w1.shape[0], self.w1.shape[1], 1)

    def validate(self) -> None:
        d, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, 1) or self.b2.shape != (1,):
            raise TokenRouteError(
                f"inconsistent router shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )
        for name, arr in (("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)):
            if not np.all(np.isfinite(arr)):
                raise TokenRouteError(f"router parameter {name} contains non-finite entries")

    def copy(self) -> "RouterModel":
        return RouterModel(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def random_router(d: int, hidden: int | None = None, seed: int = 0) -> RouterModel:
    """Seeded random initialization; hidden width defaults to d // 2."""
    h = hidden if hidden is not None else max(1, d // 2)
    rng = np.random.default_rng(seed)
    model = RouterModel(
        w1=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h)),
        b1=np.zeros(h),
        w2=rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, 1)),
        b2=np.zeros(1),
    )
    model.validate()
    return model


def sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


# keeps scores strictly inside (0, 1) even when the sigmoid saturates in
# float64; ties at exactly 0 or 1 would otherwise escape the threshold rule
_SCORE_EPS = 1e-12


def score(model: RouterModel, hidden: np.ndarray) -> float:
    """Confidence in (0, 1) that the small model's token suffices."""
    vec = np.asarray(hidden, dtype=np.float64).reshape(-1)
    if vec.shape[0] != model.input_dim:
        raise DimensionMismatch(model.input_dim, vec.shape[0])
    a1 = np.maximum(vec @ model.w1 + model.b1, 0.0)
    z2 = float(a1 @ model.w2[:, 0] + model.b2[0])
    return float(np.clip(sigmoid(z2), _SCORE_EPS, 1.0 - _SCORE_EPS))


def score_batch(model: RouterModel, hiddens: np.ndarray) -> np.ndarray:
    """Vectorized ``score`` over an (N, d) array."""
    mat = np.asarray(hiddens, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != model.input_dim:
        raise DimensionMismatch(model.input_dim, mat.shape[-1] if mat.ndim else 0)
    a1 = np.maximum(mat @ model.w1 + model.b1, 0.0)
    raw = sigmoid(a1 @ model.w2 + model.b2).reshape(-1)
    return np.clip(raw, _SCORE_EPS, 1.0 - _SCORE_EPS)


@dataclass(frozen=True)
class CiterThreshold:
    """Route to the LLM when confidence < tau."""

    tau: float


@dataclass(frozen=True)
class CollmDeferral:
    """Defer to the LLM when the deferral score (1 - confidence) > eta."""

    eta: float


DeferralPolicy = CiterThreshold | CollmDeferral


def effective_threshold(policy: DeferralPolicy) -> float:
    """Scalar confidence cutoff equivalent to the policy.

    Both policies reduce to "LLM iff confidence < cutoff": deferring when
    1 - confidence > eta is the same strict comparison with cutoff 1 - eta,
    so CiterThreshold(t) and CollmDeferral(1 - t) agree everywhere,
    including at exact ties (both keep the token on the SLM).
    """
    if isinstance(policy, CiterThreshold):
        return policy.tau
    return 1.0 - policy.eta


def decide(confidence: float, policy: DeferralPolicy) -> Route:
    return Route.LLM if confidence < effective_threshold(policy) else Route.SLM


@dataclass(frozen=True)
class RoutingDecision:
    """One per-token routing decision: route == LLM iff confidence < threshold."""

    token_index: int
    confidence: float
    threshold: float
    route: Route


def route_token(
    model: RouterModel, hidden: np.ndarray, policy: DeferralPolicy, token_index: int
) -> RoutingDecision:
    """Score the hidden state and decide the route; pure, no side effects."""
    confidence = score(model, hidden)
    cutoff = effective_threshold(policy)
    return RoutingDecision(
        token_index=token_index,
        confidence=confidence,
        threshold=cutoff,
        route=decide(confidence, policy),
    )


def save_router(path, model: RouterModel) -> None:
    meta = {
        "kind": "router-weights",
        "input_dim": model.input_dim,
        "layer_dims": list(model.layer_dims),
    }
    tensorio.save_tensors(path, {"w1": model.w1, "b1": model.b1, "w2": model.w2, "b2": model.b2}, meta)


def load_router(path, expected_dim: int | None = None) -> RouterModel:
    tensors, meta = tensorio.load_tensors(path)
    if meta.get("kind") != "router-weights":
        raise TokenRouteError(f"{path}: not a router weight file (kind={meta.get('kind')!r})")
    model = RouterModel(w1=tensors["w1"], b1=tensors["b1"], w2=tensors["w2"], b2=tensors["b2"])
    model.validate()
    if expected_dim is not None and model.input_dim != expected_dim:
        raise DimensionMismatch(expected_dim, model.input_dim)
    return model
