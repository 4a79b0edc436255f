"""Shared domain vocabulary: routes, modes, tagged tokens, generation config.

Everything here is an immutable value type; instances are safe to copy and
share between sessions and threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class TokenRouteError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TokenRouteError, ValueError):
    """A configuration field violates its bounds."""

    field_name = ""


class ThresholdOutOfRange(ConfigError):
    field_name = "threshold"

    def __init__(self, value: float):
        super().__init__(f"threshold must lie in [0, 1], got {value!r}")
        self.value = value


class NonPositiveMaxTokens(ConfigError):
    field_name = "max_tokens"

    def __init__(self, value: int):
        super().__init__(f"max_tokens must be >= 1, got {value!r}")
        self.value = value


class NonPositiveBurst(ConfigError):
    field_name = "llm_burst"

    def __init__(self, value: int):
        super().__init__(f"llm_burst must be >= 1, got {value!r}")
        self.value = value


class Route(enum.Enum):
    """Which model produced (or should produce) a token."""

    SLM = "SLM"
    LLM = "LLM"

    def serialize(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "Route":
        for route in cls:
            if route.value == text:
                return route
        raise ValueError(f"unknown route {text!r} (expected 'SLM' or 'LLM')")


class Mode(enum.Enum):
    """Decoding mode: collaborative or small-model-only."""

    JOINT = "joint"
    SMALL_ONLY = "small_only"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        for mode in cls:
            if mode.value == text:
                return mode
        raise ValueError(f"unknown mode {text!r} (expected 'joint' or 'small_only')")


class KvPolicy(enum.Enum):
    """How the on-device KV cache is reconciled after remote tokens arrive.

    INCREMENTAL extends the existing cache one token at a time.
    REPREFILL_ON_ROUTE throws the cache away and reprocesses the whole
    context after every remote call (the behavior of runtimes without
    cache-injection support). Both policies produce identical tokens; they
    differ only in recorded latency.
    """

    INCREMENTAL = "incremental"
    REPREFILL_ON_ROUTE = "reprefill_on_route"

    @classmethod
    def parse(cls, text: str) -> "KvPolicy":
        for policy in cls:
            if policy.value == text:
                return policy
        raise ValueError(f"unknown kv policy {text!r}")


@dataclass(frozen=True)
class TaggedToken:
    """A generated token with provenance, confidence, and emission time.

    ``confidence`` is present exactly when the router was consulted for the
    position that produced this token; tokens emitted without a routing
    decision (small-only mode, trailing burst tokens) carry ``None``.
    ``emitted_at`` is monotonic-clock seconds, never wall-clock.
    """

    token: int
    text: str
    source: Route
    confidence: float | None
    emitted_at: float


@dataclass(frozen=True)
class GenerationConfig:
    """Per-request generation settings.

    ``threshold`` is the confidence cutoff: a token is routed to the large
    model when its confidence falls strictly below it. ``llm_burst`` is the
    client's expectation of tokens per routed call; the serving side's
    configured burst is authoritative.
    """

    mode: Mode = Mode.JOINT
    threshold: float = 0.7
    max_tokens: int = 100
    llm_burst: int = 1
    kv_policy: KvPolicy = KvPolicy.INCREMENTAL
    stream: bool = False


def validate_config(cfg: GenerationConfig) -> GenerationConfig:
    """Check all GenerationConfig invariants, returning the config unchanged.

    Raises ThresholdOutOfRange, NonPositiveMaxTokens, or NonPositiveBurst,
    each naming the offending field. Idempotent: validating a validated
    config returns an equal value.
    """
    if not isinstance(cfg.threshold, (int, float)) or not (0.0 <= cfg.threshold <= 1.0):
        raise ThresholdOutOfRange(cfg.threshold)
    if cfg.max_tokens < 1:
        raise NonPositiveMaxTokens(cfg.max_tokens)
    if cfg.llm_burst < 1:
        raise NonPositiveBurst(cfg.llm_burst)
    return cfg
