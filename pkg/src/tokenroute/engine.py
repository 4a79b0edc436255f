"""Reference small-model engine: byte tokenizer, tiny transformer, KV cache.

The model is a deterministic decoder-only transformer in float64 numpy,
small enough for brute-force equivalence checks but with real KV-cache
bookkeeping. Every forward pass exposes the last-layer hidden state (the
normalized vector the output head consumes) alongside the logits; backends
that cannot provide that vector cannot host the router.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .types import TokenRouteError

BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258


class EngineError(TokenRouteError):
    """Base class for engine failures."""


class EmptyInput(EngineError):
    def __init__(self) -> None:
        super().__init__("prefill requires at least one token")


class TokenOutOfVocab(EngineError):
    def __init__(self, index: int, token: int, vocab_size: int):
        super().__init__(f"token {token} at position {index} outside vocabulary of size {vocab_size}")
        self.index = index
        self.token = token


class ByteTokenizer:
    """Byte-level tokenizer: ids 0..255 are raw bytes, plus BOS and EOS.

    ``decode(encode(s)) == s`` for any UTF-8 string, and exactly for any
    byte string via the ``*_bytes`` variants. ``encode`` never produces the
    special ids.
    """

    vocab_size = VOCAB_SIZE
    bos_id = BOS_ID
    eos_id = EOS_ID

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def encode_bytes(self, data: bytes) -> list[int]:
        return list(data)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def decode_bytes(self, ids) -> bytes:
        return bytes(i for i in ids if i < 256)

    def token_text(self, token: int) -> str:
        """Render a single token for display; specials get angle-bracket names."""
        if token == BOS_ID:
            return "<bos>"
        if token == EOS_ID:
            return "<eos>"
        return bytes([token]).decode("utf-8", errors="replace")


@dataclass
class ModelWeights:
    """All parameters of the reference transformer plus the init seed.

    Tensors are keyed ``tok_emb``, ``layers.{i}.{name}``, ``ln_f_{g,b}``,
    ``head_w``, ``head_b``; see ``random_weights`` for shapes. Weights are
    immutable by convention and shareable across sessions.
    """

    d: int
    n_layers: int
    n_heads: int
    vocab_size: int
    seed: int
    tensors: dict[str, np.ndarray]

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def validate(self) -> None:
        d, v = self.d, self.vocab_size
        if d % self.n_heads != 0:
            raise EngineError(f"hidden dim {d} not divisible by {self.n_heads} heads")
        expected = _tensor_shapes(d, self.n_layers, v)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise EngineError(f"missing tensor {name!r}")
            got = self.tensors[name].shape
            if got != shape:
                raise EngineError(f"tensor {name!r} has shape {got}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise EngineError(f"tensor {name!r} contains non-finite entries")


def _tensor_shapes(d: int, n_layers: int, vocab_size: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (vocab_size, d)}
    for i in range(n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
        shapes[p + "w_up"] = (d, 4 * d)
        shapes[p + "b_up"] = (4 * d,)
        shapes[p + "w_down"] = (4 * d, d)
        shapes[p + "b_down"] = (d,)
    shapes["ln_f_g"] = (d,)
    shapes["ln_f_b"] = (d,)
    shapes["head_w"] = (d, vocab_size)
    shapes["head_b"] = (vocab_size,)
    return shapes


def random_weights(
    d: int = 64,
    n_layers: int = 4,
    n_heads: int = 4,
    vocab_size: int = VOCAB_SIZE,
    seed: int = 0,
) -> ModelWeights:
    """Deterministic random initialization for the reference model.

    The output-head bias for BOS/EOS starts strongly negative so that a
    randomly initialized model decodes text bytes rather than terminating
    immediately; trained or hand-built weights may override it.
    """
    rng = np.random.default_rng(seed)
    scale = 0.02
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _tensor_shapes(d, n_layers, vocab_size).items():
        base = name.rsplit(".", 1)[-1]
        if base.startswith("ln"):
            tensors[name] = np.ones(shape) if name.endswith("_g") else np.zeros(shape)
        elif base.startswith("b_") or name == "head_b":
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, scale, size=shape)
    tensors["head_b"][BOS_ID] = -8.0
    tensors["head_b"][EOS_ID] = -8.0
    weights = ModelWeights(d=d, n_layers=n_layers, n_heads=n_heads, vocab_size=vocab_size, seed=seed, tensors=tensors)
    weights.validate()
    return weights


class KvCache:
    """Per-layer key/value tensors for one decoding session.

    ``length`` equals the number of tokens processed since creation;
    appending a block of T tokens grows it by exactly T. A cache belongs to
    a single generation loop; concurrent sessions each own their cache.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.length = 0
        self._k = [np.zeros((n_heads, 0, head_dim)) for _ in range(n_layers)]
        self._v = [np.zeros((n_heads, 0, head_dim)) for _ in range(n_layers)]

    def extend(self, layer: int, k_new: np.ndarray, v_new: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Append new positions to one layer, returning the full K and V."""
        self._k[layer] = np.concatenate((self._k[layer], k_new), axis=1)
        self._v[layer] = np.concatenate((self._v[layer], v_new), axis=1)
        return self._k[layer], self._v[layer]

    def copy(self) -> "KvCache":
        dup = KvCache(self.n_layers, self.n_heads, self.head_dim)
        dup.length = self.length
        dup._k = [k.copy() for k in self._k]
        dup._v = [v.copy() for v in self._v]
        return dup


@dataclass(frozen=True)
class StepOutput:
    """Logits over the vocabulary and the last-layer hidden state at the
    newest position. No engine operation returns logits without the hidden
    vector; that exposure is the contract the router depends on."""

    logits: np.ndarray
    hidden: np.ndarray


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _positional_encoding(positions: np.ndarray, d: int) -> np.ndarray:
    inv = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    angles = positions[:, None].astype(np.float64) * inv[None, :]
    pe = np.zeros((len(positions), d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def _check_tokens(tokens, vocab_size: int) -> list[int]:
    ids = list(tokens)
    for i, t in enumerate(ids):
        if not (0 <= int(t) < vocab_size):
            raise TokenOutOfVocab(i, int(t), vocab_size)
    return [int(t) for t in ids]


def _block_forward(
    weights: ModelWeights, ids: list[int], cache: KvCache, want_all: bool = False
) -> StepOutput | tuple[np.ndarray, np.ndarray]:
    t = weights.tensors
    d, n_heads, head_dim = weights.d, weights.n_heads, weights.head_dim
    T, prev = len(ids), cache.length
    positions = prev + np.arange(T)
    x = t["tok_emb"][ids] + _positional_encoding(positions, d)

    for layer in range(weights.n_layers):
        p = f"layers.{layer}."
        h = _layer_norm(x, t[p + "ln1_g"], t[p + "ln1_b"])
        q = (h @ t[p + "wq"]).reshape(T, n_heads, head_dim).transpose(1, 0, 2)
        k = (h @ t[p + "wk"]).reshape(T, n_heads, head_dim).transpose(1, 0, 2)
        v = (h @ t[p + "wv"]).reshape(T, n_heads, head_dim).transpose(1, 0, 2)
        full_k, full_v = cache.extend(layer, k, v)
        scores = q @ full_k.transpose(0, 2, 1) / math.sqrt(head_dim)
        # causal: row at absolute position prev+i may attend columns <= prev+i
        cols = np.arange(full_k.shape[1])[None, :]
        rows = positions[:, None]
        scores = np.where(cols > rows, -np.inf, scores)
        attn = _softmax(scores) @ full_v
        x = x + attn.transpose(1, 0, 2).reshape(T, d) @ t[p + "wo"]
        h2 = _layer_norm(x, t[p + "ln2_g"], t[p + "ln2_b"])
        x = x + np.maximum(h2 @ t[p + "w_up"] + t[p + "b_up"], 0.0) @ t[p + "w_down"] + t[p + "b_down"]

    hidden = _layer_norm(x, t["ln_f_g"], t["ln_f_b"])
    logits = hidden @ t["head_w"] + t["head_b"]
    cache.length = prev + T
    if want_all:
        return logits, hidden
    return StepOutput(logits=logits[-1], hidden=hidden[-1])


def prefill(weights: ModelWeights, tokens) -> tuple[KvCache, StepOutput]:
    """Process a full context, returning a fresh cache and the final-position
    output. Deterministic for fixed weights and tokens."""
    ids = _check_tokens(tokens, weights.vocab_size)
    if not ids:
        raise EmptyInput()
    cache = KvCache(weights.n_layers, weights.n_heads, weights.head_dim)
    out = _block_forward(weights, ids, cache)
    return cache, out


def decode_step(weights: ModelWeights, cache: KvCache, token: int) -> tuple[KvCache, StepOutput]:
    """Extend the cache by one token and return the new last-position output.

    The cache is updated in place and returned; its length grows by one.
    """
    ids = _check_tokens([token], weights.vocab_size)
    out = _block_forward(weights, ids, cache)
    return cache, out


def full_forward(weights: ModelWeights, tokens) -> tuple[np.ndarray, np.ndarray]:
    """Logits and hidden states for every position of a sequence.

    Used for dataset construction; no cache is retained.
    """
    ids = _check_tokens(tokens, weights.vocab_size)
    if not ids:
        raise EmptyInput()
    cache = KvCache(weights.n_layers, weights.n_heads, weights.head_dim)
    logits, hidden = _block_forward(weights, ids, cache, want_all=True)
    return logits, hidden


def greedy_next(logits: np.ndarray) -> int:
    """Smallest index achieving the maximum logit."""
    return int(np.argmax(logits))


def sample_next(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Temperature sampling; temperature 0 falls back to greedy.

    Greedy is the default decoding mode everywhere and the only one the
    equivalence suites cover; sampling exists for interactive use.
    """
    if temperature <= 0.0:
        return greedy_next(logits)
    scaled = logits / temperature
    probs = _softmax(scaled.reshape(1, -1)).reshape(-1)
    return int(rng.choice(len(probs), p=probs))


def save_weights(path, weights: ModelWeights) -> None:
    meta = {
        "kind": "engine-weights",
        "d": weights.d,
        "n_layers": weights.n_layers,
        "n_heads": weights.n_heads,
        "vocab_size": weights.vocab_size,
        "seed": weights.seed,
    }
    tensorio.save_tensors(path, weights.tensors, meta)


def load_weights(path) -> ModelWeights:
    tensors, meta = tensorio.load_tensors(path)
    if meta.get("kind") != "engine-weights":
        raise EngineError(f"{path}: not an engine weight file (kind={meta.get('kind')!r})")
    weights = ModelWeights(
        d=int(meta["d"]),
        n_layers=int(meta["n_layers"]),
        n_heads=int(meta["n_heads"]),
        vocab_size=int(meta["vocab_size"]),
        seed=int(meta["seed"]),
        tensors=tensors,
    )
    weights.validate()
    return weights
