"""Router training from shortcut preference labels.

Labels come from single-token agreement with ground truth: the small model
is preferred when it already predicts the next token, otherwise the large
model is preferred when it does, and only when both miss is a full-rollout
comparison required (those examples are tagged NEEDS_ROLLOUT and dropped by
default). Two-action pairwise preference with a per-example preferred action
reduces exactly to binary cross-entropy on the sigmoid confidence, with
target 1 for prefer-SLM and 0 for prefer-LLM; that reduction is what
``train`` optimizes, with plain mini-batch gradient descent so runs are
reproducible under a fixed seed.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensorio
from .engine import ModelWeights, full_forward, greedy_next, BOS_ID
from .router import CiterThreshold, DeferralPolicy, RouterModel, decide, random_router, score_batch, sigmoid
from .types import Route, TokenRouteError

# An oracle takes the ground-truth context so far (no BOS) and returns the
# large model's next-token prediction.
LlmOracle = Callable[[Sequence[int]], int]


class EmptyDataset(TokenRouteError):
    def __init__(self) -> None:
        super().__init__("no trainable examples after dropping rollout-needed labels")


class SingleClassDataset(UserWarning):
    """Training data contains one preference class; calibration is suspect."""


class PreferenceLabel(enum.Enum):
    PREFER_SLM = "prefer_slm"
    PREFER_LLM = "prefer_llm"
    NEEDS_ROLLOUT = "needs_rollout"


@dataclass(frozen=True)
class TrainingExample:
    hidden: np.ndarray
    label: PreferenceLabel
    context_len: int


@dataclass(frozen=True)
class TraceRecord:
    """Bookkeeping for one decode position of dataset construction."""

    seq_index: int
    position: int
    slm_pred: int
    llm_pred: int
    truth: int
    label: PreferenceLabel
    route: Route | None = None


@dataclass
class DatasetBuild:
    examples: list[TrainingExample]
    records: list[TraceRecord]


@dataclass(frozen=True)
class TrainConfig:
    """``class_balance`` weights examples inversely to class frequency;
    off by default (threshold sweeps absorb calibration shifts), useful when
    deferral-worthy positions are rare."""

    learning_rate: float = 1e-2
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    l2_penalty: float = 1e-4
    class_balance: bool = False

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise TokenRouteError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise TokenRouteError(f"epochs must be >= 1, got {self.epochs}")
        return self


def shortcut_label(slm_pred: int, llm_pred: int, truth: int) -> PreferenceLabel:
    """Single-token preference rule; the small model is checked first."""
    if slm_pred == truth:
        return PreferenceLabel.PREFER_SLM
    if llm_pred == truth:
        return PreferenceLabel.PREFER_LLM
    return PreferenceLabel.NEEDS_ROLLOUT


def build_dataset(
    weights: ModelWeights,
    llm_oracle: LlmOracle,
    corpus: Sequence[Sequence[int]],
    start: int | Sequence[int] = 0,
    router: RouterModel | None = None,
    policy: DeferralPolicy | None = None,
    rollout_labeler: "Callable[[Sequence[int], int], PreferenceLabel | None] | None" = None,
) -> DatasetBuild:
    """One example per decode position of each corpus sequence.

    The hidden state comes from the small model teacher-forced on the
    ground-truth prefix; the label compares the small model's greedy
    prediction and the oracle's prediction against the actual next token.
    ``start`` skips leading positions (e.g. a prompt prefix) per sequence.
    When a router is supplied, each record also carries the route it would
    take at that position, which is how iterative rounds diff their traces.
    ``rollout_labeler`` is the optional hook for positions where both
    single-token predictions miss: it may resolve the preference from a
    full-rollout comparison (see ``make_rollout_labeler``); returning None
    keeps the example as NEEDS_ROLLOUT.
    """
    starts = [start] * len(corpus) if isinstance(start, int) else list(start)
    if len(starts) != len(corpus):
        raise TokenRouteError(f"{len(starts)} start offsets for {len(corpus)} sequences")
    examples: list[TrainingExample] = []
    records: list[TraceRecord] = []
    for seq_index, seq in enumerate(corpus):
        ids = list(seq)
        if not ids:
            raise TokenRouteError(f"corpus sequence {seq_index} is empty")
        # output position j of [BOS] + seq[:-1] predicts seq[j]
        logits, hiddens = full_forward(weights, [BOS_ID] + ids[:-1])
        for pos in range(starts[seq_index], len(ids)):
            hidden = hiddens[pos]
            slm_pred = greedy_next(logits[pos])
            llm_pred = int(llm_oracle(ids[:pos]))
            truth = ids[pos]
            label = shortcut_label(slm_pred, llm_pred, truth)
            if label is PreferenceLabel.NEEDS_ROLLOUT and rollout_labeler is not None:
                resolved = rollout_labeler(ids, pos)
                if resolved is not None:
                    label = resolved
            route = None
            if router is not None:
                conf = score_batch(router, hidden[None, :])[0]
                route = decide(float(conf), policy if policy is not None else CiterThreshold(0.5))
            examples.append(TrainingExample(hidden=hidden, label=label, context_len=pos))
            records.append(
                TraceRecord(
                    seq_index=seq_index,
                    position=pos,
                    slm_pred=slm_pred,
                    llm_pred=llm_pred,
                    truth=truth,
                    label=label,
                    route=route,
                )
            )
    return DatasetBuild(examples=examples, records=records)


def make_rollout_labeler(
    weights: ModelWeights, llm_oracle: LlmOracle, horizon: int = 8
) -> "Callable[[Sequence[int], int], PreferenceLabel | None]":
    """Resolve both-wrong positions by comparing short greedy rollouts.

    Each side decodes ``horizon`` tokens from the ground-truth prefix; the
    side matching more of the true continuation wins. Ties stay unresolved
    (the example keeps NEEDS_ROLLOUT and is dropped by default).
    """

    def matches_for(ids: Sequence[int], pos: int, first: int, continue_with_slm: bool) -> int:
        prefix = list(ids[:pos])
        rollout = [first]
        truth = list(ids[pos : pos + horizon])
        while len(rollout) < len(truth):
            context = prefix + rollout
            if continue_with_slm:
                logits, _ = full_forward(weights, [BOS_ID] + context)
                rollout.append(greedy_next(logits[-1]))
            else:
                rollout.append(int(llm_oracle(context)))
        return sum(1 for a, b in zip(rollout, truth) if a == b)

    def labeler(ids: Sequence[int], pos: int) -> PreferenceLabel | None:
        logits, _ = full_forward(weights, [BOS_ID] + list(ids[:pos]))
        slm_first = greedy_next(logits[-1])
        llm_first = int(llm_oracle(ids[:pos]))
        slm_score = matches_for(ids, pos, slm_first, continue_with_slm=True)
        llm_score = matches_for(ids, pos, llm_first, continue_with_slm=False)
        if slm_score > llm_score:
            return PreferenceLabel.PREFER_SLM
        if llm_score > slm_score:
            return PreferenceLabel.PREFER_LLM
        return None

    return labeler


def _to_matrix(examples: Sequence[TrainingExample]) -> tuple[np.ndarray, np.ndarray]:
    kept = [ex for ex in examples if ex.label is not PreferenceLabel.NEEDS_ROLLOUT]
    if not kept:
        raise EmptyDataset()
    X = np.stack([np.asarray(ex.hidden, dtype=np.float64) for ex in kept])
    y = np.array([1.0 if ex.label is PreferenceLabel.PREFER_SLM else 0.0 for ex in kept])
    return X, y


def loss_and_grad(
    model: RouterModel,
    X: np.ndarray,
    y: np.ndarray,
    l2_penalty: float = 0.0,
    sample_weight: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Binary cross-entropy of the sigmoid confidence, plus L2 on weights.

    Returns the scalar loss and analytic gradients for every parameter;
    these must agree with central finite differences, which the test suite
    checks to relative 1e-4. ``sample_weight`` reweights the per-example
    losses (normalized to their sum).
    """
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    wsum = float(w.sum())
    z1 = X @ model.w1 + model.b1
    a1 = np.maximum(z1, 0.0)
    z2 = (a1 @ model.w2 + model.b2).reshape(-1)
    # softplus(z) - y*z is the numerically stable form of the BCE on logits
    loss = float(np.sum(w * (np.logaddexp(0.0, z2) - y * z2)) / wsum)
    loss += 0.5 * l2_penalty * (float(np.sum(model.w1**2)) + float(np.sum(model.w2**2)))

    dz2 = (w * (sigmoid(z2) - y) / wsum).reshape(-1, 1)
    grads = {
        "w2": a1.T @ dz2 + l2_penalty * model.w2,
        "b2": dz2.sum(axis=0),
    }
    da1 = dz2 @ model.w2.T
    dz1 = da1 * (z1 > 0)
    grads["w1"] = X.T @ dz1 + l2_penalty * model.w1
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


@dataclass
class TrainResult:
    model: RouterModel
    initial_loss: float
    final_loss: float
    epoch_losses: list[float]
    class_counts: dict[str, int]
    train_accuracy: float


def train(
    dataset: Sequence[TrainingExample] | DatasetBuild,
    cfg: TrainConfig = TrainConfig(),
    init: RouterModel | None = None,
    hidden_units: int | None = None,
) -> TrainResult:
    """Fit the MLP router; deterministic under a fixed seed.

    Raises EmptyDataset when nothing remains after dropping NEEDS_ROLLOUT;
    warns SingleClassDataset (and proceeds) when only one class is present.
    """
    cfg.validate()
    examples = dataset.examples if isinstance(dataset, DatasetBuild) else list(dataset)
    X, y = _to_matrix(examples)
    n_slm = int(y.sum())
    counts = {"prefer_slm": n_slm, "prefer_llm": len(y) - n_slm}
    if min(counts.values()) == 0:
        warnings.warn("training data contains a single preference class", SingleClassDataset)

    model = init.copy() if init is not None else random_router(X.shape[1], hidden=hidden_units, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    weights = None
    if cfg.class_balance:
        n = len(y)
        weights = np.where(y == 1.0, n / (2.0 * max(n_slm, 1)), n / (2.0 * max(n - n_slm, 1)))
    initial_loss, _ = loss_and_grad(model, X, y, cfg.l2_penalty, weights)
    epoch_losses: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y))
        for lo in range(0, len(y), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            batch_w = weights[batch] if weights is not None else None
            _, grads = loss_and_grad(model, X[batch], y[batch], cfg.l2_penalty, batch_w)
            model.w1 -= cfg.learning_rate * grads["w1"]
            model.b1 -= cfg.learning_rate * grads["b1"]
            model.w2 -= cfg.learning_rate * grads["w2"]
            model.b2 -= cfg.learning_rate * grads["b2"]
        epoch_losses.append(loss_and_grad(model, X, y, cfg.l2_penalty, weights)[0])

    preds = score_batch(model, X) >= 0.5
    accuracy = float(np.mean(preds == (y == 1.0)))
    return TrainResult(
        model=model,
        initial_loss=initial_loss,
        final_loss=epoch_losses[-1],
        epoch_losses=epoch_losses,
        class_counts=counts,
        train_accuracy=accuracy,
    )


@dataclass
class RoundMetrics:
    round: int
    n_examples: int
    class_counts: dict[str, int]
    final_loss: float
    accuracy: float
    routes_changed: int


@dataclass
class IterateResult:
    model: RouterModel
    rounds: list[RoundMetrics]
    round_records: list[list[TraceRecord]]


def iterate(
    weights: ModelWeights,
    llm_oracle: LlmOracle,
    corpus: Sequence[Sequence[int]],
    rounds: int,
    cfg: TrainConfig = TrainConfig(),
    start: int | Sequence[int] = 0,
    threshold: float = 0.5,
) -> IterateResult:
    """Alternate dataset construction and training for several rounds.

    Traces are fixed (teacher-forced on ground truth), so hidden states and
    labels are identical across rounds; what changes is the recorded routing
    decision of the evolving router, and training continues from the
    previous round's weights. With ``rounds=1`` this is exactly one
    ``build_dataset`` plus one ``train`` from the seeded initialization.
    """
    if rounds < 1:
        raise TokenRouteError(f"rounds must be >= 1, got {rounds}")
    policy = CiterThreshold(threshold)
    model: RouterModel | None = None
    metrics: list[RoundMetrics] = []
    round_records: list[list[TraceRecord]] = []
    for rnd in range(1, rounds + 1):
        current = model if model is not None else random_router_for(weights, cfg.seed)
        build = build_dataset(weights, llm_oracle, corpus, start=start, router=current, policy=policy)
        result = train(build, cfg, init=model)
        model = result.model
        changed = 0
        if round_records:
            prev = round_records[-1]
            changed = sum(1 for a, b in zip(prev, build.records) if a.route != b.route)
        round_records.append(build.records)
        metrics.append(
            RoundMetrics(
                round=rnd,
                n_examples=len(build.examples),
                class_counts=result.class_counts,
                final_loss=result.final_loss,
                accuracy=result.train_accuracy,
                routes_changed=changed,
            )
        )
    assert model is not None
    return IterateResult(model=model, rounds=metrics, round_records=round_records)


def random_router_for(weights: ModelWeights, seed: int) -> RouterModel:
    return random_router(weights.d, seed=seed)


_LABEL_CODES = {PreferenceLabel.PREFER_SLM: 0, PreferenceLabel.PREFER_LLM: 1, PreferenceLabel.NEEDS_ROLLOUT: 2}
_CODE_LABELS = {v: k for k, v in _LABEL_CODES.items()}


def save_dataset(path, examples: Sequence[TrainingExample]) -> None:
    """Columnar dataset file: hidden matrix, label codes, context lengths."""
    if not examples:
        raise EmptyDataset()
    tensors = {
        "hidden": np.stack([np.asarray(ex.hidden, dtype=np.float64) for ex in examples]),
        "label": np.array([_LABEL_CODES[ex.label] for ex in examples], dtype=np.int8),
        "context_len": np.array([ex.context_len for ex in examples], dtype=np.int64),
    }
    meta = {"kind": "router-dataset", "n_examples": len(examples), "hidden_dim": int(tensors["hidden"].shape[1])}
    tensorio.save_tensors(path, tensors, meta)


def load_dataset(path) -> list[TrainingExample]:
    tensors, meta = tensorio.load_tensors(path)
    if meta.get("kind") != "router-dataset":
        raise TokenRouteError(f"{path}: not a dataset file (kind={meta.get('kind')!r})")
    hidden, label, context_len = tensors["hidden"], tensors["label"], tensors["context_len"]
    return [
        TrainingExample(hidden=hidden[i], label=_CODE_LABELS[int(label[i])], context_len=int(context_len[i]))
        for i in range(hidden.shape[0])
    ]
