"""Threshold sweeps, accuracy scoring, and the synthetic oracle task.

The oracle task makes quality gains measurable without real large models:
target continuations are built from the reference small model itself, then
a seeded fraction of items gets its first continuation byte overwritten
with one the small model would not choose. By construction the small model
reproduces uncorrupted targets exactly and misses corrupted positions
exactly, while the scripted serving backend always continues along the
target, so routing a position can only help. Corrupted prompts end with a
trigger byte that the hidden state at the corrupted position sees as its
immediate context, which is what makes the routing signal learnable by the
MLP - the desk-scale stand-in for hard tokens following hard contexts.
"""

from __future__ import annotations

import codecs
import enum
import json
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .clock import SimulatedClock
from .engine import BOS_ID, ByteTokenizer, ModelWeights, decode_step, greedy_next, prefill
from .metrics import RequestMetrics, SweepRow, aggregate, compute, write_sweep_csv
from .orchestrator import LocalClient, generate, write_event_log
from .router import RouterModel
from .server import Backend, OracleBackend, ServingConfig, TokenServer
from .trainer import DatasetBuild, build_dataset
from .types import GenerationConfig, Mode, TokenRouteError
from .wire import ResponseToken


class BenchError(TokenRouteError):
    pass


class Scorer(enum.Enum):
    EXACT_MATCH = "exact_match"
    CHOICE_LETTER = "choice_letter"


@dataclass(frozen=True)
class TaskItem:
    prompt: str
    answer: str


@dataclass
class TaskSet:
    items: list[TaskItem]
    scorer: Scorer = Scorer.EXACT_MATCH

    def validate(self) -> "TaskSet":
        if not self.items:
            raise BenchError("task set is empty")
        prompts = [it.prompt for it in self.items]
        if len(set(prompts)) != len(prompts):
            raise BenchError("task prompts must be unique")
        for it in self.items:
            if not it.answer:
                raise BenchError(f"empty answer for prompt {it.prompt[:40]!r}")
        return self


def load_task_file(path, scorer: Scorer = Scorer.EXACT_MATCH) -> TaskSet:
    """Prompt/answer pairs from JSON-lines ({"prompt":…,"answer":…}) or
    two-column CSV with a header."""
    p = Path(path)
    items: list[TaskItem] = []
    if p.suffix.lower() in (".jsonl", ".json"):
        with open(p, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                doc = json.loads(line)
                items.append(TaskItem(prompt=str(doc["prompt"]), answer=str(doc["answer"])))
    elif p.suffix.lower() == ".csv":
        import csv

        with open(p, newline="", encoding="utf-8") as fh:
            for doc in csv.DictReader(fh):
                items.append(TaskItem(prompt=doc["prompt"], answer=doc["answer"]))
    else:
        raise BenchError(f"unsupported task file type: {p.suffix!r} (use .jsonl or .csv)")
    return TaskSet(items=items, scorer=scorer).validate()


_CHOICE_RE = re.compile(r"\b([A-E])\b")


def score_output(output: str, answer: str, scorer: Scorer) -> tuple[bool, bool]:
    """Returns (correct, parseable). Unparseable outputs score as wrong."""
    if scorer is Scorer.EXACT_MATCH:
        return output.strip() == answer.strip(), bool(output.strip())
    match = _CHOICE_RE.search(output.upper())
    if match is None:
        return False, False
    return match.group(1) == answer.strip().upper(), True


def score(outputs: Sequence[str], task: TaskSet) -> float:
    """Fraction of items answered correctly; one output per item."""
    if len(outputs) != len(task.items):
        raise BenchError(f"{len(outputs)} outputs for {len(task.items)} items")
    correct = sum(
        1 for out, item in zip(outputs, task.items) if score_output(out, item.answer, task.scorer)[0]
    )
    return correct / len(task.items)


# ---------------------------------------------------------------------------
# synthetic oracle task


@dataclass
class OracleTask:
    """A task whose serving backend is correct by construction.

    ``corpus`` and ``prompt_lens`` feed router training; ``targets`` holds
    the per-item ground-truth continuation token ids. ``context_map`` maps
    every reachable on-target context string to (prompt, position) so the
    backend can continue exactly, whatever bytes the targets contain.
    """

    task: TaskSet
    targets: dict[str, list[int]]
    corpus: list[list[int]]
    prompt_lens: list[int]
    corrupted_items: list[int]
    corruption: float
    seed: int
    context_map: dict[str, tuple[str, int]] = field(default_factory=dict)

    def backend(self) -> Backend:
        return OracleBackend(continuation=self._continue)

    def _continue(self, context: str, n_tokens: int, token_index: int | None = None) -> list[ResponseToken]:
        tokenizer = ByteTokenizer()
        prompt = None
        for candidate in self.targets:
            if context.startswith(candidate):
                prompt = candidate
                break
        if prompt is None:
            raise BenchError(f"oracle has no target for context {context[:40]!r}")
        target = self.targets[prompt]
        if token_index is not None:
            # the declared continuation position is exact even when the
            # text context is not byte-unique (buffered multi-byte leads)
            pos = min(token_index, len(target))
        else:
            hit = self.context_map.get(context)
            if hit is not None:
                pos = hit[1]
            else:
                # off-target context (an undetected miss upstream); keep the
                # oracle total by estimating the position from byte length
                emitted = len(context.encode("utf-8", "replace")) - len(prompt.encode("utf-8"))
                pos = min(max(0, emitted), len(target))
        out = []
        for token in target[pos : pos + n_tokens]:
            out.append(ResponseToken(text=tokenizer.token_text(token), token=token))
        if not out:
            out.append(ResponseToken(text="<eos>", token=tokenizer.eos_id))
        return out

    def llm_oracle(self) -> Callable[[Sequence[int]], int]:
        """Training-time oracle: the ground-truth next token of the item."""
        prefixes = [
            (tuple(self.corpus[i][: self.prompt_lens[i]]), self.corpus[i]) for i in range(len(self.corpus))
        ]
        eos = ByteTokenizer().eos_id

        def oracle(context_ids: Sequence[int]) -> int:
            ids = tuple(context_ids)
            for prefix, seq in prefixes:
                if ids[: len(prefix)] == prefix and len(ids) <= len(seq):
                    return seq[len(ids)] if len(ids) < len(seq) else eos
            raise BenchError("training oracle saw an unknown context")

        return oracle

    def training_dataset(self, weights: ModelWeights) -> DatasetBuild:
        return build_dataset(weights, self.llm_oracle(), self.corpus, start=self.prompt_lens)


_WORDS = [
    "river", "stone", "cloud", "ember", "field", "frost", "grain", "light",
    "meadow", "night", "ocean", "pine", "quartz", "reef", "shade", "trail",
    "valley", "wind", "arch", "bloom", "cliff", "dune", "fern", "glen",
]


TRIGGER_SUFFIX = "~"


def make_oracle_task(
    weights: ModelWeights,
    n_items: int = 40,
    target_len: int = 24,
    corruption: float = 0.5,
    seed: int = 7,
) -> OracleTask:
    """Build the synthetic task against a concrete small model.

    ``corruption`` is the fraction of items whose first continuation byte is
    overwritten with something the small model would not choose. Corrupted
    prompts end with a trigger byte, so the hidden state at the corrupted
    position carries the routing signal in its immediate context - the
    stand-in for real models' "hard tokens follow hard contexts". Everywhere
    else the target is the model's own greedy choice, so the small model
    reproduces uncorrupted items exactly.
    """
    if not (0.0 <= corruption <= 1.0):
        raise BenchError(f"corruption must lie in [0, 1], got {corruption}")
    rng = np.random.default_rng(seed)
    tokenizer = ByteTokenizer()
    n_corrupted = round(corruption * n_items)
    corrupted_items = sorted(rng.choice(n_items, size=n_corrupted, replace=False).tolist()) if n_corrupted else []
    corrupted_set = set(corrupted_items)

    items: list[TaskItem] = []
    targets: dict[str, list[int]] = {}
    corpus: list[list[int]] = []
    prompt_lens: list[int] = []
    context_map: dict[str, tuple[str, int]] = {}
    printable = [ord(c) for c in (string.ascii_lowercase + string.digits)]

    for i in range(n_items):
        word = _WORDS[i % len(_WORDS)]
        suffix = TRIGGER_SUFFIX if i in corrupted_set else ": "
        prompt = f"note {i:02d} about the {word}{suffix}"
        prompt_ids = tokenizer.encode(prompt)

        cache, out = prefill(weights, [BOS_ID] + prompt_ids)
        target: list[int] = []
        # map each on-target context string exactly as the device builds it:
        # prompt plus incrementally decoded emitted bytes
        decoder = codecs.getincrementaldecoder("utf-8")("replace")
        running = prompt
        for j in range(target_len):
            context_map[running] = (prompt, j)
            greedy = greedy_next(out.logits)
            if j == 0 and i in corrupted_set:
                token = int(rng.choice([b for b in printable if b != greedy]))
            else:
                token = greedy
            target.append(token)
            running += decoder.decode(bytes([token]))
            cache, out = decode_step(weights, cache, token)
        context_map[running] = (prompt, target_len)

        answer = tokenizer.decode(target)
        items.append(TaskItem(prompt=prompt, answer=answer))
        targets[prompt] = target
        corpus.append(prompt_ids + target)
        prompt_lens.append(len(prompt_ids))

    task = TaskSet(items=items, scorer=Scorer.EXACT_MATCH).validate()
    return OracleTask(
        task=task,
        targets=targets,
        corpus=corpus,
        prompt_lens=prompt_lens,
        corrupted_items=corrupted_items,
        corruption=corruption,
        seed=seed,
        context_map=context_map,
    )


def train_task_router(task: OracleTask, weights: ModelWeights, epochs: int = 400, seed: int = 0):
    """Router fitted to the task's own traces; deferral-worthy positions are
    rare, so training runs class-balanced."""
    from .trainer import TrainConfig, train

    build = task.training_dataset(weights)
    cfg = TrainConfig(epochs=epochs, learning_rate=0.05, seed=seed, class_balance=True)
    return train(build, cfg)


def make_prompt_set(n_items: int = 10, seed: int = 3) -> list[str]:
    """Deterministic prompts for sweeps that need no answers."""
    rng = np.random.default_rng(seed)
    prompts = []
    for i in range(n_items):
        a, b = rng.choice(_WORDS, size=2, replace=False)
        prompts.append(f"report {i:02d}: the {a} and the {b} ")
    return prompts


# ---------------------------------------------------------------------------
# sweeps

TABLE_GRID = [0.40, 0.50, 0.60, 0.70, 0.72, 0.76, 0.80, 0.90]


@dataclass
class ItemRun:
    prompt: str
    output: str
    correct: bool | None
    metrics: RequestMetrics
    routed_tokens: int
    failed: bool = False


@dataclass
class SweepResult:
    rows: list[SweepRow]
    runs: dict[float, list[ItemRun]]
    baseline_accuracy: float | None = None

    def row_for(self, threshold: float) -> SweepRow:
        for row in self.rows:
            if abs(row.threshold - threshold) < 1e-12:
                return row
        raise BenchError(f"no sweep row for threshold {threshold}")


def _run_items(
    prompts: Sequence[str],
    weights: ModelWeights,
    router: RouterModel | None,
    backend: Backend,
    cfg: GenerationConfig,
    serving: ServingConfig | None = None,
) -> tuple[list[ItemRun], list, SimulatedClock]:
    clock = SimulatedClock()
    scfg = serving if serving is not None else ServingConfig(backend=backend)
    server = TokenServer(
        ServingConfig(
            backend=backend,
            llm_burst=scfg.llm_burst,
            comm_delay_s=scfg.comm_delay_s,
            llm_latency_s=scfg.llm_latency_s,
            reprefill_delay_s_per_call=scfg.reprefill_delay_s_per_call,
            max_sessions=max(scfg.max_sessions, len(prompts) + 1),
            inject_latency=scfg.inject_latency,
        ),
        clock=clock,
    )
    client = LocalClient(server)
    runs: list[ItemRun] = []
    records = []
    for idx, prompt in enumerate(prompts):
        try:
            result = generate(
                prompt,
                cfg,
                weights,
                router,
                client,
                clock=clock,
                session_id=f"sweep-{cfg.threshold:.2f}-{idx:03d}",
            )
            rm = compute(result.events)
            runs.append(
                ItemRun(
                    prompt=prompt,
                    output=result.text,
                    correct=None,
                    metrics=rm,
                    routed_tokens=rm.llm_tokens,
                    failed=result.error is not None,
                )
            )
            records.append(result.events)
        except TokenRouteError as exc:
            runs.append(
                ItemRun(
                    prompt=prompt,
                    output="",
                    correct=False,
                    metrics=RequestMetrics(0, 0, 0, 0, 0, 0, 0, 0, 0),
                    routed_tokens=0,
                    failed=True,
                )
            )
            records.append(None)
    return runs, records, clock


def sweep(
    task: TaskSet | Sequence[str],
    thresholds: Sequence[float],
    weights: ModelWeights,
    router: RouterModel,
    backend: Backend,
    cfg_template: GenerationConfig = GenerationConfig(),
    serving: ServingConfig | None = None,
    out_dir: str | Path | None = None,
) -> SweepResult:
    """Run every item at every threshold and aggregate per-threshold rows.

    ``task`` may be a scored TaskSet or a bare prompt list (accuracy absent).
    Item failures are recorded without aborting the sweep. Results are
    deterministic for fixed weights, router, backend, and seeds.
    """
    grid = list(thresholds)
    if grid != sorted(grid):
        raise BenchError("thresholds must be sorted ascending")
    scored = isinstance(task, TaskSet)
    prompts = [it.prompt for it in task.items] if scored else list(task)
    if not prompts:
        raise BenchError("no items to sweep")

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    rows: list[SweepRow] = []
    runs: dict[float, list[ItemRun]] = {}
    for threshold in grid:
        cfg = GenerationConfig(
            mode=Mode.JOINT,
            threshold=threshold,
            max_tokens=cfg_template.max_tokens,
            llm_burst=cfg_template.llm_burst,
            kv_policy=cfg_template.kv_policy,
            stream=cfg_template.stream,
        )
        item_runs, records, _clock = _run_items(prompts, weights, router, backend, cfg, serving)
        correctness = None
        if scored:
            for run, item in zip(item_runs, task.items):
                run.correct = score_output(run.output, item.answer, task.scorer)[0] and not run.failed
            correctness = [bool(r.correct) for r in item_runs]
        ok_metrics = [r.metrics for r in item_runs if not r.failed]
        if not ok_metrics:
            raise BenchError(f"every item failed at threshold {threshold}")
        rows.append(aggregate(ok_metrics, threshold, correctness))
        runs[threshold] = item_runs
        if out_path is not None:
            run_dir = out_path / f"threshold_{threshold:.2f}"
            run_dir.mkdir(exist_ok=True)
            for idx, record in enumerate(records):
                if record is not None:
                    write_event_log(record, run_dir / f"item_{idx:03d}.events.jsonl")

    if out_path is not None:
        write_sweep_csv(rows, out_path / "results.csv")
        _write_summary(rows, out_path / "summary.txt")
    return SweepResult(rows=rows, runs=runs)


def small_only_accuracy(
    task: TaskSet,
    weights: ModelWeights,
    cfg_template: GenerationConfig = GenerationConfig(),
) -> float:
    """Exact-match accuracy of the small model alone on the task."""
    outputs = []
    for idx, item in enumerate(task.items):
        cfg = GenerationConfig(
            mode=Mode.SMALL_ONLY,
            threshold=0.0,
            max_tokens=cfg_template.max_tokens,
            kv_policy=cfg_template.kv_policy,
        )
        result = generate(item.prompt, cfg, weights, None, None, session_id=f"baseline-{idx:03d}")
        outputs.append(result.text)
    return score(outputs, task)


def _write_summary(rows: Sequence[SweepRow], path: Path) -> None:
    lines = ["threshold sweep summary", ""]
    header = f"{'thr':>5} {'routed':>7} {'ratio':>6} {'slm_s':>8} {'ttft_s':>7} {'tbt_s':>7} {'commllm_s':>10} {'overall_s':>10} {'acc':>6}"
    lines.append(header)
    for row in rows:
        acc = f"{row.accuracy:.3f}" if row.accuracy is not None else "-"
        lines.append(
            f"{row.threshold:>5.2f} {row.routing_number:>7.1f} {row.routed_ratio:>6.3f} "
            f"{row.slm_inference_s:>8.3f} {row.ttft_s:>7.3f} {row.tbt_slm_s:>7.3f} "
            f"{row.comm_llm_s:>10.3f} {row.overall_s:>10.3f} {acc:>6}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
