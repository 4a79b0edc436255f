"""Derive latency measurements from session event logs.

Definitions:
  - TTFT: duration of the first prefill (the device-side prompt pass).
  - SLM inference time: every device-side span: the initial prefill,
    decide/decode/extend steps, and re-prefills. Re-prefill and prefill
    cost books here because it runs on the device.
  - Comm + LLM time: the full span of every remote call, network included.
  - TBT for SLM: mean time between consecutive locally-emitted tokens,
    minus any remote-call time inside the gap, so it captures device-side
    slowdown (re-prefills) rather than network stalls.
  - Overall: Done minus first PrefillStart.
  - Routing number: count of successful remote calls.

Overall always covers SLM + Comm/LLM plus a residual of unattributed gaps;
the residual is reported and expected to stay under a couple percent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

from .orchestrator import (
    DONE,
    LLM_CALL_END,
    LLM_CALL_START,
    PREFILL_END,
    PREFILL_START,
    REPREFILL_END,
    REPREFILL_START,
    ROUTE_DECISION,
    SLM_STEP_END,
    SLM_STEP_START,
    Event,
    SessionRecord,
)
from .types import TokenRouteError


class MalformedRecord(TokenRouteError):
    def __init__(self, detail: str):
        super().__init__(f"malformed session record: {detail}")


class EmptySet(TokenRouteError):
    def __init__(self) -> None:
        super().__init__("cannot aggregate an empty set of request metrics")


@dataclass(frozen=True)
class RequestMetrics:
    ttft_s: float
    slm_inference_s: float
    tbt_slm_s: float
    comm_llm_s: float
    routing_number: int
    overall_s: float
    residual_s: float
    total_tokens: int
    llm_tokens: int


@dataclass(frozen=True)
class SweepRow:
    """Aggregated metrics for one threshold of a sweep."""

    threshold: float
    routing_number: float
    slm_inference_s: float
    ttft_s: float
    tbt_slm_s: float
    comm_llm_s: float
    overall_s: float
    routed_ratio: float
    accuracy: float | None = None


_PAIRS = {
    PREFILL_START: PREFILL_END,
    SLM_STEP_START: SLM_STEP_END,
    LLM_CALL_START: LLM_CALL_END,
    REPREFILL_START: REPREFILL_END,
}
_ENDS = {v: k for k, v in _PAIRS.items()}


def _validate(record: SessionRecord) -> list[Event]:
    events = record.events
    if not events:
        raise MalformedRecord("no events")
    last_t = events[0].t
    open_spans: dict[str, int] = {}
    done_seen = False
    for ev in events:
        if ev.t < last_t:
            raise MalformedRecord(f"timestamps decrease at {ev.kind}")
        last_t = ev.t
        if ev.kind in _PAIRS:
            if open_spans.get(ev.kind, 0) > 0:
                raise MalformedRecord(f"nested {ev.kind} without matching end")
            open_spans[ev.kind] = open_spans.get(ev.kind, 0) + 1
        elif ev.kind in _ENDS:
            start_kind = _ENDS[ev.kind]
            if open_spans.get(start_kind, 0) != 1:
                raise MalformedRecord(f"{ev.kind} without matching {start_kind}")
            open_spans[start_kind] = 0
        elif ev.kind == DONE:
            done_seen = True
    if any(v > 0 for v in open_spans.values()):
        unmatched = [k for k, v in open_spans.items() if v > 0]
        raise MalformedRecord(f"unmatched start events: {unmatched}")
    if not done_seen:
        raise MalformedRecord("missing Done event")
    return events


def _spans(events: Sequence[Event], start_kind: str, end_kind: str) -> list[tuple[Event, Event]]:
    pairs = []
    pending: Event | None = None
    for ev in events:
        if ev.kind == start_kind:
            pending = ev
        elif ev.kind == end_kind and pending is not None:
            pairs.append((pending, ev))
            pending = None
    return pairs


def compute(record: SessionRecord) -> RequestMetrics:
    """Reduce one session record to its request metrics."""
    events = _validate(record)

    prefills = _spans(events, PREFILL_START, PREFILL_END)
    ttft = prefills[0][1].t - prefills[0][0].t if prefills else 0.0

    slm_spans = _spans(events, SLM_STEP_START, SLM_STEP_END)
    reprefill_spans = _spans(events, REPREFILL_START, REPREFILL_END)
    slm_inference = (
        sum(e.t - s.t for s, e in slm_spans)
        + sum(e.t - s.t for s, e in reprefill_spans)
        + sum(e.t - s.t for s, e in prefills)
    )

    llm_spans = _spans(events, LLM_CALL_START, LLM_CALL_END)
    comm_llm = sum(e.t - s.t for s, e in llm_spans)
    ok_spans = [(s, e) for s, e in llm_spans if e.payload.get("ok", True)]
    routing_number = len(ok_spans)
    llm_tokens = sum(int(e.payload.get("n_tokens", 0)) for _, e in ok_spans)

    emissions = [e.t for _, e in slm_spans if e.payload.get("emitted")]
    tbt = 0.0
    if len(emissions) >= 2:
        gaps = []
        for t0, t1 in zip(emissions, emissions[1:]):
            inside = sum(e.t - s.t for s, e in llm_spans if s.t >= t0 and e.t <= t1)
            gaps.append((t1 - t0) - inside)
        tbt = sum(gaps) / len(gaps)

    done = next(ev for ev in events if ev.kind == DONE)
    start_t = prefills[0][0].t if prefills else events[0].t
    overall = done.t - start_t
    residual = overall - slm_inference - comm_llm

    return RequestMetrics(
        ttft_s=ttft,
        slm_inference_s=slm_inference,
        tbt_slm_s=tbt,
        comm_llm_s=comm_llm,
        routing_number=routing_number,
        overall_s=overall,
        residual_s=residual,
        total_tokens=len(emissions) + llm_tokens,
        llm_tokens=llm_tokens,
    )


def routed_token_count(record: SessionRecord) -> int:
    """Number of router consultations that chose the remote route."""
    return sum(1 for ev in record.events if ev.kind == ROUTE_DECISION and ev.payload.get("route") == "LLM")


def aggregate(
    metrics: Iterable[RequestMetrics],
    threshold: float,
    correctness: Sequence[bool] | None = None,
) -> SweepRow:
    """Arithmetic means over a request set, plus accuracy when flags are given."""
    rows = list(metrics)
    if not rows:
        raise EmptySet()
    n = len(rows)
    total_tokens = sum(r.total_tokens for r in rows)
    llm_tokens = sum(r.llm_tokens for r in rows)
    accuracy = None
    if correctness is not None:
        flags = list(correctness)
        accuracy = sum(1 for f in flags if f) / len(flags) if flags else 0.0
    return SweepRow(
        threshold=threshold,
        routing_number=sum(r.routing_number for r in rows) / n,
        slm_inference_s=sum(r.slm_inference_s for r in rows) / n,
        ttft_s=sum(r.ttft_s for r in rows) / n,
        tbt_slm_s=sum(r.tbt_slm_s for r in rows) / n,
        comm_llm_s=sum(r.comm_llm_s for r in rows) / n,
        overall_s=sum(r.overall_s for r in rows) / n,
        routed_ratio=(llm_tokens / total_tokens) if total_tokens else 0.0,
        accuracy=accuracy,
    )


SWEEP_COLUMNS = [
    "threshold",
    "routing_number",
    "slm_inference_s",
    "ttft_s",
    "tbt_slm_s",
    "comm_llm_s",
    "overall_s",
    "accuracy",
    "routed_ratio",
]


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    """One CSV row per threshold with the serving-table column set."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            doc = {name: getattr(row, name) for name in SWEEP_COLUMNS if name != "accuracy"}
            doc["accuracy"] = "" if row.accuracy is None else row.accuracy
            writer.writerow(doc)


def read_sweep_csv(path) -> list[SweepRow]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for doc in csv.DictReader(fh):
            out.append(
                SweepRow(
                    threshold=float(doc["threshold"]),
                    routing_number=float(doc["routing_number"]),
                    slm_inference_s=float(doc["slm_inference_s"]),
                    ttft_s=float(doc["ttft_s"]),
                    tbt_slm_s=float(doc["tbt_slm_s"]),
                    comm_llm_s=float(doc["comm_llm_s"]),
                    overall_s=float(doc["overall_s"]),
                    routed_ratio=float(doc["routed_ratio"]),
                    accuracy=float(doc["accuracy"]) if doc.get("accuracy") else None,
                )
            )
    return out
