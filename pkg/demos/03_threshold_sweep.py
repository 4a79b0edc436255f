#!/usr/bin/env python3
"""The accuracy/efficiency trade-off as a threshold sweep.

Sweeping the routing threshold over the serving-table grid shows the whole
story in one table: routing counts and routed-token ratio rise with the
threshold, accuracy jumps once corrupted positions get routed, and the
comm+LLM column tracks routing_number x (llm latency + comm delay).
"""

import tokenroute as tr
from tokenroute.bench import TABLE_GRID, make_oracle_task, small_only_accuracy, sweep, train_task_router
from tokenroute.types import GenerationConfig, KvPolicy

weights = tr.random_weights(seed=0)
task = make_oracle_task(weights, n_items=40, target_len=24, corruption=0.5, seed=7)
router = train_task_router(task, weights, epochs=400, seed=0).model

cfg = GenerationConfig(max_tokens=24, kv_policy=KvPolicy.REPREFILL_ON_ROUTE)
baseline = small_only_accuracy(task.task, weights, cfg)
print(f"small-only baseline accuracy: {baseline:.2f}\n")

result = sweep(task.task, list(TABLE_GRID), weights, router, task.backend(), cfg_template=cfg)

header = f"{'threshold':>9} {'routing#':>9} {'ratio':>7} {'accuracy':>9} {'tbt_ms':>7} {'comm+llm_s':>11} {'overall_s':>10}"
print(header)
print("-" * len(header))
for row in result.rows:
    print(
        f"{row.threshold:>9.2f} {row.routing_number:>9.2f} {row.routed_ratio:>7.3f} "
        f"{row.accuracy:>9.2f} {1000 * row.tbt_slm_s:>7.2f} {row.comm_llm_s:>11.3f} {row.overall_s:>10.3f}"
    )

best = min(
    (r for r in result.rows if r.accuracy == max(x.accuracy for x in result.rows)),
    key=lambda r: r.routed_ratio,
)
gain = (best.accuracy - baseline) / baseline if baseline else float("inf")
print(
    f"\nat threshold {best.threshold}: {100 * best.routed_ratio:.1f}% of tokens routed "
    f"for a {100 * gain:.0f}% relative accuracy gain over small-only"
)
