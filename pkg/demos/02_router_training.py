#!/usr/bin/env python3
"""Router training from shortcut preference labels.

Labels come from single-token agreement: prefer the small model where it
already predicts the ground-truth token, else prefer the large model where
it does, else mark the position as needing a full rollout. The synthetic
oracle task makes the split visible: corrupted positions are exactly where
the small model misses, and a trigger byte in the context makes them
learnable from the hidden state.
"""

import numpy as np

import tokenroute as tr
from tokenroute.bench import make_oracle_task, train_task_router
from tokenroute.router import score_batch
from tokenroute.trainer import PreferenceLabel

weights = tr.random_weights(seed=0)
task = make_oracle_task(weights, n_items=40, target_len=24, corruption=0.5, seed=7)

build = task.training_dataset(weights)
counts = {label: 0 for label in PreferenceLabel}
for example in build.examples:
    counts[example.label] += 1
print("label histogram over one decode position per corpus token:")
for label, n in counts.items():
    print(f"  {label.value:<14} {n}")

result = train_task_router(task, weights, epochs=400, seed=0)
print(f"\ntrained in {len(result.epoch_losses)} epochs: "
      f"loss {result.initial_loss:.3f} -> {result.final_loss:.3f}, "
      f"train accuracy {result.train_accuracy:.3f}")

X = np.stack([ex.hidden for ex in build.examples])
y = np.array([ex.label is PreferenceLabel.PREFER_SLM for ex in build.examples])
confs = score_batch(result.model, X)
print("\nconfidence that the small model suffices:")
print(f"  positions it gets right: mean {confs[y].mean():.3f}")
print(f"  positions it misses:     mean {confs[~y].mean():.3f}  (these get routed)")

# the decision rule is a strict threshold on that confidence
for tau in (0.3, 0.5, 0.7):
    routed = int(np.sum(confs < tau))
    print(f"  threshold {tau}: routes {routed} of {len(confs)} positions")
