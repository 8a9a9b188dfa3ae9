"""Handling skewed class counts: augmentation top-up and loss weighting.

Blood-cell datasets are lopsided; some cell types outnumber others by an
order of magnitude or more. Two remedies live in this package: topping
up minority classes with augmented copies until every class hits a
target count, and weighting the cross entropy by inverse class
frequency. This script shows both, then evaluates a deliberately biased
predictor with the weighted metrics to show why accuracy alone misleads.
"""

import tempfile
from pathlib import Path

import numpy as np

from ssmcyto.data import (
    AugmentParams,
    balance_dataset,
    balance_plan,
    compute_class_weights,
    load_manifest,
)
from ssmcyto.metrics import confusion_matrix, weighted_metrics
from ssmcyto.synth import generate_dataset

work = Path(tempfile.mkdtemp(prefix="ssmcyto_demo_"))
counts = [60, 25, 8]
generate_dataset(work / "data", counts, noise=0.1, seed=0, size=16)
m = load_manifest(work / "data")
print(f"synthetic dataset at {work}")
print(f"train counts by class: {m.counts('train').tolist()}")

plan = balance_plan(m, 40)
print(f"\naugmented copies needed to reach 40 each: {plan.tolist()}")
balanced = balance_dataset(m, 40, AugmentParams(), seed=0, out_dir=work / "aug")
print(f"counts after top-up: {balanced.counts('train').tolist()} "
      "(majority classes untouched)")

cw = compute_class_weights(counts)
print(f"\ninverse-frequency loss weights: {np.round(cw.w, 3).tolist()}")
print(f"weight * count is constant: {np.round(counts * cw.w, 3).tolist()}")

print("\nwhy weighted metrics: a predictor that ignores the rare class")
y_true = np.repeat([0, 1, 2], [60, 25, 8])
y_pred = y_true.copy()
y_pred[y_true == 2] = 0  # every rare-class sample misread as majority
r = weighted_metrics(confusion_matrix(y_true, y_pred, 3))
print(f"  accuracy:            {r.accuracy:.3f}  (looks fine)")
print(f"  per-class recall:    {np.round(r.recall, 3).tolist()}  (it is not)")
print(f"  weighted f1:         {r.weighted_f1:.3f}")
for note in r.notes:
    print(f"  note: {note}")
