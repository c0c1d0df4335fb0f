"""Generate a few small phantoms, train briefly, segment a held-out case and print its report.

    python demos/quickstart.py [steps]
"""
import sys
import time

import torch

from airwayseg.config import RunConfig
from airwayseg.experiment import evaluate_cases, make_dataset, train_supervised

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
torch.set_num_threads(1)
cfg = RunConfig().with_overrides([
    "phantom.max_generation=2", "phantom.volume_shape=[48,96,96]", "phantom.root_radius=4",
    "phantom.radius_ratio=0.8", "data.n_cases=8", "data.n_test=2", "data.n_labeled=6",
    f"train.steps={steps}", "train.log_every=50",
])

t0 = time.perf_counter()
data = make_dataset(cfg)
print(f"{len(data.cases)} phantoms in {time.perf_counter() - t0:.1f} s")
for c in data.test:
    print(f"  {c.name}: {c.branch_count} branches, {c.tree_length() / 10:.1f} cm centreline")

model, result = train_supervised(cfg, data.labeled, log=lambda rec: print("  ", rec))
print(f"trained {steps} steps in {result.seconds:.0f} s")

from airwayseg.metrics import format_table  # noqa: E402

reports = evaluate_cases(model, data.test, cfg)
print(format_table({c.name: r for c, r in zip(data.test, reports)}))
