"""
Training on synthetic shapes
----------------------------

Train the full model and the variant without class-aware stages on the
pinned synthetic set for a few hundred steps, then compare held-out scores.
This is a short version of the desk-scale run; pass a step count as the
first argument for longer runs (the acceptance suite uses 2000).
"""

import sys

from classaware_seg.config import desk_profile
from classaware_seg.train_eval import evaluate, make_datasets, model_cost, seeded_model, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = desk_profile().replace({"train.iterations": steps, "train.log_every": 0})
data = make_datasets(cfg)
print(f"{len(data.train)} training images, {len(data.eval)} held out, classes {data.class_names}")

for name, overrides in [("full", {}), ("no class context", {"gca.enabled": False, "lca.enabled": False})]:
    run = cfg.replace(overrides)
    model = seeded_model(run)
    cost = model_cost(model)
    losses = train(model, data.train, run).losses
    m, _ = evaluate(model, data.eval, run.eval, run.data.num_classes)
    print(f"{name:>17}: {cost['params']} params, loss {losses[0]:.3f} -> {losses[-1]:.3f}, {m.summary()}")
