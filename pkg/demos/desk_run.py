"""A small MetAdapt run from scratch: pretrain, search, controllers, evaluate.

Budgets are cut well below the defaults so this finishes in a couple of
minutes on one core; expect noisy numbers. For the real thing use the CLI
(`metadapt pretrain/search/controllers/eval`) or `metadapt ablate`.

Run: python3 demos/desk_run.py [output_dir]
"""
import sys

import numpy as np

from metadapt import pipeline as P
from metadapt.search_space import export_dot, top_k_ops

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
cfg = P.RunConfig(output_dir=out, pretrain_epochs=3, search_epochs=2, episodes_per_epoch=120,
                  controller_episodes=200, eval_episodes=300, order="first")
splits = P.load_splits(cfg)
print({k: v.images.shape[:2] for k, v in splits.items()}, "(classes, images per class)")

model = P.pretrain(cfg, splits)
feats = P.FeatureCache(model.stem, splits)
plain = P.evaluate(model, feats, splits, use_plain=True, use_bank=False)
print(f"plain residual block    : {100 * plain.mean:.2f} ± {100 * plain.ci95:.2f}")

res = P.search(model, feats, splits)
print(f"search: train {res.train_accuracy:.3f} val {res.val_accuracy:.3f} gap {res.gap:+.3f}")
searched = P.evaluate(model, feats, splits, use_bank=False)
print(f"searched block          : {100 * searched.mean:.2f} ± {100 * searched.ci95:.2f}")

curve = P.train_controllers(model, feats, splits)
print("controller val curve:", np.round(curve, 3))
adapted = P.evaluate(model, feats, splits, use_bank=True)
print(f"with per-edge controllers: {100 * adapted.mean:.2f} ± {100 * adapted.ci95:.2f}")

print("strongest op per edge:", {e: o[0].label for e, o in top_k_ops(model.alpha, 1).items()})
print(export_dot(model.block, model.alpha, k=1))
