"""Pushing calibration onto rare placements with per-slice dual variables.

    python3 demos/bias_constraints.py
"""

import numpy as np

from ctrengine.features import SynthConfig, synthetic_dataset
from ctrengine.losses import BiasConstraintConfig, Ramp
from ctrengine.model import CTRModel, ModelConfig
from ctrengine.trainer import train_online

# good ads mostly land in top slots, so slot and quality are entangled
cfg = SynthConfig(n_examples=200_000, quality_vocab=(200, 50, 5), confounding=0.9, position_decay=0.5,
                  hidden_quality=1.5, seed=3)
examples, _ = synthetic_dataset(cfg)
spec = cfg.feature_spec()
q2 = np.array([dict(e.quality_features)["q2"][0] for e in examples])
pos = np.array([e.position for e in examples])
y = np.array([e.label for e in examples], dtype=float)

slices = [(v, lo, hi) for lo, hi in ((1, 2), (7, 8)) for v in range(5)]
masks = [(q2 == v) & (pos >= lo) & (pos <= hi) for v, lo, hi in slices]
rare = np.argsort([m.sum() for m in masks])[:3]
constraints = [[{"feature": "q2", "value": slices[i][0]}, {"position": list(slices[i][1:])}] for i in rare]

model_cfg = ModelConfig(head="factorized", factor_dim=8)
steps = len(examples) // 256
plain = train_online(examples, CTRModel(spec, model_cfg))
held = train_online(examples, CTRModel(spec, model_cfg),
                    bias=BiasConstraintConfig(slices=constraints, alpha3=0.003, lr_lambda=0.05,
                                              ramp=Ramp(0, steps // 5)))

burn = len(examples) // 5
for i, lam in zip(rare, held.lambdas):
    m = masks[i].copy()
    m[:burn] = False
    b0 = np.mean(y[m] - plain.log.preds[m])
    b1 = np.mean(y[m] - held.log.preds[m])
    print(f"q2={slices[i][0]} positions {slices[i][1]}-{slices[i][2]} (n={m.sum()}): "
          f"bias {b0:+.4f} -> {b1:+.4f}, lambda {lam:+.2f}")
print(f"logloss {plain.logloss(0.2):.5f} -> {held.logloss(0.2):.5f}")
