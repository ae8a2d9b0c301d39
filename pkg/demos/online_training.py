"""Single-pass training on a synthetic stream, read back through its progressive log.

    python3 demos/online_training.py
"""

import numpy as np

from ctrengine.features import SynthConfig, synthetic_dataset
from ctrengine.metrics import calibration_report
from ctrengine.model import CTRModel, ModelConfig
from ctrengine.numerics import sigmoid
from ctrengine.optim import OptimizerConfig
from ctrengine.trainer import TrainerConfig, train_online

cfg = SynthConfig(n_examples=50_000, interaction_scale=0.5, seed=1)
examples, truth = synthetic_dataset(cfg)
spec = cfg.feature_spec()
y = np.array([e.label for e in examples], dtype=float)
print(f"{len(examples)} impressions, CTR {y.mean():.4f}")

# the log holds each example's prediction from before the model saw it
runs = {}
for kind, lr in (("adagrad", 0.05), ("shampoo", 0.02)):
    res = train_online(examples, CTRModel(spec, ModelConfig(hidden=(32, 16))), OptimizerConfig(kind=kind, lr=lr),
                       cfg=TrainerConfig(batch_size=256, metrics_every=40, total_examples=len(examples)))
    runs[kind] = res
    curve = [round(m["window_logloss"], 4) for m in res.metrics]
    print(f"\n{kind}: progressive logloss {res.logloss(0.2):.5f}, aggregate bias {res.aggregate_bias(0.2):+.5f}")
    print("  windowed logloss every 40 steps:", curve)

oracle = -np.mean(y * np.log(sigmoid(truth)) + (1 - y) * np.log(1 - sigmoid(truth)))
print(f"\nlogloss of the generating probabilities: {oracle:.5f}")

# early predictions come from a barely trained model, so skip the first fifth
tail = slice(len(y) // 5, None)
rep = calibration_report(runs["adagrad"].log.preds[tail], y[tail])
print("\nper-bucket bias (label - prediction) of the adagrad run after burn-in:")
for k in np.flatnonzero(rep.counts):
    print(f"  [{rep.edges[k]:.4f}, {rep.edges[k + 1]:.4f})  n={int(rep.counts[k]):6d}  bias={rep.bucket_bias[k]:+.4f}")
