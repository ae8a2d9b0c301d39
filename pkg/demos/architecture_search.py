"""Cost-constrained search over hidden widths with a shared super-network.

    python3 demos/architecture_search.py
"""

from ctrengine.features import SynthConfig, synthetic_dataset
from ctrengine.model import CTRModel, ModelConfig
from ctrengine.nas import NasConfig, run_search
from ctrengine.trainer import train_online

cfg = SynthConfig(n_examples=60_000, seed=11)
examples, _ = synthetic_dataset(cfg)
spec = cfg.feature_spec()
space = {"decisions": [{"kind": "embedding", "key": "q0", "options": [4, 8]},
                       {"kind": "hidden", "key": 0, "options": [16, 32, 64]},
                       {"kind": "hidden", "key": 1, "options": [8, 16, 32]}]}
base = ModelConfig(hidden=(64, 32))

for fraction in (0.5, 0.8):
    res = run_search(examples, spec, base, NasConfig(target_fraction=fraction, gamma=-10.0, lr=0.01, space=space))
    sub_spec, sub_cfg = NasConfig(space=space).search_space().standalone(spec, base, res.choice)
    alone = train_online(examples, CTRModel(sub_spec, sub_cfg))
    print(f"target {fraction:.0%} of {res.supernet_cost} FLOPs: picked {res.decisions}, "
          f"cost {res.cost} ({res.cost / res.supernet_cost:.0%}), standalone logloss {alone.logloss():.5f}")

full = train_online(examples, CTRModel(spec, base))
print(f"full model logloss {full.logloss():.5f}")
