"""Two-pass distillation: log a teacher once, then train a student on a thinned stream.

    python3 demos/teacher_student.py
"""

from ctrengine.features import SynthConfig, synthetic_dataset
from ctrengine.losses import LossConfig
from ctrengine.model import CTRModel, ModelConfig
from ctrengine.sampling import SamplingConfig, SamplingSummary, sample_and_reweight
from ctrengine.trainer import Trainer, TrainerConfig, join_teacher, record_teacher, train_online

cfg = SynthConfig(n_examples=60_000, interaction_scale=1.0, seed=2)
examples, _ = synthetic_dataset(cfg)
spec = cfg.feature_spec()

# pass 1: a wide teacher, its progressive predictions and per-example losses
teacher = Trainer(CTRModel(spec, ModelConfig(hidden=(64, 32))), config=TrainerConfig(total_examples=len(examples)))
log = record_teacher(examples, teacher)
print(f"teacher logloss {teacher.result().logloss(0.2):.5f}")

# the loss rule drops easy negatives more aggressively; kept ones are reweighted
rules = SamplingConfig(r_neg=0.5, loss_threshold=0.05, r_low=0.2, position_threshold=6, r_pos=0.5, p_min=0.05)
summary = SamplingSummary()
student_data = list(sample_and_reweight(join_teacher(examples, log), rules, summary))
print("sampling:", summary.to_dict())

# pass 2: the same small student with and without soft labels
for w in (0.0, 1.0):
    res = train_online(student_data, CTRModel(spec, ModelConfig(hidden=(16,))), losses=LossConfig(distill_weight=w))
    print(f"student distill_weight={w}: logloss {res.logloss(0.2):.5f}, bias {res.aggregate_bias(0.2):+.5f}")
