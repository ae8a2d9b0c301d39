"""Single-pass online training with progressive validation.

Every batch is first scored with the current weights (that prediction is
what gets logged and measured) and only then trained on, so the log is an
honest out-of-sample estimate and no holdout set is needed.

Checkpoints are ``.npz`` archives. ``meta`` holds a UTF-8 JSON header
(format version, feature spec, all configs, step counters and metric
accumulators); ``param/<name>`` holds model weights in their declared shapes
as little-endian float64, ``opt/<key>`` the optimizer state and ``duals``
the bias-constraint multipliers.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError, StreamOrderError, ValidationError
from .features import Example, FeatureSpec, collate
from .losses import (BiasConstraintConfig, DualVariables, LossConfig, bias_terms, combine,
                     logistic_loss)
from .metrics import CalibrationBuckets, PredictionLog, group_auc, grouped, mean_logloss, per_query_auc_arrays
from .model import MONOLITHIC, CTRModel, Mask, ModelConfig
from .optim import OptimizerConfig, make_optimizer

CHECKPOINT_VERSION = 1


@dataclass
class TrainerConfig:
    batch_size: int = 256
    metrics_every: int = 50
    total_examples: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.metrics_every < 1:
            raise ConfigurationError("metrics_every must be >= 1")


def _batches(stream, size):
    buf = []
    for ex in stream:
        buf.append(ex)
        if len(buf) == size:
            yield buf
            buf = []
    if buf:
        yield buf


@dataclass
class _Chunks:
    """Append-only per-example columns kept alongside the prediction log."""

    labels: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    query_ids: list = field(default_factory=list)

    def add(self, batch):
        self.labels.append(batch.labels.copy())
        self.weights.append(batch.weights.copy())
        self.query_ids.append(batch.query_ids.copy())

    def arrays(self):
        cat = (lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dt))
        return cat(self.labels, float), cat(self.weights, float), cat(self.query_ids, np.int64)


class Trainer:
    """Owns a model, its optimizer and the dual variables for one online pass."""

    def __init__(self, model: CTRModel, optimizer: OptimizerConfig | None = None,
                 losses: LossConfig | None = None, bias: BiasConstraintConfig | None = None,
                 config: TrainerConfig | None = None, mask: Mask | None = None):
        self.model = model
        self.optimizer_config = optimizer or OptimizerConfig()
        self.optimizer = make_optimizer(self.optimizer_config)
        self.losses = losses or LossConfig()
        self.bias = bias
        self.config = config or TrainerConfig()
        self.mask = mask
        if mask is not None:
            model.check_mask(mask)
            if self.optimizer_config.kind == "shampoo":
                raise ConfigurationError("masked training requires the adagrad optimizer")
        self.duals = DualVariables(len(bias.slices) if bias else 0)
        self.step = 0
        self.last_timestamp: int | None = None
        self.log = PredictionLog()
        self.cols = _Chunks()
        self.calibration = CalibrationBuckets(bias.edges if bias else None)
        self.metrics: list[dict] = []
        self._window = [0.0, 0.0]
        self._auc = [0.0, 0]
        self._logloss = [0.0, 0.0]

    # -- schedule --------------------------------------------------------

    def ramp_steps(self) -> int:
        cfg = self.model.config
        if cfg.cross_ramp_steps is not None:
            return cfg.cross_ramp_steps
        if self.config.total_examples is None:
            if cfg.cross_layers:
                raise ConfigurationError("cross layers need cross_ramp_steps or trainer.total_examples")
            return 0
        return int(0.1 * math.ceil(self.config.total_examples / self.config.batch_size))

    def alpha2(self, step: int) -> float:
        n = self.ramp_steps()
        return 1.0 if n <= 0 else min(1.0, step / n)

    # -- one step --------------------------------------------------------

    def _check_order(self, examples):
        ts = self.last_timestamp
        for ex in examples:
            if ts is not None and ex.timestamp < ts:
                raise StreamOrderError(
                    f"example {ex.example_id} has timestamp {ex.timestamp} after {ts}")
            ts = ex.timestamp
        self.last_timestamp = ts

    def train_batch(self, examples: list[Example]) -> np.ndarray:
        """Score ``examples``, record the progressive predictions, then train on them."""
        self._check_order(examples)
        model = self.model
        batch = collate(examples, model.spec)
        model.alpha2 = self.alpha2(self.step)
        cache = model.forward(batch, self.mask)
        pred = cache.pred
        self._record(batch, pred)

        terms = combine(cache, self.losses, self.step)
        dlogit = terms.dlogit
        bt = None
        if self.bias is not None and self.bias.slices:
            bt = bias_terms(cache, self.duals, self.bias, self.step)
            dlogit = dlogit + bt.dlogit
        if not (math.isfinite(terms.total) and np.all(np.isfinite(pred))
                and np.all(np.isfinite(dlogit))):
            ids = batch.example_ids[:8].tolist()
            raise NumericalError(f"non-finite loss at step {self.step} (batch example ids {ids}...)")
        grads = model.backward(cache, dlogit, terms.dlogit_rank)
        updated = self.optimizer.step(model.params, grads)
        model.mark_updated(updated)
        if bt is not None:
            self.duals.apply(bt.dual_step)
        self.step += 1
        if self.step % self.config.metrics_every == 0:
            self.metrics.append(self.metrics_record(terms.weights))
        return pred

    def _record(self, batch, pred):
        self.log.append(batch.example_ids, pred)
        self.cols.add(batch)
        loss, _ = logistic_loss(batch.labels, pred, batch.weights)
        self._logloss[0] += float(loss.sum())
        self._logloss[1] += float(batch.weights.sum())
        self._window[0] += float(loss.sum())
        self._window[1] += float(batch.weights.sum())
        self.calibration.update(pred, batch.labels, batch.weights)
        for s, y in grouped(batch.query_ids, pred, batch.labels):
            a = group_auc(s, y)
            if a is not None:
                self._auc[0] += a
                self._auc[1] += 1

    def metrics_record(self, weights=None) -> dict:
        rep = self.calibration.report()
        rec = {
            "step": self.step,
            "examples": int(self.calibration.count.sum()),
            "progressive_logloss": self._logloss[0] / self._logloss[1] if self._logloss[1] else None,
            "window_logloss": self._window[0] / self._window[1] if self._window[1] else None,
            "aggregate_bias": rep.aggregate_bias,
            "bucket_bias": [None if np.isnan(b) else float(b) for b in rep.bucket_bias],
            "per_query_auc": self._auc[0] / self._auc[1] if self._auc[1] else None,
            "loss_weights": weights if weights is not None else self.losses.weights(self.step),
            "lambdas": self.duals.lambdas.tolist(),
        }
        self._window = [0.0, 0.0]
        return rec

    def fit(self, stream) -> "Trainer":
        for examples in _batches(stream, self.config.batch_size):
            self.train_batch(examples)
        return self

    # -- results ---------------------------------------------------------

    def result(self) -> "TrainResult":
        labels, weights, qids = self.cols.arrays()
        return TrainResult(self.model, self.log, self.metrics, labels, weights, qids, self.duals.lambdas.copy())

    # -- checkpoints -----------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "feature_spec": self.model.spec.to_dict(),
            "model": self.model.config.to_dict(),
            "optimizer": dataclasses.asdict(self.optimizer_config),
            "losses": dataclasses.asdict(self.losses),
            "bias_constraints": self.bias.to_dict() if self.bias else None,
            "trainer": dataclasses.asdict(self.config),
            "mask": None if self.mask is None else {
                "embedding": dict(self.mask.embedding), "hidden": list(self.mask.hidden),
                "ranks": list(self.mask.ranks)},
            "step": self.step,
            "last_timestamp": self.last_timestamp,
            "logloss": self._logloss, "window": self._window, "auc": self._auc,
        }
        arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
        for k, v in self.model.params.items():
            arrays[f"param/{k}"] = v.astype("<f8")
        for k, v in self.optimizer.state_arrays().items():
            arrays[f"opt/{k}"] = v
        arrays["duals"] = self.duals.lambdas.astype("<f8")
        arrays["calib/weight"] = self.calibration.weight
        arrays["calib/residual"] = self.calibration.residual
        arrays["calib/count"] = self.calibration.count
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "Trainer":
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays["meta"].tobytes().decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {meta.get('version')}")
        spec = FeatureSpec.from_dict(meta["feature_spec"])
        model = CTRModel(spec, ModelConfig(**meta["model"]))
        for k in model.params:
            model.params[k] = arrays[f"param/{k}"].astype(np.float64)
        bias = BiasConstraintConfig(**meta["bias_constraints"]) if meta["bias_constraints"] else None
        mask = None
        if meta["mask"] is not None:
            m = meta["mask"]
            mask = Mask(m["embedding"], tuple(m["hidden"]), tuple(m["ranks"]))
        tr = cls(model, OptimizerConfig(**meta["optimizer"]), LossConfig(**meta["losses"]), bias,
                 TrainerConfig(**meta["trainer"]), mask)
        opt = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
        if tr.optimizer_config.kind == "shampoo":
            tr.optimizer.load_state_arrays(opt, model.params)
        else:
            tr.optimizer.load_state_arrays(opt)
        tr.duals.lambdas = arrays["duals"].astype(np.float64)
        tr.calibration.weight = arrays["calib/weight"].copy()
        tr.calibration.residual = arrays["calib/residual"].copy()
        tr.calibration.count = arrays["calib/count"].copy()
        tr.step = meta["step"]
        tr.last_timestamp = meta["last_timestamp"]
        tr._logloss, tr._window, tr._auc = meta["logloss"], meta["window"], meta["auc"]
        return tr


@dataclass
class TrainResult:
    model: CTRModel
    log: PredictionLog
    metrics: list
    labels: np.ndarray
    weights: np.ndarray
    query_ids: np.ndarray
    lambdas: np.ndarray

    def _tail(self, burn_in):
        start = int(round(burn_in * len(self.labels)))
        return slice(start, None)

    def logloss(self, burn_in: float = 0.0) -> float:
        s = self._tail(burn_in)
        return mean_logloss(self.log.preds[s], self.labels[s], self.weights[s])

    def aggregate_bias(self, burn_in: float = 0.0) -> float:
        s = self._tail(burn_in)
        w = self.weights[s]
        return float(np.sum(w * (self.labels[s] - self.log.preds[s])) / np.sum(w))

    def per_query_auc(self, burn_in: float = 0.0) -> float | None:
        s = self._tail(burn_in)
        return per_query_auc_arrays(self.query_ids[s], self.log.preds[s], self.labels[s])


def train_online(stream, model: CTRModel, optimizer: OptimizerConfig | None = None,
                 losses: LossConfig | None = None, cfg: TrainerConfig | None = None,
                 bias: BiasConstraintConfig | None = None, mask: Mask | None = None) -> TrainResult:
    """One chronological pass over ``stream``; returns the trained model and its progressive log."""
    if cfg is None and hasattr(stream, "__len__"):
        cfg = TrainerConfig(total_examples=len(stream))
    elif cfg is not None and cfg.total_examples is None and hasattr(stream, "__len__"):
        cfg = dataclasses.replace(cfg, total_examples=len(stream))
    return Trainer(model, optimizer, losses, bias, cfg, mask).fit(stream).result()


def evaluate(model: CTRModel, stream, batch_size: int = 256, mask: Mask | None = None, cache=None) -> PredictionLog:
    """Score ``stream`` with frozen weights."""
    log = PredictionLog()
    for examples in _batches(stream, batch_size):
        batch = collate(examples, model.spec)
        log.append(batch.example_ids, model.predict(batch, mask, cache))
    return log


# ---------------------------------------------------------------------------
# two-pass teacher
# ---------------------------------------------------------------------------


class TeacherLog:
    """Progressive teacher predictions and their unweighted logistic losses."""

    def __init__(self, example_ids=(), predictions=(), losses=()):
        self.example_ids = np.asarray(example_ids, dtype=np.int64)
        self.predictions = np.asarray(predictions, dtype=np.float64)
        self.losses = np.asarray(losses, dtype=np.float64)
        uniq, counts = np.unique(self.example_ids, return_counts=True)
        if np.any(counts > 1):
            raise ValidationError(f"duplicate example_id {int(uniq[counts > 1][0])} in teacher log")
        self._index = {int(i): k for k, i in enumerate(self.example_ids.tolist())}

    def __len__(self) -> int:
        return len(self.example_ids)

    def __contains__(self, example_id) -> bool:
        return int(example_id) in self._index

    def lookup(self, example_id):
        k = self._index[int(example_id)]
        return float(self.predictions[k]), float(self.losses[k])

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, p, l in zip(self.example_ids.tolist(), self.predictions.tolist(), self.losses.tolist()):
                fh.write(json.dumps({"example_id": i, "teacher_pred": p, "teacher_loss": l}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TeacherLog":
        from .errors import ParseError
        ids, preds, losses = [], [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    rec = json.loads(raw)
                    ids.append(int(rec["example_id"]))
                    preds.append(float(rec["teacher_pred"]))
                    losses.append(float(rec["teacher_loss"]))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"bad teacher record: {exc}", lineno) from exc
        return cls(ids, preds, losses)


def record_teacher(stream, trainer: Trainer) -> TeacherLog:
    """Train ``trainer`` online over ``stream`` and log its progressive predictions."""
    seen: set = set()
    ids, preds, losses = [], [], []
    for examples in _batches(stream, trainer.config.batch_size):
        for ex in examples:
            if ex.example_id in seen:
                raise ValidationError(f"duplicate example_id {ex.example_id} in teacher stream")
            seen.add(ex.example_id)
        p = trainer.train_batch(examples)
        y = np.array([ex.label for ex in examples], dtype=np.float64)
        loss, _ = logistic_loss(y, p)
        ids.extend(ex.example_id for ex in examples)
        preds.append(p)
        losses.append(loss)
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0))
    return TeacherLog(ids, cat(preds), cat(losses))


def join_teacher(stream, teacher: TeacherLog):
    """Attach ``teacher_pred`` and ``teacher_loss`` to every example of ``stream``."""
    for ex in stream:
        if ex.example_id not in teacher:
            raise ValidationError(f"example_id {ex.example_id} missing from teacher log")
        p, loss = teacher.lookup(ex.example_id)
        yield dataclasses.replace(ex, teacher_pred=p, teacher_loss=loss)


def train_pair(examples, spec: FeatureSpec, model_cfg: ModelConfig, seed_a: int, seed_b: int,
               optimizer: OptimizerConfig | None = None, losses: LossConfig | None = None,
               cfg: TrainerConfig | None = None, bias: BiasConstraintConfig | None = None):
    """Two runs on the same data differing only in the initialization seed."""
    examples = list(examples)
    out = []
    for seed in (seed_a, seed_b):
        model = CTRModel(spec, dataclasses.replace(model_cfg, seed=seed))
        out.append(train_online(examples, model, optimizer, losses, cfg, bias))
    return out[0], out[1]


def planted_teacher(spec: FeatureSpec, config: ModelConfig, seed: int, head_scale: float = 3.0) -> CTRModel:
    """A randomly drawn model used as ground truth for planted tasks.

    Embeddings are drawn N(0, 1) and matrices N(0, 1/fan_in), so hidden
    activations stay O(1); ``head_scale`` widens the logit spread.
    """
    model = CTRModel(spec, dataclasses.replace(config, seed=seed))
    rng = np.random.default_rng(seed)
    for name in sorted(model.params):
        w = model.params[name]
        if CTRModel.is_embedding(name):
            model.params[name] = rng.normal(0.0, 1.0, w.shape)
        elif w.ndim == 2:
            model.params[name] = rng.normal(0.0, 1.0 / math.sqrt(w.shape[0]), w.shape)
    for name in ("out/W", "q/W"):
        if name in model.params:
            model.params[name] *= head_scale
    return model


def plant_labels(examples, teacher: CTRModel, seed: int, mean_logit: float = -2.0,
                 batch_size: int = 4096):
    """Relabel ``examples`` with clicks drawn from ``teacher``.

    The teacher's output bias is shifted so its mean logit over the examples
    equals ``mean_logit``. Returns the relabelled list and the true logits.
    """
    if teacher.config.head != MONOLITHIC:
        raise ConfigurationError("planted labels need a monolithic teacher")
    examples = list(examples)

    def logits():
        p = np.concatenate([teacher.predict(collate(examples[i:i + batch_size], teacher.spec))
                            for i in range(0, len(examples), batch_size)])
        p = np.clip(p, 1e-12, 1.0 - 1e-12)
        return np.log(p) - np.log1p(-p)

    teacher.params["out/b"] = teacher.params["out/b"] + (mean_logit - logits().mean())
    z = logits()
    rng = np.random.default_rng(seed)
    y = rng.random(len(z)) < 1.0 / (1.0 + np.exp(-z))
    return [dataclasses.replace(ex, label=int(l)) for ex, l in zip(examples, y)], z
