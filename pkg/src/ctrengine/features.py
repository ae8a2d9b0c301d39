"""Example records, JSONL ingestion and a synthetic CTR stream generator.

JSONL schema (UTF-8, one object per line)::

    {"example_id": 17, "query_id": 2, "timestamp": 17, "label": 0,
     "position": 3,
     "quality_features": [["q0", [12]], ["q2", [4, 9]]],
     "ui_features": [["u0", 1]],
     "weight": 1.0, "teacher_pred": null, "teacher_loss": null}

``quality_features`` maps a column name to one or more category ids
(multivalent columns are average pooled by the model). ``ui_features``
holds one id per UI column. ``weight``, ``teacher_pred``, ``teacher_loss``
and ``ui_features`` are optional. Timestamps must be nondecreasing.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ParseError, StreamOrderError, ValidationError

QUALITY = "quality"
UI = "ui"


@dataclass(frozen=True)
class Example:
    example_id: int
    query_id: int
    timestamp: int
    label: int
    position: int
    quality_features: tuple = ()
    ui_features: tuple = ()
    weight: float = 1.0
    teacher_pred: float | None = None
    teacher_loss: float | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"example {self.example_id}: label must be 0 or 1, got {self.label}")
        if not self.weight > 0 or not math.isfinite(self.weight):
            raise ValidationError(f"example {self.example_id}: weight must be positive, got {self.weight}")
        if self.position < 1:
            raise ValidationError(f"example {self.example_id}: position must be >= 1, got {self.position}")
        if self.teacher_pred is not None and not 0.0 < self.teacher_pred < 1.0:
            raise ValidationError(
                f"example {self.example_id}: teacher_pred must be in (0, 1), got {self.teacher_pred}")
        if self.teacher_loss is not None and not self.teacher_loss >= 0.0:
            raise ValidationError(
                f"example {self.example_id}: teacher_loss must be nonnegative, got {self.teacher_loss}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["quality_features"] = [[c, list(ids)] for c, ids in self.quality_features]
        d["ui_features"] = [[c, v] for c, v in self.ui_features]
        return d


_REQUIRED = ("example_id", "query_id", "timestamp", "label", "position", "quality_features")
_OPTIONAL = ("ui_features", "weight", "teacher_pred", "teacher_loss")


def example_from_json(obj: dict, line: int | None = None) -> Example:
    if not isinstance(obj, dict):
        raise ParseError("record is not a JSON object", line)
    for name in _REQUIRED:
        if name not in obj:
            raise ParseError(f"missing field '{name}'", line)
    unknown = set(obj) - set(_REQUIRED) - set(_OPTIONAL)
    if unknown:
        raise ParseError(f"unknown field '{sorted(unknown)[0]}'", line)
    try:
        quality = tuple((str(c), tuple(int(i) for i in ids)) for c, ids in obj["quality_features"])
        ui = tuple((str(c), int(v)) for c, v in obj.get("ui_features") or ())
        return Example(
            example_id=int(obj["example_id"]),
            query_id=int(obj["query_id"]),
            timestamp=int(obj["timestamp"]),
            label=int(obj["label"]),
            position=int(obj["position"]),
            quality_features=quality,
            ui_features=ui,
            weight=float(obj.get("weight", 1.0) if obj.get("weight") is not None else 1.0),
            teacher_pred=None if obj.get("teacher_pred") is None else float(obj["teacher_pred"]),
            teacher_loss=None if obj.get("teacher_loss") is None else float(obj["teacher_loss"]),
        )
    except ValidationError as exc:
        raise ParseError(str(exc), line) from exc
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad field value: {exc}", line) from exc


def check_order(stream: Iterable[Example]) -> Iterator[Example]:
    """Pass examples through, raising on a timestamp regression."""
    last = None
    for ex in stream:
        if last is not None and ex.timestamp < last:
            raise StreamOrderError(
                f"example {ex.example_id}: timestamp {ex.timestamp} precedes {last}")
        last = ex.timestamp
        yield ex


def parse_examples(path) -> Iterator[Example]:
    """Yield examples from a JSONL file in file order."""
    last = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from exc
            ex = example_from_json(obj, lineno)
            if last is not None and ex.timestamp < last:
                raise StreamOrderError(
                    f"line {lineno}: timestamp {ex.timestamp} precedes {last}")
            last = ex.timestamp
            yield ex


def write_examples(path, examples: Iterable[Example]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), separators=(",", ":")) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# feature spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Column:
    name: str
    vocab: int
    dim: int
    kind: str = QUALITY

    def __post_init__(self):
        if self.vocab < 1 or self.dim < 1:
            raise ValidationError(f"column {self.name}: vocab and dim must be >= 1")
        if self.kind not in (QUALITY, UI):
            raise ValidationError(f"column {self.name}: kind must be '{QUALITY}' or '{UI}'")


@dataclass(frozen=True)
class FeatureSpec:
    columns: tuple[Column, ...]
    max_position: int = 16

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate column names in feature spec")
        if not self.quality_columns:
            raise ValidationError("feature spec needs at least one quality column")

    @property
    def quality_columns(self) -> tuple[Column, ...]:
        return tuple(c for c in self.columns if c.kind == QUALITY)

    @property
    def ui_columns(self) -> tuple[Column, ...]:
        return tuple(c for c in self.columns if c.kind == UI)

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise ValidationError(f"unknown feature column '{name}'")

    def to_dict(self) -> dict:
        return {"columns": [asdict(c) for c in self.columns], "max_position": self.max_position}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(tuple(Column(**c) for c in d["columns"]), d.get("max_position", 16))


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Parameters of the synthetic click stream.

    Column ``q{i}`` has ``quality_vocab[i]`` categories; the column at
    ``query_column`` is shared by every ad of a query group. Ads in a group
    occupy slots 1..group_size; with probability ``confounding`` the slots
    are assigned in descending order of true ad quality, otherwise at
    random. True category weights rotate by ``drift_rate`` radians per
    timestamp step. ``query_noise`` adds a per-group logit shift and
    ``hidden_quality`` a per-ad one; neither is observable as a feature.
    """

    n_examples: int = 100_000
    group_size: int = 8
    quality_vocab: tuple = (200, 50, 20)
    multivalent_columns: tuple = ()
    max_ids: int = 3
    query_column: int | None = 1
    ui_vocab: tuple = (3,)
    weight_scale: float = 1.0
    ui_scale: float = 0.3
    interaction_scale: float = 0.0
    interaction_rank: int = 2
    query_noise: float = 0.0
    hidden_quality: float = 0.0
    bias: float = -2.0
    position_effect: tuple | None = None
    position_decay: float = 0.3
    confounding: float = 0.0
    drift_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.quality_vocab = tuple(self.quality_vocab)
        self.multivalent_columns = tuple(self.multivalent_columns)
        self.ui_vocab = tuple(self.ui_vocab)
        if self.position_effect is not None:
            self.position_effect = tuple(self.position_effect)
        if self.n_examples < 1:
            raise ValidationError("n_examples must be >= 1")
        if self.group_size < 1:
            raise ValidationError("group_size must be >= 1")
        if not 0.0 <= self.confounding <= 1.0:
            raise ValidationError("confounding must be a probability")
        if not self.quality_vocab or min(self.quality_vocab) < 1:
            raise ValidationError("quality_vocab must list positive sizes")
        if self.position_effect is not None and len(self.position_effect) < self.group_size:
            raise ValidationError("position_effect needs one entry per slot")
        if self.query_column is not None and not 0 <= self.query_column < len(self.quality_vocab):
            raise ValidationError("query_column out of range")
        if self.max_ids < 1:
            raise ValidationError("max_ids must be >= 1")

    def slot_effects(self) -> np.ndarray:
        if self.position_effect is not None:
            return np.asarray(self.position_effect[: self.group_size], dtype=np.float64)
        return -self.position_decay * np.arange(self.group_size, dtype=np.float64)

    def feature_spec(self, embedding_dim=8, ui_dim=4) -> FeatureSpec:
        dims = embedding_dim if isinstance(embedding_dim, (list, tuple)) else [embedding_dim] * len(self.quality_vocab)
        cols = [Column(f"q{i}", v, int(d), QUALITY) for i, (v, d) in enumerate(zip(self.quality_vocab, dims))]
        cols += [Column(f"u{i}", v, ui_dim, UI) for i, v in enumerate(self.ui_vocab)]
        return FeatureSpec(tuple(cols), max_position=max(self.group_size, 1))


@dataclass
class _Truth:
    base: list
    rot: list
    ui: list
    inter_a: np.ndarray
    inter_b: np.ndarray


def _draw_truth(cfg: SynthConfig, rng: np.random.Generator) -> _Truth:
    base = [rng.normal(0.0, cfg.weight_scale, v) for v in cfg.quality_vocab]
    rot = [rng.normal(0.0, cfg.weight_scale, v) for v in cfg.quality_vocab]
    ui = [rng.normal(0.0, cfg.ui_scale, v) for v in cfg.ui_vocab]
    r = max(cfg.interaction_rank, 1)
    v0 = cfg.quality_vocab[0]
    v1 = cfg.quality_vocab[1] if len(cfg.quality_vocab) > 1 else cfg.quality_vocab[0]
    inter_a = rng.normal(0.0, 1.0 / math.sqrt(r), (v0, r))
    inter_b = rng.normal(0.0, 1.0, (v1, r))
    return _Truth(base, rot, ui, inter_a, inter_b)


def iter_synthetic(cfg: SynthConfig, chunk_groups: int = 512) -> Iterator[tuple[Example, float]]:
    """Yield ``(example, true_logit)`` pairs; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    truth = _draw_truth(cfg, rng)
    slot_fx = cfg.slot_effects()
    G = cfg.group_size
    n_groups = -(-cfg.n_examples // G)
    n_cols = len(cfg.quality_vocab)
    for g0 in range(0, n_groups, chunk_groups):
        ng = min(chunk_groups, n_groups - g0)
        n = ng * G
        t = np.arange(g0 * G, g0 * G + n)
        theta = cfg.drift_rate * t
        c, s = np.cos(theta), np.sin(theta)
        ids = []
        quality = np.full(n, cfg.bias)
        for j, v in enumerate(cfg.quality_vocab):
            if j == cfg.query_column:
                col = np.repeat(rng.integers(0, v, ng), G)[:, None]
                k = np.ones(n, dtype=np.int64)
            elif j in cfg.multivalent_columns:
                col = rng.integers(0, v, (n, cfg.max_ids))
                k = rng.integers(1, cfg.max_ids + 1, n)
            else:
                col = rng.integers(0, v, n)[:, None]
                k = np.ones(n, dtype=np.int64)
            valid = np.arange(col.shape[1])[None, :] < k[:, None]
            w = c[:, None] * truth.base[j][col] + s[:, None] * truth.rot[j][col]
            quality += (w * valid).sum(axis=1) / k
            ids.append((col, k))
        if cfg.interaction_scale:
            a = truth.inter_a[ids[0][0][:, 0]]
            b = truth.inter_b[ids[1 if n_cols > 1 else 0][0][:, 0]]
            quality += cfg.interaction_scale * (a * b).sum(axis=1)
        ui_ids = [rng.integers(0, v, n) for v in cfg.ui_vocab]
        ui_logit = np.zeros(n)
        for j, col in enumerate(ui_ids):
            ui_logit += truth.ui[j][col]
        if cfg.query_noise:
            quality += np.repeat(rng.normal(0.0, cfg.query_noise, ng), G)
        if cfg.hidden_quality:
            # per-ad quality no feature reveals; it still drives slot order
            quality += rng.normal(0.0, cfg.hidden_quality, n)
        # slot assignment, per group
        qg = quality.reshape(ng, G)
        by_quality = np.argsort(np.argsort(-qg, axis=1, kind="stable"), axis=1, kind="stable")
        shuffled = np.argsort(rng.random((ng, G)), axis=1)
        confound = rng.random(ng) < cfg.confounding
        slot = np.where(confound[:, None], by_quality, shuffled).reshape(n)
        logit = quality + ui_logit + slot_fx[slot]
        labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)
        for i in range(n):
            eid = g0 * G + i
            if eid >= cfg.n_examples:
                return
            qf = tuple((f"q{j}", tuple(int(x) for x in col[i, : k[i]])) for j, (col, k) in enumerate(ids))
            uf = tuple((f"u{j}", int(col[i])) for j, col in enumerate(ui_ids))
            ex = Example(
                example_id=eid,
                query_id=(g0 * G + i) // G,
                timestamp=eid,
                label=int(labels[i]),
                position=int(slot[i]) + 1,
                quality_features=qf,
                ui_features=uf,
            )
            yield ex, float(logit[i])


def generate_synthetic(cfg: SynthConfig) -> Iterator[Example]:
    for ex, _ in iter_synthetic(cfg):
        yield ex


def synthetic_dataset(cfg: SynthConfig) -> tuple[list[Example], np.ndarray]:
    """Materialize the stream plus its ground-truth logits."""
    examples, logits = [], []
    for ex, z in iter_synthetic(cfg):
        examples.append(ex)
        logits.append(z)
    return examples, np.asarray(logits)


def write_truth(path, examples: Iterable[Example], logits) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex, z in zip(examples, logits):
            fh.write(json.dumps({"example_id": ex.example_id, "true_logit": float(z)}) + "\n")


def read_truth(path) -> dict[int, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if raw.strip():
                try:
                    rec = json.loads(raw)
                    out[int(rec["example_id"])] = float(rec["true_logit"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"bad truth record: {exc}", lineno) from exc
    return out


# ---------------------------------------------------------------------------
# columnar batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Columnar view of consecutive examples.

    ``quality[name]`` is ``(flat_ids, row_of, counts)``: every category id of
    the column, the batch row it belongs to, and the number of ids per row.
    ``ui[name]`` holds one id per row (-1 when the example lacks the column).
    """

    example_ids: np.ndarray
    query_ids: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray
    positions: np.ndarray
    weights: np.ndarray
    teacher_pred: np.ndarray
    teacher_loss: np.ndarray
    quality: dict
    ui: dict

    def __len__(self) -> int:
        return len(self.example_ids)


def collate(examples: list[Example], spec: FeatureSpec) -> Batch:
    """Turn a list of examples into a :class:`Batch`, validating vocabularies."""
    n = len(examples)
    qcols = spec.quality_columns
    flat = {c.name: [] for c in qcols}
    counts = {c.name: np.zeros(n, dtype=np.int64) for c in qcols}
    ui = {c.name: np.full(n, -1, dtype=np.int64) for c in spec.ui_columns}
    nan = float("nan")
    for r, ex in enumerate(examples):
        for name, ids in ex.quality_features:
            if name not in flat:
                raise ValidationError(f"example {ex.example_id}: unknown quality column '{name}'")
            flat[name].extend(ids)
            counts[name][r] += len(ids)
        for name, v in ex.ui_features:
            if name not in ui:
                raise ValidationError(f"example {ex.example_id}: unknown ui column '{name}'")
            ui[name][r] = v
    quality = {}
    for c in qcols:
        k = counts[c.name]
        if n and k.min() < 1:
            r = int(np.argmin(k))
            raise ValidationError(f"example {examples[r].example_id}: no ids for column '{c.name}'")
        ids = np.asarray(flat[c.name], dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab):
            bad = int(ids[(ids < 0) | (ids >= c.vocab)][0])
            raise ValidationError(f"column '{c.name}': category id {bad} outside vocab {c.vocab}")
        quality[c.name] = (ids, np.repeat(np.arange(n), k), k)
    for c in spec.ui_columns:
        if (ui[c.name] >= c.vocab).any():
            raise ValidationError(f"ui column '{c.name}': category id outside vocab {c.vocab}")
    positions = np.fromiter((ex.position for ex in examples), dtype=np.int64, count=n)
    if n and positions.max() > spec.max_position:
        raise ValidationError(f"position {int(positions.max())} exceeds max_position {spec.max_position}")
    return Batch(
        example_ids=np.fromiter((ex.example_id for ex in examples), dtype=np.int64, count=n),
        query_ids=np.fromiter((ex.query_id for ex in examples), dtype=np.int64, count=n),
        timestamps=np.fromiter((ex.timestamp for ex in examples), dtype=np.int64, count=n),
        labels=np.fromiter((ex.label for ex in examples), dtype=np.float64, count=n),
        positions=positions,
        weights=np.fromiter((ex.weight for ex in examples), dtype=np.float64, count=n),
        teacher_pred=np.fromiter((nan if ex.teacher_pred is None else ex.teacher_pred
                                  for ex in examples), dtype=np.float64, count=n),
        teacher_loss=np.fromiter((nan if ex.teacher_loss is None else ex.teacher_loss
                                  for ex in examples), dtype=np.float64, count=n),
        quality=quality,
        ui=ui,
    )
