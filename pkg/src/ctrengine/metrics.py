"""Progressive metrics, per-query AUC, prediction difference and self-ensembles."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ParseError, ValidationError


class PredictionLog:
    """Per-example predictions in stream order, keyed by example id."""

    def __init__(self, example_ids=(), predictions=()):
        self.example_ids = np.asarray(example_ids, dtype=np.int64)
        self.predictions = np.asarray(predictions, dtype=np.float64)
        if self.example_ids.shape != self.predictions.shape:
            raise ValidationError("ids and predictions differ in length")
        self._chunks_ids: list = []
        self._chunks_pred: list = []

    def append(self, ids, preds) -> None:
        self._chunks_ids.append(np.asarray(ids, dtype=np.int64).copy())
        self._chunks_pred.append(np.asarray(preds, dtype=np.float64).copy())

    def _flush(self) -> None:
        if self._chunks_ids:
            self.example_ids = np.concatenate([self.example_ids] + self._chunks_ids)
            self.predictions = np.concatenate([self.predictions] + self._chunks_pred)
            self._chunks_ids, self._chunks_pred = [], []

    @property
    def ids(self) -> np.ndarray:
        self._flush()
        return self.example_ids

    @property
    def preds(self) -> np.ndarray:
        self._flush()
        return self.predictions

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        return (isinstance(other, PredictionLog) and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.preds, other.preds))

    def as_dict(self) -> dict:
        return dict(zip(self.ids.tolist(), self.preds.tolist()))

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, p in zip(self.ids.tolist(), self.preds.tolist()):
                fh.write(json.dumps({"example_id": i, "prediction": p}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "PredictionLog":
        ids, preds = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    rec = json.loads(raw)
                    ids.append(int(rec["example_id"]))
                    preds.append(float(rec["prediction"]))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"bad prediction record: {exc}", lineno) from exc
        return cls(ids, preds)


def _check_aligned(logs) -> None:
    first = logs[0].ids
    for other in logs[1:]:
        if len(other.ids) != len(first) or not np.array_equal(other.ids, first):
            raise AlignmentError("prediction logs do not share the same example id sequence")


def pd(log_a: PredictionLog, log_b: PredictionLog) -> float:
    """Relative prediction difference: mean of |a - b| / ((a + b) / 2)."""
    _check_aligned([log_a, log_b])
    a, b = log_a.preds, log_b.preds
    if len(a) == 0:
        raise ValidationError("prediction difference of empty logs is undefined")
    return float(np.mean(np.abs(a - b) / ((a + b) / 2.0)))


def ensemble_predict(logs) -> PredictionLog:
    """Arithmetic mean of aligned prediction logs."""
    logs = list(logs)
    if len(logs) < 2:
        raise ValidationError("an ensemble needs at least two logs")
    _check_aligned(logs)
    return PredictionLog(logs[0].ids.copy(), np.mean([lg.preds for lg in logs], axis=0))


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------


def group_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC of one group with 0.5 credit for ties; ``None`` if one class is missing."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y != 1]
    if len(pos) == 0 or len(neg) == 0:
        return None
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def per_query_auc(groups) -> float | None:
    """Unweighted mean AUC over groups holding both a click and a non-click.

    ``groups`` is an iterable of ``(scores, labels)`` pairs, or a mapping
    from query id to such a pair. Returns ``None`` when no group qualifies.
    """
    if isinstance(groups, dict):
        groups = groups.values()
    aucs = [a for a in (group_auc(s, y) for s, y in groups) if a is not None]
    return float(np.mean(aucs)) if aucs else None


def grouped(query_ids, scores, labels):
    """Split aligned arrays into per-query ``(scores, labels)`` groups (order of first appearance)."""
    q = np.asarray(query_ids)
    s = np.asarray(scores)
    y = np.asarray(labels)
    if len(q) == 0:
        return []
    order = np.argsort(q, kind="stable")
    qs = q[order]
    cuts = np.flatnonzero(np.diff(qs)) + 1
    return [(s[idx], y[idx]) for idx in np.split(order, cuts)]


def per_query_auc_arrays(query_ids, scores, labels) -> float | None:
    return per_query_auc(grouped(query_ids, scores, labels))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def default_bucket_edges(n: int = 20, lo: float = 1e-4, hi: float = 1.0) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), n + 1)


def bucket_index(pred, edges) -> np.ndarray:
    """Bucket of each prediction; values outside the edges go to the end buckets."""
    edges = np.asarray(edges)
    idx = np.searchsorted(edges, np.asarray(pred), side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


class CalibrationBuckets:
    """Running sums of weight and weighted residual per predicted-CTR bucket."""

    def __init__(self, edges=None):
        self.edges = default_bucket_edges() if edges is None else np.asarray(edges, dtype=np.float64)
        if np.any(np.diff(self.edges) <= 0):
            raise ValidationError("bucket edges must be strictly increasing")
        n = len(self.edges) - 1
        self.weight = np.zeros(n)
        self.residual = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)

    def update(self, pred, labels, weights=None) -> None:
        pred = np.asarray(pred)
        w = np.ones_like(pred) if weights is None else np.asarray(weights)
        idx = bucket_index(pred, self.edges)
        n = len(self.weight)
        self.weight += np.bincount(idx, w, n)
        self.residual += np.bincount(idx, w * (np.asarray(labels) - pred), n)
        self.count += np.bincount(idx, minlength=n)

    def report(self) -> "CalibrationReport":
        nonempty = self.weight > 0
        bias = np.full(len(self.weight), np.nan)
        bias[nonempty] = self.residual[nonempty] / self.weight[nonempty]
        total_w = self.weight.sum()
        agg = float(self.residual.sum() / total_w) if total_w > 0 else float("nan")
        var = float(np.var(bias[nonempty])) if nonempty.any() else float("nan")
        return CalibrationReport(self.edges.copy(), bias, self.count.copy(), self.weight.copy(), agg, var)


@dataclass
class CalibrationReport:
    edges: np.ndarray
    bucket_bias: np.ndarray
    counts: np.ndarray
    weights: np.ndarray
    aggregate_bias: float
    bias_variance: float

    def to_csv(self) -> str:
        lines = ["bucket,lower,upper,count,weight,bias"]
        for b in range(len(self.bucket_bias)):
            bias = "" if np.isnan(self.bucket_bias[b]) else repr(float(self.bucket_bias[b]))
            lines.append(f"{b},{float(self.edges[b])!r},{float(self.edges[b + 1])!r},{int(self.counts[b])},"
                         f"{float(self.weights[b])!r},{bias}")
        lines.append(f"aggregate,,,{int(self.counts.sum())},{float(self.weights.sum())!r},"
                     f"{self.aggregate_bias!r}")
        lines.append(f"bias_variance,,,,,{self.bias_variance!r}")
        return "\n".join(lines) + "\n"


def calibration_report(pred, labels, weights=None, edges=None) -> CalibrationReport:
    """Per-bucket bias (label minus prediction), aggregate bias and bucket-bias variance."""
    buckets = CalibrationBuckets(edges)
    buckets.update(pred, labels, weights)
    return buckets.report()


def mean_logloss(pred, labels, weights=None) -> float:
    """Weighted mean logistic loss."""
    p = np.clip(np.asarray(pred, dtype=np.float64), 1e-7, 1 - 1e-7)
    y = np.asarray(labels, dtype=np.float64)
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(np.sum(-w * (y * np.log(p) + (1 - y) * np.log1p(-p))) / np.sum(w))
