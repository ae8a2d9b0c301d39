"""Training losses and the bias-constraint Lagrangian.

Every loss returns its value together with the derivative with respect to
the logit(s), which is what :meth:`CTRModel.backward` consumes. Losses are
sums over examples (weighted by importance weights), not means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError, ValidationError
from .features import Batch
from .metrics import bucket_index, default_bucket_edges
from .numerics import sigmoid

P_CLAMP = 1e-7
MULTI_OBJECTIVE = "multi_objective"
MULTI_TASK = "multi_task"


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def logistic_loss(y, p, weight=1.0):
    """Weighted cross-entropy of predictions ``p`` against labels ``y``.

    Returns per-example ``(loss, dloss/dlogit)``; ``p`` is clamped to
    ``[1e-7, 1 - 1e-7]`` inside the logarithms only.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    loss = -weight * (y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    return loss, weight * (p - y)


def distill_loss(teacher_p, p, weight=1.0):
    """Cross-entropy of ``p`` against soft labels ``teacher_p``."""
    t = np.asarray(teacher_p, dtype=np.float64)
    if np.any(~np.isfinite(t)):
        raise ValidationError("distillation enabled but an example has no teacher prediction")
    if np.any((t <= 0.0) | (t >= 1.0)):
        raise ValidationError("teacher predictions must lie in (0, 1)")
    return logistic_loss(t, p, weight)


def ranknet_loss(s, y):
    """Pairwise logistic loss over one query group.

    ``-sum_{i: y_i=1} sum_{j: y_j!=1} log sigmoid(s_i - s_j)``; zero when the
    group lacks a positive or a negative. Returns ``(loss, grad wrt s)``.
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y)
    pos = y == 1
    if not pos.any() or pos.all():
        return 0.0, np.zeros_like(s)
    diff = s[pos][:, None] - s[~pos][None, :]
    loss = -float(_log_sigmoid(diff).sum())
    coef = -sigmoid(-diff)  # d(-log sigmoid(d))/dd
    grad = np.zeros_like(s)
    grad[pos] = coef.sum(axis=1)
    grad[~pos] = -coef.sum(axis=0)
    return loss, grad


def ranknet_batch(s, y, query_ids):
    """RankNet summed over every query group present in a batch."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y)
    q = np.asarray(query_ids)
    pairs = (q[:, None] == q[None, :]) & (y[:, None] == 1) & (y[None, :] != 1)
    if not pairs.any():
        return 0.0, np.zeros_like(s)
    diff = s[:, None] - s[None, :]
    loss = -float(_log_sigmoid(diff[pairs]).sum())
    coef = np.where(pairs, -sigmoid(-diff), 0.0)
    return loss, coef.sum(axis=1) - coef.sum(axis=0)


@dataclass
class Ramp:
    """Linear 0 -> 1 ramp between ``start`` and ``end`` steps."""

    start: int = 0
    end: int = 0

    def __post_init__(self):
        if self.end < self.start:
            raise ConfigurationError("ramp end precedes its start")

    def __call__(self, step: int) -> float:
        if step < self.start:
            return 0.0
        if step >= self.end:
            return 1.0
        return (step - self.start) / (self.end - self.start)


@dataclass
class LossConfig:
    alpha1: float = 0.0
    distill_weight: float = 0.0
    mode: str = MULTI_OBJECTIVE
    rank_ramp: Ramp = field(default_factory=Ramp)
    distill_ramp: Ramp = field(default_factory=Ramp)

    def __post_init__(self):
        if isinstance(self.rank_ramp, dict):
            self.rank_ramp = Ramp(**self.rank_ramp)
        if isinstance(self.distill_ramp, dict):
            self.distill_ramp = Ramp(**self.distill_ramp)
        if not 0.0 <= self.alpha1 < 1.0:
            raise ConfigurationError(f"alpha1 must lie in [0, 1), got {self.alpha1}")
        if not self.distill_weight >= 0.0 or not np.isfinite(self.distill_weight):
            raise ConfigurationError("distill_weight must be finite and nonnegative")
        if self.mode not in (MULTI_OBJECTIVE, MULTI_TASK):
            raise ConfigurationError(f"unknown loss mode '{self.mode}'")

    def weights(self, step: int) -> dict:
        a = self.rank_ramp(step) * self.alpha1
        return {"logistic": 1.0 - a, "rank": a,
                "distill": self.distill_ramp(step) * self.distill_weight}


@dataclass
class LossTerms:
    total: float
    dlogit: np.ndarray
    dlogit_rank: np.ndarray | None
    components: dict
    weights: dict


def combine(cache, cfg: LossConfig, step: int) -> LossTerms:
    """Total training loss of a forward pass under the curriculum at ``step``.

    ``multi_objective``: logistic, rank and distillation terms share the
    single logit. ``multi_task``: the rank term uses the model's rank head,
    which only reaches the shared trunk and the rank weights.
    """
    batch: Batch = cache.batch
    w = cfg.weights(step)
    y, ex_w = batch.labels, batch.weights
    if cfg.mode == MULTI_TASK and cache.rank_logit is None:
        raise ConfigurationError("multi_task loss needs a model with a rank head")
    comps = {}
    dlogit = np.zeros_like(cache.logit)
    dlogit_rank = None
    total = 0.0

    if w["logistic"] != 0.0:
        loss, g = logistic_loss(y, cache.pred, ex_w)
        comps["logistic"] = float(loss.sum())
        total += w["logistic"] * comps["logistic"]
        dlogit += w["logistic"] * g
    if w["rank"] != 0.0:
        s = cache.rank_logit if cfg.mode == MULTI_TASK else cache.logit
        loss, g = ranknet_batch(s, y, batch.query_ids)
        comps["rank"] = loss
        total += w["rank"] * loss
        if cfg.mode == MULTI_TASK:
            dlogit_rank = w["rank"] * g
        else:
            dlogit += w["rank"] * g
    elif cfg.mode == MULTI_TASK:
        dlogit_rank = np.zeros_like(cache.logit)
    if cfg.distill_weight > 0.0:
        if np.any(~np.isfinite(batch.teacher_pred)):
            bad = batch.example_ids[~np.isfinite(batch.teacher_pred)][0]
            raise ValidationError(f"distillation enabled but example {bad} has no teacher_pred")
        if w["distill"] != 0.0:
            loss, g = distill_loss(batch.teacher_pred, cache.pred, ex_w)
            comps["distill"] = float(loss.sum())
            total += w["distill"] * comps["distill"]
            dlogit += w["distill"] * g
    return LossTerms(total, dlogit, dlogit_rank, comps, w)


# ---------------------------------------------------------------------------
# bias constraints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureIs:
    column: str
    value: int


@dataclass(frozen=True)
class PositionIn:
    lo: int
    hi: int


@dataclass(frozen=True)
class CtrBucket:
    index: int


def condition_from_dict(d: dict):
    if set(d) == {"feature", "value"}:
        return FeatureIs(str(d["feature"]), int(d["value"]))
    if set(d) == {"position"}:
        lo, hi = d["position"]
        return PositionIn(int(lo), int(hi))
    if set(d) == {"ctr_bucket"}:
        return CtrBucket(int(d["ctr_bucket"]))
    raise ConfigurationError(f"unrecognised slice condition {d}")


def condition_to_dict(c) -> dict:
    if isinstance(c, FeatureIs):
        return {"feature": c.column, "value": c.value}
    if isinstance(c, PositionIn):
        return {"position": [c.lo, c.hi]}
    return {"ctr_bucket": c.index}


@dataclass
class BiasConstraintConfig:
    """Slices ``S_k`` (each a conjunction of conditions) and dual-ascent settings."""

    slices: list = field(default_factory=list)
    alpha3: float = 1.0
    lr_lambda: float = 0.01
    ramp: Ramp = field(default_factory=Ramp)
    bucket_edges: tuple | None = None

    def __post_init__(self):
        self.slices = [tuple(condition_from_dict(c) if isinstance(c, dict) else c for c in s)
                       for s in self.slices]
        if isinstance(self.ramp, dict):
            self.ramp = Ramp(**self.ramp)
        if not self.alpha3 > 0:
            raise ConfigurationError("alpha3 must be positive")
        if not self.lr_lambda > 0:
            raise ConfigurationError("lr_lambda must be positive")
        if any(len(s) == 0 for s in self.slices):
            raise ConfigurationError("a slice needs at least one condition")

    @property
    def edges(self) -> np.ndarray:
        return np.asarray(self.bucket_edges) if self.bucket_edges is not None else default_bucket_edges()

    def to_dict(self) -> dict:
        return {"slices": [[condition_to_dict(c) for c in s] for s in self.slices],
                "alpha3": self.alpha3, "lr_lambda": self.lr_lambda,
                "ramp": {"start": self.ramp.start, "end": self.ramp.end},
                "bucket_edges": None if self.bucket_edges is None else list(self.bucket_edges)}


class DualVariables:
    """One multiplier per slice, starting at zero."""

    def __init__(self, n_slices: int):
        self.lambdas = np.zeros(n_slices)

    def apply(self, delta) -> None:
        self.lambdas = self.lambdas + delta
        if not np.all(np.isfinite(self.lambdas)):
            raise NumericalError("dual variables became non-finite")


def slice_membership(batch: Batch, pred, slices, edges) -> np.ndarray:
    """Boolean ``(K, B)`` membership of each example in each slice."""
    B = len(batch)
    out = np.ones((len(slices), B), dtype=bool)
    buckets = None
    for k, conds in enumerate(slices):
        for c in conds:
            if isinstance(c, FeatureIs):
                if c.column in batch.quality:
                    ids, row_of, _ = batch.quality[c.column]
                    hit = np.zeros(B, dtype=bool)
                    hit[row_of[ids == c.value]] = True
                elif c.column in batch.ui:
                    hit = batch.ui[c.column] == c.value
                else:
                    raise ConfigurationError(f"slice refers to unknown column '{c.column}'")
            elif isinstance(c, PositionIn):
                hit = (batch.positions >= c.lo) & (batch.positions <= c.hi)
            else:
                if buckets is None:
                    buckets = bucket_index(pred, edges)
                hit = buckets == c.index
            out[k] &= hit
    return out


@dataclass
class BiasTerms:
    dlogit: np.ndarray
    dual_step: np.ndarray
    value: float
    membership: np.ndarray


def bias_terms(cache, duals: DualVariables, cfg: BiasConstraintConfig, step: int) -> BiasTerms:
    """Lagrangian bias-constraint term for one batch.

    Value ``ramp * sum_k sum_{i in S_k} w_i (lambda_k (y_i - p_i) - alpha3/2 lambda_k^2)``.
    The model receives its logit gradient; the duals get one ascent step of
    size ``lr_lambda`` along the same term, evaluated at the current point.
    """
    batch: Batch = cache.batch
    p = cache.pred
    ramp = cfg.ramp(step)
    member = slice_membership(batch, p, cfg.slices, cfg.edges)
    K = len(cfg.slices)
    if ramp == 0.0 or K == 0:
        return BiasTerms(np.zeros_like(p), np.zeros(K), 0.0, member)
    lam = duals.lambdas
    wm = member * batch.weights[None, :]
    resid = batch.labels - p
    value = ramp * float(np.sum(wm * (lam[:, None] * resid[None, :] - 0.5 * cfg.alpha3 * lam[:, None] ** 2)))
    dlogit = ramp * (-(lam @ wm)) * p * (1.0 - p)
    dual_step = cfg.lr_lambda * ramp * (wm @ resid - cfg.alpha3 * lam * wm.sum(axis=1))
    return BiasTerms(dlogit, dual_step, value, member)
