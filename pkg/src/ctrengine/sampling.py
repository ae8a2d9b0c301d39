"""Deterministic down-sampling with inverse-probability reweighting.

Each rule is an independent thinning, so the keep probability of a
non-clicked example is the product of every rule it triggers, floored at
``p_min``. The keep decision is ``hash_uniform(salt, example_id) < p``, so
every consumer with the same salt keeps the same examples.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigurationError, ValidationError
from .features import Example
from .numerics import HashStream


@dataclass(frozen=True)
class SamplingConfig:
    """Keep rates; ``loss_threshold`` or ``position_threshold`` set to ``None`` disables that rule."""

    r_neg: float = 0.25
    loss_threshold: float | None = 0.05
    r_low: float = 0.2
    position_threshold: int | None = 4
    r_pos: float = 0.2
    p_min: float = 0.01
    salt: int = 0

    def __post_init__(self):
        for name in ("r_neg", "r_low", "r_pos", "p_min"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1], got {v}")
        if self.loss_threshold is not None and self.loss_threshold < 0:
            raise ConfigurationError("loss_threshold must be nonnegative")
        if self.p_min > self.min_rate_product():
            raise ConfigurationError(
                f"p_min={self.p_min} exceeds the smallest rule product {self.min_rate_product()}")

    def min_rate_product(self) -> float:
        p = self.r_neg
        if self.loss_threshold is not None:
            p *= self.r_low
        if self.position_threshold is not None:
            p *= self.r_pos
        return p

    @property
    def loss_rule(self) -> bool:
        return self.loss_threshold is not None


def keep_probability(ex: Example, cfg: SamplingConfig) -> float:
    """Probability of keeping ``ex``; clicks are always kept."""
    if ex.label == 1:
        return 1.0
    p = cfg.r_neg
    if cfg.loss_rule:
        if ex.teacher_loss is None:
            raise ValidationError(
                f"example {ex.example_id} has no teacher_loss but the loss-based rule is enabled")
        if ex.teacher_loss < cfg.loss_threshold:
            p *= cfg.r_low
    if cfg.position_threshold is not None and ex.position > cfg.position_threshold:
        p *= cfg.r_pos
    return max(p, cfg.p_min)


def _rules(ex: Example, cfg: SamplingConfig) -> list:
    if ex.label == 1:
        return []
    out = ["negative"]
    if cfg.loss_rule and ex.teacher_loss < cfg.loss_threshold:
        out.append("low_loss")
    if cfg.position_threshold is not None and ex.position > cfg.position_threshold:
        out.append("low_visibility")
    return out


@dataclass
class SamplingSummary:
    seen: int = 0
    kept: int = 0
    per_rule: dict = field(default_factory=dict)

    def record(self, rules, kept) -> None:
        self.seen += 1
        self.kept += int(kept)
        for r in rules:
            s = self.per_rule.setdefault(r, [0, 0])
            s[0] += 1
            s[1] += int(kept)

    def to_dict(self) -> dict:
        return {
            "seen": self.seen,
            "kept": self.kept,
            "kept_fraction": self.kept / self.seen if self.seen else None,
            "per_rule": {r: {"triggered": n, "kept": k, "kept_fraction": k / n}
                         for r, (n, k) in sorted(self.per_rule.items())},
        }


def sample_and_reweight(stream, cfg: SamplingConfig, summary: SamplingSummary | None = None):
    """Yield the kept examples in order, each with ``weight / keep_probability``."""
    hs = HashStream(cfg.salt)
    for ex in stream:
        p = keep_probability(ex, cfg)
        kept = p >= 1.0 or hs.uniform(ex.example_id) < p
        if summary is not None:
            summary.record(_rules(ex, cfg), kept)
        if kept:
            yield ex if p == 1.0 else dataclasses.replace(ex, weight=ex.weight / p)
