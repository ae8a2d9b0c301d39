"""Weight-sharing architecture search with a REINFORCE controller.

The super-network is an ordinary :class:`CTRModel` at the largest option of
every decision. Each training step the controller samples one option per
decision, the resulting prefix mask trains only the active weights, and the
sub-network's progressive logloss on that batch (min-max normalized over a
trailing window) plus a cost penalty becomes the reward.
"""

from __future__ import annotations

import dataclasses
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ValidationError
from .features import FeatureSpec, collate
from .losses import LossConfig, logistic_loss
from .model import FACTORIZED, CTRModel, Mask, ModelConfig
from .optim import OptimizerConfig
from .trainer import Trainer, TrainerConfig, _batches

EMBEDDING, HIDDEN, RANK = "embedding", "hidden", "rank"


@dataclass(frozen=True)
class Decision:
    """One searchable dimension: an embedding width, a hidden width or a bottleneck rank."""

    kind: str
    key: object
    options: tuple

    def __post_init__(self):
        if self.kind not in (EMBEDDING, HIDDEN, RANK):
            raise ConfigurationError(f"unknown decision kind '{self.kind}'")
        if not self.options or any(int(o) < 1 for o in self.options):
            raise ConfigurationError("decision options must be positive integers")
        object.__setattr__(self, "options", tuple(int(o) for o in self.options))

    @property
    def name(self) -> str:
        return f"{self.kind}:{self.key}"


@dataclass(frozen=True)
class SearchSpace:
    decisions: tuple

    def __post_init__(self):
        object.__setattr__(self, "decisions", tuple(self.decisions))
        names = [d.name for d in self.decisions]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate decision in search space")

    def __len__(self) -> int:
        return len(self.decisions)

    def supernet(self, spec: FeatureSpec, config: ModelConfig) -> tuple[FeatureSpec, ModelConfig]:
        """Feature spec and model config whose dimensions are the largest option of each decision."""
        cols = list(spec.columns)
        hidden = list(config.hidden)
        ranks = [config.rank_of(i) for i in range(len(hidden))]
        for d in self.decisions:
            top = max(d.options)
            if d.kind == EMBEDDING:
                i = [c.name for c in cols].index(spec.column(d.key).name)
                cols[i] = dataclasses.replace(cols[i], dim=top)
            elif d.kind == HIDDEN:
                hidden[int(d.key)] = top
            else:
                ranks[int(d.key)] = top
        while ranks and ranks[-1] is None:
            ranks.pop()
        return (dataclasses.replace(spec, columns=tuple(cols)),
                dataclasses.replace(config, hidden=tuple(hidden), bottleneck=tuple(r or 0 for r in ranks)))

    def mask(self, choice) -> Mask:
        """Prefix mask for option indices ``choice``."""
        emb, hid, rk = {}, {}, {}
        for d, c in zip(self.decisions, choice):
            w = d.options[c]
            if d.kind == EMBEDDING:
                emb[d.key] = w
            elif d.kind == HIDDEN:
                hid[int(d.key)] = w
            else:
                rk[int(d.key)] = w
        n_h = max(list(hid) + list(rk) + [-1]) + 1
        return Mask(emb, tuple(hid.get(i) for i in range(n_h)), tuple(rk.get(i) for i in range(n_h)))

    def values(self, choice) -> dict:
        return {d.name: d.options[c] for d, c in zip(self.decisions, choice)}

    def standalone(self, spec: FeatureSpec, config: ModelConfig, choice) -> tuple[FeatureSpec, ModelConfig]:
        """Feature spec and model config of the chosen sub-network as a model of its own."""
        sub = SearchSpace(tuple(Decision(d.kind, d.key, (d.options[c],)) for d, c in zip(self.decisions, choice)))
        return sub.supernet(spec, config)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(tuple(Decision(x["kind"], x["key"], tuple(x["options"])) for x in d["decisions"]))

    def to_dict(self) -> dict:
        return {"decisions": [{"kind": d.kind, "key": d.key, "options": list(d.options)} for d in self.decisions]}


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------


def flops_per_example(spec: FeatureSpec, config: ModelConfig, mask: Mask | None = None) -> int:
    """Multiply-adds (plus embedding lookups) of one forward pass for one example.

    Embeddings cost their active width, each cross layer ``2 m k``, a dense
    layer ``m n`` or ``m k + k n`` when bottlenecked, and the head ``n`` (plus
    ``n`` for a rank head) or, when factorized, ``n d`` plus the UI
    subnetwork and the final ``d``-wide inner product.
    """
    emb = {c.name: c.dim for c in spec.quality_columns}
    hid = list(config.hidden)
    ranks = [config.rank_of(i) for i in range(len(hid))]
    if mask is not None:
        emb.update({k: v for k, v in mask.embedding.items() if v is not None})
        for i, w in enumerate(mask.hidden):
            if w is not None:
                hid[i] = w
        for i, k in enumerate(mask.ranks):
            if k is not None:
                ranks[i] = k
    m = sum(emb.values())
    total = m + config.cross_layers * 2 * m * config.cross_rank
    n_in = m
    for w, k in zip(hid, ranks):
        total += n_in * w if k is None else n_in * k + k * w
        n_in = w
    if config.head == FACTORIZED:
        d = config.factor_dim
        ui_in = sum(c.dim for c in spec.ui_columns) + config.position_dim
        total += n_in * d + ui_in + ui_in * config.ui_hidden + config.ui_hidden * d + d
    else:
        total += n_in * (2 if config.rank_head else 1)
    return total


@dataclass(frozen=True)
class CostModel:
    spec: FeatureSpec
    config: ModelConfig
    target: float
    gamma: float = -1.0

    def __post_init__(self):
        if not self.target > 0:
            raise ConfigurationError("target cost must be positive")
        if self.gamma > 0:
            raise ConfigurationError("gamma must be <= 0")

    def cost(self, mask: Mask | None) -> int:
        return flops_per_example(self.spec, self.config, mask)


def reward(accuracy: float, cost: float, target: float, gamma: float) -> float:
    """``accuracy + gamma * |cost / target - 1|``."""
    if not target > 0:
        raise ValidationError("target cost must be positive")
    return accuracy + gamma * abs(cost / target - 1.0)


class RewardWindow:
    """Min-max normalizes accuracy over the most recent ``size`` values."""

    def __init__(self, size: int = 100):
        if size < 1:
            raise ConfigurationError("reward window must hold at least one value")
        self.values: deque = deque(maxlen=size)

    def __call__(self, value: float) -> float:
        self.values.append(value)
        lo, hi = min(self.values), max(self.values)
        return 0.5 if hi == lo else (value - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# controller
# ---------------------------------------------------------------------------


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


class Controller:
    """Independent categorical distribution per decision, trained by REINFORCE."""

    def __init__(self, space: SearchSpace, lr: float = 0.01, rho: float = 0.95, seed: int = 0):
        if not 0.0 <= rho < 1.0:
            raise ConfigurationError("baseline decay rho must lie in [0, 1)")
        self.space = space
        self.lr = lr
        self.rho = rho
        self.logits = [np.zeros(len(d.options)) for d in space.decisions]
        self.baseline: float | None = None
        self.rng = np.random.default_rng(seed)

    def probabilities(self) -> list:
        return [softmax(z) for z in self.logits]

    def sample(self) -> tuple:
        return tuple(int(self.rng.choice(len(p), p=p)) for p in self.probabilities())

    def log_prob(self, choice) -> float:
        return float(sum(np.log(p[c]) for p, c in zip(self.probabilities(), choice)))

    def score(self, choice) -> list:
        """Gradient of ``log P(choice)`` with respect to every logit vector."""
        out = []
        for p, c in zip(self.probabilities(), choice):
            g = -p
            g[c] += 1.0
            out.append(g)
        return out

    def update(self, choice, r: float) -> float:
        """One policy-gradient step; returns the advantage used."""
        if self.baseline is None:
            self.baseline = r
        adv = r - self.baseline
        if adv != 0.0:
            for z, g in zip(self.logits, self.score(choice)):
                z += self.lr * adv * g
        self.baseline = self.rho * self.baseline + (1.0 - self.rho) * r
        return adv

    def argmax(self) -> tuple:
        """Most likely option per decision; ties go to the smaller (cheaper) option, then the lower index."""
        out = []
        for z, d in zip(self.logits, self.space.decisions):
            best = np.flatnonzero(z == z.max())
            out.append(int(min(best, key=lambda i: (d.options[i], i))))
        return tuple(out)


def sample_decisions(ctrl: Controller) -> tuple:
    return ctrl.sample()


def reinforce_update(ctrl: Controller, choice, r: float) -> float:
    return ctrl.update(choice, r)


def argmax_architecture(ctrl: Controller) -> tuple:
    return ctrl.argmax()


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


@dataclass
class NasConfig:
    target_fraction: float = 0.5
    gamma: float = -1.0
    lr: float = 0.01
    rho: float = 0.95
    reward_window: int = 100
    warmup_steps: int = 0
    seed: int = 0
    space: dict = field(default_factory=lambda: {"decisions": []})

    def __post_init__(self):
        if not self.target_fraction > 0:
            raise ConfigurationError("target_fraction must be positive")
        if self.gamma > 0:
            raise ConfigurationError("gamma must be <= 0")

    def search_space(self) -> SearchSpace:
        return SearchSpace.from_dict(self.space)


@dataclass
class SearchResult:
    choice: tuple
    decisions: dict
    mask: Mask
    cost: int
    supernet_cost: int
    target: float
    trajectory: list
    spec: FeatureSpec
    config: ModelConfig
    trainer: Trainer

    def write_trajectory(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.trajectory:
                fh.write(json.dumps(rec) + "\n")


def run_search(stream, spec: FeatureSpec, model_cfg: ModelConfig, nas: NasConfig,
               optimizer: OptimizerConfig | None = None, losses: LossConfig | None = None,
               trainer_cfg: TrainerConfig | None = None) -> SearchResult:
    """Train the super-network one sampled sub-network per step and return the controller's pick."""
    optimizer = optimizer or OptimizerConfig()
    if optimizer.kind != "adagrad":
        raise ConfigurationError("architecture search trains masked sub-networks and needs adagrad")
    space = nas.search_space()
    if not len(space):
        raise ConfigurationError("search space has no decisions")
    sspec, scfg = space.supernet(spec, model_cfg)
    model = CTRModel(sspec, scfg)
    full_cost = flops_per_example(sspec, scfg)
    cm = CostModel(sspec, scfg, nas.target_fraction * full_cost, nas.gamma)
    ctrl = Controller(space, nas.lr, nas.rho, nas.seed)
    window = RewardWindow(nas.reward_window)
    trainer = Trainer(model, optimizer, losses, None, trainer_cfg, model.full_mask())
    trajectory = []
    for examples in _batches(stream, trainer.config.batch_size):
        choice = ctrl.sample()
        mask = space.mask(choice)
        trainer.mask = mask
        step = trainer.step
        pred = trainer.train_batch(examples)
        y = np.array([ex.label for ex in examples], dtype=np.float64)
        w = np.array([ex.weight for ex in examples], dtype=np.float64)
        loss = float(logistic_loss(y, pred, w)[0].sum() / w.sum())
        acc = window(-loss)
        cost = cm.cost(mask)
        r = reward(acc, cost, cm.target, cm.gamma)
        adv = ctrl.update(choice, r) if step >= nas.warmup_steps else 0.0
        trajectory.append({"step": step, "decisions": space.values(choice), "logloss": loss,
                           "cost": cost, "reward": r, "advantage": adv})
    best = ctrl.argmax()
    bmask = space.mask(best)
    return SearchResult(best, space.values(best), bmask, cm.cost(bmask), full_cost, cm.target,
                        trajectory, sspec, scfg, trainer)


def measure_flops(model: CTRModel, examples, mask: Mask | None = None) -> float:
    """Instrumented multiply-adds per example of a forward pass over ``examples``."""
    from .model import FlopCounter
    batch = collate(list(examples), model.spec)
    cnt = FlopCounter()
    model.forward(batch, mask, cnt)
    return cnt.total / len(batch)
