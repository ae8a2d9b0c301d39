"""AdaGrad and block-diagonal Shampoo grafted onto AdaGrad step sizes.

Both optimizers update a ``{name: ndarray}`` parameter dict in place from a
gradient dict of the same keys. Embedding gradients arrive as
:class:`~ctrengine.model.SparseGrad` and only their touched rows are
updated; embeddings and 1-D parameters always use AdaGrad.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .model import SparseGrad
from .numerics import RootFallbackWarning, coupled_newton_root


def adagrad_step(w, accum, g, lr):
    """One dense AdaGrad step; returns ``(w, accum)`` as new arrays."""
    accum = accum + g * g
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(accum > 0, g / np.sqrt(accum), 0.0)
    return w - lr * step, accum


def _adagrad_direction(accum, g):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(accum > 0, g / np.sqrt(accum), 0.0)


class AdaGrad:
    """Per-coordinate AdaGrad with accumulators starting at ``initial_accumulator``."""

    kind = "adagrad"

    def __init__(self, lr: float = 0.05, initial_accumulator: float = 0.1):
        if lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {lr}")
        if initial_accumulator < 0:
            raise ConfigurationError("initial_accumulator must be >= 0")
        self.lr = lr
        self.initial_accumulator = initial_accumulator
        self.accum: dict[str, np.ndarray] = {}
        self.steps = 0

    def _acc(self, name, w):
        acc = self.accum.get(name)
        if acc is None:
            acc = np.full(w.shape, self.initial_accumulator, dtype=np.float64)
            self.accum[name] = acc
        return acc

    def apply(self, name: str, w: np.ndarray, g) -> None:
        acc = self._acc(name, w)
        if isinstance(g, SparseGrad):
            r = g.rows
            acc[r] += g.values * g.values
            w[r] -= self.lr * _adagrad_direction(acc[r], g.values)
        else:
            acc += g * g
            w -= self.lr * _adagrad_direction(acc, g)

    def step(self, params: dict, grads: dict) -> list:
        updated = []
        for name, g in grads.items():
            if g is None:
                continue
            self.apply(name, params[name], g)
            updated.append(name)
        self.steps += 1
        return updated

    def state_arrays(self) -> dict:
        out = {f"adagrad/{k}": v for k, v in self.accum.items()}
        out["meta/steps"] = np.array([self.steps])
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.accum = {k[len("adagrad/"):]: v.copy() for k, v in arrays.items() if k.startswith("adagrad/")}
        self.steps = int(arrays["meta/steps"][0])


def _blocks(n: int, b: int) -> list:
    return [slice(i, min(i + b, n)) for i in range(0, n, b)]


@dataclass
class _Block:
    rows: slice
    cols: slice
    L: np.ndarray
    R: np.ndarray
    L_root: np.ndarray | None = None
    R_root: np.ndarray | None = None


@dataclass
class ShampooDiagnostics:
    fallbacks: list = field(default_factory=list)
    graft_norms: dict = field(default_factory=dict)
    root_refreshes: int = 0


class Shampoo:
    """Block-diagonal Shampoo for 2-D dense weights.

    Each block keeps ``L += G G^T`` and ``R += G^T G`` and preconditions with
    ``L^(-1/4) G R^(-1/4)``; roots are recomputed whenever the step counter
    (starting at 0) is a multiple of ``refresh_interval`` and are stale in
    between. The per-layer step length is taken from AdaGrad (grafting) and
    the grafted step is fed through Nesterov momentum.
    """

    kind = "shampoo"

    def __init__(self, lr: float = 0.05, initial_accumulator: float = 0.1, block_size: int = 128,
                 refresh_interval: int = 20, eps: float = 1e-6, momentum: float = 0.9, exponent: int = 4):
        if block_size < 1 or refresh_interval < 1:
            raise ConfigurationError("block_size and refresh_interval must be >= 1")
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        self.lr = lr
        self.block_size = block_size
        self.refresh_interval = refresh_interval
        self.eps = eps
        self.momentum = momentum
        self.exponent = exponent
        self.adagrad = AdaGrad(lr, initial_accumulator)
        self.graft = AdaGrad(lr, initial_accumulator)
        self.blocks: dict[str, list] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.t = 0
        self.diagnostics = ShampooDiagnostics()

    @staticmethod
    def uses_shampoo(name: str, w: np.ndarray) -> bool:
        return w.ndim == 2 and not (name.startswith("emb/") or name.startswith("ui_emb/"))

    def _layer_blocks(self, name, w):
        blocks = self.blocks.get(name)
        if blocks is None:
            blocks = []
            for rs in _blocks(w.shape[0], self.block_size):
                for cs in _blocks(w.shape[1], self.block_size):
                    nr, nc = rs.stop - rs.start, cs.stop - cs.start
                    blocks.append(_Block(rs, cs, np.zeros((nr, nr)), np.zeros((nc, nc))))
            self.blocks[name] = blocks
        return blocks

    def accumulate(self, name: str, w: np.ndarray, G: np.ndarray) -> None:
        for blk in self._layer_blocks(name, w):
            g = G[blk.rows, blk.cols]
            blk.L += g @ g.T
            blk.R += g.T @ g

    def _root(self, name, stat):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RootFallbackWarning)
            res = coupled_newton_root(stat, self.exponent, self.eps)
        if res.fell_back:
            self.diagnostics.fallbacks.append((self.t, name, "eigh"))
        return res.root

    def refresh(self, name: str) -> None:
        for bi, blk in enumerate(self.blocks[name]):
            blk.L_root = self._root(f"{name}[{bi}]/L", blk.L)
            blk.R_root = self._root(f"{name}[{bi}]/R", blk.R)
        self.diagnostics.root_refreshes += 1

    def direction(self, name: str, G: np.ndarray, fallback: np.ndarray) -> np.ndarray:
        """Preconditioned gradient; blocks with unusable roots take ``fallback``."""
        P = np.empty_like(G)
        for bi, blk in enumerate(self.blocks[name]):
            g = G[blk.rows, blk.cols]
            if blk.L_root is None:
                raise ConfigurationError(f"no preconditioner computed yet for {name}")
            with np.errstate(invalid="ignore", over="ignore"):
                pb = blk.L_root @ g @ blk.R_root
            if not np.all(np.isfinite(pb)):
                self.diagnostics.fallbacks.append((self.t, f"{name}[{bi}]", "adagrad"))
                pb = fallback[blk.rows, blk.cols]
            P[blk.rows, blk.cols] = pb
        return P

    def grafted_step(self, name: str, w: np.ndarray, G: np.ndarray) -> np.ndarray:
        """Update ``w`` in place; returns the pre-momentum grafted step."""
        acc = self.graft._acc(name, w)
        acc += G * G
        A = self.lr * _adagrad_direction(acc, G)
        self.accumulate(name, w, G)
        if self.t % self.refresh_interval == 0 or self.blocks[name][0].L_root is None:
            self.refresh(name)
        P = self.direction(name, G, A / self.lr if self.lr else A)
        a_norm = np.linalg.norm(A)
        p_norm = np.linalg.norm(P)
        step = A if p_norm == 0.0 else (a_norm / p_norm) * P
        self.diagnostics.graft_norms[name] = (float(np.linalg.norm(step)), float(a_norm))
        buf = self.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(w)
            self.buffers[name] = buf
        buf *= self.momentum
        buf += step
        w -= self.momentum * buf + step
        return step

    def step(self, params: dict, grads: dict) -> list:
        updated = []
        for name, g in grads.items():
            if g is None:
                continue
            w = params[name]
            if isinstance(g, SparseGrad) or not self.uses_shampoo(name, w):
                self.adagrad.apply(name, w, g)
            else:
                self.grafted_step(name, w, g)
            updated.append(name)
        self.t += 1
        return updated

    def state_arrays(self) -> dict:
        out = {f"inner/{k}": v for k, v in self.adagrad.state_arrays().items()}
        out.update({f"graft/{k}": v for k, v in self.graft.state_arrays().items()})
        for name, blocks in self.blocks.items():
            for bi, blk in enumerate(blocks):
                base = f"shampoo/{name}/{bi}"
                out[f"{base}/L"] = blk.L
                out[f"{base}/R"] = blk.R
                if blk.L_root is not None:
                    out[f"{base}/L_root"] = blk.L_root
                    out[f"{base}/R_root"] = blk.R_root
        for name, buf in self.buffers.items():
            out[f"momentum/{name}"] = buf
        out["meta/t"] = np.array([self.t])
        return out

    def load_state_arrays(self, arrays: dict, params: dict) -> None:
        def sub(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        self.adagrad.load_state_arrays(sub("inner/"))
        self.graft.load_state_arrays(sub("graft/"))
        self.blocks = {}
        for name in {k[len("shampoo/"):].rsplit("/", 2)[0] for k in arrays if k.startswith("shampoo/")}:
            for bi, blk in enumerate(self._layer_blocks(name, params[name])):
                base = f"shampoo/{name}/{bi}"
                blk.L = arrays[f"{base}/L"].copy()
                blk.R = arrays[f"{base}/R"].copy()
                if f"{base}/L_root" in arrays:
                    blk.L_root = arrays[f"{base}/L_root"].copy()
                    blk.R_root = arrays[f"{base}/R_root"].copy()
        self.buffers = {k: v.copy() for k, v in sub("momentum/").items()}
        self.t = int(arrays["meta/t"][0])


@dataclass
class OptimizerConfig:
    kind: str = "adagrad"
    lr: float = 0.05
    initial_accumulator: float = 0.1
    block_size: int = 128
    refresh_interval: int = 20
    eps: float = 1e-6
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in ("adagrad", "shampoo"):
            raise ConfigurationError(f"unknown optimizer '{self.kind}'")


def make_optimizer(cfg: OptimizerConfig):
    if cfg.kind == "adagrad":
        return AdaGrad(cfg.lr, cfg.initial_accumulator)
    return Shampoo(cfg.lr, cfg.initial_accumulator, cfg.block_size, cfg.refresh_interval,
                   cfg.eps, cfg.momentum)
