"""The prediction network.

Row-vector convention throughout: a batch is a ``(B, m)`` array and a dense
layer computes ``act(H @ W + b)`` with ``W`` of shape ``(m, n)``, or
``act(H @ U @ V + b)`` for a bottleneck pair ``U (m, k)``, ``V (k, n)``.
Embedding tables are stored ``(vocab, dim)`` so that a lookup is a row
gather. Cross layers keep ``U (m, k)`` and ``V (k, m)`` and compute
``e_next = alpha2 * e0 * (e_prev @ V.T @ U.T) + e_prev``.

Parameter names::

    emb/<col>                  quality embedding tables
    cross/<i>/U, cross/<i>/V   cross layers
    hidden/<i>/W | U, V, b     hidden stack
    out/W, out/b               monolithic logit head
    rank/W, rank/b             optional second head for multi-task rank loss
    q/W, q/b                   quality vector head (factorized)
    ui_emb/<col>, ui_emb/position, ui/<j>/W, ui/<j>/b   UI subnetwork

Masks select prefixes: embedding column ``c`` uses its first ``w_c``
dimensions, hidden layer ``i`` its first ``w_i`` units and a bottleneck its
first ``k_i`` rank components. Masked-out weights get exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, ValidationError
from .features import Batch, FeatureSpec
from .numerics import sigmoid

MONOLITHIC = "monolithic"
FACTORIZED = "factorized"


def smelu(z, beta: float):
    """Smooth ReLU: 0 below -beta, (z+beta)^2/(4 beta) on [-beta, beta], z above."""
    if not beta > 0:
        raise ValidationError(f"SmeLU beta must be positive, got {beta}")
    z = np.asarray(z, dtype=np.float64)
    out = np.where(z >= beta, z, (z + beta) ** 2 / (4.0 * beta))
    return np.where(z <= -beta, 0.0, out)


def smelu_grad(z, beta: float):
    z = np.asarray(z, dtype=np.float64)
    return np.clip((z + beta) / (2.0 * beta), 0.0, 1.0)


def relu(z):
    return np.maximum(z, 0.0)


def relu_grad(z):
    return (np.asarray(z) > 0).astype(np.float64)


@dataclass
class ModelConfig:
    hidden: tuple = (32, 16)
    bottleneck: tuple = ()
    activation: str = "relu"
    smelu_beta: float = 1.0
    cross_layers: int = 0
    cross_rank: int = 8
    cross_ramp_steps: int | None = None
    head: str = MONOLITHIC
    factor_dim: int = 4
    ui_hidden: int = 8
    position_dim: int = 4
    rank_head: bool = False
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.bottleneck = tuple(None if not k else int(k) for k in self.bottleneck)
        if len(self.bottleneck) > len(self.hidden):
            raise ConfigurationError("more bottleneck ranks than hidden layers")
        if any(h < 1 for h in self.hidden):
            raise ConfigurationError("hidden widths must be positive")
        if self.activation not in ("relu", "smelu"):
            raise ConfigurationError(f"unknown activation '{self.activation}'")
        if self.activation == "smelu" and not self.smelu_beta > 0:
            raise ConfigurationError("smelu_beta must be positive")
        if self.head not in (MONOLITHIC, FACTORIZED):
            raise ConfigurationError(f"unknown head '{self.head}'")
        if self.head == FACTORIZED and self.rank_head:
            raise ConfigurationError("a separate rank head requires the monolithic head")
        if self.cross_layers < 0 or self.cross_rank < 1:
            raise ConfigurationError("cross_layers must be >= 0 and cross_rank >= 1")
        if self.factor_dim < 1:
            raise ConfigurationError("factor_dim must be >= 1")

    def rank_of(self, i: int):
        return self.bottleneck[i] if i < len(self.bottleneck) else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["bottleneck"] = [k or 0 for k in self.bottleneck]
        return d


@dataclass(frozen=True)
class Mask:
    """Active widths of a super-network; ``None`` entries mean full width."""

    embedding: dict = field(default_factory=dict)
    hidden: tuple = ()
    ranks: tuple = ()


class FlopCounter:
    """Counts multiply-adds (and embedding lookups) performed by a forward pass."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)

    def mm(self, a, b):
        self.add(a.shape[0] * a.shape[1] * b.shape[1])
        return a @ b


class _NoCount:
    total = 0

    def add(self, n):
        pass

    @staticmethod
    def mm(a, b):
        return a @ b


_NOCOUNT = _NoCount()


class SparseGrad:
    """Row-sparse gradient of an embedding table: unique ``rows`` and their values."""

    __slots__ = ("rows", "values", "shape")

    def __init__(self, rows, values, shape):
        self.rows = rows
        self.values = values
        self.shape = shape

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows] = self.values
        return out


def _sparse_rows(ids, row_values, shape) -> SparseGrad:
    uniq, inv = np.unique(ids, return_inverse=True)
    vals = np.zeros((len(uniq), shape[1]))
    np.add.at(vals, (inv, slice(0, row_values.shape[1])), row_values)
    return SparseGrad(uniq, vals, shape)


@dataclass
class ForwardCache:
    """Everything the backward pass needs, plus the outputs."""

    batch: Batch
    mask: Mask | None
    logit: np.ndarray
    pred: np.ndarray
    rank_logit: np.ndarray | None = None
    q: np.ndarray | None = None
    u: np.ndarray | None = None
    e0: np.ndarray | None = None
    e0_sel: object = None
    emb_widths: dict = field(default_factory=dict)
    cross: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    head_in: np.ndarray | None = None
    head_sel: object = None
    ui: dict | None = None
    flops: int = 0


class CTRModel:
    """Embeddings, optional cross layers, hidden stack and a logit head."""

    def __init__(self, spec: FeatureSpec, config: ModelConfig | None = None):
        self.spec = spec
        self.config = config or ModelConfig()
        cfg = self.config
        if cfg.head == FACTORIZED and not spec.max_position:
            raise ConfigurationError("factorized head needs positions")
        self.alpha2 = 0.0
        self.ui_version = 0
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(cfg.seed)

        def dense(name, fan_in, shape):
            lim = 1.0 / np.sqrt(fan_in)
            self.params[name] = rng.uniform(-lim, lim, shape)

        self.e0_offsets = {}
        m = 0
        for c in spec.quality_columns:
            self.params[f"emb/{c.name}"] = rng.uniform(-0.01, 0.01, (c.vocab, c.dim))
            self.e0_offsets[c.name] = m
            m += c.dim
        self.e0_dim = m
        for i in range(cfg.cross_layers):
            k = cfg.cross_rank
            dense(f"cross/{i}/U", k, (m, k))
            dense(f"cross/{i}/V", m, (k, m))
        n_in = m
        for i, n_out in enumerate(cfg.hidden):
            k = cfg.rank_of(i)
            if k is not None:
                if not k < min(n_in, n_out):
                    raise ConfigurationError(
                        f"hidden layer {i}: bottleneck rank {k} must be < min({n_in}, {n_out})")
                dense(f"hidden/{i}/U", n_in, (n_in, k))
                dense(f"hidden/{i}/V", k, (k, n_out))
            else:
                dense(f"hidden/{i}/W", n_in, (n_in, n_out))
            self.params[f"hidden/{i}/b"] = np.zeros(n_out)
            n_in = n_out
        self.top_dim = n_in
        if cfg.head == MONOLITHIC:
            dense("out/W", n_in, (n_in, 1))
            self.params["out/b"] = np.zeros(1)
            if cfg.rank_head:
                dense("rank/W", n_in, (n_in, 1))
                self.params["rank/b"] = np.zeros(1)
        else:
            d = cfg.factor_dim
            dense("q/W", n_in, (n_in, d))
            self.params["q/b"] = np.zeros(d)
            m_ui = 0
            for c in spec.ui_columns:
                self.params[f"ui_emb/{c.name}"] = rng.uniform(-0.01, 0.01, (c.vocab, c.dim))
                m_ui += c.dim
            self.params["ui_emb/position"] = rng.uniform(-0.01, 0.01, (spec.max_position, cfg.position_dim))
            m_ui += cfg.position_dim
            self.ui_in_dim = m_ui
            dense("ui/0/W", m_ui, (m_ui, cfg.ui_hidden))
            self.params["ui/0/b"] = np.zeros(cfg.ui_hidden)
            dense("ui/1/W", cfg.ui_hidden, (cfg.ui_hidden, d))
            self.params["ui/1/b"] = np.zeros(d)

    # -- helpers ---------------------------------------------------------

    @staticmethod
    def is_embedding(name: str) -> bool:
        return name.startswith("emb/") or name.startswith("ui_emb/")

    @staticmethod
    def is_ui(name: str) -> bool:
        return name.startswith("ui/") or name.startswith("ui_emb/")

    def _act(self, z):
        if self.config.activation == "smelu":
            return smelu(z, self.config.smelu_beta)
        return relu(z)

    def _act_grad(self, z):
        if self.config.activation == "smelu":
            return smelu_grad(z, self.config.smelu_beta)
        return relu_grad(z)

    def full_mask(self) -> Mask:
        return Mask({c.name: c.dim for c in self.spec.quality_columns}, tuple(self.config.hidden),
                    tuple(self.config.rank_of(i) for i in range(len(self.config.hidden))))

    def check_mask(self, mask: Mask) -> None:
        for name, w in mask.embedding.items():
            col = self.spec.column(name)
            if w is not None and not 1 <= w <= col.dim:
                raise ValidationError(f"embedding width {w} for '{name}' outside 1..{col.dim}")
        if len(mask.hidden) > len(self.config.hidden):
            raise ValidationError("mask lists more hidden layers than the model has")
        for i, w in enumerate(mask.hidden):
            if w is not None and not 1 <= w <= self.config.hidden[i]:
                raise ValidationError(f"hidden width {w} for layer {i} outside 1..{self.config.hidden[i]}")
        for i, k in enumerate(mask.ranks):
            full = self.config.rank_of(i) if i < len(self.config.hidden) else None
            if k is not None and (full is None or not 1 <= k <= full):
                raise ValidationError(f"bottleneck rank {k} for layer {i} outside 1..{full}")

    def _widths(self, mask):
        emb = {c.name: c.dim for c in self.spec.quality_columns}
        hid = list(self.config.hidden)
        ranks = [self.config.rank_of(i) for i in range(len(hid))]
        if mask is not None:
            for name, w in mask.embedding.items():
                if w is not None:
                    emb[name] = w
            for i, w in enumerate(mask.hidden):
                if w is not None:
                    hid[i] = w
            for i, k in enumerate(mask.ranks):
                if k is not None:
                    ranks[i] = k
        return emb, hid, ranks

    def _e0_selector(self, emb_widths):
        if all(emb_widths[c.name] == c.dim for c in self.spec.quality_columns):
            return slice(None)
        return np.concatenate([self.e0_offsets[c.name] + np.arange(emb_widths[c.name])
                               for c in self.spec.quality_columns])

    # -- forward ---------------------------------------------------------

    def _embed(self, batch: Batch, emb_w: dict, cnt=_NOCOUNT) -> np.ndarray:
        P = self.params
        B = len(batch)
        parts = []
        for c in self.spec.quality_columns:
            w = emb_w[c.name]
            ids, _, counts = batch.quality[c.name]
            rows = P[f"emb/{c.name}"][ids, :w]
            cnt.add(B * w)
            if len(ids) == B:
                parts.append(rows)
            else:
                starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
                parts.append(np.add.reduceat(rows, starts, axis=0) / counts[:, None])
        return np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]

    def _trunk(self, batch: Batch, mask, cnt, cache: ForwardCache | None):
        """Embeddings, cross layers and hidden stack; returns the head input."""
        P = self.params
        emb_w, hid_w, ranks = self._widths(mask)
        e0 = self._embed(batch, emb_w, cnt)
        sel0 = self._e0_selector(emb_w)
        if cache is not None:
            cache.e0, cache.e0_sel, cache.emb_widths = e0, sel0, emb_w
        e = e0
        for i in range(self.config.cross_layers):
            U = P[f"cross/{i}/U"][sel0]
            V = P[f"cross/{i}/V"][:, sel0]
            t = cnt.mm(e, V.T)
            r = cnt.mm(t, U.T)
            if cache is not None:
                cache.cross.append((e, t, r))
            e = self.alpha2 * e0 * r + e
        H, sel = e, sel0
        for i, w in enumerate(hid_w):
            k = ranks[i]
            b = P[f"hidden/{i}/b"][:w]
            if k is not None:
                T = cnt.mm(H, P[f"hidden/{i}/U"][sel][:, :k])
                Z = cnt.mm(T, P[f"hidden/{i}/V"][:k, :w]) + b
            else:
                T = None
                Z = cnt.mm(H, P[f"hidden/{i}/W"][sel][:, :w]) + b
            if cache is not None:
                cache.layers.append((H, sel, T, Z, w, k))
            H = self._act(Z)
            sel = slice(0, w)
        return H, sel

    def forward(self, batch: Batch, mask: Mask | None = None, counter: FlopCounter | None = None) -> ForwardCache:
        """Training forward pass; keeps the activations needed by :meth:`backward`."""
        if mask is not None:
            self.check_mask(mask)
        cnt = counter if counter is not None else _NOCOUNT
        P = self.params
        cfg = self.config
        B = len(batch)
        cache = ForwardCache(batch=batch, mask=mask, logit=None, pred=None)
        H, sel = self._trunk(batch, mask, cnt, cache)
        cache.head_in, cache.head_sel = H, sel
        if cfg.head == MONOLITHIC:
            logit = cnt.mm(H, P["out/W"][sel])[:, 0] + P["out/b"][0]
            if cfg.rank_head:
                cache.rank_logit = cnt.mm(H, P["rank/W"][sel])[:, 0] + P["rank/b"][0]
        else:
            q = cnt.mm(H, P["q/W"][sel]) + P["q/b"]
            u, ui_cache = self._ui_forward(batch, cnt)
            cnt.add(B * cfg.factor_dim)
            logit = np.einsum("ij,ij->i", q, u)
            cache.q, cache.u, cache.ui = q, u, ui_cache
        cache.logit = logit
        cache.pred = sigmoid(logit)
        cache.flops = cnt.total
        return cache

    def _ui_input(self, batch: Batch, cnt=_NOCOUNT):
        P = self.params
        B = len(batch)
        parts = []
        for c in self.spec.ui_columns:
            ids = batch.ui[c.name]
            if (ids < 0).any():
                raise ValidationError(f"factorized head needs ui column '{c.name}' on every example")
            cnt.add(B * c.dim)
            parts.append(P[f"ui_emb/{c.name}"][ids])
        cnt.add(B * self.config.position_dim)
        parts.append(P["ui_emb/position"][batch.positions - 1])
        return np.concatenate(parts, axis=1)

    def _ui_forward(self, batch: Batch, cnt=_NOCOUNT):
        P = self.params
        x = self._ui_input(batch, cnt)
        z1 = cnt.mm(x, P["ui/0/W"]) + P["ui/0/b"]
        a1 = self._act(z1)
        u = cnt.mm(a1, P["ui/1/W"]) + P["ui/1/b"]
        return u, {"x": x, "z1": z1, "a1": a1}

    def ui_key(self, batch: Batch, row: int) -> tuple:
        return (int(batch.positions[row]),) + tuple(int(batch.ui[c.name][row]) for c in self.spec.ui_columns)

    def ui_vector(self, key: tuple) -> np.ndarray:
        """UI vector for one ``(position, *ui_ids)`` key, computed as a single row."""
        P = self.params
        parts = [P[f"ui_emb/{c.name}"][key[j + 1]][None, :] for j, c in enumerate(self.spec.ui_columns)]
        parts.append(P["ui_emb/position"][key[0] - 1][None, :])
        x = np.concatenate(parts, axis=1)
        a1 = self._act(x @ P["ui/0/W"] + P["ui/0/b"])
        return (a1 @ P["ui/1/W"] + P["ui/1/b"])[0]

    def predict(self, batch: Batch, mask: Mask | None = None, cache: "UiCache | None" = None) -> np.ndarray:
        """Predicted CTR; the factorized head evaluates ``u`` per UI key, through ``cache`` if given."""
        if self.config.head == MONOLITHIC:
            return self.forward(batch, mask).pred
        fc = self.forward_quality(batch, mask)
        u = np.empty_like(fc)
        for r in range(len(batch)):
            key = self.ui_key(batch, r)
            u[r] = cache.get(self, key) if cache is not None else self.ui_vector(key)
        return sigmoid(np.einsum("ij,ij->i", fc, u))

    def forward_quality(self, batch: Batch, mask: Mask | None = None) -> np.ndarray:
        """The quality vector ``q`` alone (factorized head)."""
        if self.config.head != FACTORIZED:
            raise ConfigurationError("quality vector only exists for the factorized head")
        H, sel = self._trunk(batch, mask, _NOCOUNT, None)
        return H @ self.params["q/W"][sel] + self.params["q/b"]

    # -- backward --------------------------------------------------------

    def backward(self, cache: ForwardCache, dlogit, dlogit_rank=None) -> dict:
        """Gradients of a loss whose derivative wrt the logit(s) is given.

        Returns a dict covering every parameter: dense arrays for weights and
        :class:`SparseGrad` for embedding tables.
        """
        P = self.params
        cfg = self.config
        batch = cache.batch
        dlogit = np.asarray(dlogit, dtype=np.float64)
        grads = {name: (None if self.is_embedding(name) else np.zeros_like(v)) for name, v in P.items()}
        H, sel = cache.head_in, cache.head_sel

        if cfg.head == MONOLITHIC:
            grads["out/W"][sel] = H.T @ dlogit[:, None]
            grads["out/b"][0] = dlogit.sum()
            dH = dlogit[:, None] @ P["out/W"][sel].T
            if dlogit_rank is not None:
                if not cfg.rank_head:
                    raise ConfigurationError("rank-head gradient given but the model has no rank head")
                dlogit_rank = np.asarray(dlogit_rank, dtype=np.float64)
                grads["rank/W"][sel] = H.T @ dlogit_rank[:, None]
                grads["rank/b"][0] = dlogit_rank.sum()
                dH = dH + dlogit_rank[:, None] @ P["rank/W"][sel].T
        else:
            dq = dlogit[:, None] * cache.u
            du = dlogit[:, None] * cache.q
            grads["q/W"][sel] = H.T @ dq
            grads["q/b"][:] = dq.sum(axis=0)
            dH = dq @ P["q/W"][sel].T
            self._ui_backward(batch, cache.ui, du, grads)

        for i in reversed(range(len(cache.layers))):
            H_in, sel_in, T, Z, w, k = cache.layers[i]
            dZ = dH * self._act_grad(Z)
            grads[f"hidden/{i}/b"][:w] = dZ.sum(axis=0)
            if k is not None:
                U = P[f"hidden/{i}/U"][sel_in][:, :k]
                V = P[f"hidden/{i}/V"][:k, :w]
                grads[f"hidden/{i}/V"][:k, :w] = T.T @ dZ
                dT = dZ @ V.T
                _assign(grads[f"hidden/{i}/U"], sel_in, k, H_in.T @ dT)
                dH = dT @ U.T
            else:
                W = P[f"hidden/{i}/W"][sel_in][:, :w]
                _assign(grads[f"hidden/{i}/W"], sel_in, w, H_in.T @ dZ)
                dH = dZ @ W.T

        sel0 = cache.e0_sel
        de = dH
        de0 = np.zeros_like(cache.e0)
        e0 = cache.e0
        for i in reversed(range(cfg.cross_layers)):
            e_prev, t, r = cache.cross[i]
            U = P[f"cross/{i}/U"][sel0]
            V = P[f"cross/{i}/V"][:, sel0]
            dr = self.alpha2 * de * e0
            de0 += self.alpha2 * de * r
            dt = dr @ U
            _assign(grads[f"cross/{i}/U"], sel0, U.shape[1], dr.T @ t)
            grads[f"cross/{i}/V"][:, sel0] = dt.T @ e_prev
            de = de + dt @ V
        de0 += de

        col0 = 0
        for c in self.spec.quality_columns:
            w = cache.emb_widths[c.name]
            d_col = de0[:, col0: col0 + w]
            col0 += w
            ids, row_of, counts = batch.quality[c.name]
            if len(ids) == len(batch):
                rows = d_col
            else:
                rows = d_col[row_of] / counts[row_of][:, None]
            grads[f"emb/{c.name}"] = _sparse_rows(ids, rows, P[f"emb/{c.name}"].shape)
        return grads

    def _ui_backward(self, batch, ui, du, grads):
        P = self.params
        grads["ui/1/W"][:] = ui["a1"].T @ du
        grads["ui/1/b"][:] = du.sum(axis=0)
        dz1 = (du @ P["ui/1/W"].T) * self._act_grad(ui["z1"])
        grads["ui/0/W"][:] = ui["x"].T @ dz1
        grads["ui/0/b"][:] = dz1.sum(axis=0)
        dx = dz1 @ P["ui/0/W"].T
        col = 0
        for c in self.spec.ui_columns:
            grads[f"ui_emb/{c.name}"] = _sparse_rows(batch.ui[c.name], dx[:, col: col + c.dim],
                                                     P[f"ui_emb/{c.name}"].shape)
            col += c.dim
        grads["ui_emb/position"] = _sparse_rows(batch.positions - 1, dx[:, col:],
                                                P["ui_emb/position"].shape)

    # -- misc ------------------------------------------------------------

    def mark_updated(self, names=None) -> None:
        """Record a weight update; bumps the UI version when UI weights changed."""
        if names is None or any(self.is_ui(n) for n in names):
            self.ui_version += 1

    def copy(self) -> "CTRModel":
        other = object.__new__(CTRModel)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def _assign(target, row_sel, ncols, values):
    if isinstance(row_sel, slice):
        target[row_sel, :ncols] = values
    else:
        target[row_sel[:, None], np.arange(ncols)[None, :]] = values


class MaskedView:
    """A super-network seen through a fixed :class:`Mask`."""

    def __init__(self, model: CTRModel, mask: Mask):
        model.check_mask(mask)
        self.model = model
        self.mask = mask

    def forward(self, batch, counter=None):
        return self.model.forward(batch, self.mask, counter)

    def backward(self, cache, dlogit, dlogit_rank=None):
        return self.model.backward(cache, dlogit, dlogit_rank)

    def predict(self, batch):
        return self.model.predict(batch, self.mask)


def apply_mask(model: CTRModel, mask: Mask) -> MaskedView:
    return MaskedView(model, mask)


class UiCache:
    """Memo of UI vectors keyed by ``(position, *ui_ids)``; cleared on UI weight change."""

    def __init__(self):
        self._store: dict = {}
        self._version = None
        self.hits = 0
        self.misses = 0

    def get(self, model: CTRModel, key: tuple) -> np.ndarray:
        if self._version != model.ui_version:
            self._store.clear()
            self._version = model.ui_version
        vec = self._store.get(key)
        if vec is None:
            self.misses += 1
            vec = model.ui_vector(key)
            self._store[key] = vec
        else:
            self.hits += 1
        return vec

    def __len__(self):
        return len(self._store)


def embed(model: CTRModel, batch: Batch, mask: Mask | None = None) -> np.ndarray:
    """Concatenated (average pooled) quality embeddings ``e0`` for a batch."""
    emb_w, _, _ = model._widths(mask)
    return model._embed(batch, emb_w)
