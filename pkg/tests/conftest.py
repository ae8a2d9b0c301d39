import numpy as np
import pytest

from ctrengine.features import Column, Example, FeatureSpec, QUALITY, UI, SynthConfig, synthetic_dataset


def make_example(i, label=0, position=1, q=((0,), (0,)), ui=0, weight=1.0, query_id=None, **kw):
    return Example(
        example_id=i,
        query_id=i // 4 if query_id is None else query_id,
        timestamp=i,
        label=label,
        position=position,
        quality_features=tuple((f"q{j}", tuple(ids)) for j, ids in enumerate(q)),
        ui_features=(("u0", ui),),
        weight=weight,
        **kw,
    )


@pytest.fixture
def tiny_spec():
    return FeatureSpec((Column("q0", 6, 3, QUALITY), Column("q1", 5, 2, QUALITY), Column("u0", 3, 2, UI)),
                       max_position=4)


@pytest.fixture
def tiny_examples():
    rng = np.random.default_rng(0)
    out = []
    for i in range(12):
        q0 = tuple(int(x) for x in rng.integers(0, 6, rng.integers(1, 4)))
        q1 = (int(rng.integers(0, 5)),)
        out.append(make_example(i, label=int(rng.random() < 0.4), position=i % 4 + 1, q=(q0, q1),
                                ui=int(rng.integers(0, 3)), weight=float(rng.uniform(0.5, 2.0)),
                                teacher_pred=float(rng.uniform(0.1, 0.9))))
    return out


@pytest.fixture(scope="session")
def small_stream():
    cfg = SynthConfig(n_examples=4096, seed=3)
    examples, truth = synthetic_dataset(cfg)
    return cfg, examples, truth


def dense_grad(g):
    return g.to_dense() if hasattr(g, "to_dense") else g


def finite_difference(f, params, name, h=1e-5, max_entries=40, seed=0):
    """Central differences of scalar ``f()`` for (a sample of) the entries of ``params[name]``."""
    w = params[name]
    flat = w.reshape(-1)
    rng = np.random.default_rng(seed)
    idx = np.arange(flat.size) if flat.size <= max_entries else rng.choice(flat.size, max_entries, replace=False)
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return idx, out


def rel_error(a, b, floor=1e-9):
    """Relative error; gradients that are zero up to rounding compare absolutely."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
