import numpy as np
import pytest

from avolab import tape as T


def numeric_grad(f, arrays, i, h=1e-5):
    """Central differences of the scalar f(*arrays) w.r.t. arrays[i]."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = float(np.sum(T.value(f(*base))))
        x[idx] = old - h
        down = float(np.sum(T.value(f(*base))))
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def tape_grads(f, arrays):
    tp = T.Tape()
    leaves = [tp.leaf(a) for a in arrays]
    out = f(*leaves)
    loss = out if out.value.size == 1 else T.sum(out)
    grads = tp.backward(loss)
    return [grads[v] for v in leaves]


def max_rel_err(a, b, floor=1e-4):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def check_grads(f, arrays, tol=1e-3, h=1e-5, floor=1e-4):
    # entries below ``floor`` are compared absolutely (tol * floor): central
    # differences carry ~h^2 f''' truncation error, so exact zeros never come out as zero
    analytic = tape_grads(f, arrays)
    worst = 0.0
    for i in range(len(arrays)):
        worst = max(worst, max_rel_err(analytic[i], numeric_grad(f, arrays, i, h), floor))
    assert worst <= tol, f"relative gradient error {worst:.2e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
