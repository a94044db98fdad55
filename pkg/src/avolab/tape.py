"""Reverse-mode automatic differentiation on an append-only tape.

Values are float64 numpy arrays. A leading batch axis is allowed; binary
ops broadcast with numpy rules and adjoints are summed back to the input
shape. Every op function also accepts plain arrays/floats, in which case it
just evaluates with numpy and returns an array, so model code runs the same
with or without recording.

Constants never become nodes: a node only keeps the inputs that need an
adjoint, each paired with the function that maps the output adjoint to that
input's adjoint.
"""

from __future__ import annotations

import math

import numpy as np

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class TapeError(ValueError):
    """Raised on dimension mismatch, invalid domain or non-finite values."""


class Var:
    __slots__ = ("tape", "id", "value", "requires_grad", "detached")

    def __init__(self, tape, node_id, value, requires_grad, detached=False):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.requires_grad = requires_grad
        self.detached = detached

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, j):
        return take(self, j)


def _finite(a):
    # a sum is finite iff every term is (overflow also counts as non-finite)
    s = np.add.reduce(a, axis=None) if a.ndim else a
    return math.isfinite(s)


class Tape:
    """Append-only record of operations.

    Node ``i`` stores its forward value, the ids of the inputs that need an
    adjoint (all < i) and one vector-Jacobian function per such input.
    """

    def __init__(self, check_finite=True):
        self.values = []
        self.parents = []
        self.vjps = []
        self.kinds = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.values)

    def _append(self, value, parents, fns, requires_grad, kind):
        if self.check_finite and not _finite(value):
            raise TapeError(f"non-finite value produced by {kind} at node {len(self.values)}")
        node_id = len(self.values)
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(fns)
        self.kinds.append(kind)
        return Var(self, node_id, value, requires_grad)

    def leaf(self, value, requires_grad=True):
        value = np.array(value, dtype=np.float64)
        return self._append(value, (), (), requires_grad, "leaf")

    def const(self, value):
        return self.leaf(value, requires_grad=False)

    def push(self, value, deps, kind="op"):
        """Record ``value`` computed from ``deps``, a sequence of (input, vjp).

        Non-Var inputs and inputs that do not require grad are dropped;
        ``vjp(g)`` must return the adjoint reduced to that input's shape.
        """
        parents = []
        fns = []
        for x, fn in deps:
            if isinstance(x, Var) and x.requires_grad:
                parents.append(x.id)
                fns.append(fn)
        return self._append(value, tuple(parents), tuple(fns), bool(parents), kind)

    def backward(self, loss):
        """Sweep adjoints from ``loss`` back to every node; returns a Gradients map."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss must be a Var recorded on this tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
        adj = [None] * (loss.id + 1)
        adj[loss.id] = np.ones_like(loss.value)
        parents, vjps = self.parents, self.vjps
        for i in range(loss.id, -1, -1):
            g = adj[i]
            if g is None or not parents[i]:
                continue
            if not _finite(g):
                raise TapeError(f"non-finite adjoint at node {i} ({self.kinds[i]})")
            for pid, fn in zip(parents[i], vjps[i]):
                pg = fn(g)
                if adj[pid] is None:
                    adj[pid] = pg
                else:
                    adj[pid] = adj[pid] + pg
        return Gradients(self, adj)


class Gradients:
    """Adjoints keyed by node id; nodes the loss does not reach get zeros."""

    def __init__(self, tape, adjoints):
        self._tape = tape
        self._adj = adjoints

    def __getitem__(self, v):
        node_id = v.id if isinstance(v, Var) else int(v)
        if isinstance(v, Var) and not v.requires_grad:
            return np.zeros_like(self._tape.values[node_id])
        if node_id < len(self._adj) and self._adj[node_id] is not None:
            return self._adj[node_id]
        return np.zeros_like(self._tape.values[node_id])

    def get(self, v):
        return self[v]


# ---------------------------------------------------------------- helpers


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands recorded on different tapes")
    return tape


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def value(x):
    """Forward value of a Var or array as a numpy array."""
    return _val(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast(kind, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or not sa or not sb:
        return
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise TapeError(f"{kind}: incompatible shapes {sa} and {sb}") from None


def variable(value):
    """Standalone differentiable leaf on a fresh tape (handy in tests)."""
    return Tape().leaf(value)


def detach(x):
    """Same forward value, but no adjoint flows back through the result."""
    if not isinstance(x, Var):
        return np.asarray(x, dtype=np.float64)
    out = x.tape._append(x.value, (), (), False, "detach")
    out.detached = True
    return out


# ---------------------------------------------------------------- binary ops


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(a, b)
    av, bv = _val(a), _val(b)
    _broadcast("add", av, bv)
    sa, sb = av.shape, bv.shape
    return tape.push(av + bv, ((a, lambda g: _unbroadcast(g, sa)),
                               (b, lambda g: _unbroadcast(g, sb))), "add")


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.subtract(a, b)
    av, bv = _val(a), _val(b)
    _broadcast("sub", av, bv)
    sa, sb = av.shape, bv.shape
    return tape.push(av - bv, ((a, lambda g: _unbroadcast(g, sa)),
                               (b, lambda g: _unbroadcast(-g, sb))), "sub")


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.multiply(a, b)
    av, bv = _val(a), _val(b)
    _broadcast("mul", av, bv)
    return tape.push(av * bv, ((a, lambda g: _unbroadcast(g * bv, av.shape)),
                               (b, lambda g: _unbroadcast(g * av, bv.shape))), "mul")


def div(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.divide(a, b)
    av, bv = _val(a), _val(b)
    _broadcast("div", av, bv)
    if np.any(bv == 0):
        raise TapeError(f"div: zero divisor at node {len(tape)}")
    out = av / bv
    return tape.push(out, ((a, lambda g: _unbroadcast(g / bv, av.shape)),
                           (b, lambda g: _unbroadcast(-g * out / bv, bv.shape))), "div")


# ---------------------------------------------------------------- unary ops


def _unary(x, kind, f, df):
    """``df(xv, out)`` gives the elementwise derivative."""
    if not isinstance(x, Var):
        return f(np.asarray(x, dtype=np.float64))
    xv = x.value
    out = f(xv)
    return x.tape.push(out, ((x, lambda g: g * df(xv, out)),), kind)


def neg(x):
    return _unary(x, "neg", np.negative, lambda xv, out: -1.0)


def exp(x):
    return _unary(x, "exp", np.exp, lambda xv, out: out)


def _where(x):
    return f"node {len(x.tape)}" if isinstance(x, Var) else "untracked input"


def log(x):
    if np.any(_val(x) <= 0):
        raise TapeError(f"log of non-positive argument at {_where(x)}")
    return _unary(x, "log", np.log, lambda xv, out: 1.0 / xv)


def sqrt(x):
    if np.any(_val(x) <= 0):
        raise TapeError(f"sqrt of non-positive argument at {_where(x)}")
    return _unary(x, "sqrt", np.sqrt, lambda xv, out: 0.5 / out)


def square(x):
    return _unary(x, "square", np.square, lambda xv, out: 2.0 * xv)


def tanh(x):
    return _unary(x, "tanh", np.tanh, lambda xv, out: 1.0 - out * out)


def sin(x):
    return _unary(x, "sin", np.sin, lambda xv, out: np.cos(xv))


def cos(x):
    return _unary(x, "cos", np.cos, lambda xv, out: -np.sin(xv))


def sigmoid_np(xv):
    e = np.exp(-np.abs(xv))  # never overflows
    return np.where(xv >= 0, 1.0, e) / (1.0 + e)


def softplus_np(xv):
    return np.maximum(xv, 0.0) + np.log1p(np.exp(-np.abs(xv)))


def sigmoid(x):
    return _unary(x, "sigmoid", sigmoid_np, lambda xv, out: out * (1.0 - out))


def softplus(x):
    return _unary(x, "softplus", softplus_np, lambda xv, out: sigmoid_np(xv))


def relu(x):
    return _unary(x, "relu", lambda v: np.maximum(v, 0.0), lambda xv, out: xv > 0)


def elu(x):
    def f(v):
        return np.where(v > 0, v, np.expm1(np.minimum(v, 0.0)))

    return _unary(x, "elu", f, lambda xv, out: np.where(xv > 0, 1.0, out + 1.0))


# ---------------------------------------------------------------- reductions / shape


def sum(x, axis=None):  # noqa: A001
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    xv = x.value
    out = np.asarray(np.sum(xv, axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return x.tape.push(out, ((x, vjp),), "sum")


def mean(x, axis=None):
    if not isinstance(x, Var):
        return np.mean(x, axis=axis)
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def dot(a, b):
    """Inner product along the last axis."""
    if np.shape(_val(a))[-1:] != np.shape(_val(b))[-1:]:
        raise TapeError(f"dot: incompatible shapes {np.shape(_val(a))} and {np.shape(_val(b))}")
    return sum(mul(a, b), axis=-1)


def matvec(W, x):
    """``W @ x`` for W of shape (out, in) and x of shape (..., in)."""
    Wv, xv = _val(W), _val(x)
    if Wv.ndim != 2 or xv.ndim < 1 or xv.shape[-1] != Wv.shape[1]:
        raise TapeError(f"matvec: incompatible shapes {Wv.shape} and {xv.shape}")
    out = xv @ Wv.T
    tape = _tape_of(W, x)
    if tape is None:
        return out
    n_out, n_in = Wv.shape
    return tape.push(out, ((W, lambda g: g.reshape(-1, n_out).T @ xv.reshape(-1, n_in)),
                           (x, lambda g: g @ Wv)), "matvec")


def affine(x, W, b):
    """``W @ x + b`` fused into one node."""
    Wv, xv, bv = _val(W), _val(x), _val(b)
    if Wv.ndim != 2 or xv.ndim < 1 or xv.shape[-1] != Wv.shape[1] or bv.shape != (Wv.shape[0],):
        raise TapeError(f"affine: incompatible shapes W{Wv.shape} x{xv.shape} b{bv.shape}")
    out = xv @ Wv.T + bv
    tape = _tape_of(x, W, b)
    if tape is None:
        return out
    n_out, n_in = Wv.shape
    return tape.push(out, ((x, lambda g: g @ Wv),
                           (W, lambda g: g.reshape(-1, n_out).T @ xv.reshape(-1, n_in)),
                           (b, lambda g: g.reshape(-1, n_out).sum(axis=0))), "affine")


def take(x, j):
    """Component ``j`` of the last axis."""
    if not isinstance(x, Var):
        return np.asarray(x)[..., j]
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        out[..., j] = g
        return out

    return x.tape.push(xv[..., j], ((x, vjp),), "take")


def part(x, start, stop):
    """Slice ``start:stop`` of the last axis."""
    if not isinstance(x, Var):
        return np.asarray(x)[..., start:stop]
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        out[..., start:stop] = g
        return out

    return x.tape.push(xv[..., start:stop], ((x, vjp),), "part")


def concat(xs, axis=-1):
    vals = [_val(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise TapeError(f"concat: {exc}") from None
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.concatenate([[0], np.cumsum([v.shape[axis] for v in vals])])
    deps = []
    for i, x in enumerate(xs):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        deps.append((x, lambda g, sl=tuple(sl): g[sl]))
    return tape.push(out, deps, "concat")


def stack(xs, axis=-1):
    vals = [_val(x) for x in xs]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError as exc:
        raise TapeError(f"stack: {exc}") from None
    tape = _tape_of(*xs)
    if tape is None:
        return out
    return tape.push(out, [(x, lambda g, i=i: np.take(g, i, axis=axis)) for i, x in enumerate(xs)],
                     "stack")


def logsumexp(x, axis=-1):
    xv = _val(x)
    m = np.max(xv, axis=axis, keepdims=True)
    e = np.exp(xv - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    if not isinstance(x, Var):
        return out
    w = e / s
    return x.tape.push(out, ((x, lambda g: np.expand_dims(g, axis) * w),), "logsumexp")


def norm(x, axis=-1):
    """Euclidean norm; the subgradient at the origin is taken as zero."""
    xv = _val(x)
    out = np.sqrt(np.sum(xv * xv, axis=axis))
    if not isinstance(x, Var):
        return out
    inv = np.where(out > 0, 1.0 / np.where(out > 0, out, 1.0), 0.0)
    return x.tape.push(out, ((x, lambda g: np.expand_dims(g * inv, axis) * xv),), "norm")


def normal_logpdf(z, mu, sigma):
    """Diagonal Gaussian log-density summed over the last axis, one fused node."""
    zv, mv, sv = _val(z), _val(mu), _val(sigma)
    _broadcast("normal_logpdf", zv, mv)
    _broadcast("normal_logpdf", zv, sv)
    if sv.min() <= 0:
        raise TapeError("normal_logpdf: sigma must be strictly positive")
    u = (zv - mv) / sv
    terms = -np.log(sv) - HALF_LOG_2PI - 0.5 * u * u
    shape = terms.shape
    out = np.sum(terms, axis=-1)
    tape = _tape_of(z, mu, sigma)
    if tape is None:
        return out

    def dz(g):
        return _unbroadcast(np.broadcast_to(-g[..., None] * u / sv, shape), zv.shape)

    def dmu(g):
        return _unbroadcast(np.broadcast_to(g[..., None] * u / sv, shape), mv.shape)

    def dsigma(g):
        return _unbroadcast(np.broadcast_to(g[..., None] * (u * u - 1.0) / sv, shape), sv.shape)

    return tape.push(out, ((z, dz), (mu, dmu), (sigma, dsigma)), "normal_logpdf")


# op kind -> function, for the generic ``record`` entry point
OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "exp": exp, "log": log, "tanh": tanh, "sin": sin, "cos": cos,
    "square": square, "sqrt": sqrt, "sigmoid": sigmoid, "softplus": softplus,
    "relu": relu, "elu": elu, "sum": sum, "mean": mean, "dot": dot,
    "matvec": matvec, "affine": affine, "logsumexp": logsumexp, "norm": norm,
    "normal_logpdf": normal_logpdf, "take": take, "part": part,
    "concat": lambda *xs: concat(list(xs)), "stack": lambda *xs: stack(list(xs)),
}


def record(op, inputs, **kwargs):
    """Apply op ``op`` (a name from OPS) to ``inputs`` and return the result."""
    try:
        fn = OPS[op]
    except KeyError:
        raise TapeError(f"unknown op {op!r}") from None
    return fn(*inputs, **kwargs)
