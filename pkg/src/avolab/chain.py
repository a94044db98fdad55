"""Gated stochastic refinement transitions and the hierarchical chain.

Each transition maps an input z to a diagonal Gaussian::

    h     = act_h(W_h u + b_h)          u = z, or [z, cond] when amortized
    m     = W_m h + b_m
    g     = sigmoid(W_g h + b_g)
    mu    = g * m + (1 - g) * z
    sigma = softplus(W_s h + b_s) + floor

A chain of T layers holds one forward net q_t(z_t | z_{t-1}) and one
independent backward net r_t(z_{t-1} | z_t) per layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from avolab import tape as T
from avolab.dist import SIGMA_FLOOR, DiagGaussian, Rng, positive_scale, sample_reparam

NET_PARAMS = ("W_h", "b_h", "W_m", "b_m", "W_g", "b_g", "W_s", "b_s")
CHECKPOINT_FORMAT = "avolab-chain-v1"
# near-identity start: the gate is mostly closed (sigmoid(-2) ~ 0.12), so each
# transition begins as a small noisy refinement of its input
INIT_GATE_BIAS = -2.0
INIT_SIGMA = 0.2


class ChainError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    T: int = 10
    latent_dim: int = 2
    hidden: int = 32
    amortized: bool = False
    condition_dim: int = 0
    learn_q0: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.latent_dim < 1 or self.hidden < 1:
            raise ValueError("latent_dim and hidden must be >= 1")
        if self.amortized and self.condition_dim < 1:
            raise ValueError("amortized chains need condition_dim >= 1")

    @property
    def input_dim(self) -> int:
        return self.latent_dim + (self.condition_dim if self.amortized else 0)


@dataclass
class GatedNet:
    params: dict
    activation: str = "relu"

    @classmethod
    def init(cls, rng: Rng, in_dim: int, out_dim: int, hidden: int, activation="relu",
             gate_bias: float = INIT_GATE_BIAS, sigma: float = INIT_SIGMA):
        p = {
            "W_h": rng.normal((hidden, in_dim)) / math.sqrt(in_dim),
            "b_h": np.zeros(hidden),
            "W_m": rng.normal((out_dim, hidden)) / math.sqrt(hidden),
            "b_m": np.zeros(out_dim),
            "W_g": rng.normal((out_dim, hidden)) / math.sqrt(hidden),
            "b_g": np.full(out_dim, gate_bias),
            "W_s": rng.normal((out_dim, hidden)) / math.sqrt(hidden),
            "b_s": np.full(out_dim, math.log(math.expm1(sigma))),
        }
        return cls(p, activation)

    @classmethod
    def zeros(cls, in_dim, out_dim, hidden, activation="relu"):
        p = {
            "W_h": np.zeros((hidden, in_dim)), "b_h": np.zeros(hidden),
            "W_m": np.zeros((out_dim, hidden)), "b_m": np.zeros(out_dim),
            "W_g": np.zeros((out_dim, hidden)), "b_g": np.zeros(out_dim),
            "W_s": np.zeros((out_dim, hidden)), "b_s": np.zeros(out_dim),
        }
        return cls(p, activation)


@dataclass
class TransitionLayer:
    fwd: GatedNet
    bwd: GatedNet


def _lin(x, W, b):
    return x @ W.swapaxes(-1, -2) + b


def _gated(p, z, u, activation):
    pre = _lin(u, p["W_h"], p["b_h"])
    if activation == "elu":
        h = np.where(pre > 0, pre, np.expm1(np.minimum(pre, 0.0)))
    else:
        h = np.maximum(pre, 0.0)
    m = _lin(h, p["W_m"], p["b_m"])
    a_g = _lin(h, p["W_g"], p["b_g"])
    a_s = _lin(h, p["W_s"], p["b_s"])
    g = T.sigmoid_np(a_g)
    mu = z + g * (m - z)
    sigma = T.softplus_np(a_s) + SIGMA_FLOOR
    return pre, h, m, g, a_s, mu, sigma


def _weight_grad(d_out, x, W):
    if W.ndim == 2:
        return d_out.reshape(-1, W.shape[0]).T @ x.reshape(-1, W.shape[1])
    return d_out.swapaxes(-1, -2) @ x


def _bias_grad(d_out, b):
    if b.ndim == 1:
        return d_out.reshape(-1, b.shape[0]).sum(axis=0)
    return d_out.sum(axis=-2, keepdims=True)


def transition_params(net: GatedNet, z_in, cond=None) -> DiagGaussian:
    """Gaussian produced by one gated refinement net at input ``z_in``.

    Parameters may carry a leading ensemble axis (weights (E, out, in),
    biases (E, 1, out)) with z_in of shape (E, n, d). On a tape the whole net
    is one node with output [mu, sigma] and a hand-written adjoint, split
    into its two halves afterwards.
    """
    p = net.params
    pv = {k: T.value(v) for k, v in p.items()}
    d = pv["W_m"].shape[-2]
    zv = T.value(z_in)
    if zv.shape[-1] != d:
        raise ValueError(f"transition input has dimension {zv.shape[-1]}, expected {d}")
    uv = zv
    if cond is not None:
        c = np.asarray(cond, dtype=np.float64)
        uv = np.concatenate([zv, np.broadcast_to(c, zv.shape[:-1] + c.shape[-1:])], axis=-1)
    if uv.shape[-1] != pv["W_h"].shape[-1]:
        raise ValueError(f"transition net expects input size {pv['W_h'].shape[-1]}, got {uv.shape[-1]}")
    pre, h, m, g, a_s, mu, sigma = _gated(pv, zv, uv, net.activation)
    tape = T._tape_of(z_in, *p.values())
    if tape is None:
        return DiagGaussian(mu, sigma)

    if net.activation == "elu":
        dact = np.where(pre > 0, 1.0, h + 1.0)
    else:
        dact = (pre > 0).astype(np.float64)
    cache = [None, None]

    def core(gout):
        # shared backward pass, memoized on the adjoint array it was given
        if cache[0] is gout:
            return cache[1]
        g_mu, g_sig = gout[..., :d], gout[..., d:]
        d_m = g_mu * g
        d_ag = g_mu * (m - zv) * g * (1.0 - g)
        d_as = g_sig * T.sigmoid_np(a_s)
        d_h = d_m @ pv["W_m"] + d_ag @ pv["W_g"] + d_as @ pv["W_s"]
        res = {"m": d_m, "g": d_ag, "s": d_as, "h": d_h * dact, "mu": g_mu}
        cache[0], cache[1] = gout, res
        return res

    def dz(gout):
        c = core(gout)
        return c["mu"] * (1.0 - g) + (c["h"] @ pv["W_h"])[..., :d]

    deps = [(z_in, dz),
            (p["W_h"], lambda gout: _weight_grad(core(gout)["h"], uv, pv["W_h"])),
            (p["b_h"], lambda gout: _bias_grad(core(gout)["h"], pv["b_h"]))]
    for head in ("m", "g", "s"):
        W, b = f"W_{head}", f"b_{head}"
        deps.append((p[W], lambda gout, head=head, W=W: _weight_grad(core(gout)[head], h, pv[W])))
        deps.append((p[b], lambda gout, head=head, b=b: _bias_grad(core(gout)[head], pv[b])))
    packed = tape.push(np.concatenate([mu, sigma], axis=-1), deps, "gated_transition")
    return DiagGaussian(T.part(packed, 0, d), T.part(packed, d, 2 * d))


@dataclass
class GaussianEncoder:
    """x -> N(mu(x), sigma(x)) with one ELU hidden layer."""

    params: dict

    @classmethod
    def init(cls, rng: Rng, in_dim: int, out_dim: int, hidden: int, init_sigma=1.0):
        return cls({
            "W_h": rng.normal((hidden, in_dim)) / math.sqrt(in_dim),
            "b_h": np.zeros(hidden),
            "W_mu": rng.normal((out_dim, hidden)) / math.sqrt(hidden),
            "b_mu": np.zeros(out_dim),
            "W_s": rng.normal((out_dim, hidden)) * (0.1 / math.sqrt(hidden)),
            "b_s": np.full(out_dim, math.log(math.expm1(init_sigma))),
        })

    def __call__(self, x) -> DiagGaussian:
        p = self.params
        h = T.elu(T.affine(x, p["W_h"], p["b_h"]))
        mu = T.affine(h, p["W_mu"], p["b_mu"])
        sigma = positive_scale(T.affine(h, p["W_s"], p["b_s"]))
        return DiagGaussian(mu, sigma)


@dataclass
class Chain:
    """T transition layers plus an initial distribution (fixed or learned)."""

    config: ChainConfig
    layers: list
    q0_encoder: Optional[GaussianEncoder] = None

    @classmethod
    def init(cls, config: ChainConfig, rng: Rng) -> "Chain":
        act = "elu" if config.amortized else "relu"
        d, h = config.latent_dim, config.hidden
        layers = [TransitionLayer(GatedNet.init(rng, config.input_dim, d, h, act),
                                  GatedNet.init(rng, config.input_dim, d, h, act))
                  for _ in range(config.T)]
        enc = None
        if config.learn_q0:
            if not config.amortized:
                raise ValueError("learn_q0 requires an amortized chain")
            enc = GaussianEncoder.init(rng, config.condition_dim, d, h)
        return cls(config, layers, enc)

    @classmethod
    def stack(cls, chains) -> "Chain":
        """Ensemble chain: member k's parameters sit at index k of a new
        leading axis (biases become (E, 1, out))."""
        chains = list(chains)
        flats = [c.parameters() for c in chains]
        stacked = {}
        for k in flats[0]:
            arrs = [f[k] for f in flats]
            arr = np.stack(arrs)
            if arr.ndim == 2:
                arr = arr[:, None, :]
            stacked[k] = arr
        return chains[0].with_parameters(stacked)

    @property
    def ensemble_size(self) -> int:
        W = T.value(self.layers[0].fwd.params["W_h"])
        return W.shape[0] if W.ndim == 3 else 0

    def member(self, k: int) -> "Chain":
        """Member ``k`` of an ensemble chain as an ordinary chain."""
        if self.ensemble_size == 0:
            raise ValueError("not an ensemble chain")
        flat = {}
        for name, v in self.parameters().items():
            v = np.asarray(T.value(v))[k]
            flat[name] = v[0] if v.ndim == 2 and v.shape[0] == 1 and "b_" in name else v
        return self.with_parameters(flat)

    def q0(self, cond=None) -> DiagGaussian:
        if self.q0_encoder is not None:
            if cond is None:
                raise ValueError("learned q0 needs the conditioning input")
            return self.q0_encoder(cond)
        return DiagGaussian.standard(self.config.latent_dim)

    def parameters(self) -> dict:
        """Flat name -> array mapping; names are stable across runs."""
        out = {}
        for t, layer in enumerate(self.layers, start=1):
            for side, net in (("fwd", layer.fwd), ("bwd", layer.bwd)):
                for k, v in net.params.items():
                    out[f"layer{t:03d}.{side}.{k}"] = v
        if self.q0_encoder is not None:
            for k, v in self.q0_encoder.params.items():
                out[f"q0.{k}"] = v
        return out

    def with_parameters(self, flat: dict) -> "Chain":
        layers = []
        for t, layer in enumerate(self.layers, start=1):
            nets = []
            for side, net in (("fwd", layer.fwd), ("bwd", layer.bwd)):
                nets.append(GatedNet({k: flat[f"layer{t:03d}.{side}.{k}"] for k in net.params},
                                     net.activation))
            layers.append(TransitionLayer(*nets))
        enc = None
        if self.q0_encoder is not None:
            enc = GaussianEncoder({k: flat[f"q0.{k}"] for k in self.q0_encoder.params})
        return Chain(self.config, layers, enc)

    def bind(self, tape: T.Tape):
        """Copy whose parameters are leaves on ``tape``; also returns name -> Var."""
        leaves = {k: tape.leaf(v) for k, v in self.parameters().items()}
        return self.with_parameters(leaves), leaves


@dataclass
class ChainTrace:
    z: list
    log_q0: Any
    log_q_fwd: list = field(default_factory=list)
    log_r_bwd: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.log_q_fwd)


def _check_finite(x, what, t):
    if not np.all(np.isfinite(T.value(x))):
        raise ChainError(f"non-finite {what} at layer {t}")


def sample_chain(layers, q0: DiagGaussian, rng: Rng, cond=None, n: Optional[int] = None,
                 detach_inputs: bool = False) -> ChainTrace:
    """Draw z_0..z_T by reparameterization and score both directions.

    With ``detach_inputs`` each layer sees a gradient-blocked copy of its
    input, so a loss on layer t reaches only layer t's parameters.
    """
    if len(layers) < 1:
        raise ValueError("a chain needs at least one layer")
    d = q0.dim
    shape = (d,) if n is None else (n, d)
    if cond is not None and n is None and np.ndim(T.value(cond)) == 2:
        shape = (np.shape(T.value(cond))[0], d)
    eps0 = rng.normal(shape)
    z0 = sample_reparam(q0, eps0)
    trace = ChainTrace(z=[z0], log_q0=q0.log_prob(z0), eps=[eps0])
    _check_finite(trace.log_q0, "log q0", 0)
    z_prev = z0
    for t, layer in enumerate(layers, start=1):
        try:
            z_in = T.detach(z_prev) if detach_inputs else z_prev
            q = transition_params(layer.fwd, z_in, cond)
            eps = rng.normal(shape)
            z_t = sample_reparam(q, eps)
            log_q = q.log_prob(z_t)
            r = transition_params(layer.bwd, z_t, cond)
            log_r = r.log_prob(z_in)
        except (T.TapeError, FloatingPointError) as exc:
            raise ChainError(f"layer {t}: {exc}") from exc
        _check_finite(z_t, "sample", t)
        _check_finite(log_q, "log q", t)
        _check_finite(log_r, "log r", t)
        trace.z.append(z_t)
        trace.log_q_fwd.append(log_q)
        trace.log_r_bwd.append(log_r)
        trace.eps.append(eps)
        trace.sigmas.append((q.sigma, r.sigma))
        z_prev = z_t
    return trace


def log_q_joint(trace: ChainTrace):
    if trace.T < 1:
        raise ValueError("trace has no layers")
    out = trace.log_q0
    for lq in trace.log_q_fwd:
        out = T.add(out, lq)
    return out


def log_r_joint(trace: ChainTrace):
    if trace.T < 1:
        raise ValueError("trace has no layers")
    out = trace.log_r_bwd[0]
    for lr in trace.log_r_bwd[1:]:
        out = T.add(out, lr)
    return out


def backward_log_weights(layers, q0: DiagGaussian, z_T, rng: Rng, cond=None):
    """log q(z_T, z_<T) - log r(z_<T | z_T) with z_<T drawn from the backward chain.

    ``z_T`` may carry any leading batch shape; one backward draw per row.
    Works on plain arrays only.
    """
    z_t = np.asarray(z_T)
    log_w = np.zeros(z_t.shape[:-1])
    for t in range(len(layers), 0, -1):
        layer = layers[t - 1]
        r = transition_params(layer.bwd, z_t, cond)
        z_prev = sample_reparam(r, rng.normal(z_t.shape))
        q = transition_params(layer.fwd, z_prev, cond)
        log_w += q.log_prob(z_t) - r.log_prob(z_prev)
        z_t = z_prev
    log_w += q0.log_prob(z_t)
    if not np.all(np.isfinite(log_w)):
        bad = np.argwhere(~np.isfinite(log_w))[0]
        raise ChainError(f"non-finite importance weight at index {tuple(bad)}")
    return log_w


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(chain: Chain, path) -> None:
    """Write a chain to ``path`` as an .npz archive.

    Layout: ``__format__`` holds the version tag; ``__config__`` a JSON
    string of ChainConfig fields; every other key is a parameter named
    ``layer{t:03d}.{fwd|bwd}.{W_h|b_h|...}`` (t from 1) or ``q0.{name}``.
    """
    import json
    from dataclasses import asdict

    path = Path(path)
    arrays = {k: np.asarray(v) for k, v in chain.parameters().items()}
    arrays["__format__"] = np.array(CHECKPOINT_FORMAT)
    arrays["__config__"] = np.array(json.dumps(asdict(chain.config), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Chain:
    import json

    with np.load(path, allow_pickle=False) as data:
        fmt = str(data["__format__"])
        if fmt != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {fmt!r}")
        config = ChainConfig(**json.loads(str(data["__config__"])))
        flat = {k: data[k].copy() for k in data.files if not k.startswith("__")}
    template = Chain.init(config, Rng(0))
    return template.with_parameters(flat)
