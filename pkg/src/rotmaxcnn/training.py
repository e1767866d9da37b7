"""Least-squares training of the architectures.

Gradients are exact backpropagation through convolutions, ReLU, the interior
global max and the branch/orbit/angle maxima.  At a kink the subgradient
follows the first maximiser in row-major / view-major order, and ReLU has
derivative 0 at 0.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from rotmaxcnn.cnn import (
    Architecture,
    ConfigError,
    ConvLayer,
    ConvNet,
    FeedForwardNet,
    relu,
)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


# "positive_out" draws branch output weights as |Glorot|: a branch whose output
# weights are all negative outputs 0 at dead positions and never recovers.
INIT_SCHEMES = ("glorot_uniform", "glorot_uniform_positive_out")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    init: str = "glorot_uniform"
    bias_init: float = 0.0  # starting value of every convolution bias

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("moment decays must lie in (0, 1)")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"unknown initialisation {self.init!r}")
        if not math.isfinite(self.bias_init):
            raise ConfigError("bias_init must be finite")


# --------------------------------------------------------------------------
# initialisation


def _glorot(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_convnet(k: list[int], M: list[int], B: int, rng, bias_init: float = 0.0,
                 positive_out: bool = False) -> ConvNet:
    layers = []
    k_prev = 1
    for kr, Mr in zip(k, M):
        w = _glorot(rng, (Mr, Mr, k_prev, kr), Mr * Mr * k_prev, Mr * Mr * kr)
        layers.append(ConvLayer(w, np.full(kr, float(bias_init))))
        k_prev = kr
    w_out = _glorot(rng, (k_prev,), k_prev, 1)
    return ConvNet(layers, np.abs(w_out) if positive_out else w_out, B)


def init_ffn(d: int, depth: int, width: int, rng) -> FeedForwardNet:
    hidden = []
    prev = d
    for _ in range(depth):
        hidden.append((_glorot(rng, (width, prev), prev, width), np.zeros(width)))
        prev = width
    return FeedForwardNet(hidden, _glorot(rng, (prev,), prev, 1), 0.0)


def init_architecture(family: str, lam: int, t: int, k: list[int], M: list[int], B: int,
                      rng, head_depth: int = 0, head_width: int = 0, bias_init: float = 0.0,
                      scheme: str = "glorot_uniform") -> Architecture:
    """Randomly initialised architecture (uniform Glorot weights, conv biases ``bias_init``, other biases 0)."""
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"unknown initialisation {scheme!r}")
    n_branches = 1 if family == "F4" else t
    positive = scheme == "glorot_uniform_positive_out"
    branches = [init_convnet(k, M, B, rng, bias_init, positive) for _ in range(n_branches)]
    head = init_ffn(t, head_depth, head_width, rng) if family == "F1" else None
    return Architecture(family, lam, branches, t, head)


# --------------------------------------------------------------------------
# forward with cache


def _stacked(arch: Architecture):
    """Per-layer weights of all branches stacked along a leading branch axis."""
    nets = arch.branches
    layers = []
    for r in range(nets[0].L):
        W = np.stack([net.layers[r].weight for net in nets])  # (T, M, M, kin, kout)
        b = np.stack([net.layers[r].bias for net in nets])  # (T, kout)
        layers.append((W, b))
    w_out = np.stack([net.w_out for net in nets])  # (T, kL)
    return layers, w_out


def _im2col(o: np.ndarray, M: int, lo: int) -> np.ndarray:
    """(S, N, lam, lam, k) -> (S, N*lam*lam, M*M*k), taps ordered (t1, t2, channel).

    Window (t1, t2) at pixel i reads o[i + t - lo] with zeros outside.
    """
    S, N, lam, _, k = o.shape
    P = np.pad(o, ((0, 0), (0, 0), (lo, M - 1 - lo), (lo, M - 1 - lo), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(P, (M, M), axis=(2, 3))  # (S,N,lam,lam,k,M,M)
    return win.transpose(0, 1, 2, 3, 5, 6, 4).reshape(S, N * lam * lam, M * M * k)


def _branches_forward(layers, w_out, B: int, X: np.ndarray):
    """All branches on the same inputs X (N, lam, lam); values (T, N)."""
    N, lam = X.shape[0], X.shape[-1]
    T = w_out.shape[0]
    o = X[None, :, :, :, None]
    cache = []
    for W, b in layers:
        M, kin, kout = W.shape[1], W.shape[3], W.shape[4]
        cols = _im2col(o, M, math.ceil(M / 2) - 1)
        pre = cols @ W.reshape(T, M * M * kin, kout) + b[:, None, :]
        cache.append((cols, pre))
        o = np.maximum(pre, 0.0).reshape(T, N, lam, lam, kout)
    lin = np.einsum("tnijk,tk->tnij", o, w_out)
    inner = lin[:, :, B : lam - B, B : lam - B].reshape(T, N, -1)
    arg = inner.argmax(axis=2)
    vals = np.take_along_axis(inner, arg[..., None], axis=2)[..., 0]
    return vals, (cache, o, arg)


def _branches_backward(layers, w_out, B: int, N: int, lam: int, saved, dval: np.ndarray):
    """dval (T, N) -> per-layer (dW, db) stacked over branches, and dw_out."""
    cache, oL, arg = saved
    T = w_out.shape[0]
    side = lam - 2 * B
    dlin = np.zeros((T, N, lam, lam))
    ti, ni = np.meshgrid(np.arange(T), np.arange(N), indexing="ij")
    dlin[ti, ni, B + arg // side, B + arg % side] = dval
    d_wout = np.einsum("tnijk,tnij->tk", oL, dlin)
    do = (dlin[..., None] * w_out[:, None, None, None, :]).reshape(T, N * lam * lam, -1)
    grads = []
    for r in range(len(layers) - 1, -1, -1):
        W, _ = layers[r]
        M, kin, kout = W.shape[1], W.shape[3], W.shape[4]
        cols, pre = cache[r]
        dpre = do * (pre > 0)
        dW = np.swapaxes(cols, 1, 2) @ dpre  # broadcasts over a shared first-layer input
        grads.append((dW.reshape(W.shape), dpre.sum(axis=1)))
        if r > 0:
            # input gradient = correlation of dpre with the flipped filters
            lo = M - math.ceil(M / 2)
            dcols = _im2col(dpre.reshape(T, N, lam, lam, kout), M, lo)
            W_flip = W[:, ::-1, ::-1].transpose(0, 1, 2, 4, 3).reshape(T, M * M * kout, kin)
            do = dcols @ W_flip
    return grads[::-1], d_wout


def _ffn_forward(net: FeedForwardNet, V: np.ndarray):
    acts = [V]
    pres = []
    g = V
    for W, b in net.hidden:
        pre = g @ W.T + b
        pres.append(pre)
        g = relu(pre)
        acts.append(g)
    return g @ net.out_w + net.out_b, (acts, pres)


def _ffn_backward(net: FeedForwardNet, saved, dout: np.ndarray):
    acts, pres = saved
    grads = [acts[-1].T @ dout, np.array(dout.sum())]
    dg = np.outer(dout, net.out_w)
    hidden_grads = []
    for h in range(net.depth - 1, -1, -1):
        W, _ = net.hidden[h]
        dpre = dg * (pres[h] > 0)
        hidden_grads = [dpre.T @ acts[h], dpre.sum(axis=0)] + hidden_grads
        dg = dpre @ W
    return hidden_grads + grads, dg


def forward_with_cache(arch: Architecture, X: np.ndarray):
    """Outputs (n,) plus everything the backward pass needs."""
    X = np.asarray(X, dtype=float)
    views = arch.branch_inputs(X)
    V, n = views.shape[:2]
    flat = views.reshape((V * n,) + views.shape[2:])
    layers, w_out = _stacked(arch)
    vals, saved = _branches_forward(layers, w_out, arch.branches[0].B, flat)
    outs = vals.reshape(-1, V, n).transpose(2, 1, 0)  # (n, V, T)
    if arch.family == "F1":
        f, head_saved = _ffn_forward(arch.head, outs[:, 0, :])
        pick = None
    else:
        flat_outs = outs.reshape(n, -1)
        pick = flat_outs.argmax(axis=1)
        f = flat_outs[np.arange(n), pick]
        head_saved = None
    cache = {"layers": layers, "w_out": w_out, "shape": flat.shape, "saved": saved,
             "outs": outs, "pick": pick, "head": head_saved}
    return f, cache


def activation_pattern(arch: Architecture, X: np.ndarray) -> tuple:
    """Signs of every ReLU pre-activation and every max choice; constant where the loss is smooth."""
    _, c = forward_with_cache(arch, X)
    cache, _, arg = c["saved"]
    parts = [(pre > 0).tobytes() for _, pre in cache] + [arg.tobytes()]
    if c["pick"] is not None:
        parts.append(c["pick"].tobytes())
    if c["head"] is not None:
        parts += [(p > 0).tobytes() for p in c["head"][1]]
    return tuple(parts)


def backward_from_output(arch: Architecture, cache, dout: np.ndarray) -> list[np.ndarray]:
    """Gradients of sum(dout * f) aligned with ``arch.params()``."""
    outs = cache["outs"]
    n, V, T = outs.shape
    head_grads: list[np.ndarray] = []
    if arch.family == "F1":
        head_grads, douts = _ffn_backward(arch.head, cache["head"], dout)
        d_outs = np.zeros_like(outs)
        d_outs[:, 0, :] = douts
    else:
        d_outs = np.zeros((n, V * T))
        d_outs[np.arange(n), cache["pick"]] = dout
        d_outs = d_outs.reshape(n, V, T)
    N, lam = cache["shape"][0], cache["shape"][-1]
    dval = d_outs.transpose(2, 1, 0).reshape(T, N)  # flat index = view * n + item
    layer_grads, d_wout = _branches_backward(cache["layers"], cache["w_out"], arch.branches[0].B,
                                             N, lam, cache["saved"], dval)
    grads = []
    for b in range(T):
        for dW, db in layer_grads:
            grads += [dW[b], db[b]]
        grads.append(d_wout[b])
    return grads + head_grads


# --------------------------------------------------------------------------
# loss and gradients


def loss(arch: Architecture, X, y) -> float:
    """Mean squared error (1/m) sum |y_i - f(x_i)|^2."""
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("empty batch")
    f, _ = forward_with_cache(arch, X)
    return float(np.mean((y - f) ** 2))


def backward(arch: Architecture, X, y) -> tuple[float, list[np.ndarray]]:
    """Loss and its gradient with respect to every parameter in ``arch.params()``."""
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("empty batch")
    f, cache = forward_with_cache(arch, X)
    r = f - y
    grads = backward_from_output(arch, cache, 2.0 * r / len(y))
    return float(np.mean(r ** 2)), grads


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ConfigError("parameters and gradients are not shape-congruent")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


def fit(arch: Architecture, X, y, config: TrainConfig, history: list | None = None) -> Architecture:
    """Minimise the empirical squared loss with mini-batch Adam.

    Returns a trained copy of ``arch``.  One ``(epoch, loss, wall_ms)`` row per
    epoch is appended to ``history`` if given, where loss is the mean batch
    loss over the epoch.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("need a non-empty data set with one label per image")
    arch = arch.copy()
    rng = np.random.default_rng(config.seed)
    params = arch.params()
    state = AdamState()
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(X))
        total = 0.0
        for lo in range(0, len(X), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            value, grads = backward(arch, X[idx], y[idx])
            if not math.isfinite(value) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingError(f"non-finite loss {value} in epoch {epoch} (batch at {lo})")
            adam_step(params, grads, state, config)
            total += value * len(idx)
        if history is not None:
            history.append((epoch, total / len(X), (time.perf_counter() - start) * 1000.0))
    return arch


def write_log(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "wall_ms"])
        for epoch, value, ms in history:
            w.writerow([epoch, repr(float(value)), f"{ms:.1f}"])
