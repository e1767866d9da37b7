"""Forward evaluation of the parallel-branch CNN and its rotation-aware variants.

A branch (:class:`ConvNet`) is a stack of zero-padded convolutions with ReLU,
followed by a linear read-out and a global max over the interior positions
``{1+B, ..., lam-B}^2``.  :class:`Architecture` combines branches into one of
four families:

``F1``
    fully connected ReLU head over the ``t`` branch outputs
``F2``
    maximum over the ``t`` branch outputs
``F3``
    an F2 network evaluated on the four quarter-turn rotations of the input,
    maximum over the orbit
``F4``
    one branch evaluated on ``t`` nearest-neighbour rotations of the
    zero-padded input, maximum over angles

Feature maps are float64 arrays shaped ``(n, lam, lam, channels)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rotmaxcnn.grid import nn_rotation_map, pad_width, rot90, rotation_angles, zero_pad

FAMILIES = ("F1", "F2", "F3", "F4")
WEIGHTS_FORMAT = "rotmaxcnn.weights"
WEIGHTS_VERSION = 1


class ConfigError(ValueError):
    """Inconsistent shapes, bounds or resolutions."""


def relu(z):
    return np.maximum(z, 0.0)


def truncate(beta: float, z):
    """Clamp to [-beta, beta]."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return np.clip(z, -beta, beta)


def plug_in_classify(eta_value):
    """Class 1 exactly when the estimated probability is at least 1/2."""
    return (np.asarray(eta_value) >= 0.5).astype(np.int64)


# --------------------------------------------------------------------------
# fully connected network


@dataclass
class FeedForwardNet:
    """ReLU network ``R^d -> R`` with affine output.

    ``hidden[r] = (W, b)`` with ``W`` of shape ``(width_r, width_{r-1})``.
    With no hidden layers the network is the affine map ``out_w @ x + out_b``.
    """

    hidden: list[tuple[np.ndarray, np.ndarray]]
    out_w: np.ndarray
    out_b: np.ndarray  # 0-d, so it can be updated in place like the other parameters
    input_dim: int = field(init=False)

    def __post_init__(self):
        self.hidden = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float)) for W, b in self.hidden]
        self.out_w = np.asarray(self.out_w, dtype=float)
        self.out_b = np.array(self.out_b, dtype=float).reshape(())
        if self.hidden:
            self.input_dim = self.hidden[0][0].shape[1]
        else:
            self.input_dim = self.out_w.shape[0]
        prev = self.input_dim
        for W, b in self.hidden:
            if W.ndim != 2 or W.shape[1] != prev or b.shape != (W.shape[0],):
                raise ConfigError(f"hidden layer shape {W.shape}/{b.shape} does not follow width {prev}")
            prev = W.shape[0]
        if self.out_w.shape != (prev,):
            raise ConfigError(f"output weights {self.out_w.shape} do not match width {prev}")

    @property
    def depth(self) -> int:
        return len(self.hidden)

    @property
    def width(self) -> int:
        return max((W.shape[0] for W, _ in self.hidden), default=0)

    def __call__(self, v):
        return ffn_forward(self, v)

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in self.hidden:
            out += [W, b]
        out += [self.out_w, self.out_b]
        return out

    def copy(self) -> "FeedForwardNet":
        return FeedForwardNet([(W.copy(), b.copy()) for W, b in self.hidden], self.out_w.copy(), self.out_b.copy())

    def to_dict(self) -> dict:
        return {
            "hidden": [{"weight": _tensor(W), "bias": _tensor(b)} for W, b in self.hidden],
            "out_weight": _tensor(self.out_w),
            "out_bias": float(self.out_b),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeedForwardNet":
        hidden = [(_untensor(h["weight"]), _untensor(h["bias"])) for h in d["hidden"]]
        return cls(hidden, _untensor(d["out_weight"]), d["out_bias"])


def ffn_forward(net: FeedForwardNet, v) -> np.ndarray | float:
    """Evaluate on one vector ``(d,)`` or a batch ``(n, d)``."""
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    g = v[None, :] if single else v
    if g.shape[-1] != net.input_dim:
        raise ConfigError(f"expected input dimension {net.input_dim}, got {g.shape[-1]}")
    for W, b in net.hidden:
        g = relu(g @ W.T + b)
    out = g @ net.out_w + net.out_b
    return float(out[0]) if single else out


# --------------------------------------------------------------------------
# convolutional branch


@dataclass
class ConvLayer:
    weight: np.ndarray  # (M, M, k_in, k_out)
    bias: np.ndarray  # (k_out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        w = self.weight
        if w.ndim != 4 or w.shape[0] != w.shape[1] or self.bias.shape != (w.shape[3],):
            raise ConfigError(f"bad layer shapes {w.shape} / {self.bias.shape}")

    @property
    def M(self) -> int:
        return self.weight.shape[0]

    @property
    def k_in(self) -> int:
        return self.weight.shape[2]

    @property
    def k_out(self) -> int:
        return self.weight.shape[3]


def tap_offsets(M: int) -> range:
    """Input offsets ``t - ceil(M/2)`` for taps ``t = 1..M``."""
    c = math.ceil(M / 2)
    return range(1 - c, M - c + 1)


def pad_input(o: np.ndarray, M: int) -> np.ndarray:
    c = math.ceil(M / 2)
    lo, hi = c - 1, M - c
    return np.pad(o, ((0, 0), (lo, hi), (lo, hi), (0, 0)))


def conv_layer_forward(o: np.ndarray, layer: ConvLayer, skip_zero_taps: bool = True) -> np.ndarray:
    """One zero-padded convolution + ReLU on ``o`` of shape (n, lam, lam, k_in).

    Out-of-range taps read zero, so the spatial size is preserved.  Taps whose
    filter slice is identically zero are skipped (they contribute exactly 0).
    """
    pre = conv_preactivation(o, layer, skip_zero_taps)
    return relu(pre)


def conv_preactivation(o: np.ndarray, layer: ConvLayer, skip_zero_taps: bool = True) -> np.ndarray:
    if o.ndim != 4 or o.shape[-1] != layer.k_in:
        raise ConfigError(f"feature maps {o.shape} do not match layer input channels {layer.k_in}")
    n, lam, _, _ = o.shape
    M = layer.M
    P = pad_input(o, M)
    pre = np.zeros((n, lam, lam, layer.k_out))
    # fixed order: input channel outer, then t1, t2; each term is added in turn
    for s1 in range(layer.k_in):
        for t1 in range(M):
            for t2 in range(M):
                w = layer.weight[t1, t2, s1]
                if skip_zero_taps and not w.any():
                    continue
                pre += P[:, t1 : t1 + lam, t2 : t2 + lam, s1, None] * w
    pre += layer.bias
    return pre


@dataclass
class ConvNet:
    """One parallel branch: conv layers, linear read-out, interior global max."""

    layers: list[ConvLayer]
    w_out: np.ndarray
    B: int = 0

    def __post_init__(self):
        self.w_out = np.asarray(self.w_out, dtype=float)
        self.B = int(self.B)
        k_prev = 1
        for r, layer in enumerate(self.layers, 1):
            if layer.k_in != k_prev:
                raise ConfigError(f"layer {r} expects {layer.k_in} input channels, previous layer has {k_prev}")
            k_prev = layer.k_out
        if self.w_out.shape != (k_prev,):
            raise ConfigError(f"output weights {self.w_out.shape} do not match {k_prev} channels")
        if self.B < 0:
            raise ConfigError("output bound must be non-negative")

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def channels(self) -> list[int]:
        return [layer.k_out for layer in self.layers]

    @property
    def filter_sizes(self) -> list[int]:
        return [layer.M for layer in self.layers]

    def check_resolution(self, lam: int) -> None:
        if self.B > (lam - 1) // 2:
            raise ConfigError(f"output bound B={self.B} too large for resolution {lam}")

    def feature_maps(self, x) -> list[np.ndarray]:
        """All layer outputs ``o^(0) .. o^(L)`` for images (n, lam, lam)."""
        x = _as_batch(x)
        o = x[..., None]
        maps = [o]
        for layer in self.layers:
            o = conv_layer_forward(o, layer)
            maps.append(o)
        return maps

    def output_map(self, x) -> np.ndarray:
        """Linear read-out ``sum_s w_s o^(L)_s`` at every position, (n, lam, lam)."""
        return self.feature_maps(x)[-1] @ self.w_out

    def __call__(self, x):
        return cnn_branch_forward(self, x)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        out.append(self.w_out)
        return out

    def copy(self) -> "ConvNet":
        return ConvNet([ConvLayer(l.weight.copy(), l.bias.copy()) for l in self.layers], self.w_out.copy(), self.B)

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "layers": [{"weight": _tensor(l.weight), "bias": _tensor(l.bias)} for l in self.layers],
            "w_out": _tensor(self.w_out),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvNet":
        layers = [ConvLayer(_untensor(l["weight"]), _untensor(l["bias"])) for l in d["layers"]]
        return cls(layers, _untensor(d["w_out"]), d["B"])


def cnn_branch_forward(net: ConvNet, x) -> np.ndarray | float:
    """Branch output for one image (returns float) or a batch (returns (n,))."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    xb = _as_batch(x)
    lam = xb.shape[-1]
    net.check_resolution(lam)
    lin = net.output_map(xb)
    B = net.B
    inner = lin[:, B : lam - B, B : lam - B]
    out = inner.reshape(len(xb), -1).max(axis=1)
    return float(out[0]) if single else out


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise ConfigError(f"expected square images (n, lam, lam), got shape {x.shape}")
    return x


# --------------------------------------------------------------------------
# architectures


@dataclass
class Architecture:
    """One of the four families over ``t`` parallel branches.

    ``lam`` is the resolution of the images fed to :meth:`__call__`.  For F4
    the single branch sees the padded resolution ``lam + 2*pad_width(lam)``.
    """

    family: str
    lam: int
    branches: list[ConvNet]
    t: int
    head: FeedForwardNet | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.t < 1:
            raise ConfigError("t must be at least 1")
        if self.family == "F4":
            if len(self.branches) != 1:
                raise ConfigError("F4 uses exactly one shared branch")
        elif len(self.branches) != self.t:
            raise ConfigError(f"{self.family} needs t={self.t} branches, got {len(self.branches)}")
        if self.family == "F1":
            if self.head is None:
                raise ConfigError("F1 needs a feedforward head")
            if self.head.input_dim != self.t:
                raise ConfigError(f"head input dimension {self.head.input_dim} differs from t={self.t}")
        elif self.head is not None:
            raise ConfigError(f"{self.family} has no feedforward head")
        for net in self.branches:
            net.check_resolution(self.branch_resolution)

    @property
    def branch_resolution(self) -> int:
        if self.family == "F4":
            return self.lam + 2 * pad_width(self.lam)
        return self.lam

    @property
    def angles(self) -> np.ndarray:
        return rotation_angles(self.t) if self.family == "F4" else np.zeros(0)

    def branch_inputs(self, x: np.ndarray) -> np.ndarray:
        """Images each branch sees, shaped (views, n, lam', lam').

        F1/F2 have one view (the image), F3 the four quarter-turn rotations,
        F4 the t nearest-neighbour rotations of the padded image.
        """
        if self.family == "F3":
            return np.stack([rot90(x, k) for k in range(4)])
        if self.family == "F4":
            return rotated_views(x, self.t)
        return x[None]

    def branch_outputs(self, x) -> np.ndarray:
        """Branch values shaped (n, views, branches)."""
        x = _as_batch(x)
        if x.shape[-1] != self.lam:
            raise ConfigError(f"architecture expects resolution {self.lam}, got {x.shape[-1]}")
        views = self.branch_inputs(x)
        V, n = views.shape[:2]
        flat = views.reshape((V * n,) + views.shape[2:])
        outs = np.stack([cnn_branch_forward(net, flat) for net in self.branches], axis=-1)
        return outs.reshape(V, n, -1).transpose(1, 0, 2)

    def __call__(self, x):
        return architecture_forward(self, x)

    def params(self) -> list[np.ndarray]:
        out = []
        for net in self.branches:
            out += net.params()
        if self.head is not None:
            out += self.head.params()
        return out

    def copy(self) -> "Architecture":
        return Architecture(
            self.family, self.lam, [b.copy() for b in self.branches], self.t,
            None if self.head is None else self.head.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "format": WEIGHTS_FORMAT,
            "version": WEIGHTS_VERSION,
            "family": self.family,
            "lam": self.lam,
            "t": self.t,
            "branches": [b.to_dict() for b in self.branches],
            "head": None if self.head is None else self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        if d.get("format") != WEIGHTS_FORMAT:
            raise ConfigError(f"not a weight file (format={d.get('format')!r})")
        if d.get("version") != WEIGHTS_VERSION:
            raise ConfigError(f"unsupported weight file version {d.get('version')!r}")
        head = None if d["head"] is None else FeedForwardNet.from_dict(d["head"])
        return cls(d["family"], d["lam"], [ConvNet.from_dict(b) for b in d["branches"]], d["t"], head)


def rotated_views(x: np.ndarray, t: int) -> np.ndarray:
    """Stack of t nearest-neighbour rotations of padded images, (t, n, lam', lam')."""
    lam = x.shape[-1]
    padded = zero_pad(x, pad_width(lam))
    lp = padded.shape[-1]
    flat = padded.reshape(len(x), lp * lp)
    return np.stack([flat[:, nn_rotation_map(a, lp)].reshape(len(x), lp, lp) for a in rotation_angles(t)])


def architecture_forward(arch: Architecture, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    outs = arch.branch_outputs(x)  # (n, views, branches)
    if arch.family == "F1":
        val = ffn_forward(arch.head, outs[:, 0, :])
    else:
        val = outs.reshape(len(outs), -1).max(axis=1)
    return float(val[0]) if single else val


def classify(arch: Architecture, x):
    """Plug-in class labels for one image or a batch."""
    return plug_in_classify(architecture_forward(arch, x))


# --------------------------------------------------------------------------
# weight files


def _tensor(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _untensor(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


def save_weights(arch: Architecture, path) -> None:
    Path(path).write_text(json.dumps(arch.to_dict()))


def load_weights(path) -> Architecture:
    return Architecture.from_dict(json.loads(Path(path).read_text()))
