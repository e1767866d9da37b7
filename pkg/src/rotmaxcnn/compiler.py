"""Construct CNN weights that compute a discretized hierarchical model exactly.

The construction works level by level.  Every combining function is a
``relu(g)`` with ``g`` a feedforward network.  Each one is unrolled into
``depth + 1`` convolutional layers with :func:`embed_ffn`.  Values that are
needed later ride along in storage channels: an identity tap passes a
non-negative value through ReLU unchanged.

Channel layout of a compiled branch (0-based indices, ``l`` the level):

* ``0 .. 4^(l-k)-1`` hold the level-k values once block k is done;
* the next ``4^(l-k+1)`` channels store copies of the level-(k-1) values
  (for block 0 a single copy of the input image);
* ``5*4^(l-1) ..`` are scratch lanes for the hidden layers of the network
  being unrolled.

Every channel index in this module is 0-based.  Layer numbers ``r`` are
1-based, so layer ``r`` is ``net.layers[r-1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rotmaxcnn.cnn import Architecture, ConfigError, ConvLayer, ConvNet, FeedForwardNet, architecture_forward
from rotmaxcnn.hmax import (
    GFunc,
    HmaxSpec,
    NetFunc,
    NetSchedule,
    Primitive,
    eval_discretized,
    offset_bound,
    schedule_for,
)

# --------------------------------------------------------------------------
# exact max network


def build_max_network(t: int) -> FeedForwardNet:
    """ReLU network of depth ceil(log2 t) computing max(x_1..x_t).

    Pairs are merged with ``max(a, b) = relu(b - a) + relu(a) - relu(-a)`` in
    a binary tree over the overlapping halves ``x[:ceil(t/2)]`` and
    ``x[t - ceil(t/2):]``.
    """
    if t < 1:
        raise ValueError("t must be at least 1")
    if t == 1:
        return FeedForwardNet([], np.array([1.0]), 0.0)
    hidden, out_w, out_b = _max_layers(t)
    return FeedForwardNet(hidden, out_w, out_b)


def _max_layers(t: int):
    if t == 2:
        W = np.array([[-1.0, 1.0], [1.0, 0.0], [-1.0, 0.0]])
        return [(W, np.zeros(3))], np.array([1.0, 1.0, -1.0]), 0.0
    m = math.ceil(t / 2)
    sub, sub_w, sub_b = _max_layers(m)
    hidden = []
    for r, (W, b) in enumerate(sub):
        if r == 0:
            # first layer: the two halves read overlapping input ranges
            first = np.zeros((2 * W.shape[0], t))
            first[: W.shape[0], :m] = W
            first[W.shape[0] :, t - m :] = W
            hidden.append((first, np.concatenate([b, b])))
        else:
            hidden.append((_block_diag(W, W), np.concatenate([b, b])))
    r = len(sub_w)
    z = np.zeros(r)
    # merge a = sub_w.h_A + sub_b and b = sub_w.h_B + sub_b
    merge = np.stack([
        np.concatenate([-sub_w, sub_w]),  # relu(b - a)
        np.concatenate([sub_w, z]),  # relu(a)
        np.concatenate([-sub_w, z]),  # relu(-a)
    ])
    hidden.append((merge, np.array([0.0, sub_b, -sub_b])))
    return hidden, np.array([1.0, 1.0, -1.0]), 0.0


def _block_diag(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    out = np.zeros((A.shape[0] + B.shape[0], A.shape[1] + B.shape[1]))
    out[: A.shape[0], : A.shape[1]] = A
    out[A.shape[0] :, A.shape[1] :] = B
    return out


# --------------------------------------------------------------------------
# networks for combining functions


def as_network(f: GFunc) -> FeedForwardNet:
    """Feedforward ``g`` with ``f == relu(g)`` on non-negative arguments.

    Accepts networks directly and the piecewise-linear primitives max, min,
    mean and affine_clamped.
    """
    if isinstance(f, NetFunc):
        return f.net
    if isinstance(f, Primitive):
        d = f.arity
        if f.name == "max":
            return build_max_network(d)
        if f.name == "min":
            # min(x) = -max(-x)
            g = build_max_network(d)
            if not g.hidden:
                return g
            hidden = [(-g.hidden[0][0], g.hidden[0][1])] + g.hidden[1:]
            return FeedForwardNet(hidden, -g.out_w, -g.out_b)
        if f.name == "mean":
            return FeedForwardNet([], np.full(d, 1.0 / d), 0.0)
        if f.name == "affine_clamped":
            w = np.asarray(f.params["w"], dtype=float).reshape(d)
            b = float(f.params.get("b", 0.0))
            # clip(z, 0, 1) = relu(z) - relu(z - 1)
            return FeedForwardNet([(np.stack([w, w]), np.array([b, b - 1.0]))], np.array([1.0, -1.0]), 0.0)
    raise ConfigError(f"cannot express {f!r} as a ReLU network")


def pad_network(g: FeedForwardNet, depth: int, width: int) -> FeedForwardNet:
    """Same function with exactly ``depth`` hidden layers of width ``width``.

    Extra layers are identities on the (non-negative) last hidden layer;
    extra units carry zero weights.  An affine network first gets the hidden
    layer ``[relu(x), relu(-x)]``.
    """
    if depth < 1:
        raise ConfigError("embedding needs at least one hidden layer")
    hidden = [(W.copy(), b.copy()) for W, b in g.hidden]
    out_w = g.out_w.copy()
    if not hidden:
        d = g.input_dim
        hidden = [(np.vstack([np.eye(d), -np.eye(d)]), np.zeros(2 * d))]
        out_w = np.concatenate([out_w, -out_w])
    if len(hidden) > depth:
        raise ConfigError(f"network has {len(hidden)} hidden layers, budget is {depth}")
    while len(hidden) < depth:
        r = hidden[-1][0].shape[0]
        hidden.append((np.eye(r), np.zeros(r)))
    if max(W.shape[0] for W, _ in hidden) > width:
        raise ConfigError(f"network width {max(W.shape[0] for W, _ in hidden)} exceeds {width}")
    padded = []
    prev = g.input_dim
    for W, b in hidden:
        Wp = np.zeros((width, prev))
        Wp[: W.shape[0], : W.shape[1]] = W
        bp = np.zeros(width)
        bp[: len(b)] = b
        padded.append((Wp, bp))
        prev = width
    ow = np.zeros(width)
    ow[: len(out_w)] = out_w
    return FeedForwardNet(padded, ow, g.out_b)


# --------------------------------------------------------------------------
# embedding a feedforward network into convolutional layers


def empty_convnet(k: list[int], M: list[int], B: int = 0) -> ConvNet:
    layers = []
    k_prev = 1
    for kr, Mr in zip(k, M):
        layers.append(ConvLayer(np.zeros((Mr, Mr, k_prev, kr)), np.zeros(kr)))
        k_prev = kr
    return ConvNet(layers, np.zeros(k_prev), B)


def _tap_index(M: int, offset: int) -> int:
    idx = math.ceil(M / 2) - 1 + offset
    if not 0 <= idx < M:
        raise ConfigError(f"tap offset {offset} beyond reach of a size-{M} filter")
    return idx


def set_copy(net: ConvNet, r: int, dst: int, src: int) -> None:
    """Layer r passes channel src of layer r-1 to channel dst (identity tap)."""
    layer = net.layers[r - 1]
    c = math.ceil(layer.M / 2) - 1
    layer.weight[:, :, :, dst] = 0.0
    layer.weight[c, c, src, dst] = 1.0
    layer.bias[dst] = 0.0


def embed_ffn(
    net: ConvNet,
    r0: int,
    g: FeedForwardNet,
    taps: list[tuple[int, int, int]],
    target: int,
    scratch: int,
) -> ConvNet:
    """Unroll ``relu(g)`` into layers r0+1 .. r0+depth(g)+1 of ``net`` (in place).

    ``taps[n] = (di, dj, channel)`` feeds input n of ``g`` with
    ``o^(r0)`` at offset (di, dj) of the given channel; out-of-range
    positions read zero.  Hidden units live in channels ``scratch ..
    scratch + width - 1``; the result lands in channel ``target`` of layer
    r0+depth+1.  Only those output channels of those layers are rewritten.
    """
    if g.depth < 1:
        raise ConfigError("embedding needs a network with at least one hidden layer")
    if len(taps) != g.input_dim:
        raise ConfigError(f"{len(taps)} taps for a network with {g.input_dim} inputs")
    L_net = g.depth
    if r0 + L_net + 1 > net.L:
        raise ConfigError(f"layers {r0 + 1}..{r0 + L_net + 1} exceed the {net.L}-layer network")
    width = g.width
    lanes = list(range(scratch, scratch + width))
    for r in range(r0 + 1, r0 + L_net + 2):
        layer = net.layers[r - 1]
        if lanes[-1] >= layer.k_out or target >= layer.k_out:
            raise ConfigError(f"layer {r} has only {layer.k_out} channels")
        layer.weight[:, :, :, lanes] = 0.0
        layer.bias[lanes] = 0.0
        layer.weight[:, :, :, target] = 0.0
        layer.bias[target] = 0.0

    first = net.layers[r0]
    W0, b0 = g.hidden[0]
    for n, (di, dj, ch) in enumerate(taps):
        if ch >= first.k_in:
            raise ConfigError(f"tap channel {ch} not present in layer {r0}")
        ti, tj = _tap_index(first.M, di), _tap_index(first.M, dj)
        first.weight[ti, tj, ch, lanes[: W0.shape[0]]] += W0[:, n]
    first.bias[lanes[: W0.shape[0]]] = b0

    for h in range(1, L_net):
        layer = net.layers[r0 + h]
        W, b = g.hidden[h]
        c = math.ceil(layer.M / 2) - 1
        for i in range(W.shape[0]):
            layer.weight[c, c, lanes[: W.shape[1]], lanes[i]] = W[i]
            layer.bias[lanes[i]] = b[i]

    last = net.layers[r0 + L_net]
    c = math.ceil(last.M / 2) - 1
    last.weight[c, c, lanes[: len(g.out_w)], target] = g.out_w
    last.bias[target] = g.out_b
    return net


# --------------------------------------------------------------------------
# full compilation


@dataclass
class BranchLayout:
    """Bookkeeping of a compiled branch, for inspection and tests.

    ``copies`` lists ``(r, dst, src)``: o^(r)[dst] == o^(r-1)[src].
    ``results`` maps (k, s) to the layer after which channel s holds the
    level-k value f_{k,s} (0-based s), kept until the end of block k.
    ``block_end[k]`` is r(k).
    """

    copies: list[tuple[int, int, int]] = field(default_factory=list)
    results: dict[tuple[int, int], int] = field(default_factory=dict)
    block_end: list[int] = field(default_factory=list)


@dataclass
class CompilationReport:
    samples: int
    max_abs_deviation: float
    layers_used: int
    layers_expected: int
    max_channels: int
    channel_budget: int

    @property
    def ok(self) -> bool:
        return self.max_abs_deviation <= 1e-9 and self.layers_used == self.layers_expected and (
            self.max_channels <= self.channel_budget
        )


def _embedded_width(g: FeedForwardNet) -> int:
    return 2 * g.input_dim if g.depth == 0 else g.width


def default_schedule(spec: HmaxSpec) -> NetSchedule:
    """Smallest schedule that fits every combining network of the model."""
    nets = [as_network(f) for br in spec.g_funcs for fs in br for f in fs]
    depth = max(1, max(g.depth for g in nets))
    width = max(_embedded_width(g) for g in nets)
    return schedule_for(spec.level, depth, spec.order, 5 * 4 ** (spec.level - 1) + width)


def check_schedule(spec: HmaxSpec, schedule: NetSchedule) -> None:
    l, Ln = spec.level, schedule.depth_unit
    problems = []
    if schedule.level != l:
        problems.append(f"schedule level {schedule.level} != spec level {l}")
    L = (4 ** (l + 1) - 1) // 3 * (Ln + 1)
    if schedule.L != L:
        problems.append(f"L = {schedule.L} != (4^(l+1)-1)/3 * (L_n+1) = {L}")
    B = 2 ** (l - 1) + l - 1
    if schedule.B != B:
        problems.append(f"B = {schedule.B} != 2^(l-1)+l-1 = {B}")
    if len(schedule.M) != schedule.L or len(schedule.k) != schedule.L:
        problems.append("filter-size / channel lists do not have L entries")
    else:
        for k, rng in enumerate(schedule.block_ranges()):
            want = (2 ** (k - 1) if k > 1 else 0) + 3
            bad = [r for r in rng if schedule.M[r - 1] != want]
            if bad:
                problems.append(f"M_r != {want} in block {k} (layers {bad[0]}..)")
    if schedule.t != spec.order:
        problems.append(f"t = {schedule.t} != order {spec.order}")
    if problems:
        raise ConfigError("schedule does not fit the model: " + "; ".join(problems))


def compile_branch(spec: HmaxSpec, branch: int, schedule: NetSchedule) -> tuple[ConvNet, BranchLayout]:
    """One CNN branch whose interior output equals the branch's hierarchical value."""
    l = spec.level
    Ln = schedule.depth_unit
    stride = Ln + 1
    base = 5 * 4 ** (l - 1)
    width = min(schedule.k) - base
    if width < 1:
        raise ConfigError(f"k_r = {min(schedule.k)} leaves no scratch lanes beyond {base}")
    nets = [[pad_network(as_network(f), Ln, width) for f in fs] for fs in spec.g_funcs[branch]]
    offs = spec.offsets[branch]

    net = empty_convnet(list(schedule.k), list(schedule.M), schedule.B)
    layout = BranchLayout()
    block_end = [r.stop - 1 for r in schedule.block_ranges()]
    layout.block_end = block_end

    def copy(r, dst, src):
        set_copy(net, r, dst, src)
        layout.copies.append((r, dst, src))

    # block 0: leaf values from single pixels
    store = 4 ** l
    for r in range(1, block_end[0] + 1):
        copy(r, store, 0 if r == 1 else store)
    for s in range(4 ** l):
        r0 = s * stride
        src = 0 if s == 0 else store
        embed_ffn(net, r0, nets[0][s], [(0, 0, src)], s, base)
        done = r0 + stride
        layout.results[(0, s)] = done
        for r in range(done + 1, block_end[0] + 1):
            copy(r, s, s)

    # blocks 1..l: combine four children read at their grid offsets
    for k in range(1, l + 1):
        start = block_end[k - 1]
        n_out = 4 ** (l - k)
        reach = offset_bound(k - 1)
        M = schedule.M[start]
        if math.ceil(M / 2) - 1 < reach or M - math.ceil(M / 2) < reach:
            raise ConfigError(f"filter size {M} in block {k} cannot reach offsets of +-{reach}")
        for c in range(4 * n_out):
            for r in range(start + 1, block_end[k] + 1):
                copy(r, n_out + c, c if r == start + 1 else n_out + c)
        for s in range(n_out):
            r0 = start + s * stride
            taps = []
            for j in range(4):
                c = 4 * s + j
                di, dj = offs[k - 1][c]
                taps.append((int(di), int(dj), c if s == 0 else n_out + c))
            embed_ffn(net, r0, nets[k][s], taps, s, base)
            done = r0 + stride
            layout.results[(k, s)] = done
            for r in range(done + 1, block_end[k] + 1):
                copy(r, s, s)

    net.w_out[:] = 0.0
    net.w_out[0] = 1.0
    return net, layout


def compile_hmax(spec: HmaxSpec, schedule: NetSchedule | None = None, family: str = "F1") -> Architecture:
    """CNN architecture equal to ``eval_discretized(spec, .)`` on every image in [0,1]^(lam x lam).

    ``family="F1"`` combines the branches with the exact max network,
    ``"F2"`` with a plain maximum.
    """
    if schedule is None:
        schedule = default_schedule(spec)
    check_schedule(spec, schedule)
    if family not in ("F1", "F2"):
        raise ConfigError("compiled architectures are F1 or F2")
    branches = [compile_branch(spec, i, schedule)[0] for i in range(spec.order)]
    head = build_max_network(spec.order) if family == "F1" else None
    return Architecture(family, spec.lam, branches, spec.order, head)


def verify_compilation(spec: HmaxSpec, arch: Architecture, n_samples: int, seed: int = 0,
                       schedule: NetSchedule | None = None, batch: int = 50) -> CompilationReport:
    """Max |CNN - model| over uniformly random images, plus budget usage."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if schedule is None:
        schedule = default_schedule(spec)
    rng = np.random.default_rng(seed)
    dev = 0.0
    done = 0
    while done < n_samples:
        m = min(batch, n_samples - done)
        x = rng.uniform(0.0, 1.0, size=(m, spec.lam, spec.lam))
        diff = np.abs(architecture_forward(arch, x) - eval_discretized(spec, x))
        dev = max(dev, float(np.max(diff)))
        done += m
    return CompilationReport(
        samples=n_samples,
        max_abs_deviation=dev,
        layers_used=max(b.L for b in arch.branches),
        layers_expected=schedule.L,
        max_channels=max(max(b.channels) for b in arch.branches),
        channel_budget=max(schedule.k),
    )
