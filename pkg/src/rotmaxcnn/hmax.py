"""Hierarchical max-pooling models.

Discretized models are evaluated exactly.  The continuous, rotationally
symmetric model is evaluated approximately on a finite candidate set of
centres and angles.  This module also builds grid offsets from a rotated
subdivision, computes the network size schedule, and reads and writes spec
files.

Offsets are stored as integer pixel steps: the offset ``(a, b)`` means
``(a/lam, b/lam)`` in grid coordinates, i.e. ``a`` rows and ``b`` columns.
Children of a node are ordered (-,-), (+,-), (-,+), (+,+) in (row, column)
sign.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from rotmaxcnn.cnn import ConfigError, FeedForwardNet, ffn_forward, relu
from rotmaxcnn.grid import rotation_matrix

SPEC_FORMAT = "rotmaxcnn.hmax-spec"
SPEC_VERSION = 1

# corner directions h^(1..4) in (row, column) sign
CHILD_SIGNS = np.array([[-1, -1], [1, -1], [-1, 1], [1, 1]])


class DomainError(ValueError):
    """A patch or offset that does not fit the index set it must live in."""


def index_halfwidth(k: int) -> int:
    """Half side of I^(k) in pixel steps: ceil(2^(k-1)) + k - 1."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return 0
    return 2 ** (k - 1) + k - 1


def offset_bound(k: int) -> int:
    """Largest admissible |offset component| for children at level k."""
    return (2 ** (k - 1) if k >= 1 else 0) + 1


def eval_index_set(k: int, lam: int | None = None) -> np.ndarray:
    """Points of I^(k) in row-major order.

    Returns integer steps of shape (m, 2), or grid coordinates if ``lam`` is
    given.
    """
    h = index_halfwidth(k)
    r = np.arange(-h, h + 1)
    a, b = np.meshgrid(r, r, indexing="ij")
    pts = np.stack([a.ravel(), b.ravel()], axis=1)
    return pts if lam is None else pts / lam


def min_resolution(level: int) -> int:
    return 2 ** level + 2 * level - 1


# --------------------------------------------------------------------------
# combining functions


class GFunc:
    """A non-negative combining function with a fixed arity.

    Called on an array ``(..., arity)`` and returns ``(...)``.
    """

    arity: int

    def __call__(self, args: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def to_dict(self) -> dict:  # pragma: no cover - interface
        raise NotImplementedError


def _affine_clamp(a, w, b):
    return np.clip(a @ np.asarray(w, dtype=float) + b, 0.0, 1.0)


_PRIMITIVES: dict[str, Callable] = {
    "max": lambda a: a.max(axis=-1),
    "min": lambda a: a.min(axis=-1),
    "mean": lambda a: a.mean(axis=-1),
    "product_clamped": lambda a: np.clip(np.prod(a, axis=-1), 0.0, 1.0),
    "affine_clamped": lambda a, w, b=0.0: _affine_clamp(a, w, b),
}


@dataclass
class Primitive(GFunc):
    """Built-in combining function selected by name.

    ``max``/``min``/``mean`` of the arguments, ``product_clamped`` (product
    clipped to [0, 1]) and ``affine_clamped`` (``w . a + b`` clipped to
    [0, 1], parameters ``w`` and ``b``).
    """

    name: str
    arity: int = 4
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in _PRIMITIVES:
            raise ConfigError(f"unknown primitive {self.name!r}")

    def __call__(self, args):
        args = np.asarray(args, dtype=float)
        return _PRIMITIVES[self.name](args, **self.params)

    def to_dict(self) -> dict:
        return {"kind": "primitive", "name": self.name, "arity": self.arity, "params": self.params}


@dataclass
class NetFunc(GFunc):
    """``relu(g(args))`` for a feedforward network ``g``."""

    net: FeedForwardNet

    @property
    def arity(self) -> int:
        return self.net.input_dim

    def __call__(self, args):
        args = np.asarray(args, dtype=float)
        flat = args.reshape(-1, self.arity)
        return relu(ffn_forward(self.net, flat)).reshape(args.shape[:-1])

    def to_dict(self) -> dict:
        return {"kind": "ffn", "net": self.net.to_dict()}


def gfunc_from_dict(d: dict) -> GFunc:
    if d["kind"] == "primitive":
        return Primitive(d["name"], d.get("arity", 4), d.get("params", {}))
    if d["kind"] == "ffn":
        return NetFunc(FeedForwardNet.from_dict(d["net"]))
    raise ConfigError(f"unknown function kind {d['kind']!r}")


# --------------------------------------------------------------------------
# discretized model


@dataclass
class HmaxSpec:
    """Discretized hierarchical max-pooling model of level ``level`` and order ``order``.

    ``offsets[i][k]`` is an int array (4^(l-k), 2) with the child offsets
    i_{k,s} of branch i, k = 0..l-1.  ``g_funcs[i][k]`` is the list of the
    4^(l-k) functions of branch i at level k = 0..l (arity 1 at k = 0, 4
    above).
    """

    level: int
    order: int
    lam: int
    offsets: list[list[np.ndarray]]
    g_funcs: list[list[list[GFunc]]]

    def __post_init__(self):
        l, d = self.level, self.order
        if l < 1 or d < 1:
            raise ConfigError("level and order must be positive")
        if self.lam < min_resolution(l):
            raise ConfigError(f"resolution {self.lam} below 2^l + 2l - 1 = {min_resolution(l)}")
        if len(self.offsets) != d or len(self.g_funcs) != d:
            raise ConfigError(f"expected {d} branches of offsets and functions")
        self.offsets = [[np.asarray(o, dtype=int).reshape(-1, 2) for o in br] for br in self.offsets]
        for i, br in enumerate(self.offsets):
            if len(br) != l:
                raise ConfigError(f"branch {i}: need offsets for k = 0..{l - 1}")
            for k, o in enumerate(br):
                if len(o) != 4 ** (l - k):
                    raise ConfigError(f"branch {i}, k={k}: need {4 ** (l - k)} offsets, got {len(o)}")
                if np.abs(o).max(initial=0) > offset_bound(k):
                    raise ConfigError(f"branch {i}, k={k}: offset beyond +-{offset_bound(k)}/lam")
        for i, br in enumerate(self.g_funcs):
            if len(br) != l + 1:
                raise ConfigError(f"branch {i}: need functions for k = 0..{l}")
            for k, fs in enumerate(br):
                if len(fs) != 4 ** (l - k):
                    raise ConfigError(f"branch {i}, k={k}: need {4 ** (l - k)} functions")
                for f in fs:
                    if f.arity != (1 if k == 0 else 4):
                        raise ConfigError(f"branch {i}, k={k}: function arity {f.arity}")

    @property
    def halfwidth(self) -> int:
        return index_halfwidth(self.level)

    def to_dict(self) -> dict:
        return {
            "format": SPEC_FORMAT,
            "version": SPEC_VERSION,
            "level": self.level,
            "order": self.order,
            "lambda": self.lam,
            "offsets": [[o.tolist() for o in br] for br in self.offsets],
            "g_funcs": [[[f.to_dict() for f in fs] for fs in br] for br in self.g_funcs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HmaxSpec":
        if d.get("format") != SPEC_FORMAT:
            raise ConfigError(f"not a model spec file (format={d.get('format')!r})")
        if d.get("version") != SPEC_VERSION:
            raise ConfigError(f"unsupported spec version {d.get('version')!r}")
        g = [[[gfunc_from_dict(f) for f in fs] for fs in br] for br in d["g_funcs"]]
        return cls(d["level"], d["order"], d["lambda"], d["offsets"], g)


def save_spec(spec: HmaxSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=1))


def load_spec(path) -> HmaxSpec:
    return HmaxSpec.from_dict(json.loads(Path(path).read_text()))


def eval_hierarchical(spec: HmaxSpec, branch: int, patch) -> float:
    """Value of the hierarchical function of one branch on a patch over I^(l).

    ``patch`` is a square array of side ``2*halfwidth + 1`` whose centre is
    the anchor.
    """
    patch = np.asarray(patch, dtype=float)
    H = spec.halfwidth
    if patch.shape != (2 * H + 1, 2 * H + 1):
        raise DomainError(f"patch must be {(2 * H + 1,) * 2}, got {patch.shape}")
    offs = spec.offsets[branch]
    gs = spec.g_funcs[branch]

    def node(k: int, s: int, centre: tuple[int, int]) -> float:
        # s is 0-based here
        if k == 0:
            a, b = centre
            if max(abs(a), abs(b)) > H:
                raise DomainError(f"read at {centre} escapes the patch")
            return float(gs[0][s](np.array([patch[H + a, H + b]])))
        args = []
        for j in range(4):
            c = 4 * s + j
            di, dj = offs[k - 1][c]
            args.append(node(k - 1, c, (centre[0] + int(di), centre[1] + int(dj))))
        return float(gs[k][s](np.array(args)))

    return node(spec.level, 0, (0, 0))


def _shift(a: np.ndarray, di: int, dj: int) -> np.ndarray:
    """out[..., p, q] = a[..., p+di, q+dj], NaN where out of range."""
    out = np.full(a.shape, np.nan)
    n1, n2 = a.shape[-2:]
    src_i = slice(max(di, 0), n1 + min(di, 0))
    dst_i = slice(max(-di, 0), n1 + min(-di, 0))
    src_j = slice(max(dj, 0), n2 + min(dj, 0))
    dst_j = slice(max(-dj, 0), n2 + min(-dj, 0))
    out[..., dst_i, dst_j] = a[..., src_i, src_j]
    return out


def branch_value_maps(spec: HmaxSpec, x) -> np.ndarray:
    """f_{l,1}^(i) at every anchor, shaped (n, order, lam, lam).

    Anchors whose window leaves the image hold NaN.  Built bottom-up by
    shifting whole maps, so every level is computed once per image.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.shape[-1] != spec.lam or x.shape[-2] != spec.lam:
        raise ConfigError(f"image resolution {x.shape[-2:]} does not match lambda={spec.lam}")
    out = []
    for i in range(spec.order):
        gs, offs = spec.g_funcs[i], spec.offsets[i]
        level = [gs[0][s](x[..., None]) for s in range(4 ** spec.level)]
        for k in range(1, spec.level + 1):
            nxt = []
            for s in range(4 ** (spec.level - k)):
                kids = []
                for j in range(4):
                    c = 4 * s + j
                    di, dj = offs[k - 1][c]
                    kids.append(_shift(level[c], int(di), int(dj)))
                stacked = np.stack(kids, axis=-1)
                val = gs[k][s](np.nan_to_num(stacked))
                val = np.where(np.isnan(stacked).any(axis=-1), np.nan, val)
                nxt.append(val)
            level = nxt
        out.append(level[0])
    return np.stack(out, axis=1)


def eval_discretized(spec: HmaxSpec, x) -> np.ndarray | float:
    """max over interior anchors u (u + I^(l) inside G_lam) and branches."""
    single = np.ndim(x) == 2
    maps = branch_value_maps(spec, x)
    H = spec.halfwidth
    lam = spec.lam
    inner = maps[..., H : lam - H, H : lam - H]
    val = inner.reshape(len(inner), -1).max(axis=1)
    return float(val[0]) if single else val


# --------------------------------------------------------------------------
# grid points from a rotated subdivision


def subdivision_centres(level: int, alpha: float, h: float) -> list[np.ndarray]:
    """Centres z_{k,s} of the recursively quartered square of width h rotated by alpha.

    Entry k is an array (4^(l-k), 2) in grid coordinates (row, column).
    """
    R = rotation_matrix(alpha)
    z = [None] * (level + 1)
    z[level] = np.zeros((1, 2))
    for k in range(level, 0, -1):
        hk2 = h / 2.0 ** (level - k + 2)
        steps = (CHILD_SIGNS * hk2) @ R.T  # rot(h^(j)_{k-2}), j = 1..4
        z[k - 1] = (z[k][:, None, :] + steps[None, :, :]).reshape(-1, 2)
    return z


def _nearest_in_index_set(points: np.ndarray, level: int, lam: int) -> np.ndarray:
    """Sup-norm nearest points of I^(level) (in steps), ties to the smaller row-major index."""
    cand = eval_index_set(level)
    d = np.abs(points[:, None, :] * lam - cand[None, :, :]).max(axis=-1)
    best = d.min(axis=1, keepdims=True)
    tied = d <= best + 1e-9
    return cand[np.argmax(tied, axis=1)]


def lemma2_grid_points(level: int, lam: int, alpha: float, h: float) -> list[np.ndarray]:
    """Integer child offsets i_{k,s} for one rotation angle.

    Subdivision centres are rounded to I^(l) in the sup norm and offsets are
    differences of rounded parent and child centres.  Requires
    ``h <= 2^l / (sqrt(2) * lam)``.
    """
    if not 0 < h <= 2 ** level / (math.sqrt(2.0) * lam) * (1 + 1e-12):
        raise ConfigError(f"width h={h} outside (0, 2^l/(sqrt(2) lam)]")
    z = subdivision_centres(level, alpha, h)
    zbar = [_nearest_in_index_set(zk, level, lam) for zk in z]
    offsets = []
    for k in range(level):
        parent = np.repeat(zbar[k + 1], 4, axis=0)
        offsets.append((zbar[k] - parent).astype(int))
    return offsets


def branch_angles(d: int) -> np.ndarray:
    """Centres of d equal arcs covering [0, 2 pi]."""
    return (np.arange(d) + 0.5) * 2.0 * np.pi / d


def order_for_scaling(level: int, c: float) -> int:
    """Number of angle branches ceil(2^(l-1/2) pi / (c-1))."""
    if c <= 1:
        raise ConfigError("scaling factor c must exceed 1")
    return math.ceil(2 ** (level - 0.5) * math.pi / (c - 1))


def rotated_spec(level: int, lam: int, h: float, g_funcs: list[list[GFunc]], d: int) -> HmaxSpec:
    """Discretized model with d branches sharing the functions, one per angle."""
    offsets = [lemma2_grid_points(level, lam, a, h) for a in branch_angles(d)]
    return HmaxSpec(level, d, lam, offsets, [g_funcs] * d)


# --------------------------------------------------------------------------
# continuous model (approximate)


@dataclass
class ContinuousModelSpec:
    """Rotationally symmetric hierarchical max-pooling model of level l, width h.

    ``g_funcs[k-1][s]`` combine four child values at level k = 1..l;
    ``base_funcs[s]`` map a gray value to the leaf value (the leaf function
    applied to a constant patch).
    """

    level: int
    h: float
    b: float
    g_funcs: list[list[Callable]]
    base_funcs: list[Callable]

    def __post_init__(self):
        if not 0 < self.h <= 1 / math.sqrt(2):
            raise ConfigError("width must lie in (0, 1/sqrt(2)]")
        if not self.h / math.sqrt(2) - 1e-12 <= self.b <= 0.5:
            raise ConfigError("border distance must satisfy h/sqrt(2) <= b <= 1/2")
        if len(self.base_funcs) != 4 ** self.level or len(self.g_funcs) != self.level:
            raise ConfigError("wrong number of functions for the level")

    @classmethod
    def for_resolution(cls, level: int, lam: int, g_funcs, base_funcs, h: float | None = None):
        """Width and border distance tied to a resolution as in the convergence result."""
        if h is None:
            h = 2 ** level / (math.sqrt(2.0) * lam)
        return cls(level, h, min_resolution(level) / (2.0 * lam), g_funcs, base_funcs)


def _uniform_grid(lo: float, hi: float, steps: int) -> np.ndarray:
    if steps == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, steps)


def eval_continuous_approx(
    spec: ContinuousModelSpec,
    phi: Callable[[np.ndarray], np.ndarray],
    v_steps: int,
    a_steps: int,
    angles: Sequence[float] | None = None,
) -> float:
    """Lower approximation of the sup over centres and angles.

    Centres run over a ``v_steps x v_steps`` uniform grid of
    ``[-(1/2-b), 1/2-b]^2`` (end points included), angles over
    ``2 pi m / a_steps``; ``angles`` overrides the angle set.  Leaf values are
    the base functions applied to ``phi`` at the leaf centres.  ``phi`` maps
    points (..., 2) to gray values (...).

    Grids with ``v_steps`` in {n, 2n-1, 4n-3, ...} and ``a_steps`` in
    {m, 2m, 4m, ...} are nested, so the value is nondecreasing along such
    refinements.
    """
    if v_steps < 1 or a_steps < 1:
        raise ValueError("v_steps and a_steps must be positive")
    r = 0.5 - spec.b
    c = _uniform_grid(-r, r, v_steps)
    vu, vv = np.meshgrid(c, c, indexing="ij")
    centres = np.stack([vu.ravel(), vv.ravel()], axis=1)
    if angles is None:
        angles = 2.0 * np.pi * np.arange(a_steps) / a_steps
    best = -np.inf
    for alpha in np.asarray(angles, dtype=float):
        leaves = subdivision_centres(spec.level, alpha, spec.h)[0]  # (4^l, 2)
        pts = centres[:, None, :] + leaves[None, :, :]
        gray = np.asarray(phi(pts), dtype=float)
        vals = [spec.base_funcs[s](gray[:, s]) for s in range(4 ** spec.level)]
        for k in range(1, spec.level + 1):
            vals = [
                spec.g_funcs[k - 1][s](np.stack(vals[4 * s : 4 * s + 4], axis=-1))
                for s in range(4 ** (spec.level - k))
            ]
        best = max(best, float(np.max(vals[0])))
    return best


def piecewise_constant(x: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Continuous image that is constant on each pixel square of ``x``."""
    x = np.asarray(x, dtype=float)
    lam = x.shape[0]

    def phi(pts):
        pts = np.asarray(pts, dtype=float)
        idx = np.clip(np.floor((pts + 0.5) * lam).astype(int), 0, lam - 1)
        return x[idx[..., 0], idx[..., 1]]

    return phi


# --------------------------------------------------------------------------
# network size schedule


@dataclass(frozen=True)
class NetSchedule:
    """Layer, channel and filter sizes for a level-l model.

    ``depth_unit`` is L_n (hidden layers of every combining network),
    ``t``/``L_net``/``r_net`` describe the max head over the branches and
    ``k``/``M`` list channels and filter sizes per layer.
    """

    level: int
    depth_unit: int
    L: int
    t: int
    B: int
    L_net: int
    r_net: int
    k: tuple[int, ...]
    M: tuple[int, ...]

    def block_ranges(self) -> list[range]:
        """Layer numbers (1-based) of block k = 0..l."""
        out, start = [], 0
        for k in range(self.level + 1):
            size = 4 ** (self.level - k) * (self.depth_unit + 1)
            out.append(range(start + 1, start + size + 1))
            start += size
        return out


def _schedule_layers(level: int, depth_unit: int) -> tuple[int, tuple[int, ...]]:
    L = (4 ** (level + 1) - 1) // 3 * (depth_unit + 1)
    M = []
    for k in range(level + 1):
        size = 4 ** (level - k) * (depth_unit + 1)
        M += [(2 ** (k - 1) if k > 1 else 0) + 3] * size
    return L, tuple(M)


def head_size(t: int) -> tuple[int, int]:
    """(L_net, r_net) = (ceil(log2 t), 3t) of the exact max network."""
    return (max(t - 1, 0)).bit_length(), 3 * t


def theorem1_schedule(level: int, n: int, c: float, c1: float, p: float = 1.0, c2: int = 0) -> NetSchedule:
    """Parameter schedule tied to sample size n, scaling factor c and smoothness p."""
    if n < 2 or level < 1:
        raise ConfigError("need n >= 2 and l >= 1")
    t = order_for_scaling(level, c)
    depth_unit = math.ceil(c1 * n ** (2.0 / (2.0 * p + 4.0)))
    return schedule_for(level, depth_unit, t, 5 * 4 ** (level - 1) + c2)


def schedule_for(level: int, depth_unit: int, t: int, channels: int) -> NetSchedule:
    L, M = _schedule_layers(level, depth_unit)
    L_net, r_net = head_size(t)
    B = 2 ** (level - 1) + level - 1
    return NetSchedule(level, depth_unit, L, t, B, L_net, r_net, (channels,) * L, M)
