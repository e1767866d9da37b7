"""Shared builders and oracles for the test suite."""

import math

import numpy as np
import pytest

from rotmaxcnn.cnn import ConvLayer, FeedForwardNet
from rotmaxcnn.compiler import embed_ffn, empty_convnet
from rotmaxcnn.hmax import HmaxSpec, NetFunc, branch_angles, lemma2_grid_points
from rotmaxcnn.training import activation_pattern, init_architecture, loss


def random_ffn(rng, d, width=3, depth=1):
    hidden = []
    prev = d
    for _ in range(depth):
        hidden.append((rng.normal(size=(width, prev)), rng.uniform(0.0, 1.0, width)))
        prev = width
    return FeedForwardNet(hidden, rng.normal(size=prev), float(rng.normal()))


def random_net_spec(rng, level, order, lam, width=3):
    """Model with rounded rotated-subpart offsets and random small networks at every node."""
    h = 2**level / (np.sqrt(2.0) * lam)
    offsets = [lemma2_grid_points(level, lam, a, h) for a in branch_angles(order)]
    g = []
    for _ in range(order):
        br = [[NetFunc(random_ffn(rng, 1, width)) for _ in range(4**level)]]
        br += [[NetFunc(random_ffn(rng, 4, width)) for _ in range(4 ** (level - k))] for k in range(1, level + 1)]
        g.append(br)
    return HmaxSpec(level, order, lam, offsets, g)


def random_small_arch(rng, family=None):
    """Random architecture with lam <= 8, t <= 2, L <= 2 and lively activations."""
    family = family or str(rng.choice(["F1", "F2", "F3", "F4"]))
    lam = int(rng.integers(4, 9))
    t = int(rng.integers(1, 3))
    L = int(rng.integers(1, 3))
    k = [int(rng.integers(1, 4)) for _ in range(L)]
    M = [int(rng.integers(1, 4)) for _ in range(L)]
    B = int(rng.integers(0, 2))
    arch = init_architecture(family, lam, t, k, M, B, rng, head_depth=int(rng.integers(0, 2)), head_width=3)
    for p in arch.params():
        p += rng.normal(0.0, 0.3, p.shape)
    return arch


def gradient_check(arch, X, y, grads, h=1e-5, rtol=1e-4, floor=1e-8):
    """Compare analytic gradients with central differences.

    Coordinates where a ReLU sign or a max choice changes within +-h are
    skipped: the loss is not differentiable there.  Returns
    (worst relative error, checked count, skipped count).
    """
    base = activation_pattern(arch, X)
    worst, checked, skipped = 0.0, 0, 0
    for p, g in zip(arch.params(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, pp = loss(arch, X, y), activation_pattern(arch, X)
            p[idx] = old - h
            lm, pm = loss(arch, X, y), activation_pattern(arch, X)
            p[idx] = old
            if pp != base or pm != base:
                skipped += 1
                continue
            fd = (lp - lm) / (2 * h)
            diff = abs(fd - g[idx])
            if diff > floor:
                worst = max(worst, diff / max(abs(fd), abs(g[idx])))
            checked += 1
    return worst, checked, skipped


def shifted(o, di, dj):
    """o[i+di, j+dj] with zeros outside the map."""
    n, lam = o.shape[0], o.shape[1]
    out = np.zeros_like(o)
    src = o[:, max(di, 0) : lam + min(di, 0), max(dj, 0) : lam + min(dj, 0)]
    out[:, max(-di, 0) : lam + min(-di, 0), max(-dj, 0) : lam + min(-dj, 0)] = src
    return out


def embedding_case(rng, lam, g, kin, M, scratch, target):
    """Random first layer 1 -> kin, then g embedded from r0 = 1 with random in-reach taps."""
    reach_lo, reach_hi = math.ceil(M / 2) - 1, M - math.ceil(M / 2)
    taps = [(int(rng.integers(-reach_lo, reach_hi + 1)), int(rng.integers(-reach_lo, reach_hi + 1)),
             int(rng.integers(0, kin))) for _ in range(g.input_dim)]
    k_out = scratch + g.width
    net = empty_convnet([kin] + [k_out] * (g.depth + 1), [3] + [M] * (g.depth + 1))
    net.layers[0] = ConvLayer(rng.normal(size=(3, 3, 1, kin)), rng.normal(0, 0.1, kin))
    embed_ffn(net, 1, g, taps, target, scratch)
    x = rng.uniform(size=(3, lam, lam))
    maps = net.feature_maps(x)
    V = np.stack([shifted(maps[1][..., ch], di, dj) for di, dj, ch in taps], axis=-1)
    direct = np.maximum(g(V.reshape(-1, g.input_dim)), 0.0).reshape(V.shape[:3])
    return maps[-1][..., target], direct, maps, taps


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
