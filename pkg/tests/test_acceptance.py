"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math

import numpy as np
import pytest

from rotmaxcnn.cnn import load_weights, save_weights
from rotmaxcnn.compiler import build_max_network, compile_hmax
from rotmaxcnn.grid import rot90
from rotmaxcnn.harness import ExperimentConfig, median_iqr, run_experiment
from rotmaxcnn.hmax import eval_discretized, theorem1_schedule
from rotmaxcnn.synth import (
    MAX_OVERLAP,
    dataset_bytes,
    generate_dataset,
    load_dataset,
    overlap_fraction,
    sample_scene,
    save_dataset,
)
from rotmaxcnn.training import TrainConfig, backward, init_architecture

from conftest import embedding_case, gradient_check, random_ffn, random_net_spec, random_small_arch

# Optimizer settings for the desk run; the reference settings are unreported.
DESK_TRAIN = TrainConfig(lr=1e-2, epochs=100, batch_size=32, init="glorot_uniform_positive_out")
DESK_FAMILIES = ("F1", "F2", "F3", "F4")


def test_compiler_exactness(criterion):
    rng = np.random.default_rng(1)
    worst, cases = 0.0, 0
    for level in (1, 2):
        for order in (1, 2):
            for lam in range(2**level + 2 * level - 1, 17):
                spec = random_net_spec(rng, level, order, lam)
                arch = compile_hmax(spec)
                x = rng.uniform(size=(100, lam, lam))
                worst = max(worst, float(np.max(np.abs(arch(x) - eval_discretized(spec, x)))))
                cases += 1
    criterion(1, "compiled CNN equals the discretized model", worst <= 1e-9,
              f"{cases} specs x 100 images, max deviation {worst:.2e}")


def test_max_network_exactness(criterion):
    rng = np.random.default_rng(2)
    failures = []
    for t in range(1, 17):
        net = build_max_network(t)
        # dyadic entries keep every (b - a) + a free of rounding
        V = rng.integers(-2**20, 2**20, size=(10_000, t)) / 2**12
        if not np.array_equal(net(V), V.max(axis=1)):
            failures.append(f"t={t} value")
        if net.depth != math.ceil(math.log2(t)) or net.width > 3 * t:
            failures.append(f"t={t} size {net.depth}/{net.width}")
    criterion(2, "max network is exact with depth ceil(log2 t) and width <= 3t", not failures,
              ", ".join(failures) or "t = 1..16, 10^4 vectors each")


def test_embedding(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(60):
        lam = int(rng.integers(3, 9))
        kin = int(rng.integers(1, 4))
        M = int(rng.integers(1, 6))
        g = random_ffn(rng, int(rng.integers(1, 5)), width=int(rng.integers(1, 4)), depth=int(rng.integers(1, 3)))
        scratch = int(rng.integers(1, 3))
        got, direct, _, _ = embedding_case(rng, lam, g, kin, M, scratch, int(rng.integers(0, scratch)))
        worst = max(worst, float(np.max(np.abs(got - direct))))
    criterion(3, "embedded network channel equals direct evaluation", worst <= 1e-12,
              f"60 random embeddings, max deviation {worst:.2e}")


def test_f3_rotation_invariance(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        lam = int(rng.integers(4, 13))
        arch = init_architecture("F3", lam, int(rng.integers(1, 3)), [2, 3], [3, 3], 1, rng)
        for p in arch.params():
            p += rng.normal(0.0, 0.3, p.shape)
        x = rng.uniform(size=(100, lam, lam))
        worst = max(worst, float(np.max(np.abs(arch(x) - arch(rot90(x))))))
    criterion(4, "F3 output is invariant under rot90", worst <= 1e-12,
              f"10 architectures x 100 images, max deviation {worst:.2e}")


def test_gradient_correctness(criterion):
    rng = np.random.default_rng(5)
    worst, checked, skipped = 0.0, 0, 0
    for _ in range(50):
        arch = random_small_arch(rng)
        X = rng.uniform(size=(3, arch.lam, arch.lam))
        y = rng.integers(0, 2, 3)
        _, grads = backward(arch, X, y)
        w, c, s = gradient_check(arch, X, y, grads)
        worst, checked, skipped = max(worst, w), checked + c, skipped + s
    criterion(5, "gradients match central differences", worst <= 1e-4 and checked > 0,
              f"{checked} parameters checked, {skipped} near ties skipped, worst rel. error {worst:.2e}")


def test_dataset_law(criterion):
    rng = np.random.default_rng(6)
    labels, bad = [], 0
    for _ in range(10_000):
        scene = sample_scene(rng)
        labels.append(scene.label)
        objs = scene.objects
        ok = all(o.inside_unit_square() for o in objs)
        ok &= all(overlap_fraction(objs[j], objs[i]) <= MAX_OVERLAP for i in range(3) for j in range(i))
        bad += not ok
    mean = float(np.mean(labels))
    criterion(6, "label mean near 1/2 and every scene valid", abs(mean - 0.5) <= 0.02 and bad == 0,
              f"label mean {mean:.4f}, {bad} invalid scenes")


@pytest.mark.slow
def test_desk_reproduction(criterion):
    medians = {}
    for family in DESK_FAMILIES:
        cfg = ExperimentConfig(family, n=200, lam=32, N=2000, repetitions=5, l_grid=(2,), k_grid=(2,),
                               Ln_grid=(1,), train=DESK_TRAIN, record_wall_time=False)
        results, _ = run_experiment(cfg, log=print)
        medians[family] = median_iqr([r.test_risk for r in results])
    m = {f: v[0] for f, v in medians.items()}
    ok = all(m[a] < m[b] for a in ("F3", "F4") for b in ("F1", "F2")) and m["F3"] <= 0.30
    detail = ", ".join(f"{f} {med:.4f} ({iqr:.4f})" for f, (med, iqr) in medians.items())
    criterion(7, "F3 and F4 beat F1 and F2 at desk scale, F3 median <= 0.30", ok, detail)


def test_schedule_arithmetic(criterion):
    s = theorem1_schedule(2, 2, 1.05, 1e-9)
    ok = (s.t, s.B, s.L) == (178, 3, 42) and s.depth_unit == 1
    criterion(8, "schedule for l=2, c=1.05, L_n=1", ok, f"t={s.t}, B={s.B}, L={s.L}")


def test_serialization(criterion, tmp_path):
    rng = np.random.default_rng(9)
    ok = True
    for family in ("F1", "F2", "F3", "F4"):
        arch = init_architecture(family, 9, 3, [2, 3], [3, 5], 1, rng)
        for p in arch.params():
            p += rng.normal(size=p.shape)
        save_weights(arch, tmp_path / f"{family}.json")
        back = load_weights(tmp_path / f"{family}.json")
        ok &= all(np.array_equal(p, q) and p.dtype == q.dtype for p, q in zip(arch.params(), back.params()))
        x = rng.uniform(size=(5, 9, 9))
        ok &= np.array_equal(arch(x), back(x))
    ds = generate_dataset(20, 16, seed=3, ss=2)
    save_dataset(ds, tmp_path / "d.rsd")
    back = load_dataset(tmp_path / "d.rsd")
    ok &= dataset_bytes(back) == dataset_bytes(ds) == (tmp_path / "d.rsd").read_bytes()
    ok &= np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    criterion(9, "weights and datasets round-trip bit-exactly", bool(ok), "four families and one dataset")
