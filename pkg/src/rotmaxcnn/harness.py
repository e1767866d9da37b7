"""Experimental protocol: split, grid search on a validation set, replicates, median/IQR."""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from rotmaxcnn.cnn import FAMILIES, Architecture, ConfigError, architecture_forward, plug_in_classify
from rotmaxcnn.synth import Dataset, generate_dataset, load_dataset
from rotmaxcnn.training import TrainConfig, TrainingError, fit, init_architecture

DEFAULT_T_GRID = {"F1": (4, 8), "F2": (4, 8), "F3": (1, 2), "F4": (8,)}
RESULT_COLUMNS = ["family", "replicate", "chosen_l", "chosen_k", "chosen_Ln", "chosen_t",
                  "val_risk", "test_risk", "wall_ms"]
AUDIT_COLUMNS = ["family", "replicate", "combo", "l", "k", "Ln", "t", "val_risk", "status"]
IQR_NOTE = "# iqr = q75 - q25, quartiles by linear interpolation between order statistics (type 7)"


class ExperimentError(RuntimeError):
    """Every grid combination failed to train."""


@dataclass
class ExperimentConfig:
    family: str
    n: int = 200
    lam: int = 32
    N: int = 10_000
    repetitions: int = 20
    seed: int = 0
    l_grid: tuple = (2, 3)
    k_grid: tuple = (2, 4)
    Ln_grid: tuple = (1, 2)
    t_grid: tuple | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    bound_rule: str = "experiment"  # "experiment": 2^(l-1)-(l-1); "theorem": 2^(l-1)+l-1
    data: str = "synthetic"  # or the path of a dataset container
    test_data: str | None = None
    ss: int = 8
    record_wall_time: bool = True
    invert_inputs: bool | None = None  # feed 1 - x; defaults to True for synthetic data

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.t_grid is None:
            self.t_grid = DEFAULT_T_GRID[self.family]
        if not all([self.l_grid, self.k_grid, self.Ln_grid, self.t_grid]):
            raise ConfigError("parameter grids must be non-empty")
        if self.n < 5:
            raise ConfigError("n must be at least 5")
        if self.repetitions < 1 or self.N < 1:
            raise ConfigError("need at least one replicate and one test image")
        if self.bound_rule not in ("experiment", "theorem"):
            raise ConfigError(f"unknown bound rule {self.bound_rule!r}")
        if self.data != "synthetic" and self.test_data is None:
            raise ConfigError("a data file needs a matching --test-data file")
        if self.invert_inputs is None:
            # The synthetic background is 1 while zero padding reads 0; inverting
            # makes padding look like background instead of a dark frame.
            self.invert_inputs = self.data == "synthetic"

    def combos(self) -> list[tuple[int, int, int, int]]:
        """(l, k, L_n, t) tuples in lexicographic order."""
        return sorted(itertools.product(self.l_grid, self.k_grid, self.Ln_grid, self.t_grid))


@dataclass
class RunResult:
    family: str
    replicate: int
    l: int
    k: int
    Ln: int
    t: int
    val_risk: float
    test_risk: float
    wall_ms: float


@dataclass
class Selection:
    arch: Architecture
    combo: tuple[int, int, int, int]
    val_risk: float
    table: list[dict]


def split(n: int) -> tuple[int, int]:
    if n < 5:
        raise ConfigError("n must be at least 5")
    n_l = (4 * n) // 5
    return n_l, n - n_l


def output_bound(l: int, rule: str = "experiment") -> int:
    if rule == "theorem":
        return 2 ** (l - 1) + l - 1
    return 2 ** (l - 1) - (l - 1)


def filter_sizes(l: int, Ln: int) -> list[int]:
    """Blocks of L_n layers; block r = 1..l uses 1{r>2} 2^(r-2) + 3."""
    return [(2 ** (r - 2) if r > 2 else 0) + 3 for r in range(1, l + 1) for _ in range(Ln)]


def experiment_architecture(family: str, lam: int, l: int, k: int, Ln: int, t: int, rng,
                            bound_rule: str = "experiment", train: TrainConfig | None = None) -> Architecture:
    M = filter_sizes(l, Ln)
    head_depth = math.ceil(math.log2(t)) if t > 1 else 0
    return init_architecture(family, lam, t, [k] * len(M), M, output_bound(l, bound_rule), rng,
                             head_depth=head_depth, head_width=3 * t, bias_init=train.bias_init if train else 0.0,
                             scheme=train.init if train else "glorot_uniform")


def network_inputs(images, invert: bool) -> np.ndarray:
    X = np.asarray(images, dtype=float)
    return 1.0 - X if invert else X


def predict(arch: Architecture, X: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = [plug_in_classify(architecture_forward(arch, X[i : i + chunk])) for i in range(0, len(X), chunk)]
    return np.concatenate(out)


def empirical_risk(classifier: Callable[[np.ndarray], np.ndarray], X, y) -> float:
    """Fraction of misclassified items."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty test set")
    return float(np.mean(np.asarray(classifier(X)) != y))


def _combo_seeds(master: int, replicate: int, combo: int) -> tuple[int, int]:
    init_seed, shuffle_seed = np.random.SeedSequence([master, replicate, combo]).generate_state(2)
    return int(init_seed), int(shuffle_seed)


def _train_combo(config: ExperimentConfig, replicate: int, ci: int, combo, X, y) -> Architecture:
    l, k, Ln, t = combo
    init_seed, shuffle_seed = _combo_seeds(config.seed, replicate, ci)
    arch = experiment_architecture(config.family, config.lam, l, k, Ln, t,
                                   np.random.default_rng(init_seed), config.bound_rule, config.train)
    tc = TrainConfig(**{**config.train.__dict__, "seed": shuffle_seed})
    return fit(arch, X, y, tc)


def model_select(X, y, config: ExperimentConfig, replicate: int = 0) -> Selection:
    """Train every combination on the learning split, keep the best on validation, refit on all.

    ``X`` are network inputs (already passed through :func:`network_inputs`).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n_l, _ = split(len(X))
    best = None
    table = []
    for ci, combo in enumerate(config.combos()):
        row = {"family": config.family, "replicate": replicate, "combo": ci,
               "l": combo[0], "k": combo[1], "Ln": combo[2], "t": combo[3]}
        try:
            arch = _train_combo(config, replicate, ci, combo, X[:n_l], y[:n_l])
        except TrainingError as exc:
            table.append({**row, "val_risk": "", "status": f"failed: {exc}"})
            continue
        risk = empirical_risk(lambda Z: predict(arch, Z), X[n_l:], y[n_l:])
        table.append({**row, "val_risk": risk, "status": "ok"})
        if best is None or risk < best[2]:
            best = (ci, combo, risk)
    if best is None:
        raise ExperimentError(f"all {len(table)} combinations failed for {config.family}")
    ci, combo, risk = best
    arch = _train_combo(config, replicate, ci, combo, X, y)
    return Selection(arch, combo, risk, table)


def _balanced_sample(ds: Dataset, n: int, rng) -> Dataset:
    """n/2 random items per class, shuffled together."""
    per = n // 2
    idx = []
    for c, m in ((0, per), (1, n - per)):
        pool = np.flatnonzero(ds.labels == c)
        if len(pool) < m:
            raise ConfigError(f"class {c} has only {len(pool)} items, {m} requested")
        idx.append(rng.choice(pool, size=m, replace=False))
    idx = rng.permutation(np.concatenate(idx))
    return ds.subset(idx)


def replicate_data(config: ExperimentConfig, replicate: int) -> tuple[Dataset, Dataset]:
    """Training and test data of one replicate; identical for every family."""
    return _replicate_data(config.data, config.test_data, config.seed, replicate, config.n, config.N,
                           config.lam, config.ss)


@lru_cache(maxsize=8)
def _replicate_data(data, test_data, seed, replicate, n, N, lam, ss) -> tuple[Dataset, Dataset]:
    train_seed, test_seed = (int(s) for s in np.random.SeedSequence([seed, replicate]).generate_state(2))
    if data == "synthetic":
        return generate_dataset(n, lam, train_seed, ss=ss), generate_dataset(N, lam, test_seed, ss=ss)
    pool, test = load_dataset(data), load_dataset(test_data)
    if pool.lam != lam or test.lam != lam:
        raise ConfigError(f"data resolution {pool.lam}/{test.lam} does not match lambda={lam}")
    train = _balanced_sample(pool, n, np.random.default_rng(train_seed))
    if len(test) > N:
        test = test.subset(np.sort(np.random.default_rng(test_seed).choice(len(test), N, replace=False)))
    return train, test


def median_iqr(values) -> tuple[float, float]:
    q25, q50, q75 = np.percentile(np.asarray(values, dtype=float), [25, 50, 75])
    return float(q50), float(q75 - q25)


def run_experiment(config: ExperimentConfig, out=None, summary=None, audit=None,
                   log: Callable[[str], None] | None = None) -> tuple[list[RunResult], list[dict]]:
    """All replicates for one family; optionally write results, summary and audit CSVs."""
    results, table = [], []
    for r in range(config.repetitions):
        start = time.perf_counter()
        train, test = replicate_data(config, r)
        inv = config.invert_inputs
        sel = model_select(network_inputs(train.images, inv), train.labels, config, replicate=r)
        test_risk = empirical_risk(lambda Z: predict(sel.arch, Z), network_inputs(test.images, inv), test.labels)
        ms = (time.perf_counter() - start) * 1000.0 if config.record_wall_time else 0.0
        results.append(RunResult(config.family, r, *sel.combo, sel.val_risk, test_risk, ms))
        table += sel.table
        if log:
            log(f"{config.family} replicate {r}: combo {sel.combo} val {sel.val_risk:.4f} test {test_risk:.4f}")
    if out is not None:
        write_results(results, out)
    if summary is not None:
        write_summary(results, summary)
    if audit is not None:
        write_rows(table, AUDIT_COLUMNS, audit)
    return results, table


def write_results(results: list[RunResult], path) -> None:
    rows = [{"family": r.family, "replicate": r.replicate, "chosen_l": r.l, "chosen_k": r.k,
             "chosen_Ln": r.Ln, "chosen_t": r.t, "val_risk": repr(r.val_risk),
             "test_risk": repr(r.test_risk), "wall_ms": f"{r.wall_ms:.0f}"} for r in results]
    write_rows(rows, RESULT_COLUMNS, path)


def write_summary(results: list[RunResult], path) -> None:
    families = sorted({r.family for r in results})
    with open(path, "w", newline="") as fh:
        fh.write(IQR_NOTE + "\n")
        w = csv.writer(fh)
        w.writerow(["family", "median", "iqr"])
        for fam in families:
            med, iqr = median_iqr([r.test_risk for r in results if r.family == fam])
            w.writerow([fam, repr(med), repr(iqr)])


def write_rows(rows: list[dict], columns: list[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
