"""Train all four architecture families on rotated squares and print median (IQR) test risks.

Run: python3 demos/desk_experiment.py [--reps 5] [--N 2000] [--epochs 100] [--lr 1e-2]
The defaults match the desk-scale acceptance run and take about 25 minutes on one CPU.
"""

import argparse

from rotmaxcnn.harness import ExperimentConfig, median_iqr, run_experiment
from rotmaxcnn.training import TrainConfig


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--lambda", dest="lam", type=int, default=32)
    p.add_argument("--N", type=int, default=2000)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-2)
    args = p.parse_args()

    rows = []
    for family in ("F1", "F2", "F3", "F4"):
        cfg = ExperimentConfig(family, n=args.n, lam=args.lam, N=args.N, repetitions=args.reps,
                               l_grid=(2,), k_grid=(2,), Ln_grid=(1,),
                               train=TrainConfig(epochs=args.epochs, lr=args.lr, init="glorot_uniform_positive_out"))
        results, _ = run_experiment(cfg, log=lambda m: print(m, flush=True))
        rows.append((family, *median_iqr([r.test_risk for r in results])))
    print("\nfamily  median test risk  (IQR)")
    for family, med, iqr in rows:
        print(f"{family:6}  {med:.4f}           ({iqr:.4f})")


if __name__ == "__main__":
    main()
