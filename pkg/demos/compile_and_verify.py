"""Build a small rotated hierarchical model, compile it into a CNN and check the two agree.

Run: python3 demos/compile_and_verify.py
"""

import numpy as np

from rotmaxcnn.cnn import FeedForwardNet
from rotmaxcnn.compiler import compile_hmax, verify_compilation
from rotmaxcnn.hmax import NetFunc, eval_discretized, rotated_spec


def random_net(rng, d, width=4):
    return FeedForwardNet([(rng.normal(size=(width, d)), rng.uniform(0, 1, width))],
                          np.abs(rng.normal(size=width)), float(rng.normal(0, 0.1)))


def main():
    rng = np.random.default_rng(0)
    level, lam, order = 2, 12, 4
    h = 2**level / (np.sqrt(2.0) * lam)
    # one set of part functions, shared by every rotation angle
    g = [[NetFunc(random_net(rng, 1)) for _ in range(4**level)]]
    g += [[NetFunc(random_net(rng, 4)) for _ in range(4 ** (level - k))] for k in range(1, level + 1)]
    spec = rotated_spec(level, lam, h, g, order)

    arch = compile_hmax(spec)
    print(f"compiled {len(arch.branches)} branches, {arch.branches[0].L} conv layers each, "
          f"max {max(arch.branches[0].channels)} channels")
    report = verify_compilation(spec, arch, 200, seed=1)
    print(f"max |CNN - model| over 200 random images: {report.max_abs_deviation:.2e} (ok={report.ok})")

    x = rng.uniform(size=(3, lam, lam))
    for cnn, model in zip(arch(x), eval_discretized(spec, x)):
        print(f"  CNN {cnn: .12f}   model {model: .12f}")


if __name__ == "__main__":
    main()
