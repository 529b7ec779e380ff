"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Both backends are imported directly, so the environment switch is not needed.
"""

import argparse
import time

import numpy as np

from cornermark import _kernels_py

try:
    from cornermark import _kernels
except ImportError:
    _kernels = None


def random_hmm(rng, T, N):
    log_pi = np.log(rng.dirichlet(np.ones(N)))
    log_A = np.log(rng.dirichlet(np.ones(N), size=(T - 1, N)))
    log_B = rng.normal(-3.0, 2.0, (T, N))
    return log_pi, log_A, log_B


def best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    # One defender of a full-size corner: K=10 attackers, 75 frames.
    hmm = random_hmm(rng, 75, 11)
    X = rng.normal(size=(200_000, 8))
    a = rng.uniform(0, 5, len(X))
    b = a + rng.uniform(0, 5, len(X))
    beta = rng.normal(size=8)
    cases = {
        "forward_backward T=75 N=11": lambda m: m.forward_backward(*hmm),
        "viterbi T=75 N=11": lambda m: m.viterbi(*hmm),
        "logistic_q rows=200k d=8": lambda m: m.logistic_q(X, a, b, beta),
    }
    backends = [("python", _kernels_py)] + ([("compiled", _kernels)] if _kernels is not None else [])
    print(f"{'kernel':32s}" + "".join(f"{name:>12s}" for name, _ in backends) + "     speedup")
    for label, fn in cases.items():
        times = [best_of(lambda m=m: fn(m), args.repeats) for _, m in backends]
        row = f"{label:32s}" + "".join(f"{1e3 * t:10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:9.1f}x"
        print(row)
    if _kernels is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
