"""Compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on the same inputs under both backends; outputs must agree
bit for bit, and the best-of-N wall time of each is reported.
"""
import argparse
import timeit

import numpy as np

from cdr import _core_py

try:
    from cdr import _core
except ImportError:
    _core = None


def cases(rng):
    n_trials, n_pairs = 10_000, 900
    e = rng.uniform(0, 2, n_pairs)
    e_hat = e * np.exp(rng.normal(0, 0.8, n_pairs))
    p_hat = rng.uniform(0.05, 1, n_pairs)
    gamma = (rng.random(n_pairs) < 0.5).astype(np.float64)
    obs = (rng.random((n_trials, n_pairs)) < p_hat).astype(np.uint8)
    wide = rng.normal(size=1_000_000)
    rows = rng.normal(size=(2_000, 500))
    scores = np.sort(np.round(rng.normal(size=200_000), 3))
    labels = (rng.random(scores.size) < 0.3).astype(np.float64)
    return {
        "compensated_sum (1e6)": ("compensated_sum", (wide,)),
        "compensated_row_sums (2000x500)": ("compensated_row_sums", (rows,)),
        "cdr_trial_losses (1e4 x 900)": ("cdr_trial_losses", (obs, e, e_hat, p_hat, gamma)),
        "auc_from_sorted (2e5, ties)": ("auc_from_sorted", (scores, labels)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _core is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'compiled ms':>12s} {'python ms':>10s} {'speedup':>8s}  identical")
    for label, (name, inputs) in cases(rng).items():
        fast, slow = getattr(_core, name), getattr(_core_py, name)
        same = np.array_equal(np.asarray(fast(*inputs)), np.asarray(slow(*inputs)), equal_nan=True)
        t_fast = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(lambda: slow(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:34s} {t_fast:12.2f} {t_slow:10.2f} {t_slow / t_fast:7.1f}x  {same}")


if __name__ == "__main__":
    main()
