"""Compare compiled and pure-Python hot kernels on identical inputs.

    python benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from xmodal.data import markov_transition
from xmodal.kernels import backends


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(rng):
    for n in (16, 32, 64):
        C = rng.random((n, n))
        mu = np.full(n, 1.0 / n)
        yield f"simplex {n}x{n}", "transport_simplex", lambda k, C=C, mu=mu: k.transport_simplex(C, mu, mu, 100000)
        eps = 0.05 * float(np.median(C))

        def sink(k, C=C, n=n, eps=eps):
            f, g = np.zeros(n), np.zeros(n)
            lw = np.full(n, -np.log(n))
            return k.sinkhorn_log(C, lw, lw, eps, f, g, 2000, 1e-9)

        yield f"sinkhorn {n}x{n}", "sinkhorn_log", sink
    P, _ = markov_transition(512)
    cum = np.cumsum(P, axis=1)
    u = rng.random(200_000)
    yield "markov 200k tokens", "markov_sample", lambda k: k.markov_sample(cum, 3, u)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    ks = backends()
    if "compiled" not in ks:
        print("compiled extension not built; only the Python backend is available")
    print(f"{'kernel':<22}" + "".join(f"{name:>12}" for name in ks) + f"{'speedup':>10}")
    for label, _, fn in cases(np.random.default_rng(0)):
        row = {name: _best(lambda: fn(k), args.repeat)[0] for name, k in ks.items()}
        speed = row["python"] / row["compiled"] if "compiled" in row else float("nan")
        print(f"{label:<22}" + "".join(f"{t:>11.4f}s" for t in row.values()) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
