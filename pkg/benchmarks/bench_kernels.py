"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each case runs both backends on identical input, checks that they agree
and prints the best-of-N wall time.
"""

import argparse
import time

import numpy as np

from scsr import kernels
from scsr.geometry import build_icosphere


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def centile_case(p, m, missing, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(2.5, 0.3, size=(p, m))
    values[rng.random((p, m)) < missing] = np.nan
    return values


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")

    cases = []
    for p, m in [(642, 100), (10242, 100), (10242, 500)]:
        vals = centile_case(p, m, 0.2)
        cases.append((f"centile_rows p={p} m={m}", lambda b, v=vals: kernels.centile_rows(v, 0.95, backend=b)))
    for order in (4, 6):
        mesh = build_icosphere(order)
        a = mesh.adjacency_csr
        seeds = np.random.default_rng(1).choice(mesh.n_vertices, 34, replace=False)
        cases.append((f"hop_voronoi order={order} k=34",
                      lambda b, a=a, s=seeds: kernels.hop_voronoi(a.indptr, a.indices, s, backend=b)))

    print(f"{'case':34s} " + " ".join(f"{b:>12s}" for b in backends) + "   speedup")
    for name, fn in cases:
        results = {b: best_of(lambda: fn(b), args.repeat) for b in backends}
        outs = [r[1] for r in results.values()]
        first = outs[0][0] if isinstance(outs[0], tuple) else outs[0]
        for o in outs[1:]:
            o = o[0] if isinstance(o, tuple) else o
            assert np.array_equal(first, o, equal_nan=True), f"backends disagree on {name}"
        cols = " ".join(f"{results[b][0] * 1e3:10.2f}ms" for b in backends)
        speed = results["python"][0] / results["cython"][0] if "cython" in results else float("nan")
        print(f"{name:34s} {cols}   {speed:6.1f}x")


if __name__ == "__main__":
    main()
