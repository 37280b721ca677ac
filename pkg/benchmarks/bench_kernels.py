"""Compare the compiled and numpy REML kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times each kernel on a few problem sizes, then one end-to-end per-gene
REML fit with each backend swapped in.
"""

import argparse
import timeit

import numpy as np

from falco import _backend, reml
from falco.simgen import SimConfig, simulate


def _problem(m, b, rng):
    A = rng.standard_normal((b, m, m))
    Bt = np.ascontiguousarray(A + A.transpose(0, 2, 1))
    Bt[0] = np.eye(m)
    W = rng.standard_normal((m, 3 * m))
    St = W @ W.T / (3 * m)
    y = rng.standard_normal(m)
    theta = np.zeros(b)
    theta[0] = 2.0 * np.abs(np.linalg.eigvalsh(Bt[1:].sum(0))).max() + 1.0 if b > 1 else 1.0
    return theta, Bt, St, y


def _time(fn, repeat):
    n, _ = timeit.Timer(fn).autorange()
    best = min(timeit.repeat(fn, number=n, repeat=repeat)) / n
    return best * 1e6  # microseconds


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    impls = {"python": _backend.python_kernels, "cython": _backend.compiled_kernels}
    rows = []
    for m, b in ((6, 2), (20, 3), (54, 6), (120, 6)):
        theta, Bt, St, y = _problem(m, b, rng)
        for name, call in (
            ("value_grad", lambda k: k.reml_value_grad(theta, Bt, St)),
            ("value_grad_vec", lambda k: k.reml_value_grad_vec(theta, Bt, y)),
            ("information", lambda k: k.reml_information(theta, Bt)),
            ("feasible", lambda k: k.feasible(theta, Bt, 5e-4, 0.0)),
        ):
            t = {}
            for impl, k in impls.items():
                if k is None:
                    continue
                t[impl] = _time(lambda: call(k), repeat)
            rows.append((name, m, b, t))
    return rows


def bench_gene_fit(repeat, n_genes=50):
    data = simulate(SimConfig(p=200, K=3, pi=(1.0,) * 3, tau=(0.9, 0.6, 0.4), seed=0))
    C = data.C_true
    out = {}
    for impl, k in (("python", _backend.python_kernels), ("cython", _backend.compiled_kernels)):
        if k is None:
            continue
        saved = reml.kernels
        reml.kernels = k
        try:
            model = reml.GeneModel(C, data.basis)

            def run():
                for g in range(n_genes):
                    model.fit(data.Y[g], data.X(g))

            out[impl] = _time(run, repeat) / n_genes
        finally:
            reml.kernels = saved
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _backend.compiled_kernels is None:
        print("compiled kernels unavailable; only the numpy fallback is timed")
    print(f"{'kernel':<16}{'m':>5}{'b':>3}{'python us':>12}{'cython us':>12}{'speedup':>9}")
    for name, m, b, t in bench_kernels(args.repeat):
        py, cy = t.get("python"), t.get("cython")
        sp = f"{py / cy:8.1f}x" if cy else "       -"
        print(f"{name:<16}{m:>5}{b:>3}{py:>12.1f}{(cy or float('nan')):>12.1f}{sp}")
    g = bench_gene_fit(args.repeat)
    line = "  ".join(f"{k}={v / 1e3:.2f} ms" for k, v in g.items())
    print(f"per-gene REML fit (n=57, b=6): {line}")


if __name__ == "__main__":
    main()
