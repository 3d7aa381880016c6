"""Compare the compiled and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py --entities 2000 --triples 20000 --dim 64

Prints the median wall time of each kernel per backend, the speedup, and the
largest absolute difference between the two outputs.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from fkge import _core_py

try:
    from fkge import _core
except ImportError:
    _core = None


def _problem(n_ent: int, n_rel: int, n_triples: int, dim: int, seed: int):
    rng = np.random.default_rng(seed)
    E = rng.uniform(-1, 1, (n_ent, dim)) / np.sqrt(dim)
    R = rng.uniform(-1, 1, (n_rel, dim)) / np.sqrt(dim)
    pos = np.column_stack([rng.integers(0, n_ent, n_triples), rng.integers(0, n_rel, n_triples),
                           rng.integers(0, n_ent, n_triples)]).astype(np.int64)
    neg = pos.copy()
    flip = rng.random(n_triples) < 0.5
    neg[flip, 0] = rng.integers(0, n_ent, flip.sum())
    neg[~flip, 2] = rng.integers(0, n_ent, (~flip).sum())
    return E, R, pos, neg


def _time(fn, repeats: int) -> tuple[float, object]:
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def bench(args) -> list[tuple[str, float, float | None, float | None]]:
    E, R, pos, neg = _problem(args.entities, args.relations, args.triples, args.dim, args.seed)
    queries = min(args.queries, len(pos))
    anchor = np.ascontiguousarray(pos[:queries, 0])
    rel = np.ascontiguousarray(pos[:queries, 1])
    backends = {"python": _core_py}
    if _core is not None:
        backends["cython"] = _core

    def sgd(mod):
        e, r = E.copy(), R.copy()
        mod.transe_sgd_epoch(e, r, pos, neg, args.batch, 0.01, 1.0, args.norm)
        return e

    def rank(mod):
        return mod.transe_candidate_scores(E, R, anchor, rel, args.norm, False)

    rows = []
    for name, fn in (("sgd_epoch", sgd), ("candidate_scores", rank)):
        res = {b: _time(lambda m=m: fn(m), args.repeats) for b, m in backends.items()}
        t_py = res["python"][0]
        if "cython" in res:
            t_cy = res["cython"][0]
            diff = float(np.max(np.abs(res["cython"][1] - res["python"][1])))
            rows.append((name, t_py, t_cy, diff))
        else:
            rows.append((name, t_py, None, None))
    return rows


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--entities", type=int, default=2000)
    ap.add_argument("--relations", type=int, default=20)
    ap.add_argument("--triples", type=int, default=20000)
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--batch", type=int, default=100)
    ap.add_argument("--norm", type=int, choices=(1, 2), default=1)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if _core is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':<18}{'python s':>11}{'cython s':>11}{'speedup':>9}{'max |diff|':>12}")
    for name, t_py, t_cy, diff in bench(args):
        if t_cy is None:
            print(f"{name:<18}{t_py:>11.4f}{'-':>11}{'-':>9}{'-':>12}")
        else:
            print(f"{name:<18}{t_py:>11.4f}{t_cy:>11.4f}{t_py / t_cy:>8.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
