"""Compare the numba and numpy paths of the forward-backward and Viterbi kernels.

    python benchmarks/bench_kernels.py [--phones 40] [--frames 47 150 500] [--repeat 20]

Times are the best of ``--repeat`` runs after one warm-up call (which also
triggers numba compilation).  Run with LFMMI_DISABLE_JIT=1 to see the
"numba" column fall back to interpreted loops.
"""
import argparse
import time

import numpy as np

from lfmmi import kernels
from lfmmi._jit import JIT_DISABLED
from lfmmi.decode import build_decode_graph
from lfmmi.graph import build_denominator_graph, stationary_distribution
from lfmmi.testing import random_phone_lm


def best_time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--phones", type=int, default=40)
    ap.add_argument("--frames", type=int, nargs="+", default=[47, 150, 500])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()

    rng = np.random.default_rng(a.seed)
    lm = random_phone_lm(rng, a.phones, 0.5)
    den = build_denominator_graph(lm)
    pi = stationary_distribution(den).pi
    w, fin = den.prob_arrays()
    dg = build_decode_graph(lm).fsa
    order = np.lexsort((np.arange(dg.num_arcs), dg.src))

    print(f"jit {'disabled' if JIT_DISABLED else 'enabled'}; denominator: "
          f"{den.num_states} states, {den.num_arcs} arcs")
    print(f"{'kernel':<10}{'frames':>8}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for T in a.frames:
        o = rng.standard_normal((T, a.phones))
        fb_args = (den.src, den.dst, den.pdf, w, fin, den.start, den.num_states, o, 0.1, pi)
        vit_args = (dg.src, dg.dst, dg.pdf, dg.logw, dg.final_logw, dg.start, dg.num_states, o, order)
        for name, jit_fn, np_fn, args in (
                ("fb", kernels._fb_jit, kernels._fb_numpy, fb_args),
                ("viterbi", kernels._viterbi_jit, kernels._viterbi_numpy, vit_args)):
            tj = best_time(lambda: jit_fn(*args), a.repeat)
            tn = best_time(lambda: np_fn(*args), a.repeat)
            print(f"{name:<10}{T:>8}{tj * 1e3:>12.3f}{tn * 1e3:>12.3f}{tn / tj:>9.1f}x")


if __name__ == "__main__":
    main()
