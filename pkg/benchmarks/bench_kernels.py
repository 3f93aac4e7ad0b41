"""Timing of the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``.  Each kernel is timed on
inputs of the size the pipeline uses and the two outputs are compared.
"""
import argparse
import timeit

import numpy as np

from hbmodal import _kernels
from hbmodal._kernels import _fallback


def _inputs(rng):
    nk, no = 400, 6
    band = (rng.standard_normal((nk, no)), rng.standard_normal((nk, no)))
    omega_k = np.linspace(20.0, 30.0, nk)
    phi = rng.standard_normal(no)
    phi /= np.linalg.norm(phi)
    nll_args = (*band, omega_k, 625.0, 0.01, 1.0, 0.1, phi)
    red_args = (*band, omega_k, 625.0, 0.01, 1.0, 0.1)
    m, n, d = 1000, 2000, 2
    draws = np.ascontiguousarray(rng.standard_normal((m, d)))
    means = np.ascontiguousarray(0.1 * rng.standard_normal((n, d)))
    ci = np.ascontiguousarray(np.broadcast_to(np.eye(d), (n, d, d)))
    mix_args = (draws, means, ci, np.zeros(n))
    return {"band_nll_single": nll_args, "band_reduced_single": red_args, "mixture_loglik": mix_args}


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels.BACKEND != "compiled":
        print("compiled extension not available; only the fallback is timed")
    rng = np.random.default_rng(42)
    print(f"{'kernel':<22}{'fallback [ms]':>15}{'compiled [ms]':>15}{'speed-up':>10}{'max |diff|':>13}")
    for name, kargs in _inputs(rng).items():
        fb = getattr(_fallback, name)
        t_fb = min(timeit.repeat(lambda: fb(*kargs), number=1, repeat=args.repeat)) * 1e3
        if _kernels.BACKEND == "compiled":
            cp = getattr(_kernels._impl, name)
            t_cp = min(timeit.repeat(lambda: cp(*kargs), number=1, repeat=args.repeat)) * 1e3
            diff = _max_diff(fb(*kargs), cp(*kargs))
            print(f"{name:<22}{t_fb:>15.3f}{t_cp:>15.3f}{t_fb / t_cp:>10.1f}{diff:>13.2e}")
        else:
            print(f"{name:<22}{t_fb:>15.3f}{'-':>15}{'-':>10}{'-':>13}")


if __name__ == "__main__":
    main()
