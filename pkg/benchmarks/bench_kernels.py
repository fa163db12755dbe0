"""Time the numba and pure-numpy variants of every hot kernel.

Both variants of each kernel are bitwise-equivalent by construction;
this script asserts that on the benchmark inputs and reports how much
the jitted build buys. When numba is unavailable (or disabled via
MESHSCALE_NO_NUMBA), the "numba" column falls back to the same plain
Python code and the speedup column reads 1.0x-ish.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--scale F]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from meshscale._accel import HAVE_NUMBA, NUMBA_DISABLED
from meshscale.kernels import VARIANTS


def _timeit(fn, args, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _workloads(scale: float, rng: np.random.Generator):
    side = max(8, int(256 * scale))
    k = 3
    padded = rng.standard_normal((side + k - 1, side + k - 1)).astype(np.float32)
    kernel = rng.standard_normal((k, k)).astype(np.float32)
    conv_out = np.empty((side, side), dtype=np.float32)

    m = max(8, int(128 * scale))
    a = rng.standard_normal((m, m)).astype(np.float32)
    b = rng.standard_normal((m, m)).astype(np.float32)
    mm_out = np.empty((m, m), dtype=np.float32)

    n_auc = max(1000, int(1_000_000 * scale))
    scores = rng.standard_normal(n_auc).astype(np.float32)
    scores[scores == 0] = 0.0
    labels = rng.integers(0, 2, size=n_auc).astype(np.uint64)
    bits = scores.view(np.uint32)
    keys_out = np.empty(n_auc, dtype=np.uint64)
    # auc_rank_pass consumes sorted keys; build them with the numpy packer.
    from meshscale.kernels import _pack_keys_numpy

    sorted_keys = np.empty(n_auc, dtype=np.uint64)
    _pack_keys_numpy(bits, labels, sorted_keys)
    sorted_keys.sort()

    n_shuf = max(1000, int(200_000 * scale))
    buf = max(2, n_shuf // 20)
    occ = np.minimum(buf, n_shuf - np.arange(n_shuf))
    draws = rng.integers(0, occ)
    shuf_out = np.empty(n_shuf, dtype=np.int64)

    return {
        "conv2d_padded": ((padded, kernel, conv_out), conv_out),
        "matmul_fixed": ((a, b, mm_out), mm_out),
        "pack_auc_keys": ((bits, labels, keys_out), keys_out),
        "auc_rank_pass": ((sorted_keys,), None),
        "buffer_shuffle": ((n_shuf, buf, draws, shuf_out), shuf_out),
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3, help="timing repeats; best is kept")
    parser.add_argument("--scale", type=float, default=1.0, help="workload size multiplier")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    workloads = _workloads(args.scale, rng)

    jit_label = "numba" if (HAVE_NUMBA and not NUMBA_DISABLED) else "python (numba off)"
    print(f"jit variant: {jit_label}")
    header = f"{'kernel':<16} {'jit (ms)':>10} {'numpy (ms)':>11} {'speedup':>8}  identical"
    print(header)
    print("-" * len(header))

    for name, (jit_fn, np_fn) in VARIANTS.items():
        call_args, out_buf = workloads[name]
        # Warm the JIT cache outside the timed region.
        ret_jit = jit_fn(*call_args)
        jit_result = ret_jit if out_buf is None else out_buf.copy()
        t_jit = _timeit(jit_fn, call_args, args.repeats)

        ret_np = np_fn(*call_args)
        np_result = ret_np if out_buf is None else out_buf.copy()
        t_np = _timeit(np_fn, call_args, args.repeats)

        if out_buf is None:
            same = tuple(int(v) for v in jit_result) == tuple(int(v) for v in np_result)
        else:
            same = np.array_equal(
                np.asarray(jit_result).view(np.uint8), np.asarray(np_result).view(np.uint8)
            )
        print(
            f"{name:<16} {t_jit * 1e3:>10.3f} {t_np * 1e3:>11.3f} "
            f"{t_np / t_jit if t_jit > 0 else float('inf'):>7.1f}x  {same}"
        )
        if not same:
            raise SystemExit(f"variant mismatch in {name}: results are not bitwise-identical")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
