"""Hot numeric kernels, each in a numba and a pure-numpy/Python variant.

The two variants of every kernel are bitwise-equivalent: they perform
the same f32 operations in the same order (or exact integer work), so
switching MESHSCALE_NO_NUMBA never changes results, only speed.
benchmarks/bench_kernels.py times both variants side by side.
"""

from __future__ import annotations

import numpy as np

from ._accel import HAVE_NUMBA, USE_NUMBA, njit

# ---------------------------------------------------------------------------
# conv2d stencil (same zero padding happens in the caller; these consume the
# padded image). Accumulation order is fixed as (ki, kj) row-major in f32 in
# both variants, which is what makes strip-local convolution bitwise-equal to
# whole-image convolution.


@njit(cache=True)
def _conv2d_padded_njit(padded, kernel, out):  # pragma: no cover - jitted
    kh, kw = kernel.shape
    h, w = out.shape
    for i in range(h):
        for j in range(w):
            acc = np.float32(0.0)
            for ki in range(kh):
                for kj in range(kw):
                    acc += kernel[ki, kj] * padded[i + ki, j + kj]
            out[i, j] = acc


def _conv2d_padded_numpy(padded, kernel, out):
    kh, kw = kernel.shape
    h, w = out.shape
    out[:] = np.float32(0.0)
    for ki in range(kh):
        for kj in range(kw):
            out += kernel[ki, kj] * padded[ki : ki + h, kj : kj + w]


def conv2d_padded(padded: np.ndarray, kernel: np.ndarray, out: np.ndarray) -> None:
    if USE_NUMBA:
        _conv2d_padded_njit(padded, kernel, out)
    else:
        _conv2d_padded_numpy(padded, kernel, out)


# ---------------------------------------------------------------------------
# Fixed-order matmul: out[i, j] = fold over t ascending of A[i, t] * B[t, j],
# all f32. Library matmuls reorder the contraction depending on shape, which
# breaks bitwise sharding equivalences; this one never does.


@njit(cache=True)
def _matmul_fixed_njit(a, b, out):  # pragma: no cover - jitted
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc


def _matmul_fixed_numpy(a, b, out):
    out[:] = np.float32(0.0)
    for t in range(a.shape[1]):
        out += a[:, t : t + 1] * b[t : t + 1, :]


def matmul_fixed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """f32 matmul with ascending-k accumulation order."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float32)
    if USE_NUMBA:
        _matmul_fixed_njit(a, b, out)
    else:
        _matmul_fixed_numpy(a, b, out)
    return out


# ---------------------------------------------------------------------------
# AUC kernels. Scores are packed into order-preserving uint64 keys with the
# label in the low bit; after one sort, a single pass over tie groups yields
# the exact integer rank statistics. The caller canonicalizes -0.0 to +0.0
# before bit-viewing so both zeros land in one tie group.


@njit(cache=True)
def _pack_keys_njit(score_bits, labels, out):  # pragma: no cover - jitted
    sign = np.uint32(0x80000000)
    for i in range(score_bits.shape[0]):
        u = score_bits[i]
        if u & sign:
            su = ~u
        else:
            su = u | sign
        out[i] = (np.uint64(su) << np.uint64(1)) | np.uint64(labels[i])


def _pack_keys_numpy(score_bits, labels, out):
    su = np.where(score_bits & np.uint32(0x80000000), ~score_bits, score_bits | np.uint32(0x80000000))
    np.left_shift(su.astype(np.uint64), np.uint64(1), out=out)
    out |= labels.astype(np.uint64)


def pack_auc_keys(score_bits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    out = np.empty(score_bits.shape[0], dtype=np.uint64)
    if USE_NUMBA:
        _pack_keys_njit(score_bits, labels, out)
    else:
        _pack_keys_numpy(score_bits, labels, out)
    return out


@njit(cache=True)
def _auc_pass_njit(keys):  # pragma: no cover - jitted
    n = keys.shape[0]
    one = np.uint64(1)
    twice_rank = np.int64(0)
    pos_total = np.int64(0)
    g_start = np.int64(0)
    g_pos = np.int64(0)
    prev = keys[0] >> one
    for i in range(n):
        s = keys[i] >> one
        if s != prev:
            twice_rank += g_pos * (g_start + i + 1)
            pos_total += g_pos
            g_start = i
            g_pos = 0
            prev = s
        g_pos += np.int64(keys[i] & one)
    twice_rank += g_pos * (g_start + n + 1)
    pos_total += g_pos
    return twice_rank, pos_total


def _auc_pass_numpy(keys):
    n = keys.shape[0]
    scores = keys >> np.uint64(1)
    lab = (keys & np.uint64(1)).astype(np.int64)
    bounds = np.flatnonzero(scores[1:] != scores[:-1]) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [n]))
    pos_per_group = np.add.reduceat(lab, starts)
    # 1-based ranks of group [s, e) are s+1 .. e; twice their mean is s+e+1.
    twice_rank = int(np.sum(pos_per_group * (starts + ends + 1), dtype=np.int64))
    return np.int64(twice_rank), np.int64(pos_per_group.sum())


def auc_rank_pass(sorted_keys: np.ndarray) -> tuple[int, int]:
    """(twice the tie-averaged rank sum of positives, positive count)."""
    if USE_NUMBA:
        twice, pos = _auc_pass_njit(sorted_keys)
    else:
        twice, pos = _auc_pass_numpy(sorted_keys)
    return int(twice), int(pos)


# ---------------------------------------------------------------------------
# Streaming buffer shuffle: fill a B-slot buffer, then repeatedly emit a
# uniformly drawn slot and refill it from the stream. draws[t] must lie in
# [0, min(B, n - t)); the caller generates them from a seeded generator so
# both variants consume identical randomness.


@njit(cache=True)
def _buffer_shuffle_njit(n, buffer_size, draws, out):  # pragma: no cover - jitted
    fill = buffer_size if buffer_size < n else n
    buf = np.empty(fill, dtype=np.int64)
    for i in range(fill):
        buf[i] = i
    next_in = fill
    occ = fill
    for t in range(n):
        j = draws[t]
        out[t] = buf[j]
        if next_in < n:
            buf[j] = next_in
            next_in += 1
        else:
            occ -= 1
            buf[j] = buf[occ]


def _buffer_shuffle_python(n, buffer_size, draws, out):
    fill = min(buffer_size, n)
    buf = list(range(fill))
    next_in = fill
    for t in range(n):
        j = draws[t]
        out[t] = buf[j]
        if next_in < n:
            buf[j] = next_in
            next_in += 1
        else:
            buf[j] = buf[-1]
            buf.pop()


def buffer_shuffle_order(n: int, buffer_size: int, draws: np.ndarray) -> np.ndarray:
    """Emission order (a permutation of input positions 0..n-1)."""
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    if USE_NUMBA:
        _buffer_shuffle_njit(n, buffer_size, draws, out)
    else:
        _buffer_shuffle_python(n, buffer_size, draws, out)
    return out


VARIANTS = {
    "conv2d_padded": (_conv2d_padded_njit, _conv2d_padded_numpy),
    "matmul_fixed": (_matmul_fixed_njit, _matmul_fixed_numpy),
    "pack_auc_keys": (_pack_keys_njit, _pack_keys_numpy),
    "auc_rank_pass": (_auc_pass_njit, _auc_pass_numpy),
    "buffer_shuffle": (_buffer_shuffle_njit, _buffer_shuffle_python),
}

__all__ = [
    "HAVE_NUMBA",
    "USE_NUMBA",
    "conv2d_padded",
    "matmul_fixed",
    "pack_auc_keys",
    "auc_rank_pass",
    "buffer_shuffle_order",
    "VARIANTS",
]
