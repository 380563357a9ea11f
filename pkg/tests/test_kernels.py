"""The numba and numpy kernel paths must be bit-identical; simulations may
run on either depending on the EPIRISK_FORCE_NUMPY flag."""

import numpy as np
import pytest

from epirisk import _kernels

needs_numba = pytest.mark.skipif(
    "numba" not in _kernels.IMPLS, reason="numba path unavailable"
)


def _random_inserts(seed, n=400, ni=64, bs=4):
    rng = np.random.default_rng(seed)
    fps = rng.integers(1, 1 << 27, n).astype(np.uint32)
    i1s = rng.integers(0, ni, n).astype(np.int64)
    return fps, i1s, ni, bs


@needs_numba
@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_insert_many_paths_identical(seed):
    fps, i1s, ni, bs = _random_inserts(seed)
    slots_a = np.zeros((ni, bs), np.uint32)
    slots_b = np.zeros((ni, bs), np.uint32)
    ka, sa = _kernels.IMPLS["numpy"]["insert_many"](slots_a, fps, i1s, ni - 1, bs, 500, 1234)
    kb, sb = _kernels.IMPLS["numba"]["insert_many"](slots_b, fps, i1s, ni - 1, bs, 500, 1234)
    assert ka == kb
    assert int(sa) == int(sb)
    assert np.array_equal(slots_a, slots_b)


@needs_numba
def test_contains_many_paths_identical():
    fps, i1s, ni, bs = _random_inserts(9, n=200)
    slots = np.zeros((ni, bs), np.uint32)
    _kernels.IMPLS["numpy"]["insert_many"](slots, fps[:100], i1s[:100], ni - 1, bs, 500, 7)
    a = _kernels.IMPLS["numpy"]["contains_many"](slots, fps, i1s, ni - 1)
    b = _kernels.IMPLS["numba"]["contains_many"](slots, fps, i1s, ni - 1)
    assert np.array_equal(a, b)


@needs_numba
def test_pir_kernels_paths_identical():
    rng = np.random.default_rng(17)
    nblocks = 9
    layout = rng.integers(0, nblocks, 128).astype(np.uint32)
    bits = rng.integers(0, 2, 128).astype(np.uint8)
    fa = _kernels.IMPLS["numpy"]["pir_fold"](layout, bits, nblocks)
    fb = _kernels.IMPLS["numba"]["pir_fold"](layout, bits, nblocks)
    assert np.array_equal(fa, fb)

    word_lens = rng.integers(1, 20, nblocks).astype(np.int64)
    offsets = np.zeros(nblocks, np.int64)
    offsets[1:] = np.cumsum(word_lens)[:-1]
    words = rng.integers(0, 1 << 63, int(word_lens.sum())).astype(np.uint64)
    out_a = np.zeros(int(word_lens.max()), np.uint64)
    out_b = np.zeros(int(word_lens.max()), np.uint64)
    _kernels.IMPLS["numpy"]["pir_eval"](words, offsets, word_lens, fa, out_a)
    _kernels.IMPLS["numba"]["pir_eval"](words, offsets, word_lens, fb, out_b)
    assert np.array_equal(out_a, out_b)


def test_insert_rollback_leaves_table_unchanged():
    # ni=1 forces both candidate buckets to coincide: capacity is bucket_size
    ni, bs = 1, 4
    slots = np.zeros((ni, bs), np.uint32)
    fps = np.arange(1, 6, dtype=np.uint32)
    i1s = np.zeros(5, np.int64)
    k, _ = _kernels.insert_many(slots, fps, i1s, ni - 1, bs, 50, 99)
    assert k == 4
    assert sorted(slots.ravel().tolist()) == [1, 2, 3, 4]


def test_failed_insert_preserves_prior_members():
    rng = np.random.default_rng(5)
    ni, bs = 8, 2
    slots = np.zeros((ni, bs), np.uint32)
    fps = rng.integers(1, 1 << 20, 64).astype(np.uint32)
    i1s = rng.integers(0, ni, 64).astype(np.int64)
    k, _ = _kernels.insert_many(slots, fps, i1s, ni - 1, bs, 100, 42)
    assert 0 < k < 64  # overfull on purpose
    present = _kernels.contains_many(slots, fps[:k], i1s[:k], ni - 1)
    assert present.all()
