"""Hot inner loops with two interchangeable implementations.

The numba path is selected automatically when numba imports cleanly;
setting ``EPIRISK_FORCE_NUMPY=1`` in the environment (or numba being
unavailable) selects the pure-numpy path. Both paths are bit-identical,
including the inline xorshift64* generator used for cuckoo evictions,
so simulation outputs do not depend on which one runs.

Kernels:
  cuckoo_insert_many  -- sequential inserts with eviction + rollback
  cuckoo_contains_many-- bulk membership probes
  pir_fold            -- per-block XOR parity of a query bit vector
  pir_eval            -- branchless XOR accumulation of selected blocks
"""

import os

import numpy as np

MASK64 = (1 << 64) - 1
_ALT_MIX = 0xC4CEB9FE1A85EC53
_XS_MULT = 0x2545F4914F6CDD1D


def _py_alt_offset(fp: int, index_mask: int) -> int:
    # 64-bit multiplicative mix of the fingerprint; the candidate-index
    # relation i2 = i1 ^ offset(fp) must depend on fp alone.
    return (((fp * _ALT_MIX) & MASK64) >> 32) & index_mask


def _py_xorshift(state: int) -> tuple[int, int]:
    state ^= state >> 12
    state = (state ^ (state << 25)) & MASK64
    state ^= state >> 27
    return state, (state * _XS_MULT) & MASK64


def _py_insert_many(slots, fps, i1s, index_mask, bucket_size, max_kicks, state):
    """Insert fingerprints in order; stop at the first failure.

    Returns (number inserted, new rng state). A failed insert rolls its
    eviction chain back, leaving the table exactly as before the attempt.
    """
    n = len(fps)
    chain_idx = [0] * max_kicks
    chain_slot = [0] * max_kicks
    for k in range(n):
        fp = int(fps[k])
        i1 = int(i1s[k])
        i2 = i1 ^ _py_alt_offset(fp, index_mask)
        placed = False
        for idx in (i1, i2):
            for s in range(bucket_size):
                if slots[idx, s] == 0:
                    slots[idx, s] = fp
                    placed = True
                    break
            if placed:
                break
        if placed:
            continue
        cur = i2
        hand = fp
        depth = 0
        while depth < max_kicks:
            state, out = _py_xorshift(state)
            victim = out % bucket_size
            chain_idx[depth] = cur
            chain_slot[depth] = victim
            hand, slots[cur, victim] = int(slots[cur, victim]), hand
            depth += 1
            cur = cur ^ _py_alt_offset(hand, index_mask)
            for s in range(bucket_size):
                if slots[cur, s] == 0:
                    slots[cur, s] = hand
                    placed = True
                    break
            if placed:
                break
        if not placed:
            for j in range(depth - 1, -1, -1):
                idx = chain_idx[j]
                sl = chain_slot[j]
                hand, slots[idx, sl] = int(slots[idx, sl]), hand
            return k, state
    return n, state


def _py_contains_many(slots, fps, i1s, index_mask):
    fps = np.asarray(fps, dtype=np.uint32)
    i1s = np.asarray(i1s, dtype=np.int64)
    offs = (((fps.astype(np.uint64) * np.uint64(_ALT_MIX)) >> np.uint64(32))
            & np.uint64(index_mask)).astype(np.int64)
    i2s = i1s ^ offs
    hit1 = (slots[i1s] == fps[:, None]).any(axis=1)
    hit2 = (slots[i2s] == fps[:, None]).any(axis=1)
    return (hit1 | hit2).astype(np.uint8)


def _py_pir_fold(layout, bits, nblocks):
    set_blocks = layout[bits != 0]
    counts = np.bincount(set_blocks, minlength=nblocks)
    return (counts & 1).astype(np.uint8)


def _py_pir_eval(words, offsets, word_lens, selected, out):
    # Touch every block regardless of its query bit: server work must
    # not depend on which block the client wants.
    full = np.uint64(MASK64)
    zero = np.uint64(0)
    for b in range(len(offsets)):
        mask = full if selected[b] else zero
        o = offsets[b]
        n = word_lens[b]
        out[:n] ^= words[o:o + n] & mask
    return out


_NUMPY_IMPL = {
    "insert_many": _py_insert_many,
    "contains_many": _py_contains_many,
    "pir_fold": _py_pir_fold,
    "pir_eval": _py_pir_eval,
}

IMPLS = {"numpy": _NUMPY_IMPL}

_FORCE_NUMPY = os.environ.get("EPIRISK_FORCE_NUMPY", "") not in ("", "0")

if not _FORCE_NUMPY:
    try:
        from numba import njit
    except ImportError:
        njit = None
else:
    njit = None

if njit is not None:

    @njit(cache=True)
    def _nb_alt_offset(fp, index_mask):
        return ((np.uint64(fp) * np.uint64(_ALT_MIX)) >> np.uint64(32)) & np.uint64(index_mask)

    @njit(cache=True)
    def _nb_insert_many(slots, fps, i1s, index_mask, bucket_size, max_kicks, state):
        n = fps.shape[0]
        chain_idx = np.empty(max_kicks, np.int64)
        chain_slot = np.empty(max_kicks, np.int64)
        st = np.uint64(state)
        for k in range(n):
            fp = np.uint32(fps[k])
            i1 = np.int64(i1s[k])
            i2 = i1 ^ np.int64(_nb_alt_offset(fp, index_mask))
            placed = False
            for s in range(bucket_size):
                if slots[i1, s] == 0:
                    slots[i1, s] = fp
                    placed = True
                    break
            if not placed:
                for s in range(bucket_size):
                    if slots[i2, s] == 0:
                        slots[i2, s] = fp
                        placed = True
                        break
            if placed:
                continue
            cur = i2
            hand = fp
            depth = 0
            while depth < max_kicks:
                st = st ^ (st >> np.uint64(12))
                st = st ^ (st << np.uint64(25))
                st = st ^ (st >> np.uint64(27))
                out = st * np.uint64(_XS_MULT)
                victim = np.int64(out % np.uint64(bucket_size))
                chain_idx[depth] = cur
                chain_slot[depth] = victim
                tmp = slots[cur, victim]
                slots[cur, victim] = hand
                hand = tmp
                depth += 1
                cur = cur ^ np.int64(_nb_alt_offset(hand, index_mask))
                for s in range(bucket_size):
                    if slots[cur, s] == 0:
                        slots[cur, s] = hand
                        placed = True
                        break
                if placed:
                    break
            if not placed:
                for j in range(depth - 1, -1, -1):
                    idx = chain_idx[j]
                    sl = chain_slot[j]
                    tmp = slots[idx, sl]
                    slots[idx, sl] = hand
                    hand = tmp
                return k, np.uint64(st)
        return n, np.uint64(st)

    @njit(cache=True)
    def _nb_contains_many(slots, fps, i1s, index_mask):
        n = fps.shape[0]
        res = np.zeros(n, np.uint8)
        bucket_size = slots.shape[1]
        for k in range(n):
            fp = np.uint32(fps[k])
            i1 = np.int64(i1s[k])
            i2 = i1 ^ np.int64(_nb_alt_offset(fp, index_mask))
            for s in range(bucket_size):
                if slots[i1, s] == fp or slots[i2, s] == fp:
                    res[k] = 1
                    break
        return res

    @njit(cache=True)
    def _nb_pir_fold(layout, bits, nblocks):
        out = np.zeros(nblocks, np.uint8)
        for i in range(layout.shape[0]):
            if bits[i]:
                out[layout[i]] ^= 1
        return out

    @njit(cache=True)
    def _nb_pir_eval(words, offsets, word_lens, selected, out):
        full = np.uint64(MASK64)
        zero = np.uint64(0)
        for b in range(offsets.shape[0]):
            mask = full if selected[b] else zero
            o = offsets[b]
            n = word_lens[b]
            for j in range(n):
                out[j] ^= words[o + j] & mask
        return out

    def _nb_insert_many_wrap(slots, fps, i1s, index_mask, bucket_size, max_kicks, state):
        k, st = _nb_insert_many(
            slots,
            np.ascontiguousarray(fps, dtype=np.uint32),
            np.ascontiguousarray(i1s, dtype=np.int64),
            np.int64(index_mask),
            np.int64(bucket_size),
            np.int64(max_kicks),
            np.uint64(state),
        )
        return int(k), int(st)

    def _nb_contains_many_wrap(slots, fps, i1s, index_mask):
        return _nb_contains_many(
            slots,
            np.ascontiguousarray(fps, dtype=np.uint32),
            np.ascontiguousarray(i1s, dtype=np.int64),
            np.int64(index_mask),
        )

    IMPLS["numba"] = {
        "insert_many": _nb_insert_many_wrap,
        "contains_many": _nb_contains_many_wrap,
        "pir_fold": lambda layout, bits, nblocks: _nb_pir_fold(layout, bits, np.int64(nblocks)),
        "pir_eval": _nb_pir_eval,
    }

ACTIVE_IMPL = "numba" if "numba" in IMPLS else "numpy"

insert_many = IMPLS[ACTIVE_IMPL]["insert_many"]
contains_many = IMPLS[ACTIVE_IMPL]["contains_many"]
pir_fold = IMPLS[ACTIVE_IMPL]["pir_fold"]
pir_eval = IMPLS[ACTIVE_IMPL]["pir_eval"]
