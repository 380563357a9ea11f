"""Two-server XOR private information retrieval over a tiled risk database.

One database covers one H-region. Every L-tile index in the query domain
maps to a block: a whole M-subtree collapses into a single block while its
noised encoding fits under the block cap, otherwise each of its L-tiles
gets its own block. Queries are bit vectors over the full domain; each
server folds the bits of tiles sharing a block into one bit (XOR), then
XORs the selected unique blocks into a response buffer sized by the
largest block. Short blocks simply leave the tail untouched, so no
per-block padding is ever stored. XORing the two servers' responses
yields the target tile's block, zero-padded.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import Tiling
from .cuckoo import CuckooParams, chunk_risk_set
from .privacy import DpParams, generate_junk_ids, sample_junk_count

QUERY_HEADER_FMT = ">II"
QUERY_HEADER_LEN = 8
RESPONSE_HEADER_FMT = ">I"
RESPONSE_HEADER_LEN = 4


class CapacityError(RuntimeError):
    """A single L-tile's noised encoding exceeds the block cap."""


@dataclass
class PirDb:
    tiling: Tiling
    block_cap: int
    blocks: list[bytes]
    layout: np.ndarray  # uint32[domain_size] -> block ordinal
    payload_id: int = 0
    h: int = 0
    _words: np.ndarray = field(default=None, repr=False)
    _offsets: np.ndarray = field(default=None, repr=False)
    _word_lens: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.layout) != self.tiling.domain_size:
            raise ValueError("layout length does not match tiling domain")
        self._pack()

    def _pack(self):
        word_lens = np.array([(len(b) + 7) // 8 for b in self.blocks], np.int64)
        offsets = np.zeros(len(self.blocks), np.int64)
        if len(self.blocks) > 1:
            offsets[1:] = np.cumsum(word_lens)[:-1]
        buf = bytearray(int(word_lens.sum()) * 8)
        for blk, off in zip(self.blocks, offsets):
            buf[off * 8 : off * 8 + len(blk)] = blk
        self._words = np.frombuffer(bytes(buf), np.uint64)
        self._offsets = offsets
        self._word_lens = word_lens

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def b_max(self) -> int:
        return max(len(b) for b in self.blocks)

    def block_for_tile(self, tile: int) -> bytes:
        return self.blocks[int(self.layout[tile])]


def build_pir_db(
    entries_by_tile: dict[int, list],
    tiling: Tiling,
    block_cap: int,
    dp: DpParams,
    cuckoo_params: CuckooParams,
    payload_id: int = 0,
    h: int = 0,
    seed: int = 0,
) -> PirDb:
    """Group tile entry lists into noise-padded, filter-encoded blocks.

    `entries_by_tile` maps a domain index (M and L bits flattened) to the
    15-byte ids uploaded for that tile. Grouping is greedy top-down: an
    M-subtree whose noised encoding fits in `block_cap` becomes one block,
    otherwise every one of its L-tiles becomes its own block (empty tiles
    included, each padded with fresh junk).
    """
    for tile in entries_by_tile:
        if not (0 <= tile < tiling.domain_size):
            raise ValueError(f"tile index {tile} outside query domain")

    def encode(ids, stream_key):
        ss = np.random.SeedSequence([seed & 0xFFFFFFFF, payload_id & 0xFFFFFFFF] + stream_key)
        rng = np.random.Generator(np.random.PCG64(ss))
        n_junk = sample_junk_count(dp, rng)
        noised = list(ids) + generate_junk_ids(n_junk, rng)
        chunk_seed = int(ss.generate_state(1, np.uint64)[0])
        chunks = chunk_risk_set(noised, cuckoo_params, payload_id, seed=chunk_seed)
        return b"".join(c.to_bytes() for c in chunks)

    blocks: list[bytes] = []
    ordinal_by_body: dict[bytes, int] = {}
    layout = np.zeros(tiling.domain_size, np.uint32)

    def add_block(body):
        if body in ordinal_by_body:
            return ordinal_by_body[body]
        ordinal_by_body[body] = len(blocks)
        blocks.append(body)
        return len(blocks) - 1

    n_l = 1 << tiling.l_bits
    for m in range(1 << tiling.m_bits):
        base = m << tiling.l_bits
        subtree_ids = []
        for l in range(n_l):
            subtree_ids.extend(entries_by_tile.get(base + l, ()))
        body = encode(subtree_ids, [m])
        if len(body) <= block_cap:
            layout[base : base + n_l] = add_block(body)
            continue
        for l in range(n_l):
            body_l = encode(entries_by_tile.get(base + l, ()), [m, l])
            if len(body_l) > block_cap:
                raise CapacityError(
                    f"noised block for tile (m={m}, l={l}) is {len(body_l)} bytes, "
                    f"over the {block_cap}-byte cap; raise the cap"
                )
            layout[base + l] = add_block(body_l)
    return PirDb(tiling, block_cap, blocks, layout, payload_id, h)


def gen_query(target: int, domain_size: int, rng: np.random.Generator):
    """Secret-share a unit vector: one uniform share, the other equal to it
    with the target bit flipped."""
    if not (0 <= target < domain_size):
        raise IndexError(f"target {target} outside domain of {domain_size} tiles")
    q1 = rng.integers(0, 2, domain_size, dtype=np.uint8)
    q2 = q1.copy()
    q2[target] ^= 1
    return q1, q2


def fold_query(share: np.ndarray, db: PirDb) -> np.ndarray:
    """Collapse the share to one XOR-parity bit per unique block."""
    if len(share) != db.tiling.domain_size:
        raise ValueError("share length does not match query domain")
    return _kernels.pir_fold(db.layout, share, db.num_blocks)


def eval_query(db: PirDb, folded: np.ndarray) -> bytes:
    """XOR the selected blocks into a zeroed buffer of the max block size.

    Every block is visited exactly once whatever the bits say, so server
    work and response size are independent of the target.
    """
    if len(folded) != db.num_blocks:
        raise ValueError("folded query length does not match block count")
    b_max = db.b_max
    out = np.zeros((b_max + 7) // 8, np.uint64)
    _kernels.pir_eval(db._words, db._offsets, db._word_lens,
                      np.ascontiguousarray(folded, np.uint8), out)
    return out.tobytes()[:b_max]


def combine(r1: bytes, r2: bytes) -> bytes:
    """XOR two response shares; for honest servers this is the target block."""
    if len(r1) != len(r2):
        raise ValueError(f"response share lengths differ: {len(r1)} vs {len(r2)}")
    a = np.frombuffer(r1, np.uint8)
    b = np.frombuffer(r2, np.uint8)
    return (a ^ b).tobytes()


def query_to_bytes(h: int, payload_id: int, share: np.ndarray) -> bytes:
    """Wire form: H-region id, payload id, then the domain bit vector packed
    LSB-first within each byte."""
    return struct.pack(QUERY_HEADER_FMT, h, payload_id) + np.packbits(
        share, bitorder="little"
    ).tobytes()


def parse_query(buf: bytes, domain_size: int) -> tuple[int, int, np.ndarray]:
    expected = QUERY_HEADER_LEN + (domain_size + 7) // 8
    if len(buf) != expected:
        raise ValueError(f"query wire length {len(buf)}, expected {expected}")
    h, payload_id = struct.unpack_from(QUERY_HEADER_FMT, buf)
    bits = np.unpackbits(
        np.frombuffer(buf, np.uint8, offset=QUERY_HEADER_LEN), bitorder="little"
    )[:domain_size]
    return h, payload_id, bits


def response_to_bytes(share: bytes) -> bytes:
    return struct.pack(RESPONSE_HEADER_FMT, len(share)) + share


def parse_response(buf: bytes) -> bytes:
    if len(buf) < RESPONSE_HEADER_LEN:
        raise ValueError("response shorter than header")
    (n,) = struct.unpack_from(RESPONSE_HEADER_FMT, buf)
    if len(buf) != RESPONSE_HEADER_LEN + n:
        raise ValueError("response length header does not match body")
    return buf[RESPONSE_HEADER_LEN:]


class PirServer:
    """One of the two non-colluding servers; holds a full database copy.

    Never branches on anything target-dependent: the only inputs are a
    single share (marginally uniform) and the public database.
    """

    def __init__(self, db: PirDb):
        self.db = db
        self.queries_served = 0
        self.blocks_xored = 0

    def answer(self, share: np.ndarray, fold: bool = True) -> bytes:
        if fold:
            folded = fold_query(share, self.db)
            self.blocks_xored += self.db.num_blocks
            self.queries_served += 1
            return eval_query(self.db, folded)
        # Unfolded evaluation over the fully replicated view (one block per
        # tile); kept for equivalence checks and benchmarking the folding
        # optimization.
        db = self.db
        rep_offsets = db._offsets[db.layout]
        rep_lens = db._word_lens[db.layout]
        out = np.zeros((db.b_max + 7) // 8, np.uint64)
        _kernels.pir_eval(db._words, rep_offsets, rep_lens,
                          np.ascontiguousarray(share, np.uint8), out)
        self.blocks_xored += db.tiling.domain_size
        self.queries_served += 1
        return out.tobytes()[: db.b_max]


def retrieve(db: PirDb, target: int, rng: np.random.Generator, fold: bool = True) -> bytes:
    """Full client-side round trip against two local server instances."""
    q1, q2 = gen_query(target, db.tiling.domain_size, rng)
    s1, s2 = PirServer(db), PirServer(db)
    return combine(s1.answer(q1, fold=fold), s2.answer(q2, fold=fold))
