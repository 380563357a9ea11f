"""Cuckoo-filter encoding of risk id sets, plus chunking for broadcast.

Fingerprints are the low bits of SHA-256 over the 15-byte id, with 0
reserved for empty slots (fingerprints hashing to 0 become 1). The two
candidate bucket indices are related by an XOR involution so an entry can
be relocated knowing only its fingerprint and current index.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import EPHEMERAL_ID_LEN, WireFormatError

_HEADER_FMT = ">HHHH"
_HEADER_LEN = 8
_CHUNK_HEADER_FMT = ">IHHH"
CHUNK_HEADER_LEN = 10


@dataclass(frozen=True)
class CuckooParams:
    fingerprint_bits: int = 27
    bucket_size: int = 4
    num_indices: int = 128
    max_kicks: int = 500

    def __post_init__(self):
        if not (8 <= self.fingerprint_bits <= 32):
            raise ValueError(f"fingerprint_bits {self.fingerprint_bits} outside [8, 32]")
        if self.num_indices < 1 or self.num_indices & (self.num_indices - 1):
            raise ValueError(f"num_indices {self.num_indices} is not a power of two")
        if not (1 <= self.bucket_size <= 0xFFFF):
            raise ValueError("bucket_size out of range")
        if not (1 <= self.max_kicks <= 0xFFFF):
            raise ValueError("max_kicks out of range")

    @property
    def capacity(self) -> int:
        return self.num_indices * self.bucket_size

    @property
    def serialized_len(self) -> int:
        nbits = self.capacity * self.fingerprint_bits
        return _HEADER_LEN + (nbits + 7) // 8


def _mix_seed(seed: int) -> int:
    s = (seed ^ 0x9E3779B97F4A7C15) & _kernels.MASK64
    s = (s ^ (s >> 30)) * 0xBF58476D1CE4E5B9 & _kernels.MASK64
    s = (s ^ (s >> 27)) * 0x94D049BB133111EB & _kernels.MASK64
    s ^= s >> 31
    return s or 0x9E3779B97F4A7C15


def derive_many(items, params: CuckooParams):
    """Bulk (fingerprint, primary index) derivation for a sequence of ids."""
    n = len(items)
    fp_mask = (1 << params.fingerprint_bits) - 1
    idx_mask = params.num_indices - 1
    fps = np.empty(n, np.uint32)
    i1s = np.empty(n, np.int64)
    sha = hashlib.sha256
    for k, item in enumerate(items):
        d = sha(item).digest()
        fp = int.from_bytes(d[-4:], "big") & fp_mask
        fps[k] = fp or 1
        i1s[k] = int.from_bytes(d[:8], "big") & idx_mask
    return fps, i1s


def fingerprint_and_indices(item: bytes, params: CuckooParams) -> tuple[int, int, int]:
    """Fingerprint and both candidate indices for one id."""
    d = hashlib.sha256(item).digest()
    fp = int.from_bytes(d[-4:], "big") & ((1 << params.fingerprint_bits) - 1)
    fp = fp or 1
    idx_mask = params.num_indices - 1
    i1 = int.from_bytes(d[:8], "big") & idx_mask
    i2 = i1 ^ _kernels._py_alt_offset(fp, idx_mask)
    return fp, i1, i2


def alternate_index(fp: int, index: int, params: CuckooParams) -> int:
    """The other candidate index; applying this twice is the identity."""
    return index ^ _kernels._py_alt_offset(fp, params.num_indices - 1)


@dataclass
class CuckooFilter:
    params: CuckooParams = field(default_factory=CuckooParams)
    seed: int = 0

    def __post_init__(self):
        self.slots = np.zeros((self.params.num_indices, self.params.bucket_size), np.uint32)
        self.count = 0
        self._state = _mix_seed(self.seed)

    @property
    def load_factor(self) -> float:
        return self.count / self.params.capacity

    def insert(self, item: bytes) -> bool:
        fps, i1s = derive_many([item], self.params)
        return self.insert_bulk(fps, i1s) == 1

    def insert_fp(self, fp: int, i1: int) -> bool:
        return self.insert_bulk(np.array([fp], np.uint32), np.array([i1], np.int64)) == 1

    def insert_bulk(self, fps, i1s) -> int:
        """Insert fingerprints in order; returns how many went in before
        the first overflow. A failed insert leaves the filter unchanged."""
        inserted, self._state = _kernels.insert_many(
            self.slots,
            fps,
            i1s,
            self.params.num_indices - 1,
            self.params.bucket_size,
            self.params.max_kicks,
            self._state,
        )
        self.count += inserted
        return inserted

    def contains(self, item: bytes) -> bool:
        fp, i1, i2 = fingerprint_and_indices(item, self.params)
        return self.contains_fp(fp, i1)

    def contains_fp(self, fp: int, i1: int) -> bool:
        i2 = i1 ^ _kernels._py_alt_offset(fp, self.params.num_indices - 1)
        return bool((self.slots[i1] == fp).any() or (self.slots[i2] == fp).any())

    def contains_bulk(self, fps, i1s) -> np.ndarray:
        return _kernels.contains_many(self.slots, fps, i1s, self.params.num_indices - 1)

    def to_bytes(self) -> bytes:
        p = self.params
        header = struct.pack(
            _HEADER_FMT, p.fingerprint_bits, p.bucket_size, p.num_indices, p.max_kicks
        )
        vals = self.slots.ravel().astype(np.uint64)
        shifts = np.arange(p.fingerprint_bits - 1, -1, -1, dtype=np.uint64)
        bits = ((vals[:, None] >> shifts) & 1).astype(np.uint8)
        return header + np.packbits(bits.ravel()).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CuckooFilter":
        if len(buf) < _HEADER_LEN:
            raise WireFormatError("filter buffer shorter than header")
        fb, bs, ni, mk = struct.unpack(_HEADER_FMT, buf[:_HEADER_LEN])
        params = CuckooParams(fb, bs, ni, mk)
        if len(buf) != params.serialized_len:
            raise WireFormatError(
                f"filter buffer is {len(buf)} bytes, expected {params.serialized_len}"
            )
        nslots = params.capacity
        bits = np.unpackbits(np.frombuffer(buf, np.uint8, offset=_HEADER_LEN))
        bits = bits[: nslots * fb].reshape(nslots, fb).astype(np.uint64)
        weights = np.uint64(1) << np.arange(fb - 1, -1, -1, dtype=np.uint64)
        vals = (bits * weights).sum(axis=1).astype(np.uint32)
        filt = cls(params)
        filt.slots = vals.reshape(ni, bs)
        filt.count = int(np.count_nonzero(filt.slots))
        return filt


@dataclass
class RiskChunk:
    """One broadcastable slice of a day's risk set."""

    payload_id: int
    chunk_id: int
    total_chunks: int
    body: bytes

    def to_bytes(self) -> bytes:
        return struct.pack(
            _CHUNK_HEADER_FMT, self.payload_id, self.chunk_id, self.total_chunks, len(self.body)
        ) + self.body

    def filter(self) -> CuckooFilter:
        return CuckooFilter.from_bytes(self.body)


def parse_chunk(buf: bytes, offset: int = 0) -> tuple[RiskChunk, int]:
    if len(buf) - offset < CHUNK_HEADER_LEN:
        raise WireFormatError("chunk buffer shorter than header")
    payload_id, chunk_id, total, body_len = struct.unpack_from(_CHUNK_HEADER_FMT, buf, offset)
    if total == 0:
        raise WireFormatError("chunk header has total_chunks == 0")
    if chunk_id >= total:
        raise WireFormatError(f"chunk_id {chunk_id} >= total_chunks {total}")
    start = offset + CHUNK_HEADER_LEN
    if len(buf) - start < body_len:
        raise WireFormatError("chunk body truncated")
    return RiskChunk(payload_id, chunk_id, total, bytes(buf[start : start + body_len])), start + body_len


def parse_chunk_stream(buf: bytes, stop_on_padding: bool = True) -> list[RiskChunk]:
    """Parse consecutive chunks; zero padding after the last chunk (as left
    by XOR-combined query responses) terminates the stream."""
    chunks = []
    pos = 0
    while pos + CHUNK_HEADER_LEN <= len(buf):
        if stop_on_padding and not any(buf[pos : pos + CHUNK_HEADER_LEN]):
            break
        chunk, pos = parse_chunk(buf, pos)
        chunks.append(chunk)
    return chunks


def chunk_risk_set(items, params: CuckooParams, payload_id: int, seed: int = 0) -> list[RiskChunk]:
    """Encode a set of 15-byte ids into one or more filter chunks.

    Items are inserted in order; a filter that overflows is sealed and a
    fresh one opened, so every item lands in exactly one chunk. An empty
    set still yields a single chunk holding an empty filter.
    """
    for item in items:
        if len(item) != EPHEMERAL_ID_LEN:
            raise ValueError(f"risk ids must be {EPHEMERAL_ID_LEN} bytes")
    fps, i1s = derive_many(items, params)
    bodies = []
    filt = CuckooFilter(params, seed=seed)
    pos = 0
    n = len(fps)
    while pos < n:
        took = filt.insert_bulk(fps[pos:], i1s[pos:])
        pos += took
        if pos < n:
            if filt.count == 0:
                raise RuntimeError("item does not fit in an empty filter")
            bodies.append(filt.to_bytes())
            state = filt._state
            filt = CuckooFilter(params, seed=seed)
            filt._state = state
    bodies.append(filt.to_bytes())
    total = len(bodies)
    return [RiskChunk(payload_id, i, total, body) for i, body in enumerate(bodies)]
