"""Shared primitives: device clocks, hierarchical location ids, ephemeral id
derivation, and the binary wire formats used on the air and in uploads.

All multi-byte wire fields are big-endian. The two record formats are fixed
size: an advertisement is exactly 31 bytes, a stored encounter exactly 38.
"""

import hashlib
import struct
from dataclasses import dataclass

EPOCH_MINUTES = 15
EPHEMERAL_ID_LEN = 15
SECRET_KEY_LEN = 32

# Bit widths of the three tile levels inside a packed 32-bit location id.
H_BITS = 11
M_BITS = 7
L_BITS = 14

BROADCAST_LEN = 31
ENCOUNTER_LEN = 38

_BROADCAST_FMT = ">15sIIII"
_ENCOUNTER_FMT = ">15sIIIIBIBb"


class WireFormatError(ValueError):
    """Raised when a buffer cannot be parsed as the expected record."""


class TileRangeError(ValueError):
    """Raised when a tile component exceeds its field width."""


class ClockError(ValueError):
    """Raised when a device timer is behind its initial clock."""


def derive_ephemeral_id(sk: bytes, loc: int, epoch: int) -> bytes:
    """Derive the 15-byte per-epoch identifier a beacon broadcasts.

    The input is the canonical 40-byte serialization
    ``sk (32) || loc (4, BE) || epoch (4, BE)``; the id is the least
    significant 15 bytes of its SHA-256 digest.
    """
    if len(sk) != SECRET_KEY_LEN:
        raise ValueError(f"secret key must be {SECRET_KEY_LEN} bytes, got {len(sk)}")
    msg = sk + struct.pack(">II", loc & 0xFFFFFFFF, epoch & 0xFFFFFFFF)
    return hashlib.sha256(msg).digest()[-EPHEMERAL_ID_LEN:]


@dataclass
class DeviceClock:
    """Minute-resolution device timer.

    `initial` is the clock value handed out at registration (synced to real
    time), `t` the current timer, `epoch_len` the id rotation period.
    """

    initial: int
    t: int
    epoch_len: int = EPOCH_MINUTES

    def epoch(self) -> int:
        return epoch_of(self.t, self.initial, self.epoch_len)


def epoch_of(t: int, initial: int, epoch_len: int = EPOCH_MINUTES) -> int:
    """Number of whole epochs elapsed on a device timer since its start."""
    if t < initial:
        raise ClockError(f"timer {t} behind initial clock {initial}")
    return (t - initial) // epoch_len


def pack_location(h: int, m: int, l: int) -> int:
    """Pack (H, M, L) tile indices into one 32-bit location id."""
    if not (0 <= h < (1 << H_BITS)):
        raise TileRangeError(f"H index {h} out of range [0, {1 << H_BITS})")
    if not (0 <= m < (1 << M_BITS)):
        raise TileRangeError(f"M index {m} out of range [0, {1 << M_BITS})")
    if not (0 <= l < (1 << L_BITS)):
        raise TileRangeError(f"L index {l} out of range [0, {1 << L_BITS})")
    return (h << (M_BITS + L_BITS)) | (m << L_BITS) | l


def unpack_location(loc: int) -> tuple[int, int, int]:
    """Inverse of :func:`pack_location`."""
    if not (0 <= loc < (1 << 32)):
        raise TileRangeError(f"location id {loc} is not a 32-bit value")
    h = loc >> (M_BITS + L_BITS)
    m = (loc >> L_BITS) & ((1 << M_BITS) - 1)
    l = loc & ((1 << L_BITS) - 1)
    return h, m, l


@dataclass(frozen=True)
class Tiling:
    """Geometry of the tile hierarchy used for grouping and querying.

    The wire format always packs indices at the full 11/7/14 widths;
    a simulation may restrict itself to a smaller effective domain so
    that query vectors stay proportionate to the deployment. Tiles are
    abstract flat squares: L-tiles are 1x1 km laid out row-major (100
    per row) inside a 100x100 km M-tile, M-tiles row-major (10 per row)
    inside an H-region.
    """

    m_bits: int = M_BITS
    l_bits: int = L_BITS

    def __post_init__(self):
        if not (0 <= self.m_bits <= M_BITS):
            raise TileRangeError(f"m_bits {self.m_bits} out of range")
        if not (0 <= self.l_bits <= L_BITS):
            raise TileRangeError(f"l_bits {self.l_bits} out of range")

    @property
    def domain_size(self) -> int:
        """Number of addressable L-tiles per H-region (query vector length)."""
        return 1 << (self.m_bits + self.l_bits)

    def tile_index(self, m: int, l: int) -> int:
        """Flatten (M, L) into the per-H-region query domain."""
        if not (0 <= m < (1 << self.m_bits)):
            raise TileRangeError(f"M index {m} exceeds tiling domain")
        if not (0 <= l < (1 << self.l_bits)):
            raise TileRangeError(f"L index {l} exceeds tiling domain")
        return (m << self.l_bits) | l

    def split_index(self, idx: int) -> tuple[int, int]:
        return idx >> self.l_bits, idx & ((1 << self.l_bits) - 1)

    def centroid_km(self, loc: int) -> tuple[float, float]:
        """Abstract planar centroid of an L-tile, in km."""
        h, m, l = unpack_location(loc)
        lx, ly = l % 100, l // 100
        mx, my = m % 10, m // 10
        hx, hy = h % 60, h // 60
        return (
            hx * 1000.0 + mx * 100.0 + lx + 0.5,
            hy * 1000.0 + my * 100.0 + ly + 0.5,
        )

    def distance_km(self, loc_a: int, loc_b: int) -> float:
        xa, ya = self.centroid_km(loc_a)
        xb, yb = self.centroid_km(loc_b)
        return ((xa - xb) ** 2 + (ya - yb) ** 2) ** 0.5


@dataclass
class BeaconBroadcast:
    """One advertisement: ephemeral id plus the beacon's static fields."""

    eph: bytes
    beacon_id: int
    loc: int
    desc: int
    clock: int

    def to_bytes(self) -> bytes:
        return struct.pack(
            _BROADCAST_FMT, self.eph, self.beacon_id, self.loc, self.desc, self.clock
        )


def parse_broadcast(buf: bytes) -> BeaconBroadcast:
    if len(buf) != BROADCAST_LEN:
        raise WireFormatError(f"broadcast must be {BROADCAST_LEN} bytes, got {len(buf)}")
    eph, b, loc, desc, clock = struct.unpack(_BROADCAST_FMT, buf)
    return BeaconBroadcast(eph, b, loc, desc, clock)


@dataclass
class EncounterRecord:
    """A persisted sighting of one ephemeral id.

    `t_start_b`/`t_start_d` are the beacon and dongle timers at first
    receipt; the interval fields count further minutes the id was heard
    and saturate at 255. `rssi` is the rounded mean signal strength.
    """

    eph: bytes
    beacon_id: int
    loc: int
    desc: int
    t_start_b: int
    t_int_b: int
    t_start_d: int
    t_int_d: int
    rssi: int

    def to_bytes(self) -> bytes:
        return struct.pack(
            _ENCOUNTER_FMT,
            self.eph,
            self.beacon_id,
            self.loc,
            self.desc,
            self.t_start_b,
            self.t_int_b,
            self.t_start_d,
            self.t_int_d,
            self.rssi,
        )


def parse_encounter(buf: bytes) -> EncounterRecord:
    if len(buf) != ENCOUNTER_LEN:
        raise WireFormatError(f"encounter must be {ENCOUNTER_LEN} bytes, got {len(buf)}")
    return EncounterRecord(*struct.unpack(_ENCOUNTER_FMT, buf))


def saturate_interval(minutes: int) -> int:
    """Clamp an observed duration to the 8-bit interval field."""
    return max(0, min(255, minutes))
