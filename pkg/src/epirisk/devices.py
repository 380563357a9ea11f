"""Device state machines: BLE beacons, dongles, and network beacons.

Dongles are passive: the only operations that ever produce bytes to send
are the user-initiated upload and risk queries; everything else consumes
received packets. Timers advance one minute per tick; a crash freezes the
timer and a reboot resumes from the last epoch-boundary value plus one,
which is what makes crashed devices drift behind real time.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import crypto
from .backend import RETENTION_MINUTES, SignedPayload, UploadEnvelope, parse_extension
from .core import (
    EPOCH_MINUTES,
    BeaconBroadcast,
    EncounterRecord,
    Tiling,
    WireFormatError,
    derive_ephemeral_id,
    epoch_of,
    parse_broadcast,
    saturate_interval,
    unpack_location,
)
from .cuckoo import (
    CuckooFilter,
    CuckooParams,
    RiskChunk,
    fingerprint_and_indices,
    parse_chunk,
    parse_chunk_stream,
)
from .pir import gen_query, query_to_bytes

LOG_CAPACITY = 2016
PACKET_BODY_LEN = 250
PIR_SERVER_CONTEXTS = (b"pir-server-1", b"pir-server-2")


class BeaconState:
    def __init__(self, device_id, secret_key, loc, desc, initial_clock=0,
                 epoch_len=EPOCH_MINUTES):
        self.device_id = device_id
        self.secret_key = secret_key
        self.loc = loc
        self.desc = desc
        self.initial_clock = initial_clock
        self.epoch_len = epoch_len
        self.t = initial_clock
        self.stored_t = initial_clock  # persisted at epoch boundaries
        self.alive = True
        self.epoch = epoch_of(self.t, initial_clock, epoch_len)
        self.current_eph = derive_ephemeral_id(secret_key, loc, self.epoch)

    def tick(self):
        """Advance the local timer one minute; rotate the id on epoch change."""
        if not self.alive:
            return
        self.t += 1
        if (self.t - self.initial_clock) % self.epoch_len == 0:
            self.stored_t = self.t
        epoch = epoch_of(self.t, self.initial_clock, self.epoch_len)
        if epoch != self.epoch:
            self.epoch = epoch
            self.current_eph = derive_ephemeral_id(self.secret_key, self.loc, epoch)

    def broadcast(self) -> BeaconBroadcast | None:
        if not self.alive:
            return None
        return BeaconBroadcast(self.current_eph, self.device_id, self.loc, self.desc, self.t)

    def crash(self):
        self.alive = False

    def reboot(self):
        """Resume with the last persisted timer value plus the boot minute."""
        self.alive = True
        self.t = self.stored_t + 1
        self.epoch = epoch_of(self.t, self.initial_clock, self.epoch_len)
        self.current_eph = derive_ephemeral_id(self.secret_key, self.loc, self.epoch)


@dataclass
class ActiveEncounter:
    eph: bytes
    beacon_id: int
    loc: int
    desc: int
    t_start_b: int
    t_start_d: int
    t_int_b: int = 0
    t_int_d: int = 0
    rssi_sum: float = 0.0
    rssi_n: int = 0


@dataclass
class LogEntry:
    eph: bytes
    beacon_id: int
    loc: int
    desc: int
    t_start_b: int
    t_int_b: int
    t_start_d: int
    t_int_d: int
    rssi_sum: float
    rssi_n: int
    fp: int
    i1: int
    i2: int
    matched: bool = False
    # patient-side (start, interval) pairs captured when this entry matched
    patient_intervals: list = field(default_factory=list)

    @property
    def rssi(self) -> int:
        if self.rssi_n == 0:
            return 0
        return int(round(self.rssi_sum / self.rssi_n))

    def record(self) -> EncounterRecord:
        return EncounterRecord(
            self.eph, self.beacon_id, self.loc, self.desc,
            self.t_start_b, self.t_int_b, self.t_start_d, self.t_int_d, self.rssi,
        )


class DongleState:
    def __init__(self, device_id, secret_key, otps, backend_public_key,
                 initial_clock=0, epoch_len=EPOCH_MINUTES,
                 cuckoo_params: CuckooParams | None = None,
                 notify_threshold: int = 1, log_capacity: int = LOG_CAPACITY):
        self.device_id = device_id
        self.secret_key = secret_key
        self.otps = list(otps)
        self.used_otps: set[bytes] = set()
        self.backend_public_key = backend_public_key
        self.initial_clock = initial_clock
        self.epoch_len = epoch_len
        self.cuckoo_params = cuckoo_params or CuckooParams()
        self.notify_threshold = notify_threshold
        self.log_capacity = log_capacity
        self.t = initial_clock
        self.stored_t = initial_clock
        self.alive = True
        self.active: dict[bytes, ActiveEncounter] = {}
        self.log: OrderedDict[bytes, LogEntry] = OrderedDict()
        self.dropped_packets = 0
        self.rejected_payloads = 0
        self.seen_chunks: dict[tuple[int, int], set[int]] = {}
        self._rx_buffers: dict[tuple[int, int], dict[int, bytes]] = {}
        self._rx_totals: dict[tuple[int, int], int] = {}
        self._probe_cache = None  # (entries, fps, i1s) rebuilt after log changes

    # -- clock handler -----------------------------------------------------

    def tick(self):
        """One minute: seal actives whose epoch has passed, expire old records."""
        if not self.alive:
            return
        self.t += 1
        if (self.t - self.initial_clock) % self.epoch_len == 0:
            self.stored_t = self.t
        if self.active:
            cur_epoch = epoch_of(self.t, self.initial_clock, self.epoch_len)
            to_seal = [
                a for a in self.active.values()
                if epoch_of(a.t_start_d, self.initial_clock, self.epoch_len) < cur_epoch
            ]
            for a in to_seal:
                self._seal(a)
                del self.active[a.eph]
        # entries seal in start order, so expiry only ever hits the front
        while self.log:
            oldest = next(iter(self.log.values()))
            if self.t - oldest.t_start_d <= RETENTION_MINUTES:
                break
            self.log.popitem(last=False)
            self._probe_cache = None

    def _seal(self, a: ActiveEncounter):
        fp, i1, i2 = fingerprint_and_indices(a.eph, self.cuckoo_params)
        entry = LogEntry(
            a.eph, a.beacon_id, a.loc, a.desc,
            a.t_start_b, saturate_interval(a.t_int_b),
            a.t_start_d, saturate_interval(a.t_int_d),
            a.rssi_sum, a.rssi_n, fp, i1, i2,
        )
        self.log[a.eph] = entry
        self._probe_cache = None
        while len(self.log) > self.log_capacity:
            self.log.popitem(last=False)

    # -- encounter handler ---------------------------------------------------

    def on_advertisement(self, pkt, rssi: int = -60) -> bool:
        """Record or update a sighting; one entry per unique ephemeral id."""
        if not self.alive:
            return False
        if isinstance(pkt, (bytes, bytearray)):
            try:
                pkt = parse_broadcast(bytes(pkt))
            except WireFormatError:
                self.dropped_packets += 1
                return False
        now = self.t
        a = self.active.get(pkt.eph)
        if a is not None:
            a.t_int_b = saturate_interval(max(a.t_int_b, pkt.clock - a.t_start_b))
            a.t_int_d = saturate_interval(max(a.t_int_d, now - a.t_start_d))
            a.rssi_sum += rssi
            a.rssi_n += 1
            return True
        entry = self.log.get(pkt.eph)
        if entry is not None:
            # Same id heard again after its entry was persisted (e.g. the
            # beacon rebooted into the same epoch): extend in place.
            entry.t_int_b = saturate_interval(max(entry.t_int_b, pkt.clock - entry.t_start_b))
            entry.t_int_d = saturate_interval(max(entry.t_int_d, now - entry.t_start_d))
            entry.rssi_sum += rssi
            entry.rssi_n += 1
            return True
        self.active[pkt.eph] = ActiveEncounter(
            pkt.eph, pkt.beacon_id, pkt.loc, pkt.desc,
            t_start_b=pkt.clock, t_start_d=now, rssi_sum=float(rssi), rssi_n=1,
        )
        return True

    # -- download handler ------------------------------------------------------

    def on_packet(self, pkt: "RiskPacket") -> bool:
        """Buffer one broadcast packet; process the payload when complete.

        Returns True when this packet completed a payload.
        """
        key = (pkt.loc, pkt.payload_id)
        buf = self._rx_buffers.setdefault(key, {})
        self._rx_totals[key] = pkt.total
        buf[pkt.seq] = pkt.body
        if len(buf) < pkt.total:
            return False
        payload_bytes = b"".join(buf[i] for i in range(pkt.total))
        del self._rx_buffers[key]
        del self._rx_totals[key]
        self.on_payload_bytes(pkt.loc, payload_bytes)
        return True

    def on_payload_bytes(self, loc: int, payload_bytes: bytes) -> bool:
        try:
            payload = parse_signed_payload(loc, payload_bytes)
        except (WireFormatError, IndexError, ValueError):
            self.rejected_payloads += 1
            return False
        return self.on_signed_payload(payload)

    def on_signed_payload(self, payload: SignedPayload) -> bool:
        """Verify the backend signature, then stream the chunks through the
        filter probe; nothing from the payload is retained afterwards."""
        if not crypto.verify(self.backend_public_key, payload.signature,
                             payload.signed_message()):
            self.rejected_payloads += 1
            return False
        ext_lookup = None
        if payload.extended is not None:
            ext_lookup = {}
            for eph, start, interval in payload.extended:
                ext_lookup.setdefault(eph, []).append((start, interval))
        for chunk in payload.chunks:
            self.on_risk_chunk(chunk, payload.loc, ext_lookup)
        return True

    def on_risk_chunk(self, chunk: RiskChunk, loc: int = 0, ext_lookup=None) -> int:
        """Probe every stored record against one chunk's filter; the chunk is
        not kept. Returns the number of newly matched records."""
        filt = CuckooFilter.from_bytes(chunk.body)
        self.seen_chunks.setdefault((loc, chunk.payload_id), set()).add(chunk.chunk_id)
        if not self.log:
            return 0
        if self._probe_cache is None:
            entries = list(self.log.values())
            fps = np.fromiter((e.fp for e in entries), np.uint32, len(entries))
            i1s = np.fromiter((e.i1 for e in entries), np.int64, len(entries))
            self._probe_cache = (entries, fps, i1s)
        entries, fps, i1s = self._probe_cache
        if filt.params == self.cuckoo_params:
            hits = filt.contains_bulk(fps, i1s)
        else:
            hits = np.fromiter(
                (filt.contains(e.eph) for e in entries), np.uint8, len(entries)
            )
        new = 0
        for e, hit in zip(entries, hits):
            if not hit:
                continue
            if not e.matched:
                new += 1
            e.matched = True
            if ext_lookup is not None:
                for iv in ext_lookup.get(e.eph, ()):
                    if iv not in e.patient_intervals:
                        e.patient_intervals.append(iv)
        return new

    def missing_chunks(self, loc: int, payload_id: int, total: int) -> set[int]:
        seen = self.seen_chunks.get((loc, payload_id), set())
        return set(range(total)) - seen

    # -- risk scoring (LED handler reduces to the notify flag) --------------------

    def risk_score(self, overlap_filter: bool = False) -> tuple[int, bool]:
        score = 0
        for e in self.log.values():
            if not e.matched:
                continue
            if overlap_filter:
                if not any(
                    ps <= e.t_start_b <= ps + pi for ps, pi in e.patient_intervals
                ):
                    continue
            score += 1
        return score, score >= self.notify_threshold

    # -- query handler ---------------------------------------------------------

    def visited_tiles(self) -> list[int]:
        """Distinct packed locations across the stored encounter log."""
        seen: dict[int, None] = {}
        for e in self.log.values():
            seen.setdefault(e.loc)
        return list(seen)

    def make_pir_request(self, tiling: Tiling, payload_id: int, otp: bytes,
                         rng: np.random.Generator):
        """One encrypted query pair per distinct visited tile.

        Both shares of a tile's query are encrypted under separate
        OTP-derived session keys, one per server, so the relaying beacon
        and each single server see only ciphertext and one share.
        """
        self._take_otp(otp)
        keys = tuple(crypto.derive_key(otp, ctx) for ctx in PIR_SERVER_CONTEXTS)
        session = PirSession(keys=keys, requests=[])
        for loc in self.visited_tiles():
            h, m, l = unpack_location(loc)
            tile = tiling.tile_index(m, l)
            q1, q2 = gen_query(tile, tiling.domain_size, rng)
            cts = tuple(
                crypto.seal(keys[i], query_to_bytes(h, payload_id, share), rng.bytes(12))
                for i, share in enumerate((q1, q2))
            )
            session.requests.append(PirTileRequest(loc, h, tile, cts))
        return session

    def process_pir_block(self, block: bytes, loc: int, ext_lookup=None) -> int:
        new = 0
        for chunk in parse_chunk_stream(block):
            new += self.on_risk_chunk(chunk, loc, ext_lookup)
        return new

    # -- upload -------------------------------------------------------------------

    def _take_otp(self, otp: bytes):
        if otp not in self.otps or otp in self.used_otps:
            raise crypto.AuthenticationError("OTP invalid or already used")
        self.used_otps.add(otp)

    def prepare_upload(self, mode: str, otp: bytes, rng: np.random.Generator,
                       certificate: bytes = b"", selection=None) -> bytes:
        """Build the encrypted upload envelope for the chosen consent flow.

        delayed/selective encrypt under the dongle-backend shared key with
        the test certificate attached; early encrypts under an OTP-derived
        key and publishes only a commitment to it, decryptable after the
        OTP is released.
        """
        if mode not in ("delayed", "early", "selective"):
            raise ValueError(f"unknown upload mode {mode!r}")
        if mode == "selective" and selection is None:
            raise ValueError("selective upload requires a selection set")
        self._take_otp(otp)
        entries = list(self.log.values())
        if mode == "selective":
            chosen = set(selection)
            entries = [e for e in entries if e.eph in chosen]
        plaintext = b"".join(e.record().to_bytes() for e in entries)
        if mode == "early":
            key = crypto.derive_key(otp, b"early-upload")
            cert = crypto.derive_key(key, b"commitment")
        else:
            key = crypto.derive_key(self.secret_key, b"upload")
            cert = certificate
        env = UploadEnvelope(mode, self.device_id, cert, b"")
        env.ciphertext = crypto.seal(key, plaintext, rng.bytes(12), aad=env.header_bytes())
        return env.to_bytes()

    # -- failure model ---------------------------------------------------------------

    def crash(self):
        self.alive = False
        self.active.clear()  # in-memory list is lost; the flash log survives

    def reboot(self):
        self.alive = True
        self.t = self.stored_t + 1


@dataclass
class PirTileRequest:
    loc: int
    h: int
    tile: int
    ciphertexts: tuple[bytes, bytes]


@dataclass
class PirSession:
    keys: tuple[bytes, bytes]
    requests: list[PirTileRequest]


@dataclass
class RiskPacket:
    loc: int
    payload_id: int
    seq: int
    total: int
    body: bytes


def parse_signed_payload(loc: int, buf: bytes) -> SignedPayload:
    """Wire form is signature || chunk sequence, optionally followed by the
    interval-extension table; the first chunk header says how many chunks
    follow."""
    if len(buf) < crypto.SIGNATURE_LEN:
        raise WireFormatError("payload shorter than its signature")
    sig = bytes(buf[: crypto.SIGNATURE_LEN])
    pos = crypto.SIGNATURE_LEN
    first, pos = parse_chunk(buf, pos)
    chunks = [first]
    for _ in range(first.total_chunks - 1):
        chunk, pos = parse_chunk(buf, pos)
        chunks.append(chunk)
    extended = None
    if pos != len(buf):
        extended, pos = parse_extension(buf, pos)
        if pos != len(buf):
            raise WireFormatError("trailing bytes after extension table")
    return SignedPayload(first.payload_id, loc, chunks, extended, sig)


class NetworkBeaconState:
    """Mains-powered beacon that caches the day's payload for its tile and
    cycles it over fixed-size packets; also relays encrypted query traffic."""

    def __init__(self, loc: int):
        self.loc = loc
        self.payload_id = -1
        self.payload_bytes = b""
        self.cursor = 0

    def set_payload(self, payload: SignedPayload):
        self.payload_id = payload.payload_id
        self.payload_bytes = payload.to_bytes()
        self.cursor = 0

    @property
    def packets_per_cycle(self) -> int:
        return max(1, -(-len(self.payload_bytes) // PACKET_BODY_LEN))

    def next_packet(self) -> RiskPacket | None:
        """The next 250-byte slice, restarting from the first after the last."""
        if not self.payload_bytes:
            return None
        total = self.packets_per_cycle
        seq = self.cursor
        self.cursor = (self.cursor + 1) % total
        body = self.payload_bytes[seq * PACKET_BODY_LEN : (seq + 1) * PACKET_BODY_LEN]
        return RiskPacket(self.loc, self.payload_id, seq, total, body)

    def emit_cycle(self) -> list[RiskPacket]:
        """One full broadcast cycle starting from the current cursor."""
        return [self.next_packet() for _ in range(self.packets_per_cycle)]
