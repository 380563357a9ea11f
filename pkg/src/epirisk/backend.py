"""Backend service: device registration databases, upload ingestion and
verification, clock-offset repair, travel-plausibility checks, and the
daily risk payload pipeline (broadcast chunk sets + PIR databases).

Verification recomputes each reported ephemeral id from the registered
beacon key and checks that both devices' timers map to the same real
time through their known clock offsets. Records that fail the time
checks are kept as inconsistency reports; when straddling evidence from
consistent counterparties exists, the suspect device's offset list gets
a new (effective time, offset) pair and the reports re-verify.
"""

import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import crypto
from .core import (
    ENCOUNTER_LEN,
    EPOCH_MINUTES,
    EncounterRecord,
    Tiling,
    WireFormatError,
    derive_ephemeral_id,
    epoch_of,
    pack_location,
    parse_encounter,
    unpack_location,
)
from .cuckoo import CuckooParams, RiskChunk, chunk_risk_set
from .pir import PirDb, build_pir_db
from .privacy import DpParams, dp_params, generate_junk_ids, sample_junk_count

RETENTION_DAYS = 14
RETENTION_MINUTES = RETENTION_DAYS * 1440
TIME_SLACK = 1  # minute-resolution timers never agree better than this
DEFAULT_SPEED_CAP_KM_MIN = 5.0
OTPS_PER_DONGLE = 32

_MODE_CODES = {"delayed": 0, "early": 1, "selective": 2}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


class RegistrationError(ValueError):
    pass


class UploadRejected(Exception):
    """Whole-envelope failure: bad auth, missing certificate, malformed body."""


@dataclass
class DeviceRegistration:
    device_type: str  # "beacon" | "dongle"
    device_id: int
    secret_key: bytes
    initial_clock: int
    # ordered (effective real time, offset) pairs; starts at (reg time, 0)
    clock_offsets: list[tuple[int, int]]
    location: int | None = None
    desc: int | None = None
    otps: list[bytes] | None = None


@dataclass
class RiskDbEntry:
    eph: bytes
    loc: int
    desc: int
    rssi: int
    T: int  # verified real time of encounter start
    upload_id: int
    beacon_id: int
    t_start_b: int  # patient-observed beacon interval, kept for overlap checks
    t_int_b: int


@dataclass
class VerificationFailure:
    kind: str  # "tampered" | "clock"
    reason: str
    encounter: EncounterRecord
    uploader_id: int
    upload_id: int
    stage: str = ""  # clock failures: "start" | "interval"
    dongle_time: int | None = None  # claimed real time per the dongle's offsets
    beacon_time: int | None = None


@dataclass
class UploadEnvelope:
    mode: str
    dongle_id: int
    certificate: bytes  # early mode carries the escrow key commitment here
    ciphertext: bytes

    def header_bytes(self) -> bytes:
        return struct.pack(">BI", _MODE_CODES[self.mode], self.dongle_id)

    def to_bytes(self) -> bytes:
        return (
            self.header_bytes()
            + struct.pack(">H", len(self.certificate))
            + self.certificate
            + struct.pack(">I", len(self.ciphertext))
            + self.ciphertext
        )


def parse_envelope(buf: bytes) -> UploadEnvelope:
    try:
        mode_code, dongle_id = struct.unpack_from(">BI", buf, 0)
        (cert_len,) = struct.unpack_from(">H", buf, 5)
        cert = bytes(buf[7 : 7 + cert_len])
        (ct_len,) = struct.unpack_from(">I", buf, 7 + cert_len)
        ct = bytes(buf[11 + cert_len : 11 + cert_len + ct_len])
    except struct.error as exc:
        raise WireFormatError("truncated upload envelope") from exc
    if mode_code not in _MODE_NAMES:
        raise WireFormatError(f"unknown upload mode byte {mode_code}")
    if len(buf) != 11 + cert_len + ct_len:
        raise WireFormatError("envelope length does not match headers")
    return UploadEnvelope(_MODE_NAMES[mode_code], dongle_id, cert, ct)


@dataclass
class SignedPayload:
    """A day's risk set for one tile: backend-signed chunk sequence, plus
    the optional per-id interval table used by the overlap filter."""

    payload_id: int
    loc: int
    chunks: list[RiskChunk]
    extended: list[tuple[bytes, int, int]] | None
    signature: bytes

    def chunk_bytes(self) -> bytes:
        return b"".join(c.to_bytes() for c in self.chunks)

    def to_bytes(self) -> bytes:
        return self.signature + self.chunk_bytes() + extension_to_bytes(self.extended)

    def signed_message(self) -> bytes:
        return signed_message(self.payload_id, self.chunk_bytes(), self.extended)


def extension_to_bytes(extended) -> bytes:
    """Optional per-id (start, interval) table appended after the chunks."""
    if extended is None:
        return b""
    out = [struct.pack(">I", len(extended))]
    for eph, start, interval in extended:
        out.append(eph + struct.pack(">IB", start, interval))
    return b"".join(out)


def parse_extension(buf: bytes, pos: int):
    (count,) = struct.unpack_from(">I", buf, pos)
    pos += 4
    extended = []
    for _ in range(count):
        eph = bytes(buf[pos : pos + 15])
        start, interval = struct.unpack_from(">IB", buf, pos + 15)
        extended.append((eph, start, interval))
        pos += 20
    return extended, pos


def signed_message(payload_id: int, chunk_bytes: bytes, extended) -> bytes:
    return struct.pack(">I", payload_id) + chunk_bytes + extension_to_bytes(extended)


@dataclass
class IngestResult:
    status: str  # "accepted" | "escrowed" | "rejected"
    upload_id: int = -1
    accepted: list[RiskDbEntry] = field(default_factory=list)
    reports: list[VerificationFailure] = field(default_factory=list)
    reason: str = ""

    @property
    def n_uploaded(self) -> int:
        return len(self.accepted) + len(self.reports)


@dataclass
class TravelAnomaly:
    upload_id: int
    beacon_a: int
    beacon_b: int
    t_a: int
    t_b: int
    distance_km: float
    speed_km_min: float


@dataclass
class RepairOutcome:
    repaired: list[tuple[str, int, int, int]]  # (device_type, id, C', offset)
    resolved: list[RiskDbEntry]
    unresolved: list[VerificationFailure]


@dataclass
class DailyRisk:
    day: int
    payloads: dict[int, SignedPayload]  # packed loc -> payload
    pir_dbs: dict[int, PirDb]  # H index -> database


def _resolve_device_time(reg: DeviceRegistration, t_local: int) -> tuple[int, int]:
    """Map a device-local timer value to claimed real time using the offset
    whose effective window contains the result."""
    for c_eff, off in reversed(reg.clock_offsets):
        if t_local + off >= c_eff:
            return t_local + off, off
    c_eff, off = reg.clock_offsets[0]
    return t_local + off, off


def _offset_at(reg: DeviceRegistration, real_time: int) -> int:
    for c_eff, off in reversed(reg.clock_offsets):
        if c_eff <= real_time:
            return off
    return reg.clock_offsets[0][1]


class Backend:
    def __init__(
        self,
        tiling: Tiling = Tiling(),
        epoch_len: int = EPOCH_MINUTES,
        dp: DpParams | None = None,
        cuckoo_params: CuckooParams | None = None,
        block_cap: int = 1 << 20,
        seed: int = 0,
        overlap_filter: bool = False,
    ):
        self.tiling = tiling
        self.epoch_len = epoch_len
        self.dp = dp if dp is not None else dp_params(0.5, 0.001)
        self.cuckoo_params = cuckoo_params if cuckoo_params is not None else CuckooParams()
        self.block_cap = block_cap
        self.seed = seed
        self.overlap_filter = overlap_filter
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xB1])))
        self.signing_key, self.public_key = crypto.gen_signing_key(self._rng)
        self.devices: dict[int, DeviceRegistration] = {}
        self._next_id = 1
        self.riskdb: list[RiskDbEntry] = []
        self.pending_reports: list[VerificationFailure] = []
        self.escrow: dict[int, UploadEnvelope] = {}
        self._used_otps: set[bytes] = set()
        self._next_upload_id = 0
        self.suspicion: Counter = Counter()
        self._accepted_min_t_by_beacon: dict[int, int] = {}
        self._accepted_min_t_by_dongle: dict[int, int] = {}
        self._accepted_by_dongle: Counter = Counter()

    # -- registration -----------------------------------------------------

    def register_device(
        self,
        device_type: str,
        location: int | None = None,
        desc: int | None = None,
        initial_clock: int = 0,
        device_id: int | None = None,
    ) -> DeviceRegistration:
        if device_type not in ("beacon", "dongle"):
            raise RegistrationError(f"unknown device type {device_type!r}")
        if device_id is None:
            device_id = self._next_id
        if device_id in self.devices:
            raise RegistrationError(f"device id {device_id} already registered")
        self._next_id = max(self._next_id, device_id) + 1
        reg = DeviceRegistration(
            device_type=device_type,
            device_id=device_id,
            secret_key=self._rng.bytes(32),
            initial_clock=initial_clock,
            clock_offsets=[(initial_clock, 0)],
            location=location if device_type == "beacon" else None,
            desc=desc if device_type == "beacon" else None,
            otps=[self._rng.bytes(16) for _ in range(OTPS_PER_DONGLE)]
            if device_type == "dongle"
            else None,
        )
        self.devices[device_id] = reg
        return reg

    # -- verification ------------------------------------------------------

    def verify_encounter(
        self, enc: EncounterRecord, uploader_id: int, upload_id: int = -1
    ) -> RiskDbEntry | VerificationFailure:
        reg_d = self.devices.get(uploader_id)
        reg_b = self.devices.get(enc.beacon_id)
        if reg_d is None or reg_d.device_type != "dongle":
            return VerificationFailure("tampered", "uploader is not a registered dongle", enc, uploader_id, upload_id)
        if reg_b is None or reg_b.device_type != "beacon":
            return VerificationFailure("tampered", f"beacon {enc.beacon_id} not registered", enc, uploader_id, upload_id)
        if enc.loc != reg_b.location or enc.desc != reg_b.desc:
            return VerificationFailure("tampered", "location/descriptor differ from registration", enc, uploader_id, upload_id)

        # The id must be the one this beacon derives for the epoch its own
        # timer was in at first receipt; offsets play no role here since the
        # beacon keys ids off its local timer.
        epoch = epoch_of(enc.t_start_b, reg_b.initial_clock, self.epoch_len)
        expected = derive_ephemeral_id(reg_b.secret_key, reg_b.location, epoch)
        if expected != enc.eph:
            return VerificationFailure("tampered", "ephemeral id does not match beacon key", enc, uploader_id, upload_id)

        t_d_start, _ = _resolve_device_time(reg_d, enc.t_start_d)
        off_b = _offset_at(reg_b, t_d_start)
        t_b_start = enc.t_start_b + off_b
        if abs(t_b_start - t_d_start) > TIME_SLACK:
            return VerificationFailure(
                "clock", "start timers disagree on real time", enc, uploader_id, upload_id,
                stage="start", dongle_time=t_d_start, beacon_time=t_b_start,
            )

        t_d_end, _ = _resolve_device_time(reg_d, enc.t_start_d + enc.t_int_d)
        off_b_end = _offset_at(reg_b, t_d_end)
        t_b_end = enc.t_start_b + enc.t_int_b + off_b_end
        if abs(t_b_end - t_d_end) > TIME_SLACK:
            return VerificationFailure(
                "clock", "observed intervals disagree", enc, uploader_id, upload_id,
                stage="interval", dongle_time=t_d_end, beacon_time=t_b_end,
            )

        return RiskDbEntry(
            eph=enc.eph,
            loc=enc.loc,
            desc=enc.desc,
            rssi=enc.rssi,
            T=t_d_start,
            upload_id=upload_id,
            beacon_id=enc.beacon_id,
            t_start_b=enc.t_start_b,
            t_int_b=enc.t_int_b,
        )

    def _accept(self, entry: RiskDbEntry):
        self.riskdb.append(entry)
        b = entry.beacon_id
        self._accepted_min_t_by_beacon[b] = min(
            self._accepted_min_t_by_beacon.get(b, entry.T), entry.T
        )

    def _note_dongle_accept(self, dongle_id: int, t: int):
        self._accepted_by_dongle[dongle_id] += 1
        self._accepted_min_t_by_dongle[dongle_id] = min(
            self._accepted_min_t_by_dongle.get(dongle_id, t), t
        )

    # -- upload ingestion ---------------------------------------------------

    def ingest_upload(self, envelope_bytes: bytes, key_release: bytes | None = None) -> IngestResult:
        env = parse_envelope(envelope_bytes)
        reg = self.devices.get(env.dongle_id)
        if reg is None or reg.device_type != "dongle":
            return IngestResult("rejected", reason="unknown dongle")

        if env.mode == "early":
            if key_release is None:
                self.escrow[env.dongle_id] = env
                return IngestResult("escrowed")
            if key_release not in (reg.otps or []):
                return IngestResult("rejected", reason="key release is not a valid OTP")
            if key_release in self._used_otps:
                return IngestResult("rejected", reason="OTP already used")
            key = crypto.derive_key(key_release, b"early-upload")
            if crypto.derive_key(key, b"commitment")[: len(env.certificate)] != env.certificate:
                return IngestResult("rejected", reason="key does not match escrow commitment")
            self._used_otps.add(key_release)
        else:
            if not env.certificate:
                return IngestResult("rejected", reason="missing test certificate")
            key = crypto.derive_key(reg.secret_key, b"upload")

        try:
            plaintext = crypto.open_sealed(key, env.ciphertext, aad=env.header_bytes())
        except crypto.AuthenticationError:
            return IngestResult("rejected", reason="payload failed authentication")
        if len(plaintext) % ENCOUNTER_LEN:
            return IngestResult("rejected", reason="payload is not a whole number of records")

        upload_id = self._next_upload_id
        self._next_upload_id += 1
        result = IngestResult("accepted", upload_id=upload_id)
        for i in range(0, len(plaintext), ENCOUNTER_LEN):
            enc = parse_encounter(plaintext[i : i + ENCOUNTER_LEN])
            out = self.verify_encounter(enc, env.dongle_id, upload_id)
            if isinstance(out, RiskDbEntry):
                self._accept(out)
                self._note_dongle_accept(env.dongle_id, out.T)
                result.accepted.append(out)
            else:
                self.pending_reports.append(out)
                result.reports.append(out)
        return result

    def release_escrow(self, dongle_id: int, otp: bytes, certificate: bytes) -> IngestResult:
        env = self.escrow.pop(dongle_id, None)
        if env is None:
            return IngestResult("rejected", reason="no escrowed upload for dongle")
        if not certificate:
            return IngestResult("rejected", reason="missing test certificate")
        return self.ingest_upload(env.to_bytes(), key_release=otp)

    # -- clock repair --------------------------------------------------------

    def repair_clock_offsets(self, max_passes: int = 4) -> RepairOutcome:
        """Attribute pending clock inconsistencies to a crashed device and
        append the implied (effective time, offset) pair, then re-verify.

        Beacon restarts show up either inside one record (the dongle kept
        hearing an id long after the beacon's own interval stopped growing)
        or as post-restart records whose start times disagree; a dongle
        restart makes starts disagree the same way across several beacons.
        A crashed timer is behind real time, so a genuine restart always
        implies a larger offset than the current one; shifts the other way
        are left unresolved for the operator.
        """
        repaired: list[tuple[str, int, int, int]] = []
        resolved: list[RiskDbEntry] = []
        for _ in range(max_passes):
            new_offsets = self._repair_pass()
            repaired.extend(new_offsets)
            unresolved: list[VerificationFailure] = []
            for rep in self.pending_reports:
                out = self.verify_encounter(rep.encounter, rep.uploader_id, rep.upload_id)
                if isinstance(out, RiskDbEntry):
                    self._accept(out)
                    self._note_dongle_accept(rep.uploader_id, out.T)
                    resolved.append(out)
                else:
                    unresolved.append(rep)
            self.pending_reports = unresolved
            if not new_offsets or not unresolved:
                break
        return RepairOutcome(repaired, resolved, self.pending_reports)

    def _repair_pass(self) -> list[tuple[str, int, int, int]]:
        # device key -> list of candidate (effective real time, offset)
        candidates: dict[tuple[str, int], list[tuple[int, int]]] = {}

        # Merged-record beacon restarts: start times agreed, so the uploader
        # was consistent pre-crash; the interval gap locates the restart and
        # the record's last receipt gives the new offset directly.
        for rep in self.pending_reports:
            if rep.kind != "clock" or rep.stage != "interval":
                continue
            enc = rep.encounter
            reg_b = self.devices.get(enc.beacon_id)
            reg_d = self.devices.get(rep.uploader_id)
            if reg_b is None or reg_d is None:
                continue
            if enc.t_int_d - enc.t_int_b <= self.epoch_len:
                continue
            t_d_end, _ = _resolve_device_time(reg_d, enc.t_start_d + enc.t_int_d)
            new_off = t_d_end - (enc.t_start_b + enc.t_int_b)
            if new_off - _offset_at(reg_b, t_d_end) > 0:
                candidates.setdefault(("beacon", enc.beacon_id), []).append((t_d_end, new_off))

        # Start-time failures, grouped per uploader.
        by_uploader: dict[int, list[VerificationFailure]] = {}
        for rep in self.pending_reports:
            if rep.kind == "clock" and rep.stage == "start":
                by_uploader.setdefault(rep.uploader_id, []).append(rep)

        for uploader, reps in by_uploader.items():
            reg_d = self.devices.get(uploader)
            if reg_d is None or self._accepted_by_dongle.get(uploader, 0) == 0:
                continue
            implied = []  # (beacon-side real time, implied dongle offset, report)
            for rep in reps:
                reg_b = self.devices.get(rep.encounter.beacon_id)
                if reg_b is None:
                    continue
                t_b, _ = _resolve_device_time(reg_b, rep.encounter.t_start_b)
                implied.append((t_b, t_b - rep.encounter.t_start_d, rep))
            if not implied:
                continue
            beacons = {r.encounter.beacon_id for _, _, r in implied}
            offsets = [off for _, off, _ in implied]
            cur_off = reg_d.clock_offsets[-1][1]
            earliest = min(t for t, _, _ in implied)

            if (
                len(beacons) >= 2
                and max(offsets) - min(offsets) <= 2 * TIME_SLACK
                and min(offsets) - cur_off > self.epoch_len
                and self._accepted_min_t_by_dongle.get(uploader, 1 << 62) < earliest
            ):
                t_b, off, _ = min(implied, key=lambda x: x[0])
                candidates.setdefault(("dongle", uploader), []).append((t_b, off))
                continue

            # Otherwise suspect each beacon individually: needs an accepted
            # (pre-crash) anchor for the beacon and a stale-forward shift.
            for t_b, _, rep in implied:
                enc = rep.encounter
                reg_b = self.devices[enc.beacon_id]
                t_d, _ = _resolve_device_time(reg_d, enc.t_start_d)
                new_off = t_d - enc.t_start_b
                anchor = self._accepted_min_t_by_beacon.get(enc.beacon_id)
                if (
                    new_off - _offset_at(reg_b, t_d) > self.epoch_len
                    and anchor is not None
                    and anchor < t_d
                ):
                    candidates.setdefault(("beacon", enc.beacon_id), []).append((t_d, new_off))

        applied = []
        for (dtype, dev_id), cands in candidates.items():
            reg = self.devices[dev_id]
            c_eff, off = min(cands, key=lambda x: x[0])
            if c_eff > reg.clock_offsets[-1][0]:
                reg.clock_offsets.append((c_eff, off))
                applied.append((dtype, dev_id, c_eff, off))
        return applied

    # -- anomaly detection ----------------------------------------------------

    def detect_implausible_travel(
        self, entries: list[RiskDbEntry], speed_cap: float = DEFAULT_SPEED_CAP_KM_MIN
    ) -> list[TravelAnomaly]:
        """Flag consecutive verified entries whose implied ground speed
        exceeds the cap; both endpoints accumulate suspicion for review."""
        anomalies = []
        ordered = sorted(entries, key=lambda e: e.T)
        for a, b in zip(ordered, ordered[1:]):
            if a.loc == b.loc:
                continue
            dist = self.tiling.distance_km(a.loc, b.loc)
            dt = max(b.T - a.T, 1)
            speed = dist / dt
            if speed > speed_cap:
                anomalies.append(
                    TravelAnomaly(a.upload_id, a.beacon_id, b.beacon_id, a.T, b.T, dist, speed)
                )
                self.suspicion[a.beacon_id] += 1
                self.suspicion[b.beacon_id] += 1
        return anomalies

    # -- daily pipeline ---------------------------------------------------------

    def prune_riskdb(self, day: int):
        cutoff = (day + 1) * 1440 - RETENTION_MINUTES
        self.riskdb = [e for e in self.riskdb if e.T >= cutoff]

    def assemble_daily_risk(
        self,
        day: int,
        served_tiles: list[int],
        h_regions: list[int] | None = None,
        build_pir: bool = True,
    ) -> DailyRisk:
        """Produce the day's signed per-tile broadcast payloads and, per
        H-region, the PIR database over the same risk entries.

        Deterministic in (riskdb contents, day, backend seed): all junk is
        drawn from per-(day, tile) child streams of the backend seed.
        """
        self.prune_riskdb(day)
        payload_id = day & 0xFFFFFFFF

        by_loc: dict[int, list[RiskDbEntry]] = {}
        for e in self.riskdb:
            by_loc.setdefault(e.loc, []).append(e)

        payloads: dict[int, SignedPayload] = {}
        for loc in served_tiles:
            entries = by_loc.get(loc, [])
            h, m, l = unpack_location(loc)
            ss = np.random.SeedSequence(
                [self.seed & 0xFFFFFFFF, payload_id, h, m, l, 0xB0]
            )
            rng = np.random.Generator(np.random.PCG64(ss))
            n_junk = sample_junk_count(self.dp, rng)
            junk = generate_junk_ids(n_junk, rng)
            ids = [e.eph for e in entries] + junk
            chunk_seed = int(ss.generate_state(1, np.uint64)[0])
            chunks = chunk_risk_set(ids, self.cuckoo_params, payload_id, seed=chunk_seed)
            extended = None
            if self.overlap_filter:
                extended = [(e.eph, e.t_start_b, e.t_int_b) for e in entries]
                # junk gets fabricated intervals so the table length also
                # follows the noised count
                day_start = day * 1440
                starts = rng.integers(day_start, day_start + 1440, len(junk))
                ints = rng.integers(1, self.epoch_len + 1, len(junk))
                extended += [(j, int(s), int(i)) for j, s, i in zip(junk, starts, ints)]
            body = b"".join(c.to_bytes() for c in chunks)
            sig = crypto.sign(self.signing_key, signed_message(payload_id, body, extended))
            payloads[loc] = SignedPayload(payload_id, loc, chunks, extended, sig)

        pir_dbs: dict[int, PirDb] = {}
        if build_pir:
            if h_regions is None:
                h_regions = sorted({unpack_location(loc)[0] for loc in list(by_loc) + list(served_tiles)})
            for h in h_regions:
                entries_by_tile: dict[int, list[bytes]] = {}
                for loc, entries in by_loc.items():
                    eh, m, l = unpack_location(loc)
                    if eh != h:
                        continue
                    idx = self.tiling.tile_index(m, l)
                    entries_by_tile.setdefault(idx, []).extend(e.eph for e in entries)
                db_seed = int(
                    np.random.SeedSequence(
                        [self.seed & 0xFFFFFFFF, payload_id, h, 0xD1]
                    ).generate_state(1, np.uint64)[0]
                )
                pir_dbs[h] = build_pir_db(
                    entries_by_tile,
                    self.tiling,
                    self.block_cap,
                    self.dp,
                    self.cuckoo_params,
                    payload_id=payload_id,
                    h=h,
                    seed=db_seed,
                )
        return DailyRisk(day, payloads, pir_dbs)
