import numpy as np
import pytest

from epirisk import crypto
from epirisk.backend import (
    Backend,
    RegistrationError,
    RiskDbEntry,
    UploadEnvelope,
    VerificationFailure,
    parse_envelope,
)
from epirisk.core import EncounterRecord, Tiling, derive_ephemeral_id, pack_location
from epirisk.cuckoo import CuckooParams, parse_chunk_stream
from epirisk.devices import BeaconState, DongleState
from epirisk.privacy import dp_params

SMALL_DP = dp_params(1.0, 0.1, 4)
SMALL_CUCKOO = CuckooParams(num_indices=16)


@pytest.fixture
def backend():
    return Backend(
        tiling=Tiling(2, 4), dp=SMALL_DP, cuckoo_params=SMALL_CUCKOO,
        block_cap=1 << 16, seed=11,
    )


def make_pair(backend, loc=None, desc=3):
    loc = loc if loc is not None else pack_location(0, 1, 2)
    rb = backend.register_device("beacon", location=loc, desc=desc)
    rd = backend.register_device("dongle")
    beacon = BeaconState(rb.device_id, rb.secret_key, loc, desc)
    dongle = DongleState(rd.device_id, rd.secret_key, rd.otps, backend.public_key,
                         cuckoo_params=SMALL_CUCKOO)
    return rb, rd, beacon, dongle


def honest_encounter(backend, beacon_reg, start=16, dur=5):
    """A record exactly as an honest pair of synced devices would log it."""
    epoch = start // 15
    eph = derive_ephemeral_id(beacon_reg.secret_key, beacon_reg.location, epoch)
    return EncounterRecord(
        eph, beacon_reg.device_id, beacon_reg.location, beacon_reg.desc,
        t_start_b=start, t_int_b=dur, t_start_d=start, t_int_d=dur, rssi=-60,
    )


class TestRegistration:
    def test_distinct_ids_and_keys(self, backend):
        a = backend.register_device("dongle")
        b = backend.register_device("dongle")
        assert a.device_id != b.device_id
        assert a.secret_key != b.secret_key

    def test_beacon_stores_location_dongle_does_not(self, backend):
        rb = backend.register_device("beacon", location=7, desc=9)
        rd = backend.register_device("dongle", location=7, desc=9)
        assert (rb.location, rb.desc) == (7, 9)
        assert rd.location is None and rd.desc is None
        assert rd.otps and rb.otps is None

    def test_initial_offset_zero(self, backend):
        reg = backend.register_device("beacon", location=0, desc=0)
        assert reg.clock_offsets == [(0, 0)]

    def test_duplicate_id_rejected(self, backend):
        backend.register_device("dongle", device_id=5)
        with pytest.raises(RegistrationError):
            backend.register_device("dongle", device_id=5)


class TestVerifyEncounter:
    def test_honest_encounter_accepted(self, backend):
        rb, rd, _, _ = make_pair(backend)
        enc = honest_encounter(backend, rb)
        out = backend.verify_encounter(enc, rd.device_id)
        assert isinstance(out, RiskDbEntry)
        assert out.T == enc.t_start_d
        assert out.eph == enc.eph

    def test_flipped_eph_byte_rejected(self, backend):
        rb, rd, _, _ = make_pair(backend)
        enc = honest_encounter(backend, rb)
        tampered = bytearray(enc.eph)
        tampered[4] ^= 0x10
        enc.eph = bytes(tampered)
        out = backend.verify_encounter(enc, rd.device_id)
        assert isinstance(out, VerificationFailure) and out.kind == "tampered"

    def test_wrong_location_rejected(self, backend):
        rb, rd, _, _ = make_pair(backend)
        enc = honest_encounter(backend, rb)
        enc.loc ^= 1
        out = backend.verify_encounter(enc, rd.device_id)
        assert isinstance(out, VerificationFailure) and out.kind == "tampered"

    def test_unregistered_beacon_rejected(self, backend):
        rb, rd, _, _ = make_pair(backend)
        enc = honest_encounter(backend, rb)
        enc.beacon_id = 999
        out = backend.verify_encounter(enc, rd.device_id)
        assert isinstance(out, VerificationFailure) and out.kind == "tampered"

    def test_clock_skew_reported_not_accepted(self, backend):
        rb, rd, _, _ = make_pair(backend)
        enc = honest_encounter(backend, rb)
        enc.t_start_d += 40  # dongle claims a much later receipt
        out = backend.verify_encounter(enc, rd.device_id)
        assert isinstance(out, VerificationFailure)
        assert out.kind == "clock" and out.stage == "start"

    def test_interval_mismatch_reported(self, backend):
        rb, rd, _, _ = make_pair(backend)
        enc = honest_encounter(backend, rb, start=15, dur=1)
        enc.t_int_d = 30  # dongle kept hearing it long after the beacon moved on
        out = backend.verify_encounter(enc, rd.device_id)
        assert isinstance(out, VerificationFailure)
        assert out.kind == "clock" and out.stage == "interval"

    def test_one_minute_slack_tolerated(self, backend):
        rb, rd, _, _ = make_pair(backend)
        enc = honest_encounter(backend, rb)
        enc.t_start_d += 1
        assert isinstance(backend.verify_encounter(enc, rd.device_id), RiskDbEntry)


class TestRepair:
    def test_appendix_formula_direct_instantiation(self, backend):
        # beacon crashes at T + tau (tau = 30 > L); the merged record carries
        # first/last receipt on both clocks and the repair appends
        # offset = (t_d + tau) + delta_d - (t_b + 1) effective from that time
        rb, rd, _, _ = make_pair(backend)
        t_b, t_d, tau = 30, 30, 30
        epoch = t_b // 15
        eph = derive_ephemeral_id(rb.secret_key, rb.location, epoch)
        anchor = honest_encounter(backend, rb, start=0, dur=3)
        merged = EncounterRecord(
            eph, rb.device_id, rb.location, rb.desc,
            t_start_b=t_b, t_int_b=1, t_start_d=t_d, t_int_d=tau, rssi=-60,
        )
        for enc in (anchor, merged):
            out = backend.verify_encounter(enc, rd.device_id)
            if isinstance(out, RiskDbEntry):
                backend._accept(out)
                backend._note_dongle_accept(rd.device_id, out.T)
            else:
                backend.pending_reports.append(out)
        assert len(backend.pending_reports) == 1
        outcome = backend.repair_clock_offsets()
        assert outcome.repaired == [("beacon", rb.device_id, (t_d + tau), (t_d + tau) - (t_b + 1))]
        assert not outcome.unresolved

    def test_no_crash_repair_is_noop(self, backend):
        rb, rd, _, _ = make_pair(backend)
        enc = honest_encounter(backend, rb)
        out = backend.verify_encounter(enc, rd.device_id)
        backend._accept(out)
        outcome = backend.repair_clock_offsets()
        assert outcome.repaired == [] and outcome.resolved == []

    def test_tampered_reports_never_repaired(self, backend):
        rb, rd, _, _ = make_pair(backend)
        enc = honest_encounter(backend, rb)
        enc.eph = bytes(15)
        rep = backend.verify_encounter(enc, rd.device_id)
        backend.pending_reports.append(rep)
        outcome = backend.repair_clock_offsets()
        assert outcome.repaired == []
        assert outcome.unresolved == [rep]


class TestTravelPlausibility:
    def _entry(self, backend, loc, T, beacon_id=1, upload_id=0):
        return RiskDbEntry(bytes(15), loc, 0, -60, T, upload_id, beacon_id, T, 1)

    def test_stationary_trace_clean(self, backend):
        loc = pack_location(0, 0, 0)
        entries = [self._entry(backend, loc, t) for t in range(0, 100, 10)]
        assert backend.detect_implausible_travel(entries) == []

    def test_far_tiles_one_minute_apart_flagged(self, backend):
        # ~400 km apart in the flat tile geometry, one minute apart
        a = self._entry(backend, pack_location(0, 0, 0), 10, beacon_id=1)
        b = self._entry(backend, pack_location(0, 44, 0), 11, beacon_id=2)
        anomalies = backend.detect_implausible_travel([a, b])
        assert len(anomalies) == 1
        assert anomalies[0].speed_km_min > 5.0
        assert backend.suspicion[1] == 1 and backend.suspicion[2] == 1

    def test_adjacent_tiles_same_minute_not_flagged(self, backend):
        a = self._entry(backend, pack_location(0, 0, 0), 10)
        b = self._entry(backend, pack_location(0, 0, 1), 10)
        assert backend.detect_implausible_travel([a, b]) == []

    def test_relay_spoof_is_common_element(self, backend):
        # beacon 9's ids are rebroadcast far away; every anomaly involves it
        near = pack_location(0, 0, 0)
        far = pack_location(0, 90, 5)
        uploads = []
        for k in range(4):
            uploads.append([
                self._entry(backend, near, 100 * k + 0, beacon_id=k + 1),
                self._entry(backend, far, 100 * k + 1, beacon_id=9),
                self._entry(backend, near, 100 * k + 2, beacon_id=k + 1),
            ])
        all_anoms = []
        for up in uploads:
            all_anoms += backend.detect_implausible_travel(up)
        assert all_anoms
        assert all(9 in (a.beacon_a, a.beacon_b) for a in all_anoms)
        assert backend.suspicion.most_common(1)[0][0] == 9


def drive_minutes(beacon, dongle, minutes, present=lambda m: True):
    for m in range(1, minutes + 1):
        beacon.tick()
        dongle.tick()
        if present(m):
            dongle.on_advertisement(beacon.broadcast(), rssi=-60)


class TestUploadIngestion:
    def test_delayed_roundtrip_155_records(self, backend):
        rb, rd, beacon, dongle = make_pair(backend)
        # 155 encounters: present for the first 5 minutes of 155 epochs
        drive_minutes(beacon, dongle, 155 * 15 + 20, present=lambda m: m % 15 < 5)
        assert len(dongle.log) >= 155
        rng = np.random.default_rng(0)
        # trim the log to exactly the canonical fixture size
        while len(dongle.log) > 155:
            dongle.log.popitem(last=True)
        env = dongle.prepare_upload("delayed", rd.otps[0], rng, certificate=b"CERT")
        res = backend.ingest_upload(env)
        assert res.status == "accepted"
        assert len(res.accepted) == 155
        assert len(backend.riskdb) == 155

    def test_missing_certificate_rejected(self, backend):
        rb, rd, beacon, dongle = make_pair(backend)
        drive_minutes(beacon, dongle, 40)
        env = dongle.prepare_upload("delayed", rd.otps[0], np.random.default_rng(1))
        res = backend.ingest_upload(env)
        assert res.status == "rejected" and "certificate" in res.reason

    def test_bit_flip_rejects_whole_envelope(self, backend):
        rb, rd, beacon, dongle = make_pair(backend)
        drive_minutes(beacon, dongle, 40)
        env = bytearray(dongle.prepare_upload("delayed", rd.otps[0],
                                              np.random.default_rng(2), certificate=b"C"))
        env[-10] ^= 1
        res = backend.ingest_upload(bytes(env))
        assert res.status == "rejected"
        assert len(backend.riskdb) == 0

    def test_early_mode_escrow_then_release(self, backend):
        rb, rd, beacon, dongle = make_pair(backend)
        drive_minutes(beacon, dongle, 40)
        otp = rd.otps[3]
        env = dongle.prepare_upload("early", otp, np.random.default_rng(3))
        res = backend.ingest_upload(env)
        assert res.status == "escrowed"
        assert backend.riskdb == []  # nothing visible pre-release
        out = backend.release_escrow(rd.device_id, otp, b"CERT")
        assert out.status == "accepted"
        assert len(out.accepted) == len(dongle.log)

    def test_early_release_with_wrong_otp_rejected(self, backend):
        rb, rd, beacon, dongle = make_pair(backend)
        drive_minutes(beacon, dongle, 40)
        env = dongle.prepare_upload("early", rd.otps[3], np.random.default_rng(4))
        backend.ingest_upload(env)
        out = backend.release_escrow(rd.device_id, rd.otps[4], b"CERT")
        assert out.status == "rejected"

    def test_selective_empty_selection_legal(self, backend):
        rb, rd, beacon, dongle = make_pair(backend)
        drive_minutes(beacon, dongle, 40)
        env = dongle.prepare_upload("selective", rd.otps[0], np.random.default_rng(5),
                                    certificate=b"C", selection=[])
        res = backend.ingest_upload(env)
        assert res.status == "accepted"
        assert res.accepted == [] and res.reports == []

    def test_envelope_wire_roundtrip(self):
        env = UploadEnvelope("selective", 42, b"cert!", b"ciphertext-bytes")
        back = parse_envelope(env.to_bytes())
        assert back == env


class TestDailyPipeline:
    def _loaded_backend(self, seed=11):
        backend = Backend(tiling=Tiling(2, 4), dp=SMALL_DP, cuckoo_params=SMALL_CUCKOO,
                          block_cap=1 << 16, seed=seed)
        rb, rd, beacon, dongle = make_pair(backend)
        drive_minutes(beacon, dongle, 120)
        env = dongle.prepare_upload("delayed", rd.otps[0], np.random.default_rng(6),
                                    certificate=b"C")
        backend.ingest_upload(env)
        return backend, rb, dongle

    def test_uploaded_ids_present_in_tile_payload(self):
        backend, rb, dongle = self._loaded_backend()
        daily = backend.assemble_daily_risk(0, served_tiles=[rb.location])
        payload = daily.payloads[rb.location]
        filts = [c.filter() for c in payload.chunks]
        for entry in backend.riskdb:
            assert any(f.contains(entry.eph) for f in filts)

    def test_empty_riskdb_payload_is_pure_junk_and_signed(self, backend):
        loc = pack_location(0, 1, 2)
        daily = backend.assemble_daily_risk(0, served_tiles=[loc])
        payload = daily.payloads[loc]
        total = sum(c.filter().count for c in payload.chunks)
        assert total > 0 or backend.dp.t == 0
        assert crypto.verify(backend.public_key, payload.signature, payload.signed_message())

    def test_signature_covers_chunks(self):
        backend, rb, _ = self._loaded_backend()
        daily = backend.assemble_daily_risk(0, served_tiles=[rb.location])
        payload = daily.payloads[rb.location]
        payload.chunks[0].body = bytearray(payload.chunks[0].body)
        payload.chunks[0].body[20] ^= 1
        payload.chunks[0].body = bytes(payload.chunks[0].body)
        assert not crypto.verify(backend.public_key, payload.signature, payload.signed_message())

    def test_pipeline_deterministic(self):
        b1, rb1, _ = self._loaded_backend(seed=21)
        b2, rb2, _ = self._loaded_backend(seed=21)
        d1 = b1.assemble_daily_risk(0, served_tiles=[rb1.location])
        d2 = b2.assemble_daily_risk(0, served_tiles=[rb2.location])
        assert d1.payloads[rb1.location].to_bytes() == d2.payloads[rb2.location].to_bytes()
        h = rb1.location >> 21
        assert d1.pir_dbs[h].blocks == d2.pir_dbs[h].blocks

    def test_retention_pruning(self):
        backend, rb, _ = self._loaded_backend()
        assert backend.riskdb
        backend.assemble_daily_risk(20, served_tiles=[rb.location])  # far future day
        assert backend.riskdb == []

    def test_junk_indistinguishable_without_keys(self):
        # distinguishing game: a keyless checker observing payload contents
        # sees only fingerprints; the fingerprint populations derived from
        # real ids and from junk ids are statistically indistinguishable
        from scipy import stats

        from epirisk.core import derive_ephemeral_id
        from epirisk.cuckoo import derive_many
        from epirisk.privacy import generate_junk_ids

        rng = np.random.default_rng(9)
        n = 10_000
        real = []
        for _ in range(20):
            sk = rng.bytes(32)
            loc = int(rng.integers(0, 2**32))
            real += [derive_ephemeral_id(sk, loc, e) for e in range(n // 20)]
        junk = generate_junk_ids(n, rng)
        params = CuckooParams()
        fp_real, _ = derive_many(real, params)
        fp_junk, _ = derive_many(junk, params)
        res = stats.ks_2samp(fp_real, fp_junk)
        assert res.pvalue > 0.01


class TestCrypto:
    def test_seal_open_roundtrip(self):
        key = bytes(32)
        box = crypto.seal(key, b"payload", bytes(12), aad=b"hdr")
        assert crypto.open_sealed(key, box, aad=b"hdr") == b"payload"

    def test_open_rejects_tamper(self):
        key = bytes(32)
        box = bytearray(crypto.seal(key, b"payload", bytes(12)))
        box[-1] ^= 1
        with pytest.raises(crypto.AuthenticationError):
            crypto.open_sealed(key, bytes(box))

    def test_aead_overhead_constant(self):
        key = bytes(32)
        for n in (0, 1, 100, 2016 * 38):
            box = crypto.seal(key, bytes(n), bytes(12))
            assert len(box) == n + crypto.AEAD_OVERHEAD

    def test_sign_verify(self):
        rng = np.random.default_rng(10)
        priv, pub = crypto.gen_signing_key(rng)
        sig = crypto.sign(priv, b"message")
        assert crypto.verify(pub, sig, b"message")
        assert not crypto.verify(pub, sig, b"other")

    def test_derived_keys_domain_separated(self):
        secret = b"s" * 16
        assert crypto.derive_key(secret, b"a") != crypto.derive_key(secret, b"b")
