"""Deterministic minute-stepped simulation harness.

Wires beacons, dongles, network beacons and the backend together over a
lossy reception channel, drives uploads and the daily risk pipeline from
a declarative scenario, and reports byte/match/repair metrics. A second,
independent implementation of the exposure rule (`brute_force_exposures`)
intersects the mobility traces directly and serves as the ground-truth
oracle for loss-free runs.

Scenario files are JSON; see the schema walk-through in the README and
`scenarios/pilot.json` for a complete example.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import crypto
from .backend import Backend
from .core import EPOCH_MINUTES, Tiling, pack_location
from .cuckoo import CuckooParams
from .devices import BeaconState, DongleState, NetworkBeaconState
from .pir import CapacityError, PirServer, combine, parse_query, parse_response, response_to_bytes
from .privacy import dp_params

MAX_BROADCAST_CYCLES = 64
DEFAULT_RSSI = -60


class ScenarioError(ValueError):
    """Scenario file fails validation; the message names the element."""


@dataclass
class BeaconSpec:
    name: str
    tile: tuple[int, int, int]
    desc: int = 0
    crashes: list[tuple[int, int]] = field(default_factory=list)  # (minute, down)


@dataclass
class UserSpec:
    name: str
    trace: list[tuple[int, str | None]]  # (from-minute, beacon name or None)
    crashes: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class InfectionSpec:
    user: str
    test_day: int
    mode: str = "delayed"
    selection: list[str] | None = None  # beacon names, selective mode only
    release_day: int | None = None  # early mode; defaults to test_day + 1


@dataclass
class Scenario:
    days: int
    beacons: list[BeaconSpec]
    users: list[UserSpec]
    infections: list[InfectionSpec] = field(default_factory=list)
    network_tiles: list[tuple[int, int, int]] | None = None  # None: serve all beacon tiles
    name: str = "scenario"
    epoch_minutes: int = EPOCH_MINUTES
    tiling: Tiling = field(default_factory=Tiling)
    dp_epsilon: float = 0.5
    dp_delta: float = 0.001
    dp_sensitivity: int = 2016
    cuckoo: CuckooParams = field(default_factory=CuckooParams)
    block_cap: int = 1 << 20
    reception_probability: float = 1.0
    notify_threshold: int = 1
    overlap_filter: bool = False
    pir_enabled: bool = False

    @property
    def total_minutes(self) -> int:
        return self.days * 1440

    def beacon_index(self, name: str) -> int:
        return self._beacon_ix[name]

    def validate(self):
        if self.days < 1:
            raise ScenarioError("days must be >= 1")
        if not (0.0 <= self.reception_probability <= 1.0):
            raise ScenarioError("channel.reception_probability must be in [0, 1]")
        names = [b.name for b in self.beacons]
        if len(set(names)) != len(names):
            raise ScenarioError("duplicate beacon names")
        self._beacon_ix = {n: i for i, n in enumerate(names)}
        unames = [u.name for u in self.users]
        if len(set(unames)) != len(unames):
            raise ScenarioError("duplicate user names")
        user_ix = {n: i for i, n in enumerate(unames)}
        for b in self.beacons:
            try:
                pack_location(*b.tile)
            except ValueError as exc:
                raise ScenarioError(f"beacon {b.name!r}: {exc}") from exc
            h, m, l = b.tile
            if m >= (1 << self.tiling.m_bits) or l >= (1 << self.tiling.l_bits):
                raise ScenarioError(
                    f"beacon {b.name!r}: tile {b.tile} outside the scenario tiling domain"
                )
        for u in self.users:
            last = -1
            for minute, where in u.trace:
                if not (0 <= minute <= self.total_minutes):
                    raise ScenarioError(f"user {u.name!r}: trace minute {minute} out of range")
                if minute <= last:
                    raise ScenarioError(f"user {u.name!r}: trace minutes not strictly increasing")
                last = minute
                if where is not None and where not in self._beacon_ix:
                    raise ScenarioError(f"user {u.name!r}: trace references undeclared beacon {where!r}")
        for inf in self.infections:
            if inf.user not in user_ix:
                raise ScenarioError(f"infection references undeclared user {inf.user!r}")
            if not (0 <= inf.test_day < self.days):
                raise ScenarioError(f"infection for {inf.user!r}: test_day {inf.test_day} out of range")
            if inf.mode not in ("delayed", "early", "selective"):
                raise ScenarioError(f"infection for {inf.user!r}: unknown mode {inf.mode!r}")
            if inf.mode == "selective":
                if inf.selection is None:
                    raise ScenarioError(f"infection for {inf.user!r}: selective mode needs a selection")
                for name in inf.selection:
                    if name not in self._beacon_ix:
                        raise ScenarioError(
                            f"infection for {inf.user!r}: selection names undeclared beacon {name!r}"
                        )
            if inf.mode == "early":
                rel = inf.release_day if inf.release_day is not None else inf.test_day + 1
                if rel < inf.test_day:
                    raise ScenarioError(f"infection for {inf.user!r}: release_day before test_day")
        if self.network_tiles is not None:
            for t in self.network_tiles:
                try:
                    pack_location(*t)
                except ValueError as exc:
                    raise ScenarioError(f"network beacon tile {t}: {exc}") from exc
        return self


def scenario_from_dict(d: dict) -> Scenario:
    try:
        beacons = [
            BeaconSpec(
                name=b["name"],
                tile=tuple(b["tile"]),
                desc=int(b.get("descriptor", 0)),
                crashes=[(int(c["at_minute"]), int(c["down_minutes"])) for c in b.get("crashes", [])],
            )
            for b in d.get("beacons", [])
        ]
        users = [
            UserSpec(
                name=u["name"],
                trace=[(int(m), w) for m, w in u["trace"]],
                crashes=[(int(c["at_minute"]), int(c["down_minutes"])) for c in u.get("crashes", [])],
            )
            for u in d.get("users", [])
        ]
        infections = [
            InfectionSpec(
                user=i["user"],
                test_day=int(i["test_day"]),
                mode=i.get("mode", "delayed"),
                selection=i.get("selection"),
                release_day=i.get("release_day"),
            )
            for i in d.get("infections", [])
        ]
        tiling_d = d.get("tiling", {})
        tiling = Tiling(m_bits=int(tiling_d.get("m_bits", 7)), l_bits=int(tiling_d.get("l_bits", 14)))
        dp_d = d.get("dp", {})
        cuckoo_d = d.get("cuckoo", {})
        chan = d.get("channel", {})
        scen = Scenario(
            days=int(d["days"]),
            beacons=beacons,
            users=users,
            infections=infections,
            network_tiles=[tuple(t) for t in d["network_tiles"]] if "network_tiles" in d else None,
            name=d.get("name", "scenario"),
            epoch_minutes=int(d.get("epoch_minutes", EPOCH_MINUTES)),
            tiling=tiling,
            dp_epsilon=float(dp_d.get("epsilon", 0.5)),
            dp_delta=float(dp_d.get("delta", 0.001)),
            dp_sensitivity=int(dp_d.get("sensitivity", 2016)),
            cuckoo=CuckooParams(
                fingerprint_bits=int(cuckoo_d.get("fingerprint_bits", 27)),
                bucket_size=int(cuckoo_d.get("bucket_size", 4)),
                num_indices=int(cuckoo_d.get("num_indices", 128)),
                max_kicks=int(cuckoo_d.get("max_kicks", 500)),
            ),
            block_cap=int(d.get("block_cap", 1 << 20)),
            reception_probability=float(chan.get("reception_probability", 1.0)),
            notify_threshold=int(d.get("notify_threshold", 1)),
            overlap_filter=bool(d.get("overlap_filter", False)),
            pir_enabled=bool(d.get("pir", {}).get("enabled", False)),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"scenario structure invalid: {exc!r}") from exc
    return scen.validate()


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(d)


@dataclass
class Metrics:
    days: int
    unique_eph_generated: int = 0
    eph_captured: int = 0
    uploads: int = 0
    uploaded_records: int = 0
    accepted_records: int = 0
    resolved_after_repair: int = 0
    rejected_tampered: int = 0
    unresolved_inconsistent: int = 0
    envelope_rejections: int = 0
    repair_events: int = 0
    retransmit_cycles: int = 0
    broadcast_bytes_by_day: dict = field(default_factory=dict)
    payload_sizes: list = field(default_factory=list)  # (day, packed loc, bytes)
    payload_hashes: list = field(default_factory=list)  # (day, packed loc, sha256 hex)
    true_matches: dict = field(default_factory=dict)  # user -> set[(beacon, epoch)]
    false_matches: dict = field(default_factory=dict)  # user -> set[eph hex]
    scores: dict = field(default_factory=dict)  # user -> (score, notify)
    query_stats: dict = field(default_factory=dict)  # user -> dict
    matches_per_upload: dict = field(default_factory=dict)  # upload key -> other users matched
    events: list = field(default_factory=list)

    def check_conservation(self):
        total = (
            self.accepted_records
            + self.resolved_after_repair
            + self.rejected_tampered
            + self.unresolved_inconsistent
        )
        if total != self.uploaded_records:
            raise AssertionError(
                f"record conservation broken: {total} classified vs {self.uploaded_records} uploaded"
            )

    @property
    def true_match_set(self) -> set:
        out = set()
        for user, pairs in self.true_matches.items():
            out |= {(user, b, e) for b, e in pairs}
        return out

    def to_csv(self) -> str:
        lines = ["day,metric,value"]
        for day in range(self.days):
            lines.append(f"{day},broadcast_payload_bytes,{self.broadcast_bytes_by_day.get(day, 0)}")
        for day, loc, size in self.payload_sizes:
            lines.append(f"{day},payload_bytes_tile_{loc:08x},{size}")
        summary = [
            ("unique_eph_generated", self.unique_eph_generated),
            ("eph_captured", self.eph_captured),
            ("uploads", self.uploads),
            ("uploaded_records", self.uploaded_records),
            ("accepted_records", self.accepted_records),
            ("resolved_after_repair", self.resolved_after_repair),
            ("rejected_tampered", self.rejected_tampered),
            ("unresolved_inconsistent", self.unresolved_inconsistent),
            ("envelope_rejections", self.envelope_rejections),
            ("repair_events", self.repair_events),
            ("retransmit_cycles", self.retransmit_cycles),
            ("true_matches_total", sum(len(v) for v in self.true_matches.values())),
            ("false_matches_total", sum(len(v) for v in self.false_matches.values())),
            ("notified_users", sum(1 for s, n in self.scores.values() if n)),
        ]
        for k, v in summary:
            lines.append(f"summary,{k},{v}")
        for user in sorted(self.scores):
            score, notify = self.scores[user]
            lines.append(f"user:{user},risk_score,{score}")
            lines.append(f"user:{user},notified,{int(notify)}")
            lines.append(f"user:{user},true_matches,{len(self.true_matches.get(user, ()))}")
            lines.append(f"user:{user},false_matches,{len(self.false_matches.get(user, ()))}")
            q = self.query_stats.get(user)
            if q:
                lines.append(f"user:{user},query_tiles,{q['tiles']}")
                lines.append(f"user:{user},query_upload_bytes,{q['upload_bytes']}")
                lines.append(f"user:{user},query_down_bytes,{q['down_bytes']}")
                lines.append(f"user:{user},query_blocks,{q['blocks']}")
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = [
            f"days simulated:            {self.days}",
            f"unique ephemeral ids:      {self.unique_eph_generated}",
            f"ids captured by dongles:   {self.eph_captured}",
            f"uploads:                   {self.uploads}",
            f"records uploaded:          {self.uploaded_records}",
            f"records accepted:          {self.accepted_records}"
            f" (+{self.resolved_after_repair} after repair)",
            f"records rejected:          {self.rejected_tampered} tampered,"
            f" {self.unresolved_inconsistent} unresolved inconsistencies",
            f"repair events:             {self.repair_events}",
            f"true matches:              {sum(len(v) for v in self.true_matches.values())}",
            f"false matches:             {sum(len(v) for v in self.false_matches.values())}",
            f"users notified:            {sum(1 for s, n in self.scores.values() if n)}",
        ]
        for key, others in sorted(self.matches_per_upload.items()):
            lines.append(f"upload {key}: matched by {others} other participants")
        return "\n".join(lines) + "\n"


def _positions(scenario: Scenario) -> dict[str, np.ndarray]:
    """Per-user array mapping each minute to a beacon index (or -1)."""
    out = {}
    total = scenario.total_minutes
    for u in scenario.users:
        pos = np.full(total, -1, np.int32)
        for i, (start, where) in enumerate(u.trace):
            end = u.trace[i + 1][0] if i + 1 < len(u.trace) else total
            if where is not None:
                pos[start:end] = scenario.beacon_index(where)
        out[u.name] = pos
    return out


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFF, *key])))


def run(scenario: Scenario, seed: int, collect_events: bool = False) -> Metrics:
    """Execute the scenario; fully deterministic in (scenario, seed)."""
    scenario.validate()
    sc = scenario
    metrics = Metrics(days=sc.days)
    backend = Backend(
        tiling=sc.tiling,
        epoch_len=sc.epoch_minutes,
        dp=dp_params(sc.dp_epsilon, sc.dp_delta, sc.dp_sensitivity),
        cuckoo_params=sc.cuckoo,
        block_cap=sc.block_cap,
        seed=seed,
        overlap_filter=sc.overlap_filter,
    )

    beacon_states: list[BeaconState] = []
    for spec in sc.beacons:
        loc = pack_location(*spec.tile)
        reg = backend.register_device("beacon", location=loc, desc=spec.desc)
        beacon_states.append(
            BeaconState(reg.device_id, reg.secret_key, loc, spec.desc, epoch_len=sc.epoch_minutes)
        )
    dongles: dict[str, DongleState] = {}
    dongle_ids: dict[str, int] = {}
    for u in sc.users:
        reg = backend.register_device("dongle")
        dongles[u.name] = DongleState(
            reg.device_id, reg.secret_key, reg.otps, backend.public_key,
            epoch_len=sc.epoch_minutes, cuckoo_params=sc.cuckoo,
            notify_threshold=sc.notify_threshold,
        )
        dongle_ids[u.name] = reg.device_id

    if sc.network_tiles is not None:
        served_tiles = sorted({pack_location(*t) for t in sc.network_tiles})
    else:
        served_tiles = sorted({b.loc for b in beacon_states})
    net_beacons = [NetworkBeaconState(loc) for loc in served_tiles]
    h_regions = sorted({b.loc >> 21 for b in beacon_states} | {loc >> 21 for loc in served_tiles})

    positions = _positions(sc)
    chan_rngs = {u.name: _stream(seed, 0xC0, i) for i, u in enumerate(sc.users)}
    upload_rngs = {u.name: _stream(seed, 0x0B, i) for i, u in enumerate(sc.users)}
    query_rngs = {u.name: _stream(seed, 0xF1, i) for i, u in enumerate(sc.users)}
    otp_cursor = {u.name: 0 for u in sc.users}

    def next_otp(name):
        reg = backend.devices[dongle_ids[name]]
        i = otp_cursor[name]
        otp_cursor[name] = i + 1
        return reg.otps[i]

    eph_table: dict[bytes, tuple[str, int]] = {}
    captured: set[bytes] = set()
    uploaded_real: set[bytes] = set()
    escrow_otps: dict[str, bytes] = {}
    beacon_crash_at = [{m: d for m, d in spec.crashes} for spec in sc.beacons]
    user_crash_at = {u.name: {m: d for m, d in u.crashes} for u in sc.users}
    reboot_at: list[dict[int, bool]] = [dict() for _ in sc.beacons]
    user_reboot_at = {u.name: {} for u in sc.users}

    uploads_by_boundary: dict[int, list[InfectionSpec]] = {}
    releases_by_boundary: dict[int, list[InfectionSpec]] = {}
    for inf in sc.infections:
        uploads_by_boundary.setdefault(inf.test_day, []).append(inf)
        if inf.mode == "early":
            rel = inf.release_day if inf.release_day is not None else inf.test_day + 1
            releases_by_boundary.setdefault(min(rel, sc.days - 1), []).append(inf)

    def log_event(minute, actor, kind, nbytes):
        if collect_events:
            metrics.events.append((minute, actor, kind, nbytes))

    def absorb_matches():
        # Matched bits are sticky in the metrics even if a record later
        # falls out of a dongle's log.
        for u in sc.users:
            dongle = dongles[u.name]
            tm = metrics.true_matches.setdefault(u.name, set())
            fm = metrics.false_matches.setdefault(u.name, set())
            for e in dongle.log.values():
                if not e.matched:
                    continue
                if sc.overlap_filter and not any(
                    ps <= e.t_start_b <= ps + pi for ps, pi in e.patient_intervals
                ):
                    continue
                if e.eph in uploaded_real and e.eph in eph_table:
                    tm.add(eph_table[e.eph])
                else:
                    fm.add(e.eph.hex())

    def ingest(name, env_bytes, key_release=None):
        res = backend.ingest_upload(env_bytes, key_release=key_release)
        if res.status == "rejected":
            metrics.envelope_rejections += 1
            return res
        if res.status == "accepted":
            metrics.uploaded_records += res.n_uploaded
            metrics.accepted_records += len(res.accepted)
            for entry in res.accepted:
                uploaded_real.add(entry.eph)
            out = backend.repair_clock_offsets()
            metrics.repair_events += len(out.repaired)
            metrics.resolved_after_repair += len(out.resolved)
            for entry in out.resolved:
                uploaded_real.add(entry.eph)
        return res

    total = sc.total_minutes
    for i, b in enumerate(beacon_states):
        eph_table[b.current_eph] = (sc.beacons[i].name, b.epoch)

    for m in range(total + 1):
        if 0 < m < total:
            # beacons stop at the horizon; dongles still tick at the final
            # boundary so the last epoch's encounters seal before upload
            for i, b in enumerate(beacon_states):
                if m in reboot_at[i]:
                    b.reboot()
                if m in beacon_crash_at[i]:
                    b.crash()
                    reboot_at[i][m + beacon_crash_at[i][m]] = True
                b.tick()
                if b.alive and b.current_eph not in eph_table:
                    eph_table[b.current_eph] = (sc.beacons[i].name, b.epoch)
        if m > 0:
            for u in sc.users:
                d = dongles[u.name]
                if m in user_reboot_at[u.name]:
                    d.reboot()
                if m in user_crash_at[u.name]:
                    d.crash()
                    user_reboot_at[u.name][m + user_crash_at[u.name][m]] = True
                d.tick()

        if m > 0 and m % 1440 == 0:
            day = m // 1440 - 1
            # uploads due at the end of this day
            for inf in uploads_by_boundary.get(day, []):
                dongle = dongles[inf.user]
                if not dongle.alive:
                    continue
                selection = None
                if inf.mode == "selective":
                    sel_ids = {beacon_states[sc.beacon_index(n)].device_id for n in inf.selection}
                    selection = [e.eph for e in dongle.log.values() if e.beacon_id in sel_ids]
                otp = next_otp(inf.user)
                if inf.mode == "early":
                    escrow_otps[inf.user] = otp
                env = dongle.prepare_upload(
                    inf.mode, otp, upload_rngs[inf.user],
                    certificate=b"" if inf.mode == "early" else b"test-certificate",
                    selection=selection,
                )
                metrics.uploads += 1
                log_event(m, f"dongle:{inf.user}", "tx-upload", len(env))
                ingest(inf.user, env)
            for inf in releases_by_boundary.get(day, []):
                otp = escrow_otps.get(inf.user)
                if otp is None:
                    continue
                res = backend.release_escrow(dongle_ids[inf.user], otp, b"test-certificate")
                if res.status == "accepted":
                    metrics.uploaded_records += res.n_uploaded
                    metrics.accepted_records += len(res.accepted)
                    for entry in res.accepted:
                        uploaded_real.add(entry.eph)
                    out = backend.repair_clock_offsets()
                    metrics.repair_events += len(out.repaired)
                    metrics.resolved_after_repair += len(out.resolved)
                    for entry in out.resolved:
                        uploaded_real.add(entry.eph)
                else:
                    metrics.envelope_rejections += 1

            try:
                daily = backend.assemble_daily_risk(
                    day, served_tiles, h_regions=h_regions, build_pir=sc.pir_enabled
                )
            except CapacityError as exc:
                raise CapacityError(f"day {day}: {exc}") from exc
            day_bytes = 0
            for loc, payload in daily.payloads.items():
                wire = payload.to_bytes()
                day_bytes += len(wire)
                metrics.payload_sizes.append((day, loc, len(wire)))
                metrics.payload_hashes.append((day, loc, hashlib.sha256(wire).hexdigest()))
            metrics.broadcast_bytes_by_day[day] = day_bytes
            for nb in net_beacons:
                nb.set_payload(daily.payloads[nb.loc])

            # broadcast downloads: shared cycles, per-user reception coins
            for nb in net_beacons:
                listeners = [u.name for u in sc.users if dongles[u.name].alive]
                done: set[str] = set()
                cycles_used = {name: 0 for name in listeners}
                for cycle in range(MAX_BROADCAST_CYCLES):
                    if len(done) == len(listeners):
                        break
                    packets = nb.emit_cycle()
                    for pkt in packets:
                        log_event(m, f"netbeacon:{nb.loc:08x}", "tx-packet", len(pkt.body))
                    for name in listeners:
                        if name in done:
                            continue
                        dongle = dongles[name]
                        rng = chan_rngs[name]
                        completed = False
                        for pkt in packets:
                            if sc.reception_probability >= 1.0 or rng.random() < sc.reception_probability:
                                completed = dongle.on_packet(pkt) or completed
                        if completed:
                            done.add(name)
                            cycles_used[name] = cycle + 1
                metrics.retransmit_cycles += sum(max(0, c - 1) for c in cycles_used.values() if c)

            # per-upload "other participants matched" statistic
            for inf in uploads_by_boundary.get(day, []):
                key = f"{inf.user}@day{inf.test_day}"
                patient_eph = {e.eph for e in dongles[inf.user].log.values()}
                others = 0
                for u in sc.users:
                    if u.name == inf.user:
                        continue
                    d = dongles[u.name]
                    if any(e.matched and e.eph in patient_eph for e in d.log.values()):
                        others += 1
                metrics.matches_per_upload[key] = others

            # PIR query sessions
            if sc.pir_enabled:
                servers = {h: (PirServer(db), PirServer(db)) for h, db in daily.pir_dbs.items()}
                for u in sc.users:
                    dongle = dongles[u.name]
                    if not dongle.alive or not dongle.log:
                        continue
                    session = dongle.make_pir_request(
                        sc.tiling, daily.day & 0xFFFFFFFF, next_otp(u.name), query_rngs[u.name]
                    )
                    stats = metrics.query_stats.setdefault(
                        u.name, {"tiles": 0, "upload_bytes": 0, "down_bytes": 0, "blocks": 0}
                    )
                    for req in session.requests:
                        s1, s2 = servers[req.h]
                        stats["tiles"] += 1
                        stats["upload_bytes"] += sum(len(ct) for ct in req.ciphertexts)
                        log_event(m, f"dongle:{u.name}", "tx-query",
                                  sum(len(ct) for ct in req.ciphertexts))
                        for ct in req.ciphertexts:
                            log_event(m, "netbeacon:relay", "relay-query", len(ct))
                        responses = []
                        for i, srv in enumerate((s1, s2)):
                            share_wire = crypto.open_sealed(session.keys[i], req.ciphertexts[i])
                            _, _, bits = parse_query(share_wire, sc.tiling.domain_size)
                            resp = response_to_bytes(srv.answer(bits))
                            resp_ct = crypto.seal(
                                session.keys[i], resp, query_rngs[u.name].bytes(12)
                            )
                            log_event(m, "netbeacon:relay", "relay-response", len(resp_ct))
                            stats["down_bytes"] += len(resp_ct)
                            responses.append(crypto.open_sealed(session.keys[i], resp_ct))
                        block = combine(parse_response(responses[0]), parse_response(responses[1]))
                        stats["blocks"] += 1
                        dongle.process_pir_block(block, req.loc)
            absorb_matches()

        if m < total:
            pkts: dict[int, object] = {}
            for u in sc.users:
                i = positions[u.name][m]
                if i < 0:
                    continue
                b = beacon_states[i]
                dongle = dongles[u.name]
                if not b.alive or not dongle.alive:
                    continue
                p = sc.reception_probability
                if p >= 1.0 or chan_rngs[u.name].random() < p:
                    pkt = pkts.get(i)
                    if pkt is None:
                        pkt = pkts[i] = b.broadcast()
                    if dongle.on_advertisement(pkt, rssi=DEFAULT_RSSI):
                        captured.add(pkt.eph)

    metrics.unique_eph_generated = len(eph_table)
    metrics.eph_captured = len(captured)
    metrics.unresolved_inconsistent = sum(
        1 for r in backend.pending_reports if r.kind == "clock"
    )
    metrics.rejected_tampered = sum(
        1 for r in backend.pending_reports if r.kind == "tampered"
    )
    for u in sc.users:
        metrics.scores[u.name] = dongles[u.name].risk_score(sc.overlap_filter)
    absorb_matches()
    metrics.check_conservation()
    return metrics


def brute_force_exposures(scenario: Scenario) -> set[tuple[str, str, int]]:
    """Ground-truth (user, beacon, epoch) exposure triples from the traces.

    Intersects mobility directly: a triple is expected iff some infected
    user's upload contains an encounter with that beacon-epoch and the
    user visited it within the scenario. Assumes loss-free channels and no
    crashes; honors selective uploads, escrow release timing, retention,
    and the overlap rule when the scenario enables it.
    """
    sc = scenario
    sc.validate()
    positions = _positions(sc)
    L = sc.epoch_minutes
    total = sc.total_minutes

    # presence[user][(beacon index, epoch)] = (first minute, last minute)
    presence: dict[str, dict[tuple[int, int], tuple[int, int]]] = {}
    for u in sc.users:
        pres: dict[tuple[int, int], tuple[int, int]] = {}
        for i, (start, where) in enumerate(u.trace):
            if where is None:
                continue
            end = min(u.trace[i + 1][0] if i + 1 < len(u.trace) else total, total)
            if end <= start:
                continue
            b = sc.beacon_index(where)
            for epoch in range(start // L, (end - 1) // L + 1):
                first = max(start, epoch * L)
                last = min(end - 1, (epoch + 1) * L - 1)
                key = (b, epoch)
                if key in pres:
                    pres[key] = (min(pres[key][0], first), max(pres[key][1], last))
                else:
                    pres[key] = (first, last)
        presence[u.name] = pres

    expected: set[tuple[str, str, int]] = set()
    for inf in sc.infections:
        effective_day = inf.test_day
        if inf.mode == "early":
            rel = inf.release_day if inf.release_day is not None else inf.test_day + 1
            effective_day = min(rel, sc.days - 1)
        if effective_day >= sc.days:
            continue
        upload_minute = (inf.test_day + 1) * 1440
        sel_ix = None
        if inf.mode == "selective":
            sel_ix = {sc.beacon_index(n) for n in inf.selection}
        for (b_ix, epoch), (p_first, p_last) in presence[inf.user].items():
            if p_first >= upload_minute:
                continue  # not in the log at upload time
            if p_first < upload_minute - 1440 * 14:
                continue  # already evicted from the dongle log
            if sel_ix is not None and b_ix not in sel_ix:
                continue
            bname = sc.beacons[b_ix].name
            for u in sc.users:
                upres = presence[u.name].get((b_ix, epoch))
                if upres is None:
                    continue
                if sc.overlap_filter and not (p_first <= upres[0] <= p_last):
                    continue
                expected.add((u.name, bname, epoch))
    return expected


def bandwidth_report(metrics: Metrics, scenario: Scenario) -> dict:
    """Per-protocol byte totals: broadcast volume tracks region-wide
    uploads, query volume tracks each user's visited tiles."""
    per_user = {}
    for user, q in metrics.query_stats.items():
        per_user[user] = {
            "tiles": q["tiles"],
            "query_upload_bytes": q["upload_bytes"],
            "query_down_bytes": q["down_bytes"],
            "blocks": q["blocks"],
        }
    return {
        "broadcast_bytes_by_day": dict(metrics.broadcast_bytes_by_day),
        "broadcast_bytes_total": sum(metrics.broadcast_bytes_by_day.values()),
        "per_user_query": per_user,
    }
