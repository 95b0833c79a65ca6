"""The server side: token database, session setup, and update orchestration.

The server is a single trusted actor (host plus reader). A session runs in
stages: an offline prelude encrypts and chunks the firmware under a fresh
session key; security association distributes the wrapped key, a per-token
tag binding the firmware to both version numbers, and an execution schedule
derived from each token's reported boot voltage; the broadcast pushes
chunks paced by the elected pilot's acknowledgments; validation reads back
version numbers after reboot; attestation (optional) challenges a token to
prove its installed state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

from . import crypto, power, wire
from .simnet import InventoryResponse, Simulation

logger = logging.getLogger(__name__)


class NoEligibleTokens(Exception):
    """No inventory respondent is present in the database and valid."""


class UnknownToken(Exception):
    pass


class PilotTimeout(Exception):
    """The pilot stopped acknowledging; the broadcast attempt is abandoned."""


@dataclass
class DbEntry:
    token_id: bytes
    device_key: bytes
    version: int
    valid: bool = True  # scheduled for update


class TokenDb:
    def __init__(self, entries: list[DbEntry] | None = None):
        self.entries: dict[bytes, DbEntry] = {}
        for e in entries or []:
            self.add(e)

    def add(self, entry: DbEntry) -> None:
        if entry.token_id in self.entries:
            raise ValueError("duplicate token id")
        self.entries[entry.token_id] = entry

    def get(self, token_id: bytes) -> DbEntry | None:
        return self.entries.get(token_id)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class AssociationMaterial:
    """Per-token association message content."""

    wrapped_key: bytes
    tag: bytes
    pam: power.PamParams


@dataclass
class UpdatePlan:
    """Session material produced by the prelude and association stages."""

    session_key: bytes
    iv: bytes
    chain: crypto.CipherBlockChain
    chunks: wire.ChunkPlan
    new_version: int
    firmware: bytes
    per_token: dict[bytes, AssociationMaterial] = field(default_factory=dict)


def prelude(
    firmware: bytes, new_version: int, rng: crypto.RandomSource, payload_size: int = 2
) -> UpdatePlan:
    """Offline stage: fresh session key and IV, encrypt, chunk."""
    session_key = rng.key()
    iv = rng.bytes(16)
    chain = crypto.skp_encrypt(session_key, iv, firmware)
    chunks = wire.chunk_firmware(chain.ciphertext, payload_size)
    return UpdatePlan(
        session_key=session_key,
        iv=iv,
        chain=chain,
        chunks=chunks,
        new_version=new_version,
        firmware=firmware,
    )


def wrap_session_key(device_key: bytes, session_key: bytes) -> bytes:
    # The session key is a single fresh random block per session, so the
    # fixed all-zero IV for the wrap leaks nothing.
    return crypto.skp_encrypt(device_key, crypto.ZERO_IV, session_key).ciphertext


def security_association(
    db: TokenDb,
    plan: UpdatePlan,
    responses: list[InventoryResponse],
    strict_abort: bool = False,
) -> dict[bytes, AssociationMaterial]:
    """Build the per-token association material for eligible respondents.

    Unknown ids and entries not scheduled for update are excluded (or, with
    `strict_abort`, abort the whole session). The tag is computed over the
    token's *reported* version, since that is what the token will bind; a
    mismatch with the database is logged, not fatal.
    """
    selected: dict[bytes, AssociationMaterial] = {}
    for resp in responses:
        entry = db.get(resp.token_id)
        if entry is None:
            if strict_abort:
                raise NoEligibleTokens(f"unknown id {resp.token_id.hex()}: session aborted")
            logger.warning("rejecting unknown token id %s", resp.token_id.hex())
            continue
        if not entry.valid:
            logger.info("token %s not scheduled for update", resp.token_id.hex())
            continue
        if resp.version != entry.version:
            logger.warning(
                "token %s reports version %d, database says %d; trusting the token",
                resp.token_id.hex(),
                resp.version,
                entry.version,
            )
        pam = power.pam_get(resp.vt)
        if not pam.update_advised:
            logger.warning(
                "token %s reports Vt=%.3f V: update not advised at this powering",
                resp.token_id.hex(),
                resp.vt,
            )
        tag = crypto.mac_compute(
            entry.device_key,
            wire.validation_mac_input(plan.firmware, resp.version, plan.new_version),
        )
        selected[resp.token_id] = AssociationMaterial(
            wrapped_key=wrap_session_key(entry.device_key, plan.session_key),
            tag=tag,
            pam=pam,
        )
    if not selected:
        raise NoEligibleTokens("no respondent is known, valid, and awaiting update")
    plan.per_token.update(selected)
    return selected


class PilotStrategy(Enum):
    LOWEST_VT = "lowest_vt"
    HIGHEST_VT = "highest_vt"
    LOWEST_READ_RATE = "lowest_read_rate"
    HIGHEST_READ_RATE = "highest_read_rate"
    LOWEST_RSSI = "lowest_rssi"
    HIGHEST_RSSI = "highest_rssi"
    RANDOM = "random"


def elect_pilot(
    responses: list[InventoryResponse],
    strategy: PilotStrategy,
    rng: crypto.RandomSource | None = None,
) -> bytes:
    """Pick exactly one pilot. Ties break to the lexicographically smallest id."""
    if not responses:
        raise NoEligibleTokens("cannot elect a pilot from nothing")
    ordered = sorted(responses, key=lambda r: r.token_id)
    if strategy is PilotStrategy.RANDOM:
        if rng is None:
            raise ValueError("random election needs a seeded source")
        pick = int.from_bytes(rng.bytes(4), "big") % len(ordered)
        return ordered[pick].token_id

    keyfn = {
        PilotStrategy.LOWEST_VT: lambda r: r.vt,
        PilotStrategy.HIGHEST_VT: lambda r: -r.vt,
        PilotStrategy.LOWEST_READ_RATE: lambda r: r.read_rate,
        PilotStrategy.HIGHEST_READ_RATE: lambda r: -r.read_rate,
        PilotStrategy.LOWEST_RSSI: lambda r: r.rssi,
        PilotStrategy.HIGHEST_RSSI: lambda r: -r.rssi,
    }[strategy]
    return min(ordered, key=lambda r: (keyfn(r), r.token_id)).token_id


def validate(
    plan: UpdatePlan, post_reboot: list[InventoryResponse], db: TokenDb
) -> dict[bytes, bool]:
    """A token is updated iff it reports the new version after reboot."""
    outcome: dict[bytes, bool] = {}
    for resp in post_reboot:
        if resp.token_id not in plan.per_token:
            continue
        updated = resp.version == plan.new_version
        outcome[resp.token_id] = updated
        if updated:
            entry = db.get(resp.token_id)
            if entry is not None:
                entry.version = plan.new_version
    return outcome


@dataclass(frozen=True)
class AttestChallenge:
    wrapped_key: bytes
    challenge: bytes
    expected: bytes
    mode: int
    segment_start: int
    segment_length: int


def attest_challenge(
    db: TokenDb,
    token_id: bytes,
    mode: int,
    reference_firmware: bytes,
    rng: crypto.RandomSource,
    segment_start: int = 0,
    segment_length: int | None = None,
) -> AttestChallenge:
    """Fresh key and challenge; the expected response is computed locally."""
    entry = db.get(token_id)
    if entry is None:
        raise UnknownToken(token_id.hex())
    session_key = rng.key()
    challenge = rng.bytes(16)
    if segment_length is None:
        segment_length = len(reference_firmware)
    segment = None
    if mode == wire.ATTEST_ELABORATE:
        segment = reference_firmware[segment_start : segment_start + segment_length]
    expected = crypto.mac_compute(
        session_key,
        wire.attest_mac_input(challenge, segment, token_id, entry.version),
    )
    return AttestChallenge(
        wrapped_key=wrap_session_key(entry.device_key, session_key),
        challenge=challenge,
        expected=expected,
        mode=mode,
        segment_start=segment_start,
        segment_length=segment_length,
    )


def attest_verify(expected: bytes, received: bytes) -> bool:
    import hmac

    return hmac.compare_digest(expected, received)


# ---------------------------------------------------------------------------
# Orchestration over the simulated air interface


class SendMode(Enum):
    BROADCAST = "broadcast"
    SEQUENTIAL = "sequential"


@dataclass
class SessionOptions:
    new_version: int
    payload_size: int = 2
    strategy: PilotStrategy = PilotStrategy.LOWEST_VT
    send_mode: SendMode = SendMode.BROADCAST
    max_attempts: int = 10
    pam_enabled: bool = True
    strict_abort: bool = False
    post_reset_wait_us: float = 45_000.0  # cover the boot measurement window
    attest_mode: int | None = None  # run attestation on updated tokens if set


@dataclass
class SessionReport:
    latency_s: float
    throughput_bps: float
    attempts: int
    outcomes: dict[str, str]  # token id hex -> updated | failed | excluded
    attest_results: dict[str, bool] = field(default_factory=dict)

    @property
    def updated(self) -> int:
        return sum(1 for v in self.outcomes.values() if v == "updated")

    @property
    def all_updated(self) -> bool:
        return all(v == "updated" for v in self.outcomes.values())


class ServerSession:
    """Drives one update session against a simulation."""

    def __init__(
        self,
        sim: Simulation,
        db: TokenDb,
        firmware: bytes,
        options: SessionOptions,
        rng: crypto.RandomSource | None = None,
    ):
        self.sim = sim
        self.db = db
        self.firmware = firmware
        self.opt = options
        self.rng = rng or sim.rng.fork("server")
        self.election_rng = self.rng.fork("election")

    # -- small helpers ---------------------------------------------------------

    def _await_ack(self, sender_hex: str, timeout_us: float) -> wire.Frame | None:
        got = self.sim.wait_reply(
            lambda s, f: s == sender_hex and f.kind is wire.CommandKind.ACK,
            timeout_us,
        )
        return got[1] if got else None

    def _enter_wisecr(self, targets: list[InventoryResponse]) -> None:
        for resp in targets:
            frame = wire.Frame(wire.CommandKind.ENTER_WISECR, handle=resp.handle)
            self.sim.send_downlink(frame)
            self._await_ack(resp.token_id.hex(), self.sim.link.ack_timeout_us * 3)
        self.sim.advance(self.sim.now_us() + self.opt.post_reset_wait_us)

    def _eligible(self, responses: list[InventoryResponse], targets: set[bytes]) -> list[InventoryResponse]:
        picked: dict[bytes, InventoryResponse] = {}
        for r in responses:
            if r.token_id in targets and r.token_id not in picked:
                picked[r.token_id] = r
        return [picked[k] for k in sorted(picked)]

    def _associate(
        self, plan: UpdatePlan, responses: list[InventoryResponse], pilot: bytes
    ) -> list[bytes]:
        """Send each association message; returns tokens that acknowledged."""
        associated: list[bytes] = []
        for resp in responses:
            material = plan.per_token[resp.token_id]
            pam = material.pam
            if not self.opt.pam_enabled:
                pam = power.PamParams(t_active_ms=math.inf, t_lpm_ms=0.0)
            t_active = (
                wire.UNBOUNDED_ACTIVE_MS if pam.unbounded else int(round(pam.t_active_ms))
            )
            payload = wire.AuthenticatePayload(
                wrapped_key=material.wrapped_key,
                tag=material.tag,
                new_version=plan.new_version,
                t_lpm_ms=int(round(pam.t_lpm_ms)),
                t_active_ms=t_active,
                role=wire.ROLE_PILOT if resp.token_id == pilot else wire.ROLE_OBSERVER,
                iv=plan.iv,
            )
            frame = wire.Frame(
                wire.CommandKind.AUTHENTICATE, handle=resp.handle, payload=payload.pack()
            )
            self.sim.send_downlink(frame)
            if self._await_ack(resp.token_id.hex(), self.sim.link.ack_timeout_us * 5):
                associated.append(resp.token_id)
            else:
                logger.warning("token %s missed association", resp.token_id.hex())
        return associated

    def broadcast(self, plan: UpdatePlan, pilot: bytes, pilot_handle: int) -> None:
        """Send every chunk, paced by pilot acknowledgments, then end-of-broadcast.

        A reported CRC failure or missing acknowledgment retransmits the
        chunk; running out of retries raises :class:`PilotTimeout`.
        """
        pilot_hex = pilot.hex()
        for index, chunk in plan.chunks.packets:
            payload = wire.pack_secure_comm(index, chunk)
            for attempt in range(self.sim.link.broadcast_retry_limit + 1):
                frame = wire.Frame(wire.CommandKind.SECURE_COMM, handle=pilot_handle, payload=payload)
                arrival = self.sim.send_downlink(frame)
                self.sim.advance(arrival)
                ack = self._await_ack(pilot_hex, self.sim.link.ack_timeout_us)
                if ack is not None and ack.payload != bytes([wire.ACK_CRC_ERROR]):
                    break
                if ack is not None:
                    logger.debug("pilot reported a CRC failure on chunk %d", index)
            else:
                raise PilotTimeout(f"no acknowledgment for chunk {index}")
        for attempt in range(self.sim.link.broadcast_retry_limit + 1):
            eob = wire.Frame(wire.CommandKind.EOB, handle=pilot_handle)
            arrival = self.sim.send_downlink(eob)
            self.sim.advance(arrival)
            ack = self._await_ack(pilot_hex, self.sim.link.ack_timeout_us)
            if ack is not None and ack.payload != bytes([wire.ACK_CRC_ERROR]):
                return
        raise PilotTimeout("no acknowledgment for end-of-broadcast")

    def _poll_validation(self, plan: UpdatePlan, pending: set[bytes]) -> dict[bytes, bool]:
        """Re-inventory after the broadcast until pending tokens report back."""
        results: dict[bytes, bool] = {}
        for _ in range(self.sim.link.max_validation_polls):
            self.sim.advance(self.sim.now_us() + self.sim.link.validation_poll_us)
            responses = self.sim.singulate()
            seen = [r for r in responses if r.token_id in pending]
            for token_id, ok in validate(plan, seen, self.db).items():
                results[token_id] = ok
                if ok:
                    pending.discard(token_id)
            if not pending:
                break
            if all(t in results for t in pending):
                # Everyone still pending has rebooted and reported a stale
                # version; polling further will not change their answer.
                break
        return results

    # -- top level ---------------------------------------------------------------

    def run_update(self) -> SessionReport:
        if self.opt.send_mode is SendMode.SEQUENTIAL:
            return self._run_sequential()
        return self._run_broadcast()

    def _run_broadcast(self) -> SessionReport:
        plan = prelude(
            self.firmware, self.opt.new_version, self.rng.fork("prelude"), self.opt.payload_size
        )
        outcomes: dict[bytes, str] = {}
        t_first: float | None = None
        t_done: float | None = None
        attempts = 0

        pending: set[bytes] | None = None
        for _ in range(self.opt.max_attempts):
            responses = self.sim.singulate()
            if t_first is None and len(self.sim.transcript):
                t_first = self.sim.transcript.records[0].t_us
            known = []
            for r in responses:
                entry = self.db.get(r.token_id)
                if entry is None or not entry.valid:
                    outcomes.setdefault(r.token_id, "excluded")
                    continue
                known.append(r)
            if pending is None and known:
                pending = {r.token_id for r in known}
                for r in known:
                    outcomes.setdefault(r.token_id, "failed")
            if pending is None:
                continue  # field still dark; burn the round, try again
            targets = self._eligible(known, pending)
            if not targets:
                if pending:
                    continue  # nobody pending answered this round
                break

            attempts += 1
            self._enter_wisecr(targets)
            responses = self.sim.singulate()
            targets = self._eligible(responses, pending)
            if not targets:
                continue
            try:
                material = security_association(
                    self.db, plan, targets, strict_abort=self.opt.strict_abort
                )
            except NoEligibleTokens:
                continue
            pilot = elect_pilot(
                [t for t in targets if t.token_id in material],
                self.opt.strategy,
                self.election_rng,
            )
            pilot_handle = next(t.handle for t in targets if t.token_id == pilot)
            associated = self._associate(plan, targets, pilot)
            if pilot not in associated:
                continue
            try:
                self.broadcast(plan, pilot, pilot_handle)
            except PilotTimeout as exc:
                logger.warning("broadcast attempt %d aborted: %s", attempts, exc)
                continue
            results = self._poll_validation(plan, set(pending))
            for token_id, ok in results.items():
                if ok:
                    outcomes[token_id] = "updated"
                    pending.discard(token_id)
                    t_done = self.sim.now_us()
            if not pending:
                break

        return self._report(outcomes, attempts, t_first, t_done)

    def _run_sequential(self) -> SessionReport:
        """Update one token at a time: a fresh session key and full stage
        sequence per token, which is what broadcasting is measured against."""
        outcomes: dict[bytes, str] = {}
        t_first: float | None = None
        t_done: float | None = None
        attempts = 0
        pending: set[bytes] | None = None

        for _ in range(self.opt.max_attempts):
            responses = self.sim.singulate()
            if t_first is None and len(self.sim.transcript):
                t_first = self.sim.transcript.records[0].t_us
            known = []
            for r in responses:
                entry = self.db.get(r.token_id)
                if entry is None or not entry.valid:
                    outcomes.setdefault(r.token_id, "excluded")
                    continue
                known.append(r)
            if pending is None and known:
                pending = {r.token_id for r in known}
                for r in known:
                    outcomes.setdefault(r.token_id, "failed")
            if pending is None:
                continue  # field still dark; burn the round, try again
            if not pending:
                break

            attempts += 1
            for token_id in sorted(pending):
                plan = prelude(
                    self.firmware,
                    self.opt.new_version,
                    self.rng.fork(f"prelude/{attempts}/{token_id.hex()}"),
                    self.opt.payload_size,
                )
                responses = self.sim.singulate()
                target = [r for r in responses if r.token_id == token_id]
                if not target:
                    continue
                self._enter_wisecr(target)
                responses = self.sim.singulate()
                target = [r for r in responses if r.token_id == token_id]
                if not target:
                    continue
                try:
                    security_association(self.db, plan, target, self.opt.strict_abort)
                except NoEligibleTokens:
                    continue
                if not self._associate(plan, target, pilot=token_id):
                    continue
                try:
                    self.broadcast(plan, token_id, target[0].handle)
                except PilotTimeout:
                    continue
                results = self._poll_validation(plan, {token_id})
                if results.get(token_id):
                    outcomes[token_id] = "updated"
                    t_done = self.sim.now_us()
            pending = {t for t in pending if outcomes.get(t) != "updated"}
            if not pending:
                break

        return self._report(outcomes, attempts, t_first, t_done)

    def attest(self, token_id: bytes, mode: int) -> bool:
        """Challenge one updated token and verify its response."""
        challenge = attest_challenge(
            self.db,
            token_id,
            mode,
            reference_firmware=self.firmware,
            rng=self.rng.fork(f"attest/{token_id.hex()}"),
        )
        responses = self.sim.singulate()
        target = [r for r in responses if r.token_id == token_id]
        if not target:
            return False
        self._enter_wisecr(target)
        responses = self.sim.singulate()
        target = [r for r in responses if r.token_id == token_id]
        if not target:
            return False
        payload = wire.AttestRequestPayload(
            wrapped_key=challenge.wrapped_key,
            challenge=challenge.challenge,
            mode=mode,
            segment_start=challenge.segment_start,
            segment_length=challenge.segment_length,
        )
        frame = wire.Frame(
            wire.CommandKind.ATTEST_REQUEST, handle=target[0].handle, payload=payload.pack()
        )
        self.sim.send_downlink(frame)
        got = self.sim.wait_reply(
            lambda s, f: f.kind is wire.CommandKind.ATTEST_REPLY,
            timeout_us=5_000_000.0,
        )
        if got is None:
            return False
        return attest_verify(challenge.expected, got[1].payload)

    def _report(
        self,
        outcomes: dict[bytes, str],
        attempts: int,
        t_first: float | None,
        t_done: float | None,
    ) -> SessionReport:
        latency_s = 0.0
        if t_first is not None and t_done is not None and t_done > t_first:
            latency_s = (t_done - t_first) / 1e6
        updated = sum(1 for v in outcomes.values() if v == "updated")
        throughput = 0.0
        if latency_s > 0:
            throughput = len(self.firmware) * 8 * updated / latency_s
        report = SessionReport(
            latency_s=latency_s,
            throughput_bps=throughput,
            attempts=attempts,
            outcomes={k.hex(): v for k, v in sorted(outcomes.items())},
        )
        if self.opt.attest_mode is not None:
            for token_id, status in sorted(outcomes.items()):
                if status == "updated":
                    ok = self.attest(token_id, self.opt.attest_mode)
                    report.attest_results[token_id.hex()] = ok
        return report
