"""Executable attacks against live update sessions, with positive controls.

Every attack is an input/output attacker: a delivery-layer interceptor that
can eavesdrop, drop, rewrite, inject, and replay frames, but never reads
token or server internals. Each script returns an :class:`AttackOutcome`
whose fields are what the security tests assert on.

Positive controls prove the harness is not vacuous: with protections
deliberately disabled (the token-side tag check skipped, or the session key
leaked to the attacker) the same scripts succeed and the outcome fields
light up.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from difflib import SequenceMatcher

from . import crypto, power, simnet, wire
from .server import (
    DbEntry,
    ServerSession,
    SessionOptions,
    TokenDb,
)
from .token import SecureStorage, TokenState

STRONG_DISTANCE_M = 0.2


# ---------------------------------------------------------------------------
# Scripts


@dataclass(frozen=True)
class Eavesdrop:
    """Record everything; try to recover the plaintext afterwards."""


@dataclass(frozen=True)
class InjectFirmware:
    """Substitute the broadcast ciphertext with attacker-chosen content."""

    firmware: bytes


@dataclass(frozen=True)
class TamperChunk:
    """Flip bits in one broadcast chunk, fixing the frame CRC afterwards."""

    index: int
    xor_mask: bytes = b"\x01"


@dataclass(frozen=True)
class ReplaySession:
    """Re-deliver a recorded session to tokens that never saw it."""


@dataclass(frozen=True)
class Downgrade:
    """Re-deliver a recorded session after the tokens moved past its version."""


@dataclass(frozen=True)
class SpoofAck:
    """Starve one token of the broadcast, then forge its success report.

    The victim defaults to the second token so the tie-broken pilot
    election never lands on the starved device.
    """

    victim_index: int = 1


@dataclass(frozen=True)
class UnauthorizedDevice:
    """A token with a key the server never provisioned listens in."""


AttackScript = (
    Eavesdrop
    | InjectFirmware
    | TamperChunk
    | ReplaySession
    | Downgrade
    | SpoofAck
    | UnauthorizedDevice
)


@dataclass
class AttackOutcome:
    """What the attack achieved, measured from ground truth after the run."""

    tokens_installed_foreign: int = 0  # installed image differs from the server's
    attacker_bytes_installed: bool = False  # image equals the attacker's choice
    plaintext_recovered: bool = False
    version_decreased: bool = False
    server_fooled: bool = False  # validation reported success for a stale token
    attestation_caught: bool | None = None
    control_run: bool = False
    notes: dict = field(default_factory=dict)


@dataclass
class EavesdropResult:
    ciphertext: bytes
    longest_match: int
    recovered: bytes | None


def eavesdrop_extract(
    transcript: simnet.Transcript | list[dict],
    plaintext: bytes,
    session_key: bytes | None = None,
    iv: bytes | None = None,
) -> EavesdropResult:
    """Reassemble broadcast payloads from a transcript and score the leak.

    Returns the concatenated chunk bytes, the longest common substring with
    the reference plaintext, and (when the attacker somehow holds the
    session key, the white-box control) the decrypted recovery attempt.
    """
    rows = (
        [
            {"kind": r.kind, "payload": r.payload_hex}
            for r in transcript.records
        ]
        if isinstance(transcript, simnet.Transcript)
        else transcript
    )
    chunks: dict[int, bytes] = {}
    for row in rows:
        if row["kind"] != wire.CommandKind.SECURE_COMM.name:
            continue
        index, chunk = wire.unpack_secure_comm(bytes.fromhex(row["payload"]))
        chunks[index] = chunk
    ciphertext = b"".join(chunks[i] for i in sorted(chunks))

    match = SequenceMatcher(None, ciphertext, plaintext, autojunk=False).find_longest_match(
        0, len(ciphertext), 0, len(plaintext)
    )
    recovered = None
    if session_key is not None and iv is not None and ciphertext:
        try:
            recovered = crypto.skp_decrypt(
                session_key, crypto.CipherBlockChain(iv=iv, ciphertext=ciphertext)
            )
        except (ValueError, crypto.MalformedPadding):
            recovered = None
    return EavesdropResult(ciphertext=ciphertext, longest_match=match.size, recovered=recovered)


# ---------------------------------------------------------------------------
# Interceptors


class _Recorder(simnet.Interceptor):
    """Passive wiretap; also keeps an id->handle map from what it overhears."""

    def __init__(self) -> None:
        self.downlink: list[wire.Frame] = []
        self.assoc_by_order: list[wire.Frame] = []

    def transform_downlink(self, frame):
        self.downlink.append(frame)
        if frame.kind is wire.CommandKind.AUTHENTICATE:
            self.assoc_by_order.append(frame)
        return [(frame, False)]


class _ChunkTamperer(simnet.Interceptor):
    def __init__(self, index: int, xor_mask: bytes) -> None:
        self.index = index
        self.xor_mask = xor_mask
        self.hits = 0

    def transform_downlink(self, frame):
        if frame.kind is wire.CommandKind.SECURE_COMM:
            idx, chunk = wire.unpack_secure_comm(frame.payload)
            if idx == self.index:
                mask = (self.xor_mask * (len(chunk) // len(self.xor_mask) + 1))[: len(chunk)]
                twisted = bytes(a ^ b for a, b in zip(chunk, mask))
                self.hits += 1
                # Re-encoding computes a fresh, valid CRC: the link-layer
                # check is useless against an in-path attacker.
                return [(replace(frame, payload=wire.pack_secure_comm(idx, twisted)), True)]
        return [(frame, False)]


class _ChunkSubstituter(simnet.Interceptor):
    """Swap every broadcast chunk for the attacker's own ciphertext."""

    def __init__(self, ciphertext: bytes) -> None:
        self.ciphertext = ciphertext

    def transform_downlink(self, frame):
        if frame.kind is wire.CommandKind.SECURE_COMM:
            idx, chunk = wire.unpack_secure_comm(frame.payload)
            start = idx * len(chunk) if chunk else 0
            mine = self.ciphertext[start : start + len(chunk)]
            if len(mine) == len(chunk) and chunk:
                return [(replace(frame, payload=wire.pack_secure_comm(idx, mine)), True)]
        return [(frame, False)]


class _Starver(simnet.Interceptor):
    """Block the broadcast for one victim, then forge its validation reply."""

    def __init__(self, victim_id: bytes, fake_version: int, fake_vt_mv: int = 2400) -> None:
        self.victim_hex = victim_id.hex()
        self.victim_id = victim_id
        self.fake_version = fake_version
        self.fake_vt_mv = fake_vt_mv
        self.eob_seen = False
        self.spoofing = False

    def transform_downlink(self, frame):
        if frame.kind is wire.CommandKind.EOB:
            self.eob_seen = True
        return [(frame, False)]

    def deliver_to(self, frame, token_id):
        if token_id == self.victim_hex and frame.kind in (
            wire.CommandKind.SECURE_COMM,
            wire.CommandKind.EOB,
        ):
            return False
        return True

    def transform_uplink(self, frame, sender_id):
        # After the broadcast, suppress the victim's truthful reports so only
        # the forged one reaches the reader.
        if (
            self.spoofing
            and self.eob_seen
            and sender_id == self.victim_hex
            and frame.kind is wire.CommandKind.INVENTORY_REPLY
        ):
            return []
        return [(frame, False)]

    def inventory_spoofs(self):
        if not (self.eob_seen and self.spoofing):
            return []
        payload = wire.InventoryReply(
            token_id=self.victim_id,
            version=self.fake_version,
            vt_millivolts=self.fake_vt_mv,
        ).pack()
        return [wire.Frame(wire.CommandKind.INVENTORY_REPLY, payload=payload)]


class _SessionHijacker(simnet.Interceptor):
    """Copy selected commands to an extra handle the server never addressed."""

    def __init__(self) -> None:
        self.extra_handle: int | None = None

    def transform_downlink(self, frame):
        out = [(frame, False)]
        if self.extra_handle is not None and frame.kind in (
            wire.CommandKind.ENTER_WISECR,
            wire.CommandKind.AUTHENTICATE,
        ):
            out.append((replace(frame, handle=self.extra_handle), True))
        return out


# ---------------------------------------------------------------------------
# Scenario plumbing for attack runs


@dataclass
class AttackRun:
    sim: simnet.Simulation
    session: ServerSession
    tokens: list[simnet.SimToken]
    db: TokenDb
    firmware: bytes


def _make_tokens(
    n: int,
    initial_version: int,
    unsafe_disable_mac_check: bool,
    extra_foreign: bool = False,
) -> tuple[list[simnet.SimToken], TokenDb]:
    db = TokenDb()
    tokens: list[simnet.SimToken] = []
    for i in range(n):
        token_id = bytes([0x10 + i]) * wire.TOKEN_ID_SIZE
        key = crypto.RandomSource(f"device-key/{i}").key()
        db.add(DbEntry(token_id, key, version=initial_version))
        state = TokenState(
            SecureStorage(token_id, key, initial_version),
            app_image=b"factory app",
            unsafe_disable_mac_check=unsafe_disable_mac_check,
        )
        tokens.append(
            simnet.SimToken(state, power.ChannelState(distance_m=STRONG_DISTANCE_M))
        )
    if extra_foreign:
        token_id = b"\xee" * wire.TOKEN_ID_SIZE
        key = crypto.RandomSource("foreign-key").key()  # never provisioned
        state = TokenState(
            SecureStorage(token_id, key, initial_version),
            app_image=b"factory app",
            unsafe_disable_mac_check=unsafe_disable_mac_check,
        )
        tokens.append(
            simnet.SimToken(state, power.ChannelState(distance_m=STRONG_DISTANCE_M))
        )
    return tokens, db


def _build_run(
    seed: int,
    firmware: bytes,
    new_version: int,
    interceptor: simnet.Interceptor | None,
    n_tokens: int = 2,
    initial_version: int = 1,
    unsafe_disable_mac_check: bool = False,
    extra_foreign: bool = False,
    max_attempts: int = 2,
) -> AttackRun:
    tokens, db = _make_tokens(
        n_tokens, initial_version, unsafe_disable_mac_check, extra_foreign
    )
    sim = simnet.Simulation(
        tokens=tokens, rng=crypto.RandomSource(seed), interceptor=interceptor
    )
    sim.start_tokens()
    options = SessionOptions(new_version=new_version, max_attempts=max_attempts)
    session = ServerSession(sim, db, firmware, options)
    return AttackRun(sim=sim, session=session, tokens=tokens, db=db, firmware=firmware)


def _collect(run: AttackRun, outcome: AttackOutcome, versions_before: dict[str, int]) -> None:
    for tok in run.tokens:
        installed = tok.state.app_image
        if tok.state.storage.version != versions_before[tok.id_hex()]:
            if installed != run.firmware and installed is not None:
                outcome.tokens_installed_foreign += 1
        if tok.state.storage.version < versions_before[tok.id_hex()]:
            outcome.version_decreased = True


def _versions(run: AttackRun) -> dict[str, int]:
    return {tok.id_hex(): tok.state.storage.version for tok in run.tokens}


DEFAULT_FIRMWARE_LEN = 96


def run_attack(
    script: AttackScript,
    seed: int,
    firmware_len: int = DEFAULT_FIRMWARE_LEN,
    disable_protections: bool = False,
) -> AttackOutcome:
    """Execute one scripted attack against a live session.

    `disable_protections` selects the positive-control configuration for
    the script (token tag checks skipped, or the session key leaked),
    proving the corresponding assertion can fail.
    """
    firmware = crypto.RandomSource(f"fw/{seed}").bytes(firmware_len)
    outcome = AttackOutcome(control_run=disable_protections)

    if isinstance(script, Eavesdrop):
        run = _build_run(seed, firmware, new_version=2, interceptor=None)
        before = _versions(run)
        run.session.run_update()
        key = iv = None
        if disable_protections:
            # White-box control: the harness hands the attacker the session
            # secrets to prove recovery would be visible.
            key, iv = _session_secrets(run)
        result = eavesdrop_extract(run.sim.transcript, firmware, key, iv)
        outcome.plaintext_recovered = (
            result.recovered == firmware or result.longest_match >= 16
        )
        outcome.notes["longest_match"] = result.longest_match
        _collect(run, outcome, before)
        return outcome

    if isinstance(script, TamperChunk):
        interceptor = _ChunkTamperer(script.index, script.xor_mask)
        run = _build_run(
            seed,
            firmware,
            new_version=2,
            interceptor=interceptor,
            unsafe_disable_mac_check=disable_protections,
            max_attempts=1,
        )
        before = _versions(run)
        report = run.session.run_update()
        outcome.notes["tampered_frames"] = interceptor.hits
        outcome.notes["updated"] = report.updated
        _collect(run, outcome, before)
        outcome.attacker_bytes_installed = outcome.tokens_installed_foreign > 0
        return outcome

    if isinstance(script, InjectFirmware):
        run = _build_run(
            seed,
            firmware,
            new_version=2,
            interceptor=None,  # set below, needs the session key for the control
            unsafe_disable_mac_check=disable_protections,
            max_attempts=1,
        )
        malicious = script.firmware
        if disable_protections:
            # Control: leaked session secrets let the attacker encrypt its
            # payload so tokens decode it exactly.
            key, iv = _session_secrets(run)
            ct = crypto.skp_encrypt(key, iv, malicious).ciphertext
        else:
            attacker_key = crypto.RandomSource(f"attacker/{seed}").key()
            ct = crypto.skp_encrypt(attacker_key, bytes(16), malicious).ciphertext
        run.sim.interceptor = _ChunkSubstituter(ct)
        before = _versions(run)
        run.session.run_update()
        _collect(run, outcome, before)
        outcome.attacker_bytes_installed = any(
            tok.state.app_image == malicious for tok in run.tokens
        )
        return outcome

    if isinstance(script, (ReplaySession, Downgrade)):
        return _run_replay(script, seed, firmware, outcome, disable_protections)

    if isinstance(script, SpoofAck):
        return _run_spoof(script, seed, firmware, outcome, disable_protections)

    if isinstance(script, UnauthorizedDevice):
        interceptor = _SessionHijacker()
        run = _build_run(
            seed,
            firmware,
            new_version=2,
            interceptor=interceptor,
            extra_foreign=True,
            unsafe_disable_mac_check=disable_protections,
            max_attempts=1,
        )
        foreign = run.tokens[-1]
        before = _versions(run)

        # The attacker singulates alongside the server and mirrors the
        # session commands at the foreign device's handle.
        def keep_handle_fresh() -> None:
            interceptor.extra_handle = foreign.state.handle

        original_singulate = run.sim.singulate

        def singulate_and_refresh():
            responses = original_singulate()
            keep_handle_fresh()
            return responses

        run.sim.singulate = singulate_and_refresh  # type: ignore[method-assign]
        report = run.session.run_update()
        _collect(run, outcome, before)
        outcome.notes["foreign_version"] = foreign.state.storage.version
        outcome.notes["foreign_accepted"] = (
            foreign.state.storage.version != before[foreign.id_hex()]
        )
        outcome.notes["authorized_updated"] = report.updated
        return outcome

    raise TypeError(f"unknown attack script {script!r}")


def _session_secrets(run: AttackRun) -> tuple[bytes, bytes]:
    """White-box helper for controls: the secrets the broadcast session uses.

    Key derivation is seed-based, so forking the same label reproduces the
    session stream without touching it.
    """
    rng = run.session.rng.fork("prelude")
    return rng.key(), rng.bytes(16)


def _run_replay(
    script: ReplaySession | Downgrade,
    seed: int,
    firmware: bytes,
    outcome: AttackOutcome,
    disable_protections: bool,
) -> AttackOutcome:
    """Record a legitimate session, then re-deliver it out of context."""
    recorder = _Recorder()
    run = _build_run(
        seed,
        firmware,
        new_version=2,
        interceptor=recorder,
        unsafe_disable_mac_check=disable_protections,
        max_attempts=2,
    )
    report = run.session.run_update()
    outcome.notes["recording_updated"] = report.updated

    if isinstance(script, Downgrade):
        # Move the fleet past the recorded version before replaying.
        newer = crypto.RandomSource(f"fw-next/{seed}").bytes(len(firmware))
        run.sim.interceptor = simnet.Interceptor()
        next_session = ServerSession(
            run.sim,
            run.db,
            newer,
            SessionOptions(new_version=3, max_attempts=2),
            rng=run.session.rng.fork("second-session"),
        )
        report2 = next_session.run_update()
        outcome.notes["upgrade_updated"] = report2.updated
        reference = newer
    else:
        reference = firmware

    before = _versions(run)
    images_before = {t.id_hex(): t.state.app_image for t in run.tokens}

    # Replay phase: the attacker acts as the reader. It re-runs inventory to
    # learn fresh handles, puts tokens back into the update flow, and then
    # re-addresses each recorded command to the right device.
    sim = run.sim
    sim.interceptor = simnet.Interceptor()
    responses = sim.singulate()
    by_id = {r.token_id: r for r in responses}
    for r in responses:
        sim.send_downlink(
            wire.Frame(wire.CommandKind.ENTER_WISECR, handle=r.handle), sender="adversary"
        )
    sim.advance(sim.now_us() + 100_000)
    responses = sim.singulate()
    by_id = {r.token_id: r for r in responses}

    # Recorded association frames are re-addressed in recording order to the
    # same ids they originally served (the wiretap saw that pairing).
    assoc = [f for f in recorder.downlink if f.kind is wire.CommandKind.AUTHENTICATE]
    ordered_ids = sorted(by_id)
    for frame, token_id in zip(assoc, ordered_ids):
        target = by_id.get(token_id)
        if target is None:
            continue
        sim.send_downlink(replace(frame, handle=target.handle), sender="adversary")
        sim.advance(sim.now_us() + 120_000)

    pilot_handle = by_id[ordered_ids[0]].handle if ordered_ids else 0
    for frame in recorder.downlink:
        if frame.kind is wire.CommandKind.SECURE_COMM:
            arrival = sim.send_downlink(replace(frame, handle=pilot_handle), sender="adversary")
            sim.advance(arrival + 8_000)
    arrival = sim.send_downlink(
        wire.Frame(wire.CommandKind.EOB, handle=pilot_handle), sender="adversary"
    )
    sim.advance(arrival + 3_000_000)  # let validation and reboots finish

    after = _versions(run)
    for tok in run.tokens:
        tid = tok.id_hex()
        if after[tid] < before[tid]:
            outcome.version_decreased = True
        if tok.state.app_image != images_before[tid] and tok.state.app_image != reference:
            outcome.tokens_installed_foreign += 1
            if isinstance(script, Downgrade) and tok.state.app_image == firmware:
                # The replay re-installed the stale image.
                outcome.version_decreased = outcome.version_decreased or (
                    after[tid] <= before[tid]
                )
    outcome.notes["versions_before"] = before
    outcome.notes["versions_after"] = after
    return outcome


def _run_spoof(
    script: SpoofAck,
    seed: int,
    firmware: bytes,
    outcome: AttackOutcome,
    disable_protections: bool,
) -> AttackOutcome:
    """Starve a victim, forge its success report, then see if attestation notices."""
    new_version = 2
    tokens, db = _make_tokens(2, initial_version=1, unsafe_disable_mac_check=False)
    victim = tokens[script.victim_index]
    interceptor = _Starver(victim.state.storage.token_id, fake_version=new_version)
    sim = simnet.Simulation(
        tokens=tokens, rng=crypto.RandomSource(seed), interceptor=interceptor
    )
    sim.start_tokens()
    session = ServerSession(
        sim, db, firmware, SessionOptions(new_version=new_version, max_attempts=1)
    )

    before = _versions(AttackRun(sim, session, tokens, db, firmware))
    interceptor.spoofing = True
    report = session.run_update()

    victim_hex = victim.id_hex()
    outcome.server_fooled = report.outcomes.get(victim_hex) == "updated"
    outcome.notes["victim_version"] = victim.state.storage.version

    # The victim is still waiting for broadcast data; a bare end-of-broadcast
    # kicks it back through validation (which fails) into a responsive state.
    interceptor.spoofing = False
    arrival = sim.send_downlink(
        wire.Frame(wire.CommandKind.EOB, handle=victim.state.handle or 0), sender="adversary"
    )
    sim.advance(arrival + 2_000_000)

    if disable_protections:
        # Control: a server that skips attestation never learns the truth.
        outcome.attestation_caught = None
    else:
        ok = session.attest(victim.state.storage.token_id, wire.ATTEST_ELABORATE)
        outcome.attestation_caught = not ok

    run = AttackRun(sim, session, tokens, db, firmware)
    _collect(run, outcome, before)
    return outcome


def unauthorized_device(seed: int, firmware_len: int = DEFAULT_FIRMWARE_LEN) -> AttackOutcome:
    """Convenience wrapper for the foreign-device scenario."""
    return run_attack(UnauthorizedDevice(), seed, firmware_len)


# ---------------------------------------------------------------------------
# CSV sink

OUTCOME_COLUMNS = [
    "scenario",
    "seed",
    "attack",
    "control_run",
    "tokens_installed_foreign",
    "attacker_bytes_installed",
    "plaintext_recovered",
    "version_decreased",
    "server_fooled",
    "attestation_caught",
]


def outcome_row(scenario_id: str, seed: int, script: AttackScript, outcome: AttackOutcome) -> dict:
    return {
        "scenario": scenario_id,
        "seed": seed,
        "attack": type(script).__name__,
        "control_run": outcome.control_run,
        "tokens_installed_foreign": outcome.tokens_installed_foreign,
        "attacker_bytes_installed": outcome.attacker_bytes_installed,
        "plaintext_recovered": outcome.plaintext_recovered,
        "version_decreased": outcome.version_decreased,
        "server_fooled": outcome.server_fooled,
        "attestation_caught": outcome.attestation_caught,
    }


def append_outcomes_csv(path, rows: list[dict]) -> None:
    """Append attack outcomes to a CSV file, writing the header once."""
    import csv
    from pathlib import Path

    path = Path(path)
    new_file = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=OUTCOME_COLUMNS, lineterminator="\n")
        if new_file:
            writer.writeheader()
        writer.writerows(rows)
