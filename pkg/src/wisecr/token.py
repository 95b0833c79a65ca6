"""The CRFID token endpoint: bootloader control flow and update logic.

A token is a single-threaded state machine. This module holds the pure
protocol logic (phase transitions, the memory-segment access policy, block
storage, decrypt-and-validate, attestation responses); the simulator decides
*when* each piece runs and what it costs in time and energy.

Phases follow the bootloader control flow: every power-up (hard or soft)
re-enters the bootloader, which installs the access policy and then hands
off to the application, the update state machine, or sits waiting for
firmware. Volatile session material never survives a reset of any kind.
"""

from __future__ import annotations

import hmac
from dataclasses import dataclass, field
from enum import Enum

from . import crypto, wire
from .power import PamParams


class TokenPhase(Enum):
    OFF = "off"
    BOOTLOADER = "bootloader"
    APP_EXEC = "app_exec"
    WISECR_ASSOC = "wisecr_assoc"
    WISECR_BROADCAST = "wisecr_broadcast"
    WISECR_VALIDATE = "wisecr_validate"
    WISECR_ATTEST = "wisecr_attest"


class Role(Enum):
    PILOT = "pilot"
    OBSERVER = "observer"


class Segment(Enum):
    M = "m"  # secure storage: id, device key, version
    M_RX = "m_rx"  # bootloader image + IVT, write-protected
    M_RWX = "m_rwx"  # application code/data + download region


class MemOp(Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"


class AccessResult(Enum):
    ALLOWED = "allowed"
    RESET_TO_BOOTLOADER = "reset_to_bootloader"


@dataclass
class SecureStorage:
    """Bootloader-only NVM: survives power loss, immutable except `version`."""

    token_id: bytes
    device_key: bytes
    version: int

    def __post_init__(self) -> None:
        if len(self.token_id) != wire.TOKEN_ID_SIZE:
            raise ValueError("token id must be 96 bits")
        if len(self.device_key) != crypto.KEY_SIZE:
            raise ValueError("device key must be 128 bits")


@dataclass
class SessionScratch:
    """Volatile update-session state; erased on any reset or power loss."""

    session_key: bytes
    iv: bytes
    tag_received: bytes
    new_version: int
    pam: PamParams
    role: Role
    download: dict[int, bytes] = field(default_factory=dict)


@dataclass
class Reaction:
    """What a delivered frame asks of the surrounding simulator."""

    reply: wire.Frame | None = None
    soft_reset: bool = False
    start_finalize: bool = False
    start_attest: wire.AttestRequestPayload | None = None


class TokenState:
    """One simulated token, including its non-volatile memory."""

    def __init__(
        self,
        storage: SecureStorage,
        app_image: bytes | None = None,
        download_limit: int = 1 << 16,
        unsafe_disable_mac_check: bool = False,
    ):
        self.storage = storage
        self.phase = TokenPhase.OFF
        self.wisecr_mode = False  # persistent flag steering boot into the update flow
        self.app_image = app_image
        self.app_valid = app_image is not None
        self.download_limit = download_limit
        self.scratch: SessionScratch | None = None
        self.handle: int | None = None
        self.measured_vt: float | None = None
        # Copied out of secure storage at boot so the application can answer
        # inventory rounds after the access policy locks segment M.
        self.visible_id = storage.token_id
        self.visible_version = storage.version
        # Test-only positive control: accept firmware without checking the
        # tag. Never set outside adversary-harness controls.
        self.unsafe_disable_mac_check = unsafe_disable_mac_check

    # -- lifecycle ---------------------------------------------------------

    def boot(self, vt: float | None = None) -> None:
        """Power-up path: install MPU policy, self-test, dispatch by flags."""
        self.visible_id = self.storage.token_id
        self.visible_version = self.storage.version
        self.measured_vt = vt
        if self.wisecr_mode:
            self.phase = TokenPhase.WISECR_ASSOC
        elif self.app_valid:
            self.phase = TokenPhase.APP_EXEC
        else:
            self.phase = TokenPhase.BOOTLOADER

    def soft_reset(self) -> None:
        """Software reset: volatile state gone, power retained, reboot now."""
        self.scratch = None
        self.handle = None
        self.measured_vt = None
        self.boot()

    def on_power_loss(self) -> None:
        """Brownout: all volatile state is discarded; NVM survives."""
        self.scratch = None
        self.handle = None
        self.measured_vt = None
        self.phase = TokenPhase.OFF

    @property
    def powered(self) -> bool:
        return self.phase is not TokenPhase.OFF

    @property
    def role(self) -> Role | None:
        return self.scratch.role if self.scratch else None

    # -- memory protection ---------------------------------------------------

    def mem_access(self, segment: Segment, op: MemOp) -> AccessResult:
        """Apply the segment policy; a violation reboots through the bootloader."""
        if self.phase is TokenPhase.OFF:
            raise ValueError("unpowered token cannot access memory")
        if self.phase is TokenPhase.APP_EXEC:
            violation = segment is Segment.M or (
                segment is Segment.M_RX and op is MemOp.WRITE
            )
        else:
            # Bootloader-owned phases have full access.
            violation = False
        if violation:
            self.soft_reset()
            return AccessResult.RESET_TO_BOOTLOADER
        return AccessResult.ALLOWED

    # -- frame handling ------------------------------------------------------

    def handle_command(self, frame: wire.Frame) -> Reaction:
        """Dispatch one decoded frame. Unknown or foreign frames are ignored."""
        if not self.powered:
            return Reaction()
        kind = frame.kind
        addressed_to_me = frame.handle is not None and frame.handle == self.handle

        if kind is wire.CommandKind.INVENTORY:
            if self.phase in (
                TokenPhase.APP_EXEC,
                TokenPhase.WISECR_ASSOC,
                TokenPhase.BOOTLOADER,
            ):
                return Reaction(reply=self._inventory_reply())
            return Reaction()

        if kind is wire.CommandKind.ENTER_WISECR and addressed_to_me:
            if self.phase in (TokenPhase.APP_EXEC, TokenPhase.BOOTLOADER):
                self.wisecr_mode = True
                return Reaction(reply=self._ack(), soft_reset=True)
            if self.phase is TokenPhase.WISECR_ASSOC:
                return Reaction(reply=self._ack())
            return Reaction()

        if kind is wire.CommandKind.AUTHENTICATE and addressed_to_me:
            if self.phase is TokenPhase.WISECR_ASSOC:
                self.security_associate(wire.AuthenticatePayload.unpack(frame.payload))
                return Reaction(reply=self._ack())
            return Reaction()

        if kind is wire.CommandKind.ATTEST_REQUEST and addressed_to_me:
            if self.phase is TokenPhase.WISECR_ASSOC:
                req = wire.AttestRequestPayload.unpack(frame.payload)
                self.phase = TokenPhase.WISECR_ATTEST
                return Reaction(start_attest=req)
            return Reaction()

        if kind is wire.CommandKind.SECURE_COMM:
            if self.phase is TokenPhase.WISECR_BROADCAST and self.scratch:
                # Observers ignore the handle by design; the pilot both
                # stores and acknowledges.
                index, chunk = wire.unpack_secure_comm(frame.payload)
                self.store_block(index, chunk)
                if self.scratch.role is Role.PILOT and addressed_to_me:
                    return Reaction(reply=self._ack())
            return Reaction()

        if kind is wire.CommandKind.EOB:
            if self.phase is TokenPhase.WISECR_BROADCAST and self.scratch:
                was_pilot = self.scratch.role is Role.PILOT and addressed_to_me
                self.phase = TokenPhase.WISECR_VALIDATE
                return Reaction(
                    reply=self._ack() if was_pilot else None, start_finalize=True
                )
            return Reaction()

        return Reaction()

    def garbled_frame(self) -> Reaction:
        """A frame arrived but failed its CRC. Only a broadcast pilot says so."""
        if (
            self.phase is TokenPhase.WISECR_BROADCAST
            and self.scratch
            and self.scratch.role is Role.PILOT
        ):
            return Reaction(reply=self._ack(status=wire.ACK_CRC_ERROR))
        return Reaction()

    def _ack(self, status: int | None = None) -> wire.Frame:
        payload = b"" if status is None else bytes([status])
        return wire.Frame(wire.CommandKind.ACK, handle=self.handle, payload=payload)

    def _inventory_reply(self) -> wire.Frame:
        vt_mv = int(round((self.measured_vt or 0.0) * 1000))
        payload = wire.InventoryReply(
            token_id=self.visible_id,
            version=self.visible_version,
            vt_millivolts=max(0, min(vt_mv, 0xFFFF)),
        ).pack()
        return wire.Frame(wire.CommandKind.INVENTORY_REPLY, payload=payload)

    # -- update-session steps ------------------------------------------------

    def security_associate(self, auth: wire.AuthenticatePayload) -> None:
        """Unwrap the session key and retain the session material.

        A wrap under the wrong device key produces garbage key material
        rather than an error: the failure must only ever surface as the
        final tag mismatch.
        """
        try:
            session_key = crypto.skp_decrypt(
                self.storage.device_key,
                crypto.CipherBlockChain(iv=crypto.ZERO_IV, ciphertext=auth.wrapped_key),
            )
        except crypto.MalformedPadding:
            session_key = auth.wrapped_key[:16]
        if len(session_key) != crypto.KEY_SIZE:
            session_key = (session_key + bytes(16))[:16]
        t_active = (
            float("inf") if auth.t_active_ms == wire.UNBOUNDED_ACTIVE_MS else float(auth.t_active_ms)
        )
        self.scratch = SessionScratch(
            session_key=session_key,
            iv=auth.iv,
            tag_received=auth.tag,
            new_version=auth.new_version,
            pam=PamParams(t_active_ms=t_active, t_lpm_ms=float(auth.t_lpm_ms)),
            role=Role.PILOT if auth.role == wire.ROLE_PILOT else Role.OBSERVER,
        )
        self.phase = TokenPhase.WISECR_BROADCAST

    def store_block(self, index: int, chunk: bytes) -> None:
        """Write one broadcast chunk into the download region, idempotently."""
        if self.scratch is None:
            return
        if index < 0 or (index + 1) * max(len(chunk), 1) > self.download_limit:
            return  # out of range: ignored, no reply
        self.scratch.download[index] = chunk

    def _assemble_download(self) -> bytes:
        assert self.scratch is not None
        return b"".join(self.scratch.download[i] for i in sorted(self.scratch.download))

    def finalize_update(self) -> bool:
        """Decrypt, authenticate, and either commit or discard the download.

        Returns True when the update was accepted. The firmware commit and
        version bump are a single atomic step; the caller performs the
        soft reset afterwards. Session scratch is erased on both paths.
        """
        if self.phase is not TokenPhase.WISECR_VALIDATE or self.scratch is None:
            return False
        scratch = self.scratch
        assembled = self._assemble_download()
        firmware: bytes | None
        try:
            chain = crypto.CipherBlockChain(iv=scratch.iv, ciphertext=assembled)
            firmware = crypto.skp_decrypt(scratch.session_key, chain)
        except (ValueError, crypto.MalformedPadding):
            firmware = None

        accept = False
        if firmware is not None:
            expected = crypto.mac_compute(
                self.storage.device_key,
                wire.validation_mac_input(
                    firmware, self.storage.version, scratch.new_version
                ),
            )
            accept = hmac.compare_digest(expected, scratch.tag_received)
        if self.unsafe_disable_mac_check and assembled:
            # Positive-control path: install whatever arrived, decodable or
            # not, so harness assertions provably can fail.
            firmware = firmware if firmware is not None else assembled
            accept = True
        if accept:
            assert firmware is not None
            # Atomic NVM commit: image, version, and mode flag together.
            self.app_image = firmware
            self.app_valid = True
            self.storage.version = scratch.new_version
            self.wisecr_mode = False
        self.scratch = None
        return accept

    def attest_respond(self, req: wire.AttestRequestPayload) -> wire.Frame:
        """Compute the challenge response over installed state.

        Elaborate mode covers the requested slice of the application
        segment; fast mode covers only identity and version. The mode flag
        is cleared and the caller resets the token after the reply.
        """
        if self.phase is not TokenPhase.WISECR_ATTEST:
            raise ValueError("attestation outside the attest phase")
        try:
            session_key = crypto.skp_decrypt(
                self.storage.device_key,
                crypto.CipherBlockChain(iv=crypto.ZERO_IV, ciphertext=req.wrapped_key),
            )
        except crypto.MalformedPadding:
            session_key = req.wrapped_key[:16]
        segment: bytes | None = None
        if req.mode == wire.ATTEST_ELABORATE:
            image = self.app_image or b""
            segment = image[req.segment_start : req.segment_start + req.segment_length]
        response = crypto.mac_compute(
            session_key,
            wire.attest_mac_input(
                req.challenge, segment, self.storage.token_id, self.storage.version
            ),
        )
        self.wisecr_mode = False
        return wire.Frame(
            wire.CommandKind.ATTEST_REPLY, handle=self.handle, payload=response
        )
