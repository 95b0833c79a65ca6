"""Frame formats for the over-the-air command subset, CRC-16, and chunking.

The encoding is a compact binary layout: a one-byte kind tag, an optional
16-bit handle (RN16) for addressed kinds, a length-prefixed payload, and a
trailing CRC-16 over everything before it. Bit-level air symbols are out of
scope; the simulator charges their cost as link-rate air time instead.

CRC parameters are the ISO/IEC 13239 set used by the Gen2 air protocol:
polynomial 0x1021, initial value 0xFFFF, final XOR 0xFFFF, MSB first.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum


class WireError(Exception):
    pass


class PayloadTooLarge(WireError):
    pass


class CrcMismatch(WireError):
    """Frame failed its CRC check; the session layer retransmits."""


class MalformedFrame(WireError):
    pass


class CommandKind(IntEnum):
    INVENTORY = 0x01
    INVENTORY_REPLY = 0x02
    ENTER_WISECR = 0x03
    AUTHENTICATE = 0x04
    SECURE_COMM = 0x05
    EOB = 0x06
    ATTEST_REQUEST = 0x07
    ATTEST_REPLY = 0x08
    ACK = 0x09


# Kinds carrying an RN16 handle. Inventory traffic predates singulation,
# and a tag's inventory reply identifies itself by id instead.
ADDRESSED_KINDS = frozenset(
    {
        CommandKind.ENTER_WISECR,
        CommandKind.AUTHENTICATE,
        CommandKind.SECURE_COMM,
        CommandKind.EOB,
        CommandKind.ATTEST_REQUEST,
        CommandKind.ATTEST_REPLY,
        CommandKind.ACK,
    }
)

MAX_PAYLOAD = {
    CommandKind.INVENTORY: 0,
    CommandKind.INVENTORY_REPLY: 18,
    CommandKind.ENTER_WISECR: 0,
    CommandKind.AUTHENTICATE: 128,
    CommandKind.SECURE_COMM: 260,
    CommandKind.EOB: 0,
    CommandKind.ATTEST_REQUEST: 64,
    CommandKind.ATTEST_REPLY: 16,
    CommandKind.ACK: 1,
}

# Ack status byte when a payload is present; a bare Ack means success.
ACK_CRC_ERROR = 0x01


def crc16(data: bytes) -> int:
    crc = 0xFFFF
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            if crc & 0x8000:
                crc = ((crc << 1) ^ 0x1021) & 0xFFFF
            else:
                crc = (crc << 1) & 0xFFFF
    return crc ^ 0xFFFF


@dataclass(frozen=True)
class Frame:
    kind: CommandKind
    handle: int | None = None
    payload: bytes = b""

    def __post_init__(self) -> None:
        if (self.handle is not None) != (self.kind in ADDRESSED_KINDS):
            raise ValueError(f"{self.kind.name} handle presence mismatch")
        if self.handle is not None and not 0 <= self.handle <= 0xFFFF:
            raise ValueError("handle must fit in 16 bits")


def encode(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD[frame.kind]:
        raise PayloadTooLarge(
            f"{frame.kind.name} payload {len(frame.payload)} > {MAX_PAYLOAD[frame.kind]}"
        )
    body = bytes([frame.kind])
    if frame.handle is not None:
        body += struct.pack(">H", frame.handle)
    body += struct.pack(">H", len(frame.payload)) + frame.payload
    return body + struct.pack(">H", crc16(body))


def decode(data: bytes) -> Frame:
    if len(data) < 5:
        raise MalformedFrame("frame shorter than minimum")
    try:
        kind = CommandKind(data[0])
    except ValueError as exc:
        raise MalformedFrame(f"unknown kind byte 0x{data[0]:02x}") from exc
    pos = 1
    handle = None
    if kind in ADDRESSED_KINDS:
        if len(data) < pos + 2:
            raise MalformedFrame("truncated handle")
        handle = struct.unpack_from(">H", data, pos)[0]
        pos += 2
    if len(data) < pos + 2:
        raise MalformedFrame("truncated length field")
    plen = struct.unpack_from(">H", data, pos)[0]
    pos += 2
    if len(data) != pos + plen + 2:
        raise MalformedFrame("length field does not match frame size")
    payload = data[pos : pos + plen]
    stored = struct.unpack_from(">H", data, pos + plen)[0]
    if crc16(data[: pos + plen]) != stored:
        raise CrcMismatch("CRC check failed")
    if plen > MAX_PAYLOAD[kind]:
        raise MalformedFrame("payload exceeds kind maximum")
    return Frame(kind=kind, handle=handle, payload=payload)


# ---------------------------------------------------------------------------
# Payload layouts. The air protocol only fixes command semantics; these
# packed layouts are this implementation's stable wire contract.

TOKEN_ID_SIZE = 12  # 96-bit EPC-style identifier

_INV_REPLY = struct.Struct(">12sIH")
_AUTH = struct.Struct(">32s16sIHHB16s")
_ATTEST_REQ = struct.Struct(">32s16sBII")
_SECURE_COMM_HDR = struct.Struct(">I")

UNBOUNDED_ACTIVE_MS = 0xFFFF

ROLE_OBSERVER = 0
ROLE_PILOT = 1

ATTEST_FAST = 0
ATTEST_ELABORATE = 1


@dataclass(frozen=True)
class InventoryReply:
    token_id: bytes
    version: int
    vt_millivolts: int  # harvester voltage piggybacked in the reply data field

    def pack(self) -> bytes:
        return _INV_REPLY.pack(self.token_id, self.version, self.vt_millivolts)

    @classmethod
    def unpack(cls, payload: bytes) -> "InventoryReply":
        tid, ver, vt = _INV_REPLY.unpack(payload)
        return cls(tid, ver, vt)


@dataclass(frozen=True)
class AuthenticatePayload:
    """Security-association material for one token.

    `wrapped_key` is the session key encrypted under the token's device key
    (zero IV, so it is two CBC blocks after padding); `tag` binds the new
    firmware to the token's current and new version numbers. The execution
    schedule (t_active/t_lpm) and broadcast role ride along.
    """

    wrapped_key: bytes
    tag: bytes
    new_version: int
    t_lpm_ms: int
    t_active_ms: int  # UNBOUNDED_ACTIVE_MS means run without slicing
    role: int
    iv: bytes

    def pack(self) -> bytes:
        return _AUTH.pack(
            self.wrapped_key,
            self.tag,
            self.new_version,
            self.t_lpm_ms,
            self.t_active_ms,
            self.role,
            self.iv,
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "AuthenticatePayload":
        try:
            fields = _AUTH.unpack(payload)
        except struct.error as exc:
            raise MalformedFrame("bad authenticate payload") from exc
        return cls(*fields)


@dataclass(frozen=True)
class AttestRequestPayload:
    wrapped_key: bytes
    challenge: bytes
    mode: int  # ATTEST_FAST or ATTEST_ELABORATE
    segment_start: int
    segment_length: int

    def pack(self) -> bytes:
        return _ATTEST_REQ.pack(
            self.wrapped_key, self.challenge, self.mode, self.segment_start, self.segment_length
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "AttestRequestPayload":
        try:
            fields = _ATTEST_REQ.unpack(payload)
        except struct.error as exc:
            raise MalformedFrame("bad attest request payload") from exc
        return cls(*fields)


def pack_secure_comm(index: int, chunk: bytes) -> bytes:
    return _SECURE_COMM_HDR.pack(index) + chunk


def unpack_secure_comm(payload: bytes) -> tuple[int, bytes]:
    if len(payload) < _SECURE_COMM_HDR.size:
        raise MalformedFrame("secure comm payload too short")
    (index,) = _SECURE_COMM_HDR.unpack_from(payload)
    return index, payload[_SECURE_COMM_HDR.size :]


# ---------------------------------------------------------------------------
# Canonical byte layouts for MAC inputs. Both endpoints must build these
# identically or honest sessions would fail validation.


def validation_mac_input(firmware: bytes, current_version: int, new_version: int) -> bytes:
    return firmware + struct.pack(">II", current_version, new_version)


def attest_mac_input(
    challenge: bytes, segment: bytes | None, token_id: bytes, version: int
) -> bytes:
    body = challenge + (segment if segment is not None else b"")
    return body + token_id + struct.pack(">I", version)


# ---------------------------------------------------------------------------
# Firmware chunking


@dataclass(frozen=True)
class ChunkPlan:
    """Ciphertext split into dense-indexed broadcast packets."""

    payload_size: int
    packets: tuple[tuple[int, bytes], ...]

    @property
    def count(self) -> int:
        return len(self.packets)

    def reassemble(self) -> bytes:
        return b"".join(chunk for _, chunk in self.packets)


def chunk_firmware(ciphertext: bytes, payload_size: int) -> ChunkPlan:
    """Split `ciphertext` into ceil(len/payload_size) indexed packets."""
    if payload_size < 1:
        raise ValueError("payload_size must be >= 1")
    if not ciphertext:
        raise ValueError("ciphertext must be non-empty")
    packets = tuple(
        (i, ciphertext[off : off + payload_size])
        for i, off in enumerate(range(0, len(ciphertext), payload_size))
    )
    assert len(packets) == math.ceil(len(ciphertext) / payload_size)
    return ChunkPlan(payload_size=payload_size, packets=packets)
