"""Symmetric-key primitives shared by every protocol stage.

Block encryption is AES-128 in CBC mode with PKCS#7 padding (a full padding
block is always appended, so unpadding is length-exact). Message
authentication is AES-CMAC. Both are built on the `cryptography` package;
this module owns padding, framing of ciphertext into a block chain, and the
seedable random source used to make simulation runs reproducible.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import os
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.cmac import CMAC

BLOCK_SIZE = 16
KEY_SIZE = 16
TAG_SIZE = 16

ZERO_IV = bytes(BLOCK_SIZE)


class MalformedPadding(Exception):
    """Ciphertext unpadded to an invalid PKCS#7 trailer.

    Callers in the protocol treat this the same as any other garbled
    plaintext: the failure surfaces later as a MAC mismatch, never as a
    distinguishable decryption oracle.
    """


def _check_key(key: bytes) -> None:
    if len(key) != KEY_SIZE:
        raise ValueError(f"key must be {KEY_SIZE} bytes, got {len(key)}")


@dataclass(frozen=True)
class CipherBlockChain:
    """CBC ciphertext plus the IV it was chained from."""

    iv: bytes
    ciphertext: bytes

    def __post_init__(self) -> None:
        if len(self.iv) != BLOCK_SIZE:
            raise ValueError("IV must be 16 bytes")
        if not self.ciphertext or len(self.ciphertext) % BLOCK_SIZE:
            raise ValueError("ciphertext must be a positive multiple of 16 bytes")

    @property
    def blocks(self) -> tuple[bytes, ...]:
        ct = self.ciphertext
        return tuple(ct[i : i + BLOCK_SIZE] for i in range(0, len(ct), BLOCK_SIZE))


def _pad(data: bytes) -> bytes:
    n = BLOCK_SIZE - (len(data) % BLOCK_SIZE)
    return data + bytes([n]) * n


def _unpad(data: bytes) -> bytes:
    if not data:
        raise MalformedPadding("empty plaintext")
    n = data[-1]
    if n < 1 or n > BLOCK_SIZE or len(data) < n:
        raise MalformedPadding("bad pad length")
    if data[-n:] != bytes([n]) * n:
        raise MalformedPadding("inconsistent pad bytes")
    return data[:-n]


def skp_encrypt(key: bytes, iv: bytes, plaintext: bytes) -> CipherBlockChain:
    """Encrypt `plaintext` under AES-128-CBC, always padding PKCS#7-style."""
    _check_key(key)
    if not plaintext:
        raise ValueError("plaintext must be non-empty")
    enc = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    ct = enc.update(_pad(plaintext)) + enc.finalize()
    return CipherBlockChain(iv=iv, ciphertext=ct)


def skp_decrypt(key: bytes, chain: CipherBlockChain) -> bytes:
    """Invert :func:`skp_encrypt`; raises :class:`MalformedPadding` on a bad trailer."""
    _check_key(key)
    dec = Cipher(algorithms.AES(key), modes.CBC(chain.iv)).decryptor()
    padded = dec.update(chain.ciphertext) + dec.finalize()
    return _unpad(padded)


def mac_compute(key: bytes, message: bytes) -> bytes:
    """AES-CMAC tag over `message` (empty message allowed)."""
    _check_key(key)
    c = CMAC(algorithms.AES(key))
    c.update(message)
    return c.finalize()


def mac_verify(key: bytes, message: bytes, tag: bytes) -> bool:
    """Constant-time check that `tag` authenticates `message` under `key`."""
    return hmac.compare_digest(mac_compute(key, message), tag)


class RandomSource:
    """Byte stream for keys, IVs, challenges and simulation noise.

    With a seed the stream is an AES-128-CTR keystream keyed from the seed:
    fully deterministic, so a scenario replays bit-for-bit. Without a seed
    (``RandomSource()``) bytes come from OS entropy; that mode is for library
    users running the protocol outside the simulator.
    """

    def __init__(self, seed: int | bytes | str | None = None):
        self.seed = seed
        if seed is None:
            self._stream = None
        else:
            material = hashlib.sha256(self._seed_bytes(seed)).digest()
            cipher = Cipher(algorithms.AES(material[:16]), modes.CTR(material[16:]))
            self._stream = cipher.encryptor()

    @staticmethod
    def _seed_bytes(seed: int | bytes | str) -> bytes:
        if isinstance(seed, bytes):
            return seed
        if isinstance(seed, int):
            return seed.to_bytes(16, "big", signed=True)
        return seed.encode()

    @property
    def deterministic(self) -> bool:
        return self._stream is not None

    def bytes(self, n: int) -> bytes:
        if n < 1:
            raise ValueError("n must be >= 1")
        if self._stream is None:
            return os.urandom(n)
        return self._stream.update(bytes(n))

    def key(self) -> bytes:
        return self.bytes(KEY_SIZE)

    def uniform(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (int.from_bytes(self.bytes(8), "big") >> 11) / (1 << 53)

    def gauss(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """Normal deviate via Box-Muller; draws exactly two uniforms."""
        u1 = self.uniform()
        u2 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        return mu + sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def fork(self, label: str) -> "RandomSource":
        """Independent child stream; children with distinct labels never collide."""
        if self._stream is None:
            return RandomSource()
        tag = hashlib.sha256(self._seed_bytes(self.seed) + b"/" + label.encode()).digest()
        return RandomSource(tag)


def rng_bytes(source: RandomSource, n: int) -> bytes:
    return source.bytes(n)
