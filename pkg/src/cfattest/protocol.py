"""Mirrored prover/verifier state machines for sealed ID batches.

Prover side: every recorded ID extends a keyed BLAKE3 hash chain and is cached
in a batch. A full (or flushed) batch is sealed with AES-256-GCM together with
the current chain digest, then the key is ratcheted forward and the batch
counter incremented. The verifier mirrors every step and compares digests.
Acknowledgments flow back sealed under the verifier's current key.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import blake3
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_SIZE = 32
DIGEST_SIZE = 32
ID_SIZE = 8
TAG_SIZE = 16
KDF_CONTEXT = "cfattest 2024 batch-key ratchet"

DIR_BATCH = 0x00
DIR_FEEDBACK = 0x01

_WIRE_HEADER = struct.Struct("<QI")
_U64 = struct.Struct("<Q")
_pack_u64 = _U64.pack


class ProtocolError(Exception):
    """Base class for every attestation-channel failure."""

    def __init__(self, message: str, batch_no: Optional[int] = None):
        super().__init__(message)
        self.batch_no = batch_no


class AuthenticationError(ProtocolError):
    """AEAD tag check failed: tampered ciphertext or counters out of sync."""


class DigestMismatch(ProtocolError):
    """Transmitted hash chain digest differs from the verifier's recomputation."""


class CounterDesync(ProtocolError):
    """Acknowledgment did not match the prover's own state."""


class ProverStall(ProtocolError):
    """No acknowledgment arrived in time; collected IDs are not being verified."""


class BatchFormatError(ProtocolError):
    """Unsealed plaintext or wire bytes have an impossible layout."""


class StateDestroyed(ProtocolError):
    """The state halted after an earlier failure and refuses further use."""


class Secret:
    """32-byte hash-chain root. Readable once; the buffer is zeroed on consumption."""

    def __init__(self, material: bytes):
        if len(material) != KEY_SIZE:
            raise ValueError(f"secret must be {KEY_SIZE} bytes")
        self._buf: Optional[bytearray] = bytearray(material)

    def consume(self) -> bytes:
        if self._buf is None:
            raise StateDestroyed("secret already consumed")
        value = bytes(self._buf)
        self._buf[:] = bytes(KEY_SIZE)
        self._buf = None
        return value

    @property
    def status(self) -> str:
        return "destroyed" if self._buf is None else "live"


class RatchetKey:
    """Symmetric key that only moves forward; previous material is overwritten."""

    def __init__(self, material: bytes, generation: int = 0):
        if len(material) != KEY_SIZE:
            raise ValueError(f"key must be {KEY_SIZE} bytes")
        self._buf = bytearray(material)
        self.generation = generation

    @property
    def material(self) -> bytes:
        return bytes(self._buf)

    def ratchet(self) -> None:
        nxt = kdf(bytes(self._buf))
        self._buf[:] = nxt
        self.generation += 1

    def copy(self) -> "RatchetKey":
        return RatchetKey(bytes(self._buf), self.generation)

    def wipe(self) -> None:
        self._buf[:] = bytes(KEY_SIZE)


def kdf(key: bytes) -> bytes:
    return blake3.blake3(key, derive_key_context=KDF_CONTEXT).digest()


def nonce(direction: int, counter: int) -> bytes:
    return bytes((direction, 0, 0, 0)) + counter.to_bytes(8, "big")


@dataclass(frozen=True)
class SealedBatch:
    batch_no: int  # cleartext, diagnostic only
    ciphertext: bytes  # AEAD output without the tag
    tag: bytes

    def to_bytes(self) -> bytes:
        return _WIRE_HEADER.pack(self.batch_no, len(self.ciphertext)) + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBatch":
        if len(data) < _WIRE_HEADER.size + TAG_SIZE:
            raise BatchFormatError("wire batch truncated")
        batch_no, n = _WIRE_HEADER.unpack_from(data, 0)
        if len(data) != _WIRE_HEADER.size + n + TAG_SIZE:
            raise BatchFormatError("wire batch length mismatch")
        body = data[_WIRE_HEADER.size:]
        return cls(batch_no, bytes(body[:n]), bytes(body[n:]))

    @property
    def sealed(self) -> bytes:
        return self.ciphertext + self.tag


def _seal(key: bytes, direction: int, counter: int, plaintext: bytes, label: int) -> SealedBatch:
    out = AESGCM(key).encrypt(nonce(direction, counter), plaintext, None)
    return SealedBatch(label, out[:-TAG_SIZE], out[-TAG_SIZE:])


def _open(key: bytes, direction: int, counter: int, batch: SealedBatch) -> bytes:
    try:
        return AESGCM(key).decrypt(nonce(direction, counter), batch.sealed, None)
    except InvalidTag:
        raise AuthenticationError(
            f"authentication failed for batch {batch.batch_no}", batch.batch_no
        ) from None


def parse_batch_plaintext(data: bytes) -> tuple[list[int], bytes]:
    """Split an unsealed batch into its IDs and the trailing chain digest.

    Only fixed-width reads; the ID count is derived from the actual length.
    """
    size = len(data)
    body = size - DIGEST_SIZE
    if body < ID_SIZE or body % ID_SIZE != 0:
        raise BatchFormatError(f"bad batch plaintext length {size}")
    count = body // ID_SIZE
    ids = list(struct.unpack_from("<%dQ" % count, data, 0))
    digest = bytes(data[body:size])
    return ids, digest


class _Chain:
    def __init__(self, hasher):
        self._h = hasher

    @classmethod
    def seeded(cls, secret: bytes) -> "_Chain":
        return cls(blake3.blake3(key=secret))

    def update(self, value: int) -> None:
        self._h.update(_pack_u64(value))

    def absorber(self):
        """The underlying update function, for per-ID hot paths."""
        return self._h.update

    def update_packed(self, data) -> None:
        """Absorb IDs already packed as little-endian u64s. Streaming hash, so this
        equals calling update() once per ID."""
        self._h.update(data)

    def digest(self) -> bytes:
        return self._h.digest()

    def copy(self) -> "_Chain":
        return _Chain(self._h.copy())


class ProverState:
    def __init__(self, secret: Secret, key_init: RatchetKey, batch_size: int, feedback_frequency: int):
        if batch_size < 1 or feedback_frequency < 1:
            raise ValueError("batch size and feedback frequency must be >= 1")
        self.batch_size = batch_size
        self.feedback_frequency = feedback_frequency
        self.chain = _Chain.seeded(secret.consume())
        self._absorb = self.chain.absorber()
        self.key = key_init.copy()
        key_init.wipe()
        self.key.ratchet()
        self.batch_no = 0
        self.buffer: list[int] = []
        self.unacked = 0
        self.acks = 0
        self.halted = False

    def _live(self) -> None:
        if self.halted:
            raise StateDestroyed("prover halted after a protocol failure", self.batch_no)

    def record_id(self, value: int) -> Optional[SealedBatch]:
        if self.halted:
            self._live()
        self._absorb(_pack_u64(value))
        buffer = self.buffer
        buffer.append(value)
        if len(buffer) >= self.batch_size:
            return self.seal_batch()
        return None

    def seal_batch(self) -> SealedBatch:
        self._live()
        if not self.buffer:
            raise BatchFormatError("cannot seal an empty batch", self.batch_no)
        plaintext = struct.pack("<%dQ" % len(self.buffer), *self.buffer) + self.chain.digest()
        batch = _seal(self.key.material, DIR_BATCH, self.batch_no, plaintext, self.batch_no)
        self.key.ratchet()
        self.batch_no += 1
        self.buffer = []
        self.unacked += 1
        return batch

    def flush(self) -> Optional[SealedBatch]:
        if not self.buffer:
            return None
        return self.seal_batch()

    @property
    def awaiting_feedback(self) -> bool:
        return self.unacked >= self.feedback_frequency

    def apply_feedback(self, fb: SealedBatch) -> None:
        self._live()
        try:
            plaintext = _open(self.key.material, DIR_FEEDBACK, self.acks, fb)
        except AuthenticationError as exc:
            self.halted = True
            raise CounterDesync(f"acknowledgment rejected: {exc}", self.batch_no) from None
        if len(plaintext) != 8:
            self.halted = True
            raise CounterDesync("malformed acknowledgment", self.batch_no)
        (acked,) = _U64.unpack(plaintext)
        if acked != self.batch_no:
            self.halted = True
            raise CounterDesync(
                f"verifier acknowledged {acked} batches, prover sent {self.batch_no}", self.batch_no
            )
        self.acks += 1
        self.unacked = 0


class VerifierState:
    def __init__(self, secret: Secret, key_init: RatchetKey):
        self.chain = _Chain.seeded(secret.consume())
        self.key = key_init.copy()
        key_init.wipe()
        self.key.ratchet()
        self.batch_no = 0
        self.acks = 0
        self.halted = False

    def ingest(self, batch: SealedBatch) -> list[int]:
        if self.halted:
            raise StateDestroyed("verifier halted after a protocol failure", self.batch_no)
        try:
            plaintext = _open(self.key.material, DIR_BATCH, self.batch_no, batch)
            ids, digest = parse_batch_plaintext(plaintext)
        except ProtocolError:
            self.halted = True
            raise
        self.key.ratchet()
        self.batch_no += 1
        self.chain.update_packed(memoryview(plaintext)[:ID_SIZE * len(ids)])
        if digest != self.chain.digest():
            self.halted = True
            raise DigestMismatch(f"hash chain mismatch in batch {batch.batch_no}", batch.batch_no)
        return ids

    def make_feedback(self) -> SealedBatch:
        if self.batch_no < 1:
            raise ProtocolError("nothing to acknowledge yet")
        fb = _seal(self.key.material, DIR_FEEDBACK, self.acks, _U64.pack(self.batch_no), self.batch_no)
        self.acks += 1
        return fb

    def fork(self) -> "VerifierState":
        """Clone the complete state, as an attacker duplicating the enclave would."""
        twin = VerifierState.__new__(VerifierState)
        twin.chain = self.chain.copy()
        twin.key = self.key.copy()
        twin.batch_no = self.batch_no
        twin.acks = self.acks
        twin.halted = self.halted
        return twin


def provision(material: bytes) -> tuple[Secret, RatchetKey]:
    """Split a 64-byte provisioning blob (secret || key_init) into fresh objects."""
    if len(material) != 2 * KEY_SIZE:
        raise ValueError(f"provisioning material must be {2 * KEY_SIZE} bytes, got {len(material)}")
    return Secret(material[:KEY_SIZE]), RatchetKey(material[KEY_SIZE:])


def prover_init(secret: Secret, key_init: RatchetKey, batch_size: int, feedback_frequency: int) -> ProverState:
    return ProverState(secret, key_init, batch_size, feedback_frequency)


def verifier_init(secret: Secret, key_init: RatchetKey) -> VerifierState:
    return VerifierState(secret, key_init)


def make_feedback(state: VerifierState) -> SealedBatch:
    return state.make_feedback()


def apply_feedback(state: ProverState, fb: SealedBatch) -> None:
    state.apply_feedback(fb)
