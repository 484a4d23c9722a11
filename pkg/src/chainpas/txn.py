"""Signed transaction envelopes.

The canonical envelope is the byte-exact serialization hashed for txn_id and
signed by the submitter; the full envelope appends the signature. Layout is
fixed in docs/wire-format.md.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from . import wire
from .addresses import validate_address
from .identity import Identity, PrivateIdentity, Registry, digest

ENVELOPE_VERSION = 1
MAX_PAYLOAD_BYTES = 750_000  # platform maximum (kB = 1000 bytes)

ACCEPT = "accept"
REJECT_UNKNOWN_SIGNER = "unknown-signer"
REJECT_BAD_SIGNATURE = "bad-signature"
REJECT_HASH_MISMATCH = "hash-mismatch"
REJECT_PAYLOAD_TOO_LARGE = "payload-too-large"
REJECT_MALFORMED = "malformed"


class PayloadTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Transaction:
    txn_id: str  # hex sha256 of canonical envelope (signature excluded)
    signer: str  # registered identity id
    address: str
    payload: bytes
    payload_hash: str
    nonce: int
    created_at: int  # ms since epoch
    signature: bytes

    def canonical_bytes(self) -> bytes:
        return _canonical(
            self.signer, self.address, self.payload, self.payload_hash,
            self.nonce, self.created_at,
        )

    def serialize(self) -> bytes:
        return self.canonical_bytes() + wire.put_bytes(self.signature)


def _canonical(signer, address, payload, payload_hash, nonce, created_at) -> bytes:
    return b"".join(
        [
            wire.put_u8(ENVELOPE_VERSION),
            wire.put_str(signer),
            wire.put_str(address),
            wire.put_bytes(payload),
            wire.put_str(payload_hash),
            wire.put_u64(nonce),
            wire.put_u64(created_at),
        ]
    )


def sign_transaction(
    identity: PrivateIdentity,
    address: str,
    payload: bytes,
    nonce: int,
    created_at: int | None = None,
) -> Transaction:
    """Build and sign an envelope; the result always self-verifies."""
    if len(payload) > MAX_PAYLOAD_BYTES:
        raise PayloadTooLarge(
            f"payload {len(payload)} bytes exceeds {MAX_PAYLOAD_BYTES}"
        )
    validate_address(address)
    if created_at is None:
        created_at = time.time_ns() // 1_000_000
    payload_hash = digest(payload)
    core = _canonical(identity.id, address, payload, payload_hash, nonce, created_at)
    return Transaction(
        txn_id=digest(core),
        signer=identity.id,
        address=address,
        payload=payload,
        payload_hash=payload_hash,
        nonce=nonce,
        created_at=created_at,
        signature=identity.sign(core),
    )


def deserialize_transaction(data: bytes) -> Transaction:
    """Decode a full envelope; raises wire.WireError on malformed bytes."""
    r = wire.Reader(data)
    version = r.u8()
    if version != ENVELOPE_VERSION:
        raise wire.WireError(f"unsupported envelope version {version}")
    signer = r.str_()
    address = r.str_()
    payload = r.bytes_()
    payload_hash = r.str_()
    nonce = r.u64()
    created_at = r.u64()
    signature = r.bytes_()
    r.expect_end()
    core = _canonical(signer, address, payload, payload_hash, nonce, created_at)
    return Transaction(
        txn_id=digest(core),
        signer=signer,
        address=address,
        payload=payload,
        payload_hash=payload_hash,
        nonce=nonce,
        created_at=created_at,
        signature=signature,
    )


def verify_transaction(txn: Transaction, registry: Registry) -> tuple[bool, str]:
    """(accepted, reason). Never raises on bad input; reason is machine-readable."""
    if len(txn.payload) > MAX_PAYLOAD_BYTES:
        return False, REJECT_PAYLOAD_TOO_LARGE
    try:
        validate_address(txn.address)
    except ValueError:
        return False, REJECT_MALFORMED
    if digest(txn.payload) != txn.payload_hash:
        return False, REJECT_HASH_MISMATCH
    signer: Identity | None = registry.get(txn.signer)
    if signer is None:
        return False, REJECT_UNKNOWN_SIGNER
    if not signer.verify(txn.canonical_bytes(), txn.signature):
        return False, REJECT_BAD_SIGNATURE
    return True, ACCEPT
