"""Participant identities and the deployment key registry.

Digest algorithm is SHA-256 throughout; signatures are Ed25519 (deterministic,
RFC 8032) via the `cryptography` package. A deployment registers every
participant once in a registry file; roles are fixed at registration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.exceptions import InvalidSignature

ROLES = ("operator", "plc", "manager")


def digest(data: bytes) -> str:
    """Hex SHA-256 of raw bytes; the one digest used everywhere."""
    return hashlib.sha256(data).hexdigest()


def digest_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class Identity:
    """Public half of a registered participant."""

    id: str
    public_key: bytes  # 32-byte Ed25519 public key
    role: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("identity id must be non-empty")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if len(self.public_key) != 32:
            raise ValueError("public key must be 32 bytes")

    def verify(self, message: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(self.public_key).verify(
                signature, message
            )
            return True
        except InvalidSignature:
            return False


@dataclass(frozen=True)
class PrivateIdentity:
    """Identity plus its signing key; lives only in client key files."""

    id: str
    role: str
    private_key: bytes  # 32-byte Ed25519 seed

    @property
    def public(self) -> Identity:
        pub = (
            Ed25519PrivateKey.from_private_bytes(self.private_key)
            .public_key()
            .public_bytes_raw()
        )
        return Identity(id=self.id, public_key=pub, role=self.role)

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.private_key).sign(message)


def generate_identity(id: str, role: str) -> PrivateIdentity:
    key = Ed25519PrivateKey.generate()
    return PrivateIdentity(id=id, role=role, private_key=key.private_bytes_raw())


def save_key_file(ident: PrivateIdentity, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(
            {
                "id": ident.id,
                "role": ident.role,
                "private_key": ident.private_key.hex(),
                "public_key": ident.public.public_key.hex(),
            },
            indent=2,
        )
    )


def load_key_file(path: str | Path) -> PrivateIdentity:
    data = json.loads(Path(path).read_text())
    return PrivateIdentity(
        id=data["id"], role=data["role"], private_key=bytes.fromhex(data["private_key"])
    )


class Registry:
    """The deployment's registered identities, keyed by id.

    Ids are unique; registering the same id twice with different material is
    rejected, matching role-fixed-at-registration semantics.
    """

    def __init__(self, identities: list[Identity] | None = None):
        self._by_id: dict[str, Identity] = {}
        for ident in identities or []:
            self.register(ident)

    def register(self, ident: Identity) -> None:
        existing = self._by_id.get(ident.id)
        if existing is not None and existing != ident:
            raise ValueError(f"id {ident.id!r} already registered")
        self._by_id[ident.id] = ident

    def get(self, id: str) -> Identity | None:
        return self._by_id.get(id)

    def __contains__(self, id: str) -> bool:
        return id in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def all(self) -> list[Identity]:
        return sorted(self._by_id.values(), key=lambda i: i.id)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                [
                    {"id": i.id, "role": i.role, "public_key": i.public_key.hex()}
                    for i in self.all()
                ],
                indent=2,
            )
        )

    @classmethod
    def load(cls, path: str | Path) -> "Registry":
        entries = json.loads(Path(path).read_text())
        return cls(
            [
                Identity(
                    id=e["id"],
                    role=e["role"],
                    public_key=bytes.fromhex(e["public_key"]),
                )
                for e in entries
            ]
        )
