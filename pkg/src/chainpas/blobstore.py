"""Content-addressed off-chain payload store.

Bulk device data lives here as files named by their digest; only the digest
goes on chain. Append-only: a digest, once written, always resolves to the
same bytes.
"""

from __future__ import annotations

import os
from pathlib import Path

from .identity import digest


class BlobNotFound(KeyError):
    pass


class BlobStore:
    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, hex_digest: str) -> Path:
        if len(hex_digest) != 64 or not set(hex_digest) <= set("0123456789abcdef"):
            raise ValueError(f"not a digest: {hex_digest!r}")
        return self.directory / hex_digest

    def put(self, payload: bytes) -> str:
        """Store payload, return its digest; idempotent for identical bytes."""
        if not payload:
            raise ValueError("payload must be non-empty")
        key = digest(payload)
        path = self._path(key)
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(payload)
            os.replace(tmp, path)  # atomic publish, no torn reads
        return key

    def get(self, hex_digest: str) -> bytes:
        path = self._path(hex_digest)
        if not path.exists():
            raise BlobNotFound(hex_digest)
        return path.read_bytes()

    def has(self, hex_digest: str) -> bool:
        return self._path(hex_digest).exists()

    def __len__(self) -> int:
        return sum(1 for p in self.directory.iterdir() if len(p.name) == 64)
