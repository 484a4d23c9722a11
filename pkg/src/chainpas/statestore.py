"""Key-value state written by the contract, with snapshot reads.

One writer (the commit pipeline) mutates the store; any number of readers may
query concurrently and see a consistent snapshot. Entries are immutable values
so handing them across threads is safe.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from . import wire
from .identity import digest


@dataclass(frozen=True)
class StateEntry:
    address: str
    data: bytes
    version: int  # starts at 1, +1 per write to the same address
    last_txn: str

    def canonical_bytes(self) -> bytes:
        return b"".join(
            [
                wire.put_str(self.address),
                wire.put_bytes(self.data),
                wire.put_u64(self.version),
                wire.put_str(self.last_txn),
            ]
        )


class StateStore:
    def __init__(self):
        self._entries: dict[str, StateEntry] = {}
        self._lock = threading.Lock()
        self._write_count = 0

    def get(self, address: str) -> StateEntry | None:
        with self._lock:
            return self._entries.get(address)

    def by_prefix(self, prefix: str) -> list[StateEntry]:
        """Entries whose address starts with prefix, sorted by address."""
        with self._lock:
            matches = [e for a, e in self._entries.items() if a.startswith(prefix)]
        return sorted(matches, key=lambda e: e.address)

    def set(self, address: str, data: bytes, txn_id: str) -> StateEntry:
        """Write one value; versions increment by exactly 1 per address."""
        with self._lock:
            prev = self._entries.get(address)
            entry = StateEntry(
                address=address,
                data=data,
                version=(prev.version + 1) if prev else 1,
                last_txn=txn_id,
            )
            self._entries[address] = entry
            self._write_count += 1
            return entry

    def snapshot(self) -> dict[str, StateEntry]:
        with self._lock:
            return dict(self._entries)

    def fork(self) -> "StateStore":
        """Independent copy for speculative application (block building/validation)."""
        other = StateStore()
        other._entries = self.snapshot()
        return other

    @property
    def write_count(self) -> int:
        """Total writes ever applied; lets tests assert read paths stay pure."""
        with self._lock:
            return self._write_count

    def state_root(self) -> str:
        """Digest over all entries sorted by address."""
        with self._lock:
            entries = sorted(self._entries.values(), key=lambda e: e.address)
        return digest(b"".join(e.canonical_bytes() for e in entries))

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def entries_equal(a: StateStore, b: StateStore) -> bool:
    """Byte-for-byte equality of two stores (replay oracle helper)."""
    sa, sb = a.snapshot(), b.snapshot()
    if sa.keys() != sb.keys():
        return False
    return all(sa[k].canonical_bytes() == sb[k].canonical_bytes() for k in sa)
