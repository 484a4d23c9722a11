"""Hash-chained blocks, their on-disk store, and full-chain verification.

Persistence layout under a node's data directory:

  blocks.jsonl      one JSON object per committed block, append-only
  txns/<txn_id>.bin full signed envelopes, one file per transaction

Envelope files keep payload bytes verbatim, so any mutation of committed
data on disk is caught by verify_chain recomputing digests.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import contract, wire
from .consensus import WaitCertificate, draw_wait
from .identity import Registry, digest
from .statestore import StateStore
from .txn import Transaction, deserialize_transaction, verify_transaction

GENESIS_PREV_HASH = "0" * 64
GENESIS_LEADER = "genesis"


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: str
    txn_ids: tuple[str, ...]
    state_root: str
    leader: str
    wait_certificate: WaitCertificate
    # txns the leader attempted whose contract run rejected them; carried so
    # every node converges on the same invalid statuses
    rejections: tuple[tuple[str, str], ...] = ()
    block_hash: str = ""

    def canonical_bytes(self) -> bytes:
        out = [
            wire.put_u64(self.height),
            wire.put_str(self.prev_hash),
            wire.put_u32(len(self.txn_ids)),
        ]
        out.extend(wire.put_str(t) for t in self.txn_ids)
        out.extend(
            [
                wire.put_str(self.state_root),
                wire.put_str(self.leader),
                self.wait_certificate.serialize(),
                wire.put_u32(len(self.rejections)),
            ]
        )
        for txn_id, reason in self.rejections:
            out.append(wire.put_str(txn_id))
            out.append(wire.put_str(reason))
        return b"".join(out)

    def compute_hash(self) -> str:
        return digest(self.canonical_bytes())

    def sealed(self) -> "Block":
        return Block(
            height=self.height,
            prev_hash=self.prev_hash,
            txn_ids=self.txn_ids,
            state_root=self.state_root,
            leader=self.leader,
            wait_certificate=self.wait_certificate,
            rejections=self.rejections,
            block_hash=self.compute_hash(),
        )

    def serialize(self) -> bytes:
        return self.canonical_bytes()

    @classmethod
    def read_from(cls, r: wire.Reader) -> "Block":
        height = r.u64()
        prev_hash = r.str_()
        txn_ids = tuple(r.str_() for _ in range(r.u32()))
        state_root = r.str_()
        leader = r.str_()
        cert = WaitCertificate.read_from(r)
        rejections = tuple((r.str_(), r.str_()) for _ in range(r.u32()))
        return cls(
            height=height,
            prev_hash=prev_hash,
            txn_ids=txn_ids,
            state_root=state_root,
            leader=leader,
            wait_certificate=cert,
            rejections=rejections,
        ).sealed()

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash,
            "txn_ids": list(self.txn_ids),
            "state_root": self.state_root,
            "leader": self.leader,
            "wait_certificate": {
                "node_id": self.wait_certificate.node_id,
                "round": self.wait_certificate.round,
                "wait_ms": self.wait_certificate.wait_ms,
                "seed": self.wait_certificate.seed,
                "proof": self.wait_certificate.proof,
            },
            "rejections": [list(r) for r in self.rejections],
            "block_hash": self.block_hash,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Block":
        cert = data["wait_certificate"]
        return cls(
            height=data["height"],
            prev_hash=data["prev_hash"],
            txn_ids=tuple(data["txn_ids"]),
            state_root=data["state_root"],
            leader=data["leader"],
            wait_certificate=WaitCertificate(
                node_id=cert["node_id"],
                round=cert["round"],
                wait_ms=cert["wait_ms"],
                seed=cert["seed"],
                proof=cert["proof"],
            ),
            rejections=tuple((r[0], r[1]) for r in data.get("rejections", [])),
            block_hash=data["block_hash"],
        )


def empty_state_root() -> str:
    return StateStore().state_root()


def make_genesis(seed: int, target_block_interval_ms: float) -> Block:
    """Deterministic genesis; every node with the same seed builds the same one."""
    cert = draw_wait(GENESIS_LEADER, 0, seed, target_block_interval_ms)
    return Block(
        height=0,
        prev_hash=GENESIS_PREV_HASH,
        txn_ids=(),
        state_root=empty_state_root(),
        leader=GENESIS_LEADER,
        wait_certificate=cert,
    ).sealed()


class BlockStore:
    """Append-only persistence for blocks and their transactions."""

    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self.txn_dir = self.data_dir / "txns"
        self.txn_dir.mkdir(parents=True, exist_ok=True)
        self.blocks_path = self.data_dir / "blocks.jsonl"
        self._lock = threading.Lock()
        self._blocks: list[Block] = []
        if self.blocks_path.exists():
            with self.blocks_path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self._blocks.append(Block.from_json(json.loads(line)))

    def append(self, block: Block, txns: list[Transaction]) -> None:
        with self._lock:
            expected = self._blocks[-1].height + 1 if self._blocks else 0
            if block.height != expected:
                raise ValueError(f"height {block.height}, store expects {expected}")
            for txn in txns:
                (self.txn_dir / f"{txn.txn_id}.bin").write_bytes(txn.serialize())
            with self.blocks_path.open("a") as fh:
                fh.write(json.dumps(block.to_json()) + "\n")
            self._blocks.append(block)

    def blocks(self) -> list[Block]:
        with self._lock:
            return list(self._blocks)

    def block_at(self, height: int) -> Block | None:
        with self._lock:
            if 0 <= height < len(self._blocks):
                return self._blocks[height]
        return None

    def tip(self) -> Block | None:
        with self._lock:
            return self._blocks[-1] if self._blocks else None

    def height(self) -> int:
        with self._lock:
            return self._blocks[-1].height if self._blocks else -1

    def get_txn(self, txn_id: str) -> Transaction | None:
        path = self.txn_dir / f"{txn_id}.bin"
        if not path.exists():
            return None
        return deserialize_transaction(path.read_bytes())

    def rollback_tip(self, height: int) -> None:
        """Drop the tip block (race-loser repair). Only ever one level deep."""
        with self._lock:
            if not self._blocks or self._blocks[-1].height != height:
                raise ValueError(f"tip is not at height {height}")
            self._blocks.pop()
            with self.blocks_path.open("w") as fh:
                for block in self._blocks:
                    fh.write(json.dumps(block.to_json()) + "\n")

    def txn_path(self, txn_id: str) -> Path:
        return self.txn_dir / f"{txn_id}.bin"


@dataclass(frozen=True)
class Violation:
    height: int
    reason: str


TxnLookup = Callable[[str], Transaction | None]


def replay_state(
    blocks: list[Block], get_txn: TxnLookup, registry: Registry
) -> StateStore:
    """Rebuild state by re-running every committed txn through the contract."""
    state = StateStore()
    for block in blocks:
        for txn_id in block.txn_ids:
            txn = get_txn(txn_id)
            if txn is None:
                raise KeyError(f"missing txn {txn_id}")
            delta = contract.apply(txn, state.get, registry)
            for address, data in delta.writes:
                state.set(address, data, txn.txn_id)
    return state


def verify_chain(
    blocks: list[Block], get_txn: TxnLookup, registry: Registry
) -> Violation | None:
    """Audit an ordered chain from genesis; None means the chain checks out.

    Verifies hash links, recomputes every block hash, re-verifies every
    envelope, replays the contract, and compares each block's state root
    against the replayed state. The first discrepancy wins.
    """
    if not blocks:
        return Violation(0, "empty-chain")
    state = StateStore()
    prev: Block | None = None
    for block in blocks:
        expected_height = 0 if prev is None else prev.height + 1
        if block.height != expected_height:
            return Violation(block.height, "height-gap")
        if prev is None:
            if block.prev_hash != GENESIS_PREV_HASH:
                return Violation(0, "bad-genesis-prev")
        elif block.prev_hash != prev.block_hash:
            return Violation(block.height, "broken-link")
        if block.compute_hash() != block.block_hash:
            return Violation(block.height, "hash-mismatch")
        if block.height > 0 and not block.txn_ids and not block.rejections:
            return Violation(block.height, "empty-block")
        for txn_id in block.txn_ids:
            txn = get_txn(txn_id)
            if txn is None:
                return Violation(block.height, "missing-txn")
            if txn.txn_id != txn_id:
                return Violation(block.height, "hash-mismatch")
            ok, reason = verify_transaction(txn, registry)
            if not ok:
                return Violation(block.height, reason)
            try:
                delta = contract.apply(txn, state.get, registry)
            except contract.InvalidTransaction as exc:
                return Violation(block.height, f"contract-{exc.reason}")
            for address, data in delta.writes:
                state.set(address, data, txn.txn_id)
        for txn_id, _reason in block.rejections:
            txn = get_txn(txn_id)
            if txn is None:
                continue  # rejected txns may be pruned; nothing to audit
            if txn.txn_id != txn_id:
                return Violation(block.height, "hash-mismatch")
            try:
                contract.apply(txn, state.get, registry)
            except contract.InvalidTransaction:
                pass
            else:
                return Violation(block.height, "rejection-mismatch")
        if state.state_root() != block.state_root:
            return Violation(block.height, "state-root-mismatch")
        prev = block
    return None
