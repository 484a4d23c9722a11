"""The validator node: accepts transactions, runs the round pipeline,
replicates blocks to peers, and serves state.

One node process per hierarchy level (process control, management, cloud at
desk scale). All state mutation flows through a single serialized pipeline;
request handling stays concurrent. Commit is reported at a 2-of-3 quorum and
the third replica converges asynchronously, by push or by pull-based sync.
"""

from __future__ import annotations

import argparse
import collections
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import contract, peers
from .addresses import AddressError, validate_prefix
from .chain import Block, BlockStore, make_genesis
from .consensus import (
    ATTEMPTS_PER_HEIGHT,
    split_round_key,
    leader_for,
    verify_certificate,
)
from .gateway import RestGateway
from .identity import Registry
from .shaping import LinkShaper
from .statestore import StateEntry, StateStore
from .txn import Transaction, verify_transaction

log = logging.getLogger("chainpas.node")

STATUS_PENDING = "pending"
STATUS_COMMITTED = "committed"
STATUS_INVALID = "invalid"
STATUS_UNKNOWN = "unknown"

_PEER_COOLDOWN_S = 1.0


class BackPressure(Exception):
    """Pending queue is full; caller should retry later."""


@dataclass(frozen=True)
class TxnStatus:
    txn_id: str
    status: str
    block_height: int | None = None
    reason: str | None = None
    committed_ms: float | None = None

    def to_json(self) -> dict:
        out = {"txn_id": self.txn_id, "status": self.status}
        if self.block_height is not None:
            out["block_height"] = self.block_height
        if self.reason is not None:
            out["reason"] = self.reason
        if self.committed_ms is not None:
            out["committed_ms"] = self.committed_ms
        return out


@dataclass
class NodeConfig:
    node_id: str
    data_dir: str
    registry_path: str
    listen_host: str = "127.0.0.1"
    peer_port: int = 0
    rest_port: int = 0
    peers: list[tuple[str, str, int]] = field(default_factory=list)  # (id, host, port)
    seed: int = 42
    target_block_interval_ms: float = 500.0
    attempt_timeout_ms: float | None = None
    max_pending: int = 1000
    batch_limit: int = 100
    replication_link_kbps: float = 0.0
    link_jitter: float = 0.3
    sync_interval_ms: float = 1000.0

    def __post_init__(self):
        peer_ids = [p[0] for p in self.peers]
        if self.node_id in peer_ids:
            raise ValueError("peers list must exclude this node")
        if len(set(peer_ids)) != len(peer_ids):
            raise ValueError("duplicate peer ids")
        if self.attempt_timeout_ms is None:
            self.attempt_timeout_ms = max(
                3.0 * self.target_block_interval_ms,
                self.target_block_interval_ms + 150.0,
            )

    @classmethod
    def from_file(cls, path: str | Path) -> "NodeConfig":
        data = json.loads(Path(path).read_text())
        data["peers"] = [tuple(p) for p in data.get("peers", [])]
        cfg = cls(**data)
        # environment overrides, applied by every node of a deployment alike
        if "CHAINPAS_SEED" in os.environ:
            cfg.seed = int(os.environ["CHAINPAS_SEED"])
        if "CHAINPAS_BLOCK_INTERVAL_MS" in os.environ:
            cfg.target_block_interval_ms = float(os.environ["CHAINPAS_BLOCK_INTERVAL_MS"])
            cfg.attempt_timeout_ms = max(
                3.0 * cfg.target_block_interval_ms,
                cfg.target_block_interval_ms + 150.0,
            )
        return cfg

    def to_file(self, path: str | Path) -> None:
        data = dict(self.__dict__)
        data["peers"] = [list(p) for p in self.peers]
        Path(path).write_text(json.dumps(data, indent=2))


def now_ms() -> float:
    return time.time_ns() / 1e6


class ValidatorNode:
    def __init__(self, config: NodeConfig, registry: Registry | None = None):
        self.config = config
        self.node_id = config.node_id
        self.registry = registry or Registry.load(config.registry_path)
        self.store = BlockStore(config.data_dir)
        self.state = StateStore()
        self.statuses: dict[str, TxnStatus] = {}
        self.pending: collections.OrderedDict[str, Transaction] = collections.OrderedDict()

        self._pipeline = threading.Lock()  # the one writer
        self._status_lock = threading.Lock()
        self._pending_cond = threading.Condition()
        self._stop = threading.Event()
        self._sync_needed = threading.Event()

        self._round_height = -1
        self._round_started = 0.0
        # per-address committed txn history, oldest first (version i = index i-1)
        self._history: dict[str, list[str]] = {}
        # own proposal applied locally but not yet acked by any peer
        self._unquorumed: tuple[Block, list[Transaction]] | None = None
        self._deferred_commit_ms = 0.0
        self._peer_retry_at: dict[str, float] = {}

        self.committed_txn_count = 0
        self.last_commit_ms: float | None = None
        self.started_ms = now_ms()

        shaper = None
        if config.replication_link_kbps > 0:
            shaper = LinkShaper(
                config.replication_link_kbps, config.link_jitter, seed=config.seed
            )
        self._peers = {
            pid: peers.PeerClient(pid, host, port, shaper=shaper, connect_timeout=0.5,
                                  io_timeout=10.0)
            for pid, host, port in config.peers
        }
        self.all_node_ids = sorted([self.node_id] + [p for p in self._peers])

        self.peer_server = peers.PeerServer(
            config.listen_host, config.peer_port, self._handle_peer_message
        )
        self.gateway = RestGateway(self, config.listen_host, config.rest_port)

        self._bootstrap_chain()

        self._commit_thread = threading.Thread(
            target=self._commit_loop, name=f"{self.node_id}-commit", daemon=True
        )
        self._gossip_queue: collections.deque[Transaction] = collections.deque()
        self._gossip_cond = threading.Condition()
        self._gossip_thread = threading.Thread(
            target=self._gossip_loop, name=f"{self.node_id}-gossip", daemon=True
        )
        self._sync_thread = threading.Thread(
            target=self._sync_loop, name=f"{self.node_id}-sync", daemon=True
        )

    def connect_peers(self, peer_list: list[tuple[str, str, int]]) -> None:
        """Wire peer clients after construction (used when ports are ephemeral).

        Must be called before start().
        """
        shaper = None
        if self.config.replication_link_kbps > 0:
            shaper = LinkShaper(
                self.config.replication_link_kbps, self.config.link_jitter,
                seed=self.config.seed,
            )
        self.config.peers = list(peer_list)
        self._peers = {
            pid: peers.PeerClient(pid, host, port, shaper=shaper,
                                  connect_timeout=0.5, io_timeout=10.0)
            for pid, host, port in peer_list
        }
        self.all_node_ids = sorted([self.node_id] + [p for p in self._peers])

    # --- lifecycle ---

    def start(self) -> None:
        self.peer_server.start()
        self.gateway.start()
        self._commit_thread.start()
        self._gossip_thread.start()
        self._sync_thread.start()
        log.info(
            "%s up: rest=%s peer=%s height=%d",
            self.node_id, self.rest_port, self.peer_port, self.store.height(),
        )

    def stop(self) -> None:
        self._stop.set()
        with self._pending_cond:
            self._pending_cond.notify_all()
        with self._gossip_cond:
            self._gossip_cond.notify_all()
        self.gateway.stop()
        self.peer_server.stop()
        for client in self._peers.values():
            client.close()
        self._commit_thread.join(timeout=5)
        self._gossip_thread.join(timeout=5)
        self._sync_thread.join(timeout=5)

    @property
    def rest_port(self) -> int:
        return self.gateway.port

    @property
    def peer_port(self) -> int:
        return self.peer_server.port

    def rest_url(self) -> str:
        return f"http://{self.config.listen_host}:{self.rest_port}"

    def _bootstrap_chain(self) -> None:
        if self.store.height() < 0:
            genesis = make_genesis(self.config.seed, self.config.target_block_interval_ms)
            self.store.append(genesis, [])
        # rebuild live state and statuses from the persisted chain
        for block in self.store.blocks():
            for txn_id in block.txn_ids:
                txn = self.store.get_txn(txn_id)
                delta = contract.apply(txn, self.state.get, self.registry)
                for address, data in delta.writes:
                    self.state.set(address, data, txn_id)
                    self._history.setdefault(address, []).append(txn_id)
                self.statuses[txn_id] = TxnStatus(
                    txn_id, STATUS_COMMITTED, block_height=block.height
                )
                self.committed_txn_count += 1
            for txn_id, reason in block.rejections:
                self.statuses[txn_id] = TxnStatus(txn_id, STATUS_INVALID, reason=reason)

    # --- public surface used by the gateway ---

    def handle_query(self, prefix: str) -> list[StateEntry]:
        validate_prefix(prefix)
        return self.state.by_prefix(prefix)

    def address_history(self, address: str, from_version: int = 1) -> list[StateEntry]:
        """Every committed version of one address, reconstructed from the chain.

        Lets clients that poll slower than commits happen recover the writes
        they missed (the live store keeps only the latest value).
        """
        validate_prefix(address)
        if len(address) != 70:
            raise AddressError("history requires a full address")
        txn_ids = list(self._history.get(address, ()))
        entries = []
        for i, txn_id in enumerate(txn_ids, start=1):
            if i < from_version:
                continue
            txn = self.store.get_txn(txn_id)
            if txn is None:
                continue
            entries.append(
                StateEntry(address=address, data=txn.payload, version=i, last_txn=txn_id)
            )
        return entries

    def handle_transaction(self, txn: Transaction) -> TxnStatus:
        return self._admit(txn, gossip=True)

    def get_status(self, txn_id: str) -> TxnStatus:
        with self._status_lock:
            status = self.statuses.get(txn_id)
        return status or TxnStatus(txn_id, STATUS_UNKNOWN)

    def _admit(self, txn: Transaction, gossip: bool) -> TxnStatus:
        with self._status_lock:
            existing = self.statuses.get(txn.txn_id)
        if existing is not None:
            return existing  # duplicate submission is idempotent
        ok, reason = verify_transaction(txn, self.registry)
        if not ok:
            status = TxnStatus(txn.txn_id, STATUS_INVALID, reason=reason)
            with self._status_lock:
                self.statuses[txn.txn_id] = status
            return status
        with self._pending_cond:
            if len(self.pending) >= self.config.max_pending:
                raise BackPressure(f"{len(self.pending)} transactions queued")
            self.pending[txn.txn_id] = txn
            status = TxnStatus(txn.txn_id, STATUS_PENDING)
            with self._status_lock:
                self.statuses[txn.txn_id] = status
            self._pending_cond.notify_all()
        if gossip:
            with self._gossip_cond:
                self._gossip_queue.append(txn)
                self._gossip_cond.notify_all()
        return status

    # --- peer message handling ---

    def _handle_peer_message(self, msg: peers.Message) -> peers.Message:
        if isinstance(msg, peers.Hello):
            if msg.height > self.store.height():
                self._sync_needed.set()
            tip = self.store.tip()
            return peers.Hello(self.node_id, self.store.height(), tip.block_hash)
        if isinstance(msg, Transaction):
            try:
                status = self._admit(msg, gossip=False)
            except BackPressure:
                return peers.Nack(0, "back-pressure")
            if status.status == STATUS_INVALID:
                return peers.Nack(0, status.reason or "invalid")
            return peers.Ack(0, "queued")
        if isinstance(msg, peers.BlockMsg):
            acquired = self._pipeline.acquire(timeout=2.0)
            if not acquired:
                return peers.Nack(msg.block.height, "busy")
            try:
                return self._consider_block(msg)
            finally:
                self._pipeline.release()
        if isinstance(msg, peers.SyncReq):
            return self._answer_sync(msg)
        if hasattr(msg, "proof"):  # WaitCertificate announcement
            return peers.Ack(0, "cert")
        return peers.Nack(0, "unsupported")

    def _consider_block(self, msg: peers.BlockMsg) -> peers.Message:
        block = msg.block
        my_height = self.store.height()
        if block.height <= my_height:
            mine = self.store.block_at(block.height)
            if mine is not None and mine.block_hash == block.block_hash:
                return peers.Ack(block.height, "duplicate")
            return peers.Nack(block.height, "height-exists")
        if block.height > my_height + 1:
            self._sync_needed.set()
            return peers.Nack(block.height, "behind")
        error = self._apply_block(msg)
        if error is not None:
            return peers.Nack(block.height, error)
        return peers.Ack(block.height)

    def _apply_block(self, msg: peers.BlockMsg) -> str | None:
        """Validate and commit a block extending the tip. Caller holds the pipeline.

        Returns a nack reason, or None when applied. Rejecting leaves all
        local state untouched.
        """
        block = msg.block
        tip = self.store.tip()
        if block.prev_hash != tip.block_hash:
            return "divergence"
        if block.compute_hash() != block.block_hash:
            return "bad-hash"
        height, attempt = split_round_key(block.wait_certificate.round)
        if height != block.height or attempt >= ATTEMPTS_PER_HEIGHT:
            return "wrong-leader"
        expected_leader, expected_cert = leader_for(
            self.all_node_ids, block.height, attempt,
            self.config.seed, self.config.target_block_interval_ms,
        )
        if (
            block.leader != expected_leader
            or block.wait_certificate != expected_cert
            or not verify_certificate(
                block.wait_certificate, self.config.target_block_interval_ms
            )
        ):
            return "wrong-leader"
        if not block.txn_ids and not block.rejections:
            return "empty-block"

        by_id = {t.txn_id: t for t in msg.txns}
        overlay = self.state.fork()
        for txn_id in block.txn_ids:
            txn = by_id.get(txn_id)
            if txn is None or txn.txn_id != txn_id:
                return "bad-txn"
            ok, _reason = verify_transaction(txn, self.registry)
            if not ok:
                return "bad-txn"
            try:
                delta = contract.apply(txn, overlay.get, self.registry)
            except contract.InvalidTransaction:
                return "divergence"
            for address, data in delta.writes:
                overlay.set(address, data, txn_id)
        for txn_id, _reason in block.rejections:
            txn = by_id.get(txn_id)
            if txn is None:
                return "bad-txn"
            try:
                contract.apply(txn, overlay.get, self.registry)
            except contract.InvalidTransaction:
                continue
            return "divergence"
        if overlay.state_root() != block.state_root:
            return "divergence"

        self._commit_block(block, msg.txns, by_id)
        return None

    def _commit_block(
        self,
        block: Block,
        txns: tuple[Transaction, ...] | list[Transaction],
        by_id: dict[str, Transaction],
        defer_status: bool = False,
    ) -> None:
        """Append a fully validated block and fold it into live state.

        defer_status keeps txn statuses at pending (the proposer path: commit
        is reported only once a quorum acked); _finalize_quorum flips them
        with the commit time captured here.
        """
        self.store.append(block, list(txns))
        commit_ms = now_ms()
        for txn_id in block.txn_ids:
            txn = by_id[txn_id]
            delta = contract.apply(txn, self.state.get, self.registry)
            for address, data in delta.writes:
                self.state.set(address, data, txn_id)
                self._history.setdefault(address, []).append(txn_id)
            self.committed_txn_count += 1
        with self._pending_cond:
            for txn_id in list(block.txn_ids) + [r[0] for r in block.rejections]:
                self.pending.pop(txn_id, None)
        self.last_commit_ms = commit_ms
        if defer_status:
            self._deferred_commit_ms = commit_ms
            return
        self._publish_statuses(block, commit_ms)

    def _publish_statuses(self, block: Block, commit_ms: float) -> None:
        with self._status_lock:
            for txn_id in block.txn_ids:
                self.statuses[txn_id] = TxnStatus(
                    txn_id, STATUS_COMMITTED,
                    block_height=block.height, committed_ms=commit_ms,
                )
            for txn_id, reason in block.rejections:
                self.statuses[txn_id] = TxnStatus(txn_id, STATUS_INVALID, reason=reason)

    def _answer_sync(self, req: peers.SyncReq) -> peers.Message:
        entries = []
        upper = min(req.to_height, self.store.height())
        for height in range(req.from_height, upper + 1):
            block = self.store.block_at(height)
            if block is None:
                break
            txns = []
            for txn_id in list(block.txn_ids) + [r[0] for r in block.rejections]:
                txn = self.store.get_txn(txn_id)
                if txn is not None:
                    txns.append(txn)
            entries.append(peers.BlockMsg(block=block, txns=tuple(txns)))
        return peers.SyncResp(entries=tuple(entries))

    # --- round pipeline ---

    def _commit_loop(self) -> None:
        while not self._stop.is_set():
            with self._pending_cond:
                if not self.pending and self._unquorumed is None:
                    self._pending_cond.wait(timeout=0.05)
                    continue
            if self._unquorumed is not None:
                self._chase_quorum()
                continue
            self._maybe_propose()

    def _maybe_propose(self) -> None:
        height = self.store.height() + 1
        now = time.monotonic()
        if self._round_height != height:
            self._round_height = height
            self._round_started = now
        elapsed_ms = (now - self._round_started) * 1000.0
        timeout = self.config.attempt_timeout_ms
        max_attempt = min(int(elapsed_ms // timeout), ATTEMPTS_PER_HEIGHT - 1)
        for attempt in range(max_attempt + 1):
            leader, cert = leader_for(
                self.all_node_ids, height, attempt,
                self.config.seed, self.config.target_block_interval_ms,
            )
            if leader != self.node_id:
                continue
            due_ms = attempt * timeout + cert.wait_ms
            if elapsed_ms >= due_ms:
                self._propose(height, cert)
                return
        time.sleep(0.005)

    def _propose(self, height: int, cert) -> None:
        with self._pipeline:
            if self.store.height() != height - 1 or self._stop.is_set():
                return  # a replica beat us to this height
            with self._pending_cond:
                batch = list(self.pending.values())[: self.config.batch_limit]
            if not batch:
                return
            overlay = self.state.fork()
            valid: list[Transaction] = []
            rejections: list[tuple[str, str]] = []
            for txn in batch:
                try:
                    delta = contract.apply(txn, overlay.get, self.registry)
                except contract.InvalidTransaction as exc:
                    rejections.append((txn.txn_id, exc.reason))
                    continue
                for address, data in delta.writes:
                    overlay.set(address, data, txn.txn_id)
                valid.append(txn)
            block = Block(
                height=height,
                prev_hash=self.store.tip().block_hash,
                txn_ids=tuple(t.txn_id for t in valid),
                state_root=overlay.state_root(),
                leader=self.node_id,
                wait_certificate=cert,
                rejections=tuple(rejections),
            ).sealed()
            envelopes = valid + [
                t for t in batch if t.txn_id in {r[0] for r in rejections}
            ]
            by_id = {t.txn_id: t for t in envelopes}
            self._commit_block(block, envelopes, by_id, defer_status=True)
            self._unquorumed = (block, envelopes)
            self._replicate_tip()

    def _replicate_tip(self) -> None:
        """Offer the unquorumed tip to peers; caller holds the pipeline lock."""
        if self._unquorumed is None:
            return
        block, envelopes = self._unquorumed
        msg = peers.BlockMsg(block=block, txns=tuple(envelopes))
        needed_acks = len(self.all_node_ids) // 2  # majority, counting self
        if needed_acks == 0:
            self._finalize_quorum(block)
            return
        acks = 0
        conflicts = 0
        reachable = 0
        for pid in sorted(self._peers):
            client = self._peers[pid]
            if time.monotonic() < self._peer_retry_at.get(pid, 0.0):
                continue
            try:
                reply = client.request(msg)
                reachable += 1
            except (OSError, peers.PeerError):
                self._peer_retry_at[pid] = time.monotonic() + _PEER_COOLDOWN_S
                continue
            if isinstance(reply, peers.Ack):
                acks += 1
            elif isinstance(reply, peers.Nack) and reply.reason in (
                "height-exists", "divergence",
            ):
                conflicts += 1
        if acks >= needed_acks:
            self._finalize_quorum(block)
        elif conflicts and conflicts == reachable:
            log.warning("%s: proposal at %d lost the race, rolling back",
                        self.node_id, block.height)
            self._rollback_tip()
            self._sync_needed.set()

    def _finalize_quorum(self, block: Block) -> None:
        self._unquorumed = None
        self._publish_statuses(block, self._deferred_commit_ms)

    def _chase_quorum(self) -> None:
        with self._pipeline:
            if self._unquorumed is None:
                return
            self._replicate_tip()
        time.sleep(0.05)

    def _rollback_tip(self) -> None:
        """Drop an own, never-acked tip block after losing a proposal race."""
        assert self._unquorumed is not None
        block, envelopes = self._unquorumed
        self._unquorumed = None
        self.store.rollback_tip(block.height)
        # rebuild state and history from the surviving chain
        self.state = StateStore()
        self._history = {}
        self.committed_txn_count = 0
        for prior in self.store.blocks():
            for txn_id in prior.txn_ids:
                txn = self.store.get_txn(txn_id)
                delta = contract.apply(txn, self.state.get, self.registry)
                for address, data in delta.writes:
                    self.state.set(address, data, txn_id)
                    self._history.setdefault(address, []).append(txn_id)
                self.committed_txn_count += 1
        with self._pending_cond:
            for txn in envelopes:
                self.pending[txn.txn_id] = txn
        with self._status_lock:
            for txn in envelopes:
                self.statuses[txn.txn_id] = TxnStatus(txn.txn_id, STATUS_PENDING)

    # --- gossip and sync ---

    def _gossip_loop(self) -> None:
        while not self._stop.is_set():
            with self._gossip_cond:
                if not self._gossip_queue:
                    self._gossip_cond.wait(timeout=0.1)
                    continue
                txn = self._gossip_queue.popleft()
            for pid in sorted(self._peers):
                if time.monotonic() < self._peer_retry_at.get(pid, 0.0):
                    continue
                try:
                    self._peers[pid].request(txn)
                except (OSError, peers.PeerError):
                    self._peer_retry_at[pid] = time.monotonic() + _PEER_COOLDOWN_S

    def _sync_loop(self) -> None:
        while not self._stop.is_set():
            triggered = self._sync_needed.wait(timeout=self.config.sync_interval_ms / 1000.0)
            if self._stop.is_set():
                return
            self._sync_needed.clear()
            try:
                self.sync_once()
            except Exception:
                log.exception("%s: sync pass failed", self.node_id)
            if triggered:
                time.sleep(0.02)

    def sync_once(self) -> int:
        """One catch-up pass against every reachable peer; returns blocks applied."""
        applied = 0
        for pid in sorted(self._peers):
            client = self._peers[pid]
            try:
                hello = client.request(
                    peers.Hello(self.node_id, self.store.height(),
                                self.store.tip().block_hash)
                )
            except (OSError, peers.PeerError):
                continue
            if not isinstance(hello, peers.Hello):
                continue
            while hello.height > self.store.height():
                start = self.store.height() + 1
                try:
                    resp = client.request(peers.SyncReq(start, hello.height))
                except (OSError, peers.PeerError):
                    break
                if not isinstance(resp, peers.SyncResp) or not resp.entries:
                    break
                progressed = False
                with self._pipeline:
                    for entry in resp.entries:
                        if entry.block.height != self.store.height() + 1:
                            continue
                        if (
                            entry.block.prev_hash != self.store.tip().block_hash
                            and self._unquorumed is not None
                        ):
                            self._rollback_tip()
                        if self._apply_block(entry) is None:
                            applied += 1
                            progressed = True
                        else:
                            break
                if not progressed:
                    break
        return applied

    # --- introspection for the gateway ---

    def metrics(self) -> dict:
        tip = self.store.tip()
        return {
            "node_id": self.node_id,
            "height": self.store.height(),
            "tip_hash": tip.block_hash if tip else None,
            "committed_txns": self.committed_txn_count,
            "last_commit_ms": self.last_commit_ms,
            "pending_count": len(self.pending),
            "started_ms": self.started_ms,
        }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="chainpas-node", description="run one validator node"
    )
    parser.add_argument("--config", required=True, help="node config file (JSON)")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    config = NodeConfig.from_file(args.config)
    node = ValidatorNode(config)
    node.start()
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        node.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
