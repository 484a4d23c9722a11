"""Process-control agent: the ledger-facing side of the device controller.

Two loops share one report queue:

  Executor  polls the device operations address; when the stored command is
            newer than the last one executed, it drives the fieldbus runtime
            (compile / start / stop) and queues an action report.
  Logger    drains action reports and fieldbus coil changes, wraps each in a
            log record with the next sequence number, and submits it to the
            cluster. With off-chain mode on, bulky detail goes to the blob
            store and only its digest rides in the record.

last_executed_seq persists to disk so a restarted agent never re-runs
commands it already performed.
"""

from __future__ import annotations

import argparse
import collections
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .addresses import compute_address, log_prefix
from .blobstore import BlobStore
from .clients import ClusterUnavailable, NodeClient, SubmitRejected, decode_entry_data
from .contract import LogRecord, OperationRecord, decode_record
from .fieldbus import FieldbusClient, FieldbusError
from .identity import PrivateIdentity, load_key_file
from .txn import sign_transaction

log = logging.getLogger("chainpas.plc")

NO_CHANGE = "no_change"
ACTION_TAKEN = "action"


@dataclass
class AgentConfig:
    plc_id: str
    key_file: str
    node_endpoints: list[str]
    fieldbus_host: str = "127.0.0.1"
    fieldbus_port: int = 9502
    executor_poll_ms: float = 200.0
    logger_poll_ms: float = 200.0
    offchain: bool = False
    offchain_threshold_bytes: int = 1000
    blob_dir: str | None = None
    state_path: str = "plc-agent-state.json"
    report_queue_limit: int = 256

    @classmethod
    def from_file(cls, path: str | Path) -> "AgentConfig":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class AgentState:
    last_executed_seq: int = -1
    last_change_generation: int = 0
    next_log_seq: int | None = None

    @classmethod
    def load(cls, path: str | Path) -> "AgentState":
        p = Path(path)
        if not p.exists():
            return cls()
        data = json.loads(p.read_text())
        return cls(
            last_executed_seq=data.get("last_executed_seq", -1),
            last_change_generation=data.get("last_change_generation", 0),
            next_log_seq=data.get("next_log_seq"),
        )

    def save(self, path: str | Path) -> None:
        p = Path(path)
        tmp = p.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.__dict__))
        os.replace(tmp, p)


class PlcAgent:
    def __init__(
        self,
        config: AgentConfig,
        identity: PrivateIdentity | None = None,
        client: NodeClient | None = None,
        fieldbus: FieldbusClient | None = None,
    ):
        self.config = config
        self.identity = identity or load_key_file(config.key_file)
        if self.identity.id != config.plc_id:
            raise ValueError("key file does not belong to this plc_id")
        self.client = client or NodeClient(config.node_endpoints)
        self.fieldbus = fieldbus or FieldbusClient(config.fieldbus_host, config.fieldbus_port)
        self.blobs = BlobStore(config.blob_dir) if config.offchain and config.blob_dir else None
        self.state = AgentState.load(config.state_path)
        self.op_address = compute_address("ops", config.plc_id)
        self._reports: collections.deque[dict] = collections.deque(
            maxlen=config.report_queue_limit
        )
        self._unconfirmed: list[tuple[str, dict, str]] = []  # (txn_id, record kwargs, kind)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.executed_actions = 0
        self.submitted_log_txns = 0

    # --- executor ---

    def executor_poll(self) -> str:
        """One Executor pass: runs every command committed since the last one.

        Commands the poll missed (several commits between polls) are pulled
        back from chain history, so each op_seq executes exactly once, in
        order. Serialized: one poll loop, one action at a time.
        """
        try:
            entries = self.client.state(self.op_address)
        except ClusterUnavailable:
            log.warning("no node reachable for operations poll")
            return NO_CHANGE
        if not entries:
            return NO_CHANGE
        latest = decode_record(decode_entry_data(entries[0]))
        if not isinstance(latest, OperationRecord):
            log.error("operations address holds a foreign record")
            return NO_CHANGE
        if latest.op_seq <= self.state.last_executed_seq:
            return NO_CHANGE
        todo = [latest]
        if latest.op_seq > self.state.last_executed_seq + 1:
            # versions are 1-based; version == op_seq + 1 at this address
            try:
                missed = self.client.history(
                    self.op_address, from_version=self.state.last_executed_seq + 2
                )
            except ClusterUnavailable:
                return NO_CHANGE
            todo = [decode_record(decode_entry_data(e)) for e in missed]
        for record in todo:
            if record.op_seq <= self.state.last_executed_seq:
                continue
            # advance the watermark before acting: a crash mid-action must
            # not replay the command on restart
            self.state.last_executed_seq = record.op_seq
            self.state.save(self.config.state_path)
            self._reports.append(self._execute(record))
            self.executed_actions += 1
        return ACTION_TAKEN

    def _execute(self, record: OperationRecord) -> dict:
        detail = {
            "action": record.action,
            "op_seq": str(record.op_seq),
            "operator_id": record.operator_id,
        }
        result = "ok"
        try:
            if record.action == "compile":
                detail["program_id"] = self.fieldbus.compile(record.program or b"")
            elif record.action == "start":
                detail["program_id"] = self.fieldbus.start()
            else:
                self.fieldbus.stop()
        except FieldbusError as exc:
            result = "error"
            detail["error"] = str(exc)
            if exc.line:
                detail["error_line"] = str(exc.line)
        except OSError as exc:
            result = "error"
            detail["error"] = f"fieldbus unreachable: {exc}"
        log.info("executed %s (op_seq %d): %s", record.action, record.op_seq, result)
        return {"kind": "plc_action", "detail": detail, "result": result}

    # --- logger ---

    def logger_poll(self) -> int:
        """One Logger pass: reconcile, collect, submit. Returns txns submitted."""
        self._reconcile_unconfirmed()
        submitted = 0
        while self._reports:
            report = self._reports[0]
            if not self._submit_log(report["kind"], report["detail"], report["result"]):
                return submitted
            self._reports.popleft()
            submitted += 1
        try:
            changes = self.fieldbus.changes_since(self.state.last_change_generation)
        except (OSError, FieldbusError) as exc:
            log.warning("fieldbus change poll failed: %s", exc)
            return submitted
        for change in changes:
            detail = {
                "register": change.name,
                "old": str(change.old),
                "new": str(change.new),
            }
            if not self._submit_log("device_change", detail, "ok"):
                return submitted
            self.state.last_change_generation = change.generation
            self.state.save(self.config.state_path)
            submitted += 1
        return submitted

    def _next_seq(self) -> int:
        if self.state.next_log_seq is None:
            entries = self.client.state_prefix(log_prefix(self.config.plc_id))
            if entries:
                last = decode_record(decode_entry_data(entries[-1]))
                self.state.next_log_seq = last.seq + 1
            else:
                self.state.next_log_seq = 0
        return self.state.next_log_seq

    def _submit_log(self, kind: str, detail: dict, result: str) -> bool:
        try:
            seq = self._next_seq()
        except ClusterUnavailable:
            return False
        payload_mode = "inline"
        offchain_digest = None
        record_detail = dict(detail)
        if self.blobs is not None:
            blob = json.dumps(detail, sort_keys=True).encode()
            if len(blob) > self.config.offchain_threshold_bytes:
                offchain_digest = self.blobs.put(blob)
                payload_mode = "offchain_hash"
                record_detail = {}
        record = LogRecord(
            seq=seq,
            plc_id=self.config.plc_id,
            kind=kind,
            detail=record_detail,
            result=result,
            logged_at=int(time.time() * 1000),
            payload_mode=payload_mode,
            offchain_digest=offchain_digest,
        )
        txn = sign_transaction(
            self.identity,
            compute_address("log", self.config.plc_id, seq),
            record.encode(),
            nonce=seq,
        )
        backoff = 0.1
        for _attempt in range(4):
            try:
                self.client.submit(txn)
                self.state.next_log_seq = seq + 1
                self.state.save(self.config.state_path)
                self._unconfirmed.append(
                    (txn.txn_id, {"kind": kind, "detail": detail, "result": result}, kind)
                )
                self.submitted_log_txns += 1
                return True
            except SubmitRejected as exc:
                if exc.code != 503:
                    log.error("log txn rejected outright: %s", exc)
                    return False
                time.sleep(backoff)
                backoff *= 2  # back-pressure: wait and retry, records retained
            except ClusterUnavailable:
                return False
        return False

    def _reconcile_unconfirmed(self) -> None:
        still = []
        for txn_id, report, kind in self._unconfirmed:
            try:
                doc = self.client.status(txn_id)
            except ClusterUnavailable:
                still.append((txn_id, report, kind))
                continue
            status = doc.get("status")
            if status == "committed":
                continue
            if status == "invalid":
                # a seq race (e.g. mid-burst failover); data gets a fresh slot
                log.warning("log txn %s invalid (%s), requeueing", txn_id, doc.get("reason"))
                self.state.next_log_seq = None  # resync from chain
                self._reports.appendleft(report)
                continue
            still.append((txn_id, report, kind))
        self._unconfirmed = still

    # --- lifecycle ---

    def start(self) -> None:
        for name, target, period in (
            ("executor", self.executor_poll, self.config.executor_poll_ms),
            ("logger", self.logger_poll, self.config.logger_poll_ms),
        ):
            thread = threading.Thread(
                target=self._loop, args=(target, period / 1000.0),
                name=f"plc-{name}", daemon=True,
            )
            thread.start()
            self._threads.append(thread)
        log.info("agent %s running against %s", self.config.plc_id, self.config.node_endpoints)

    def _loop(self, step, period_s: float) -> None:
        while not self._stop.is_set():
            started = time.monotonic()
            try:
                step()
            except Exception:
                log.exception("agent loop error")
            self._touch_heartbeat()
            remainder = period_s - (time.monotonic() - started)
            if remainder > 0:
                self._stop.wait(remainder)

    def _touch_heartbeat(self) -> None:
        beat = Path(self.config.state_path).with_suffix(".heartbeat")
        try:
            beat.write_text(str(time.time()))
        except OSError:
            pass

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=3)
        self.fieldbus.close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plc-agent", description="ledger-driven PLC agent")
    parser.add_argument("--config", required=True, help="agent config file (JSON)")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    agent = PlcAgent(AgentConfig.from_file(args.config))
    agent.start()
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        agent.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
