"""Supervision-level tooling: publish operator commands, watch device logs.

The library half (HmiClient) is what the CLI, the tests, and the local HTTP
bridge all share. The bridge exposes publish/monitor/health over plain JSON
for the operator console and serves the console's static files.

CLI output is line-oriented JSON so it pipes cleanly into other tools.
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import mimetypes
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import requests

from .addresses import compute_address, log_prefix
from .blobstore import BlobNotFound, BlobStore
from .clients import ClusterUnavailable, NodeClient, SubmitRejected, decode_entry_data
from .contract import ACTIONS, LogRecord, OperationRecord, decode_record
from .identity import PrivateIdentity, load_key_file
from .txn import sign_transaction

log = logging.getLogger("chainpas.hmi")

DEFAULT_MONITOR_POLL_MS = 500.0


class PublishInvalid(Exception):
    def __init__(self, txn_id: str, reason: str):
        self.txn_id = txn_id
        self.reason = reason
        super().__init__(f"operation {txn_id} invalid: {reason}")


class HmiClient:
    def __init__(
        self,
        endpoints: list[str],
        identity: PrivateIdentity | None = None,
        blob_dir: str | None = None,
    ):
        self.client = NodeClient(endpoints)
        self.endpoints = self.client.endpoints
        self.identity = identity
        self.blobs = BlobStore(blob_dir) if blob_dir else None
        self._nonce = int(time.time_ns() % 2**32)

    # --- publisher ---

    def current_op_seq(self, plc_id: str) -> int | None:
        entries = self.client.state(compute_address("ops", plc_id))
        if not entries:
            return None
        record = decode_record(decode_entry_data(entries[0]))
        return record.op_seq if isinstance(record, OperationRecord) else None

    def publish(
        self,
        action: str,
        plc_id: str,
        program: bytes | None = None,
        wait: bool = True,
        timeout_s: float = 30.0,
    ) -> str:
        """Sign and submit one operation; returns its txn_id.

        With wait=True the call polls to a terminal status, retrying exactly
        once if a concurrent publisher stole the sequence number.
        """
        if self.identity is None:
            raise ValueError("publisher needs an operator identity")
        if action not in ACTIONS:
            raise ValueError(f"unknown action {action!r}")
        if (program is not None) != (action == "compile"):
            raise ValueError("program bytes required exactly for compile")
        for attempt in (0, 1):
            current = self.current_op_seq(plc_id)
            op_seq = 0 if current is None else current + 1
            record = OperationRecord(
                op_seq=op_seq,
                operator_id=self.identity.id,
                plc_id=plc_id,
                action=action,
                program=program,
                issued_at=int(time.time() * 1000),
            )
            self._nonce += 1
            txn = sign_transaction(
                self.identity,
                compute_address("ops", plc_id),
                record.encode(),
                nonce=self._nonce,
            )
            self.client.submit(txn)
            if not wait:
                return txn.txn_id
            doc = self.client.wait_terminal(txn.txn_id, timeout_s=timeout_s)
            if doc["status"] == "committed":
                return txn.txn_id
            if doc.get("reason") == "bad-seq" and attempt == 0:
                log.info("lost the op_seq race at %d, retrying once", op_seq)
                continue
            raise PublishInvalid(txn.txn_id, doc.get("reason", "unknown"))
        raise PublishInvalid(txn.txn_id, "bad-seq")

    # --- monitor ---

    def monitor_poll(
        self, plc_id: str, known_seq: int = -1, resolve: bool = False
    ) -> list[dict]:
        """Log records with seq > known_seq, ascending; read-only."""
        entries = self.client.state_prefix(log_prefix(plc_id))
        records = []
        for entry in entries:
            record = decode_record(decode_entry_data(entry))
            if not isinstance(record, LogRecord) or record.seq <= known_seq:
                continue
            records.append(self._record_json(record, resolve))
        return records

    def _record_json(self, record: LogRecord, resolve: bool) -> dict:
        doc = {
            "seq": record.seq,
            "plc_id": record.plc_id,
            "kind": record.kind,
            "detail": dict(record.detail),
            "result": record.result,
            "logged_at": record.logged_at,
            "payload_mode": record.payload_mode,
        }
        if record.offchain_digest is not None:
            doc["offchain_digest"] = record.offchain_digest
            if resolve:
                try:
                    if self.blobs is None:
                        raise BlobNotFound(record.offchain_digest)
                    doc["detail"] = json.loads(self.blobs.get(record.offchain_digest))
                except (BlobNotFound, ValueError):
                    doc["resolution_warning"] = "off-chain payload unavailable"
        return doc

    def status(self, txn_id: str) -> dict:
        return self.client.status(txn_id)

    def node_health(self, timeout_s: float = 1.0) -> list[dict]:
        out = []
        for url in self.endpoints:
            entry = {"url": url, "ok": False}
            try:
                resp = requests.get(f"{url}/health", timeout=timeout_s)
                if resp.status_code == 200:
                    doc = resp.json()
                    entry.update(ok=True, node_id=doc.get("node_id"),
                                 height=doc.get("height"))
            except requests.RequestException:
                pass
            out.append(entry)
        return out


class HmiBridge:
    """Local HTTP bridge: the console's only doorway to the cluster."""

    def __init__(self, hmi: HmiClient, host: str = "127.0.0.1", port: int = 0,
                 static_dir: str | None = None):
        self.hmi = hmi
        self.static_dir = Path(static_dir) if static_dir else None
        bridge = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                log.debug(fmt, *args)

            def do_GET(self):
                bridge._get(self)

            def do_POST(self):
                bridge._post(self)

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"hmi-bridge:{self.port}", daemon=True
        )

    def start(self) -> None:
        self._thread.start()
        log.info("bridge on port %d", self.port)

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def _post(self, req: BaseHTTPRequestHandler) -> None:
        if urlparse(req.path).path != "/api/publish":
            _reply(req, 404, {"error": "not-found"})
            return
        try:
            body = json.loads(req.rfile.read(int(req.headers.get("Content-Length", 0))))
            plc_id = body["plc_id"]
            action = body["action"]
            program = base64.b64decode(body["program_b64"]) if body.get("program_b64") else None
        except (ValueError, KeyError, TypeError):
            _reply(req, 400, {"error": "malformed"})
            return
        try:
            txn_id = self.hmi.publish(action, plc_id, program, wait=False)
        except (ValueError, SubmitRejected) as exc:
            _reply(req, 400, {"error": "rejected", "detail": str(exc)})
            return
        except ClusterUnavailable:
            _reply(req, 503, {"error": "cluster-unavailable"})
            return
        _reply(req, 202, {"txn_id": txn_id, "status_url": f"/api/status/{txn_id}"})

    def _get(self, req: BaseHTTPRequestHandler) -> None:
        parsed = urlparse(req.path)
        path = parsed.path
        query = parse_qs(parsed.query)
        try:
            if path == "/api/health":
                _reply(req, 200, {"nodes": self.hmi.node_health()})
            elif path.startswith("/api/status/"):
                _reply(req, 200, self.hmi.status(path[len("/api/status/"):]))
            elif path == "/api/logs":
                plc_id = query.get("plc", [""])[0]
                since = int(query.get("since", ["-1"])[0])
                resolve = query.get("resolve", ["0"])[0] in ("1", "true")
                if not plc_id:
                    _reply(req, 400, {"error": "malformed", "detail": "plc required"})
                    return
                records = self.hmi.monitor_poll(plc_id, since, resolve)
                _reply(req, 200, {
                    "records": records,
                    "next_since": records[-1]["seq"] if records else since,
                })
            else:
                self._static(req, path)
        except ClusterUnavailable:
            _reply(req, 503, {"error": "cluster-unavailable"})
        except ValueError as exc:
            _reply(req, 400, {"error": "malformed", "detail": str(exc)})

    def _static(self, req: BaseHTTPRequestHandler, path: str) -> None:
        if self.static_dir is None:
            if path == "/":
                _reply(req, 200, {"service": "hmi-bridge", "console": "not installed"})
            else:
                _reply(req, 404, {"error": "not-found"})
            return
        name = "index.html" if path == "/" else path.lstrip("/")
        target = (self.static_dir / name).resolve()
        if not str(target).startswith(str(self.static_dir.resolve())) or not target.is_file():
            _reply(req, 404, {"error": "not-found"})
            return
        body = target.read_bytes()
        ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        req.send_response(200)
        req.send_header("Content-Type", ctype)
        req.send_header("Content-Length", str(len(body)))
        req.end_headers()
        req.wfile.write(body)


def _reply(req: BaseHTTPRequestHandler, code: int, doc) -> None:
    body = json.dumps(doc).encode()
    req.send_response(code)
    req.send_header("Content-Type", "application/json")
    req.send_header("Content-Length", str(len(body)))
    req.end_headers()
    req.wfile.write(body)


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc) + "\n")
    sys.stdout.flush()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hmi", description="operator publish/monitor tooling")
    parser.add_argument("--nodes", default="http://127.0.0.1:8640",
                        help="comma-separated node gateway URLs")
    sub = parser.add_subparsers(dest="command", required=True)

    pub = sub.add_parser("publish", help="publish an operation")
    pub.add_argument("--plc", required=True)
    pub.add_argument("--action", required=True, choices=list(ACTIONS))
    pub.add_argument("--program", help="program source file (compile only)")
    pub.add_argument("--key", required=True, help="operator key file")
    pub.add_argument("--no-wait", action="store_true")

    mon = sub.add_parser("monitor", help="poll the device log")
    mon.add_argument("--plc", required=True)
    mon.add_argument("--since", type=int, default=-1)
    mon.add_argument("--resolve", action="store_true")
    mon.add_argument("--blob-dir")
    mon.add_argument("--follow", action="store_true")
    mon.add_argument("--interval-ms", type=float, default=DEFAULT_MONITOR_POLL_MS)

    srv = sub.add_parser("serve", help="run the console bridge")
    srv.add_argument("--port", type=int, default=8600)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--key", required=True, help="operator key file")
    srv.add_argument("--static", help="console static files directory")
    srv.add_argument("--blob-dir")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    endpoints = [e for e in args.nodes.split(",") if e]

    if args.command == "publish":
        identity = load_key_file(args.key)
        hmi = HmiClient(endpoints, identity)
        program = Path(args.program).read_bytes() if args.program else None
        try:
            txn_id = hmi.publish(args.action, args.plc, program, wait=not args.no_wait)
        except PublishInvalid as exc:
            _emit({"txn_id": exc.txn_id, "status": "invalid", "reason": exc.reason})
            return 1
        _emit({"txn_id": txn_id, "status": "submitted" if args.no_wait else "committed"})
        return 0

    if args.command == "monitor":
        hmi = HmiClient(endpoints, blob_dir=args.blob_dir)
        since = args.since
        while True:
            for record in hmi.monitor_poll(args.plc, since, args.resolve):
                _emit(record)
                since = max(since, record["seq"])
            if not args.follow:
                return 0
            time.sleep(args.interval_ms / 1000.0)

    hmi = HmiClient(endpoints, load_key_file(args.key), blob_dir=args.blob_dir)
    bridge = HmiBridge(hmi, host=args.host, port=args.port, static_dir=args.static)
    bridge.start()
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        bridge.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
