"""Per-node HTTP/JSON facade.

Endpoint table and response schemas are pinned in docs/api.md; the field
names there are load-bearing (golden-file tested). Reads are answered
straight from the node's state snapshot, writes are delegated to the node's
serialized pipeline.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .addresses import AddressError
from .txn import MAX_PAYLOAD_BYTES, deserialize_transaction
from .wire import WireError

log = logging.getLogger("chainpas.gateway")

# body cap: base64 of a maximum payload plus envelope/json overhead
_MAX_BODY = int(MAX_PAYLOAD_BYTES * 4 / 3) + 16384


def now_ms() -> float:
    return time.time_ns() / 1e6


class RestGateway:
    def __init__(self, node, host: str, port: int):
        self.node = node
        self.host = host
        self.arrivals: dict[str, float] = {}
        self._inflight: set[str] = set()
        self.max_concurrent_pending = 0
        self._gauge_lock = threading.Lock()

        gateway = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                log.debug("%s " + fmt, self.client_address[0], *args)

            def do_POST(self):
                gateway._route_post(self)

            def do_GET(self):
                gateway._route_get(self)

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"gateway:{self.port}", daemon=True
        )

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    # --- routing ---

    def _route_post(self, req: BaseHTTPRequestHandler) -> None:
        parsed = urlparse(req.path)
        if parsed.path != "/transactions":
            _reply(req, 404, {"error": "not-found"})
            return
        length = int(req.headers.get("Content-Length", 0))
        if length > _MAX_BODY:
            _reply(req, 413, {"error": "payload-too-large"})
            return
        body = req.rfile.read(length)
        arrival_ms = now_ms()  # body fully received
        try:
            doc = json.loads(body)
            envelope = base64.b64decode(doc["envelope"], validate=True)
            txn = deserialize_transaction(envelope)
        except (json.JSONDecodeError, KeyError, TypeError, WireError,
                binascii.Error, ValueError):
            _reply(req, 400, {"error": "malformed"})
            return
        if len(txn.payload) > MAX_PAYLOAD_BYTES:
            _reply(req, 413, {"error": "payload-too-large"})
            return
        from .node import BackPressure  # local import to avoid a cycle

        try:
            status = self.node.handle_transaction(txn)
        except BackPressure:
            _reply(req, 503, {"error": "back-pressure"})
            return
        self.arrivals[txn.txn_id] = arrival_ms
        self._update_gauge(txn.txn_id)
        _reply(
            req,
            202,
            {
                "txn_id": txn.txn_id,
                "status_url": f"/status/{txn.txn_id}",
                "arrival_ms": arrival_ms,
                "status": status.status,
            },
        )

    def _update_gauge(self, txn_id: str) -> None:
        with self._gauge_lock:
            self._inflight.add(txn_id)
            live = {
                t for t in self._inflight
                if self.node.get_status(t).status == "pending"
            }
            self._inflight = live
            self.max_concurrent_pending = max(self.max_concurrent_pending, len(live))

    def _route_get(self, req: BaseHTTPRequestHandler) -> None:
        parsed = urlparse(req.path)
        path = parsed.path
        query = parse_qs(parsed.query)
        try:
            if path == "/metrics":
                _reply(req, 200, self._metrics())
            elif path == "/health":
                _reply(req, 200, {"node_id": self.node.node_id, "ok": True,
                                  "height": self.node.store.height()})
            elif path.startswith("/status/"):
                status = self.node.get_status(path[len("/status/"):])
                doc = status.to_json()
                if status.txn_id in self.arrivals:
                    doc["arrival_ms"] = self.arrivals[status.txn_id]
                _reply(req, 200, doc)
            elif path.startswith("/history/"):
                address = path[len("/history/"):]
                from_version = int(query.get("from_version", ["1"])[0])
                entries = self.node.address_history(address, from_version)
                _reply(req, 200, [_entry_json(e) for e in entries])
            elif path == "/state":
                prefix = query.get("prefix", [""])[0]
                entries = self.node.handle_query(prefix)
                _reply(req, 200, [_entry_json(e) for e in entries])
            elif path.startswith("/state/"):
                address = path[len("/state/"):]
                entries = self.node.handle_query(address)
                if len(address) == 70 and not entries:
                    _reply(req, 404, {"error": "not-found"})
                else:
                    _reply(req, 200, [_entry_json(e) for e in entries])
            elif path == "/blocks":
                top = self.node.store.height()
                lo = int(query.get("from", ["0"])[0])
                hi = int(query.get("to", [str(top)])[0])
                blocks = [
                    self.node.store.block_at(h).to_json()
                    for h in range(max(lo, 0), min(hi, top) + 1)
                ]
                _reply(req, 200, {"blocks": blocks})
            else:
                _reply(req, 404, {"error": "not-found"})
        except AddressError as exc:
            _reply(req, 400, {"error": "schema", "detail": str(exc)})
        except ValueError as exc:
            _reply(req, 400, {"error": "malformed", "detail": str(exc)})

    def _metrics(self) -> dict:
        doc = self.node.metrics()
        doc["committed_count"] = doc.pop("committed_txns")
        doc["max_concurrent_pending"] = self.max_concurrent_pending
        return doc


def _entry_json(entry) -> dict:
    return {
        "address": entry.address,
        "data_b64": base64.b64encode(entry.data).decode(),
        "version": entry.version,
    }


def _reply(req: BaseHTTPRequestHandler, code: int, doc) -> None:
    body = json.dumps(doc).encode()
    req.send_response(code)
    req.send_header("Content-Type", "application/json")
    req.send_header("Content-Length", str(len(body)))
    req.end_headers()
    req.wfile.write(body)
