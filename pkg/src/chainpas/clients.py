"""HTTP client for the node gateways, with failover across configured nodes.

Every level above the validators (PLC agent, operator tooling, benchmark)
talks to the cluster through this; if a node stops answering, calls roll over
to the next configured endpoint.
"""

from __future__ import annotations

import base64
import time

import requests

from .txn import Transaction


class ClusterUnavailable(ConnectionError):
    """No configured node answered within the retry budget."""


class SubmitRejected(Exception):
    def __init__(self, code: int, body: dict):
        self.code = code
        self.body = body
        super().__init__(f"gateway returned {code}: {body}")


class NodeClient:
    def __init__(
        self,
        endpoints: list[str],
        timeout_s: float = 10.0,
        retry_rounds: int = 2,
    ):
        if not endpoints:
            raise ValueError("need at least one node endpoint")
        self.endpoints = [e.rstrip("/") for e in endpoints]
        self.timeout_s = timeout_s
        self.retry_rounds = retry_rounds
        self._preferred = 0
        self._session = requests.Session()

    def _attempt_order(self) -> list[str]:
        n = len(self.endpoints)
        return [self.endpoints[(self._preferred + i) % n] for i in range(n)]

    def _request(self, method: str, path: str, **kwargs):
        last_error: Exception | None = None
        for _round in range(self.retry_rounds):
            for i, base in enumerate(self._attempt_order()):
                try:
                    resp = self._session.request(
                        method, base + path, timeout=self.timeout_s, **kwargs
                    )
                    # remember the node that answered for subsequent calls
                    self._preferred = (self._preferred + i) % len(self.endpoints)
                    return resp
                except requests.ConnectionError as exc:
                    last_error = exc
                except requests.Timeout as exc:
                    last_error = exc
            time.sleep(0.1)
        raise ClusterUnavailable(str(last_error))

    # --- gateway operations ---

    def submit(self, txn: Transaction) -> dict:
        body = {"envelope": base64.b64encode(txn.serialize()).decode()}
        resp = self._request("POST", "/transactions", json=body)
        if resp.status_code != 202:
            raise SubmitRejected(resp.status_code, _json_or_empty(resp))
        return resp.json()

    def status(self, txn_id: str) -> dict:
        return self._request("GET", f"/status/{txn_id}").json()

    def state(self, address: str) -> list[dict]:
        resp = self._request("GET", f"/state/{address}")
        if resp.status_code == 404:
            return []
        resp.raise_for_status()
        return resp.json()

    def history(self, address: str, from_version: int = 1) -> list[dict]:
        resp = self._request(
            "GET", f"/history/{address}", params={"from_version": from_version}
        )
        resp.raise_for_status()
        return resp.json()

    def state_prefix(self, prefix: str) -> list[dict]:
        resp = self._request("GET", "/state", params={"prefix": prefix})
        resp.raise_for_status()
        return resp.json()

    def metrics(self) -> dict:
        return self._request("GET", "/metrics").json()

    def blocks(self, from_height: int = 0, to_height: int | None = None) -> list[dict]:
        params = {"from": from_height}
        if to_height is not None:
            params["to"] = to_height
        return self._request("GET", "/blocks", params=params).json()["blocks"]

    def wait_terminal(self, txn_id: str, timeout_s: float = 30.0,
                      poll_s: float = 0.02) -> dict:
        """Poll until the txn is committed or invalid on the answering node."""
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            doc = self.status(txn_id)
            if doc.get("status") in ("committed", "invalid"):
                return doc
            time.sleep(poll_s)
        raise TimeoutError(f"txn {txn_id} still {doc.get('status')!r} after {timeout_s}s")


def decode_entry_data(entry: dict) -> bytes:
    return base64.b64decode(entry["data_b64"])


def _json_or_empty(resp) -> dict:
    try:
        return resp.json()
    except ValueError:
        return {}
