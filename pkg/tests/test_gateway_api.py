"""Pins the HTTP surface: field names, casing, and status codes per docs/api.md."""

import base64
import json
import time

import pytest
import requests

from chainpas.addresses import compute_address
from chainpas.contract import LogRecord
from chainpas.txn import MAX_PAYLOAD_BYTES, sign_transaction

from cluster_util import start_cluster


@pytest.fixture()
def cluster(tmp_path, registry):
    c = start_cluster(tmp_path, registry)
    yield c
    c.stop()


def make_txn(plc_key, seq=0):
    record = LogRecord(seq=seq, plc_id=plc_key.id, kind="plc_action",
                       detail={"action": "start"}, logged_at=1)
    return sign_transaction(
        plc_key, compute_address("log", plc_key.id, seq), record.encode(), nonce=seq
    )


def post_txn(url, txn):
    return requests.post(
        f"{url}/transactions",
        json={"envelope": base64.b64encode(txn.serialize()).decode()},
        timeout=10,
    )


class TestTransactionsEndpoint:
    def test_accept_shape(self, cluster, plc_key):
        resp = post_txn(cluster.urls[0], make_txn(plc_key))
        assert resp.status_code == 202
        doc = resp.json()
        assert set(doc) == {"txn_id", "status_url", "arrival_ms", "status"}
        assert doc["status_url"] == f"/status/{doc['txn_id']}"
        assert doc["status"] == "pending"
        assert isinstance(doc["arrival_ms"], float)

    def test_garbage_body_400(self, cluster):
        resp = requests.post(f"{cluster.urls[0]}/transactions",
                             data=b"not json at all", timeout=5)
        assert resp.status_code == 400
        assert resp.json() == {"error": "malformed"}

    def test_bad_base64_400(self, cluster):
        resp = requests.post(f"{cluster.urls[0]}/transactions",
                             json={"envelope": "@@@"}, timeout=5)
        assert resp.status_code == 400

    def test_oversize_payload_413(self, cluster, plc_key):
        # 751 kB payload: backdoor construction to bypass client-side cap
        from chainpas import txn as txn_mod

        record = b"\0" * (MAX_PAYLOAD_BYTES + 1000)
        core = txn_mod._canonical(
            plc_key.id, compute_address("log", plc_key.id, 0),
            record, txn_mod.digest(record), 0, 1,
        )
        envelope = core + txn_mod.wire.put_bytes(plc_key.sign(core))
        resp = requests.post(
            f"{cluster.urls[0]}/transactions",
            json={"envelope": base64.b64encode(envelope).decode()},
            timeout=30,
        )
        assert resp.status_code == 413
        assert resp.json() == {"error": "payload-too-large"}

    def test_huge_body_413_without_reading(self, cluster):
        resp = requests.post(
            f"{cluster.urls[0]}/transactions",
            headers={"Content-Length": str(5 * MAX_PAYLOAD_BYTES)},
            data=b"",
            timeout=5,
        )
        assert resp.status_code == 413


class TestStatusEndpoint:
    def test_unknown_txn(self, cluster):
        doc = requests.get(f"{cluster.urls[0]}/status/{'ab' * 32}", timeout=5).json()
        assert doc == {"txn_id": "ab" * 32, "status": "unknown"}

    def test_committed_has_height_and_commit_time(self, cluster, plc_key):
        txn = make_txn(plc_key)
        url = cluster.urls[0]
        post_txn(url, txn)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            doc = requests.get(f"{url}/status/{txn.txn_id}", timeout=5).json()
            if doc["status"] == "committed":
                break
            time.sleep(0.01)
        assert doc["status"] == "committed"
        assert doc["block_height"] >= 1
        assert "committed_ms" in doc
        assert "arrival_ms" in doc  # submission gateway remembers arrival


class TestStateEndpoints:
    def test_entry_field_names(self, cluster, plc_key):
        txn = make_txn(plc_key)
        url = cluster.urls[0]
        post_txn(url, txn)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            entries = requests.get(f"{url}/state/{txn.address}", timeout=5)
            if entries.status_code == 200:
                break
            time.sleep(0.01)
        [entry] = entries.json()
        assert set(entry) == {"address", "data_b64", "version"}
        assert base64.b64decode(entry["data_b64"]) == txn.payload

    def test_prefix_empty_list(self, cluster):
        from chainpas.addresses import NAMESPACE

        doc = requests.get(f"{cluster.urls[0]}/state",
                           params={"prefix": NAMESPACE}, timeout=5).json()
        assert doc == []


class TestMetricsConsistency:
    def test_metrics_match_blocks(self, cluster, plc_key):
        url = cluster.urls[0]
        for seq in range(3):
            txn = make_txn(plc_key, seq)
            post_txn(url, txn)
            deadline = time.monotonic() + 10
            while time.monotonic() < deadline:
                doc = requests.get(f"{url}/status/{txn.txn_id}", timeout=5).json()
                if doc["status"] == "committed":
                    break
                time.sleep(0.01)
        metrics = requests.get(f"{url}/metrics", timeout=5).json()
        blocks = requests.get(f"{url}/blocks", timeout=5).json()["blocks"]
        txn_total = sum(len(b["txn_ids"]) for b in blocks)
        assert metrics["committed_count"] == txn_total == 3
        assert metrics["height"] == blocks[-1]["height"]
        assert metrics["last_commit_ms"] is not None
        expected_keys = {
            "node_id", "height", "tip_hash", "committed_count", "last_commit_ms",
            "pending_count", "started_ms", "max_concurrent_pending",
        }
        assert set(metrics) == expected_keys

    def test_blocks_range_query(self, cluster, plc_key):
        url = cluster.urls[0]
        txn = make_txn(plc_key)
        post_txn(url, txn)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            if requests.get(f"{url}/metrics", timeout=5).json()["height"] >= 1:
                break
            time.sleep(0.01)
        doc = requests.get(f"{url}/blocks", params={"from": 0, "to": 0}, timeout=5).json()
        assert len(doc["blocks"]) == 1
        genesis = doc["blocks"][0]
        assert set(genesis) == {
            "height", "prev_hash", "txn_ids", "state_root", "leader",
            "wait_certificate", "rejections", "block_hash",
        }
        assert genesis["prev_hash"] == "0" * 64


def test_back_pressure_503(tmp_path, registry, plc_key):
    from chainpas.node import NodeConfig, ValidatorNode

    registry_path = tmp_path / "registry.json"
    registry.save(registry_path)
    config = NodeConfig(
        node_id="solo",
        data_dir=str(tmp_path / "solo"),
        registry_path=str(registry_path),
        max_pending=2,
        target_block_interval_ms=10_000.0,  # nothing will commit during the test
    )
    node = ValidatorNode(config, registry=registry)
    node.start()
    try:
        url = node.rest_url()
        codes = []
        for seq in range(4):
            codes.append(post_txn(url, make_txn(plc_key, seq)).status_code)
        assert codes[:2] == [202, 202]
        assert 503 in codes[2:]
    finally:
        node.stop()
