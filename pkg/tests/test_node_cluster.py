import time

import pytest
import requests

from chainpas import peers
from chainpas.addresses import compute_address, log_prefix
from chainpas.clients import ClusterUnavailable, NodeClient, decode_entry_data
from chainpas.consensus import draw_wait, round_key
from chainpas.chain import Block
from chainpas.contract import LogRecord, OperationRecord, decode_record
from chainpas.txn import sign_transaction

from cluster_util import restart_node, start_cluster


@pytest.fixture()
def cluster(tmp_path, registry):
    c = start_cluster(tmp_path, registry)
    yield c
    c.stop()


def log_txn(plc_key, seq, nonce=None, detail=None):
    record = LogRecord(
        seq=seq, plc_id=plc_key.id, kind="device_change",
        detail=detail or {"register": "motor", "old": "0", "new": "1"},
        logged_at=int(time.time() * 1000),
    )
    return sign_transaction(
        plc_key, compute_address("log", plc_key.id, seq), record.encode(),
        nonce=nonce if nonce is not None else seq,
    )


def op_txn(operator_key, plc_id, action, op_seq, program=None):
    record = OperationRecord(
        op_seq=op_seq, operator_id=operator_key.id, plc_id=plc_id,
        action=action, program=program, issued_at=int(time.time() * 1000),
    )
    return sign_transaction(
        operator_key, compute_address("ops", plc_id), record.encode(), nonce=op_seq
    )


def wait_all_committed(cluster, txn_id, timeout_s=10.0):
    clients = [NodeClient([url]) for url in cluster.urls]
    deadline = time.monotonic() + timeout_s
    docs = []
    while time.monotonic() < deadline:
        docs = [c.status(txn_id) for c in clients]
        if all(d.get("status") == "committed" for d in docs):
            return docs
        if any(d.get("status") == "invalid" for d in docs):
            raise AssertionError(f"txn went invalid: {docs}")
        time.sleep(0.01)
    raise TimeoutError(f"not committed everywhere: {docs}")


class TestCommitPath:
    def test_txn_commits_on_all_nodes_same_block(self, cluster, plc_key):
        client = NodeClient([cluster.urls[0]])
        txn = log_txn(plc_key, 0)
        resp = client.submit(txn)
        assert resp["txn_id"] == txn.txn_id
        docs = wait_all_committed(cluster, txn.txn_id)
        heights = {d["block_height"] for d in docs}
        assert len(heights) == 1
        h = heights.pop()
        hashes = {n.store.block_at(h).block_hash for n in cluster.nodes}
        assert len(hashes) == 1

    def test_bad_signature_goes_invalid_without_state(self, cluster, registry):
        from chainpas.identity import generate_identity

        imposter = generate_identity("plc-1", "plc")  # key not in registry
        txn = log_txn(imposter, 0)
        client = NodeClient([cluster.urls[1]])
        client.submit(txn)
        doc = client.wait_terminal(txn.txn_id, timeout_s=5)
        assert doc["status"] == "invalid"
        assert doc["reason"] in ("bad-signature", "unknown-signer")
        assert all(len(n.state) == 0 for n in cluster.nodes)

    def test_resubmission_is_idempotent(self, cluster, plc_key):
        client = NodeClient([cluster.urls[0]])
        txn = log_txn(plc_key, 0)
        client.submit(txn)
        first = client.wait_terminal(txn.txn_id)
        assert first["status"] == "committed"
        client.submit(txn)  # again
        second = client.wait_terminal(txn.txn_id)
        assert second["status"] == "committed"
        assert second["block_height"] == first["block_height"]

    def test_contract_rejection_surfaces_reason(self, cluster, plc_key):
        client = NodeClient([cluster.urls[0]])
        client.submit(log_txn(plc_key, 0))
        bad = log_txn(plc_key, 5)  # gap
        client.submit(bad)
        doc = client.wait_terminal(bad.txn_id, timeout_s=5)
        assert doc["status"] == "invalid"
        assert doc["reason"] == "bad-seq"

    def test_rapid_burst_commits_in_order(self, cluster, plc_key):
        client = NodeClient([cluster.urls[2]])
        txns = [log_txn(plc_key, seq) for seq in range(10)]
        for txn in txns:
            client.submit(txn)
        wait_all_committed(cluster, txns[-1].txn_id, timeout_s=15)
        cluster.wait_converged()
        entries = client.state_prefix(log_prefix(plc_key.id))
        seqs = [decode_record(decode_entry_data(e)).seq for e in entries]
        assert seqs == list(range(10))


class TestQueries:
    def test_genesis_state_empty(self, cluster):
        client = NodeClient([cluster.urls[0]])
        from chainpas.addresses import NAMESPACE

        assert client.state_prefix(NAMESPACE) == []

    def test_full_address_lookup(self, cluster, plc_key):
        client = NodeClient([cluster.urls[0]])
        txn = log_txn(plc_key, 0)
        client.submit(txn)
        wait_all_committed(cluster, txn.txn_id)
        [entry] = client.state(txn.address)
        assert entry["address"] == txn.address
        assert entry["version"] == 1
        assert decode_entry_data(entry) == txn.payload

    def test_unknown_full_address_404(self, cluster):
        url = cluster.urls[0]
        missing = compute_address("log", "ghost", 0)
        resp = requests.get(f"{url}/state/{missing}", timeout=5)
        assert resp.status_code == 404

    def test_malformed_prefix_schema_error(self, cluster):
        resp = requests.get(f"{cluster.urls[0]}/state", params={"prefix": "abc"}, timeout=5)
        assert resp.status_code == 400
        assert resp.json()["error"] == "schema"

    def test_log_prefix_scan_in_seq_order(self, cluster, plc_key):
        client = NodeClient([cluster.urls[0]])
        txns = [log_txn(plc_key, seq) for seq in range(5)]
        for txn in txns:
            client.submit(txn)
            client.wait_terminal(txn.txn_id)
        entries = client.state_prefix(log_prefix(plc_key.id))
        assert len(entries) == 5
        seqs = [decode_record(decode_entry_data(e)).seq for e in entries]
        assert seqs == sorted(seqs) == list(range(5))

    def test_queries_never_write(self, cluster, plc_key):
        client = NodeClient([cluster.urls[0]])
        txn = log_txn(plc_key, 0)
        client.submit(txn)
        wait_all_committed(cluster, txn.txn_id)
        writes_before = [n.state.write_count for n in cluster.nodes]
        for url in cluster.urls:
            c = NodeClient([url])
            c.state_prefix(log_prefix(plc_key.id))
            c.state(txn.address)
            c.metrics()
        assert [n.state.write_count for n in cluster.nodes] == writes_before


class TestReplication:
    def test_block_from_non_leader_nacked(self, cluster, plc_key):
        node_a = cluster.nodes[0]
        target = cluster.nodes[1]
        txn = log_txn(plc_key, 0)
        height = target.store.height() + 1
        # craft a block whose certificate belongs to a round nobody scheduled
        cert = draw_wait("node-zz", round_key(height, 0), node_a.config.seed,
                         node_a.config.target_block_interval_ms)
        overlay = target.state.fork()
        from chainpas import contract as contract_mod

        delta = contract_mod.apply(txn, overlay.get, node_a.registry)
        for address, data in delta.writes:
            overlay.set(address, data, txn.txn_id)
        block = Block(
            height=height,
            prev_hash=target.store.tip().block_hash,
            txn_ids=(txn.txn_id,),
            state_root=overlay.state_root(),
            leader="node-zz",
            wait_certificate=cert,
        ).sealed()
        client = peers.PeerClient("test", "127.0.0.1", target.peer_port)
        reply = client.request(peers.BlockMsg(block=block, txns=(txn,)))
        client.close()
        assert isinstance(reply, peers.Nack)
        assert reply.reason == "wrong-leader"
        assert target.store.height() == height - 1

    def test_tampered_txn_list_nacked_divergence(self, cluster, plc_key, registry):
        target = cluster.nodes[2]
        height = target.store.height() + 1
        from chainpas.consensus import leader_for

        leader, cert = leader_for(
            [n.node_id for n in cluster.nodes], height, 0,
            target.config.seed, target.config.target_block_interval_ms,
        )
        txn = log_txn(plc_key, 0)
        other = log_txn(plc_key, 1)
        overlay = target.state.fork()
        from chainpas import contract as contract_mod

        delta = contract_mod.apply(txn, overlay.get, registry)
        for address, data in delta.writes:
            overlay.set(address, data, txn.txn_id)
        # list claims `other`, state root computed from `txn`
        block = Block(
            height=height,
            prev_hash=target.store.tip().block_hash,
            txn_ids=(other.txn_id,),
            state_root=overlay.state_root(),
            leader=leader,
            wait_certificate=cert,
        ).sealed()
        client = peers.PeerClient("test", "127.0.0.1", target.peer_port)
        reply = client.request(peers.BlockMsg(block=block, txns=(other,)))
        client.close()
        assert isinstance(reply, peers.Nack)
        assert reply.reason == "divergence"
        assert target.store.height() == height - 1

    def test_leader_block_acked_identical_roots(self, cluster, plc_key):
        client = NodeClient([cluster.urls[0]])
        txn = log_txn(plc_key, 0)
        client.submit(txn)
        wait_all_committed(cluster, txn.txn_id)
        cluster.wait_converged()
        roots = {n.store.tip().state_root for n in cluster.nodes}
        assert len(roots) == 1


class TestFailover:
    def test_survivors_commit_and_restart_converges(self, tmp_path, registry, plc_key, operator_key):
        cluster = start_cluster(tmp_path, registry)
        try:
            client = NodeClient(cluster.urls)
            warm = log_txn(plc_key, 0)
            client.submit(warm)
            wait_all_committed(cluster, warm.txn_id)

            downed = cluster.nodes[1]
            down_id = downed.node_id
            downed.stop()

            survivors = [cluster.nodes[0], cluster.nodes[2]]
            surviving_client = NodeClient([n.rest_url() for n in survivors])
            for seq in range(1, 4):
                txn = log_txn(plc_key, seq)
                surviving_client.submit(txn)
                doc = surviving_client.wait_terminal(txn.txn_id, timeout_s=15)
                assert doc["status"] == "committed"
            tip_heights = {n.store.height() for n in survivors}
            assert len(tip_heights) == 1

            fresh = restart_node(cluster, down_id, tmp_path, registry)
            deadline = time.monotonic() + 10
            while time.monotonic() < deadline:
                if fresh.store.height() == survivors[0].store.height():
                    break
                time.sleep(0.02)
            assert fresh.store.height() == survivors[0].store.height()
            assert fresh.store.tip().block_hash == survivors[0].store.tip().block_hash
        finally:
            cluster.stop()

    def test_all_nodes_down_reports_unavailable(self, tmp_path, registry, plc_key):
        cluster = start_cluster(tmp_path, registry)
        urls = cluster.urls
        cluster.stop()
        client = NodeClient(urls, timeout_s=1, retry_rounds=2)
        with pytest.raises(ClusterUnavailable):
            client.submit(log_txn(plc_key, 0))


class TestSafetyAndLiveness:
    def test_no_height_conflicts_after_mixed_load(self, cluster, plc_key, operator_key):
        client = NodeClient(cluster.urls)
        txns = []
        for i in range(20):
            if i % 4 == 0:
                txns.append(op_txn(operator_key, "plc-1", ("start", "stop")[i % 2], i // 4))
            else:
                txns.append(log_txn(plc_key, i - (i // 4 + 1)))
        # interleave submissions across nodes
        for i, txn in enumerate(txns):
            NodeClient([cluster.urls[i % 3]]).submit(txn)
        deadline = time.monotonic() + 20
        while time.monotonic() < deadline:
            statuses = [client.status(t.txn_id).get("status") for t in txns]
            if all(s in ("committed", "invalid") for s in statuses):
                break
            time.sleep(0.05)
        cluster.wait_converged(timeout_s=15)
        for h in range(cluster.nodes[0].store.height() + 1):
            hashes = {n.store.block_at(h).block_hash for n in cluster.nodes}
            assert len(hashes) == 1, f"height conflict at {h}"

    def test_commit_within_ten_block_intervals(self, cluster, plc_key):
        interval_ms = cluster.nodes[0].config.target_block_interval_ms
        client = NodeClient([cluster.urls[0]])
        start = time.monotonic()
        txn = log_txn(plc_key, 0)
        client.submit(txn)
        wait_all_committed(cluster, txn.txn_id)
        elapsed_ms = (time.monotonic() - start) * 1000
        # generous: all-node commit, not just quorum
        assert elapsed_ms < 10 * max(interval_ms, 100) + 2000
