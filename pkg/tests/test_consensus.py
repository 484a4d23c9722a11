import math
import statistics

import pytest

from chainpas.consensus import (
    InvalidCertificate,
    WaitCertificate,
    draw_wait,
    elect_leader,
    leader_for,
    round_key,
    split_round_key,
    verify_certificate,
)


def test_draw_is_deterministic():
    a = draw_wait("node-a", 5, 42, 500.0)
    b = draw_wait("node-a", 5, 42, 500.0)
    assert a == b
    assert a.wait_ms >= 0


def test_three_nodes_distinct_waits():
    waits = {draw_wait(n, 1, 42, 500.0).wait_ms for n in ("a", "b", "c")}
    assert len(waits) == 3


def test_proof_recomputable_by_peer():
    cert = draw_wait("node-b", 9, 7, 500.0)
    assert verify_certificate(cert, 500.0)
    forged = WaitCertificate(
        node_id=cert.node_id,
        round=cert.round,
        wait_ms=cert.wait_ms / 2,
        seed=cert.seed,
        proof=cert.proof,
    )
    assert not verify_certificate(forged, 500.0)


def test_empirical_mean_tracks_interval():
    # Monte Carlo over a seed sweep: sample mean within 5% of the target
    target = 500.0
    waits = [draw_wait("node-a", r, seed, target).wait_ms
             for seed in range(100) for r in range(100)]
    assert len(waits) == 10_000
    mean = statistics.fmean(waits)
    assert math.isclose(mean, target, rel_tol=0.05), mean


def test_elect_minimal_wait():
    certs = []
    for node, wait in (("x", 3.1), ("y", 7.2), ("z", 0.4)):
        real = draw_wait(node, 1, 1, 500.0)
        certs.append(
            WaitCertificate(node_id=node, round=1, wait_ms=wait, seed=1, proof=real.proof)
        )
    assert elect_leader(certs) == "z"


def test_elect_tiebreak_lexicographic():
    certs = []
    for node in ("b", "a"):
        real = draw_wait(node, 1, 1, 500.0)
        certs.append(
            WaitCertificate(node_id=node, round=1, wait_ms=5.0, seed=1, proof=real.proof)
        )
    assert elect_leader(certs) == "a"


def test_elect_rejects_bad_proof():
    good = draw_wait("a", 1, 1, 500.0)
    bad = WaitCertificate(node_id="b", round=1, wait_ms=1.0, seed=1, proof="00" * 32)
    with pytest.raises(InvalidCertificate):
        elect_leader([good, bad])


def test_three_nodes_agree_on_leader_seed_42():
    nodes = ["node-a", "node-b", "node-c"]
    # each node independently draws the full round and elects
    winners = set()
    for _me in nodes:
        certs = [draw_wait(n, round_key(1, 0), 42, 500.0) for n in nodes]
        winners.add(elect_leader(certs))
    assert len(winners) == 1


def test_fairness_over_rotating_seeds():
    nodes = ["node-a", "node-b", "node-c"]
    wins = {n: 0 for n in nodes}
    for round in range(3000):
        certs = [draw_wait(n, round, seed=1000 + round, target_block_interval_ms=500.0)
                 for n in nodes]
        wins[elect_leader(certs)] += 1
    for node, count in wins.items():
        assert 0.25 * 3000 <= count <= 0.42 * 3000, (node, count)


def test_round_key_roundtrip():
    assert split_round_key(round_key(12, 3)) == (12, 3)


def test_failover_rotation_skips_dead_winner():
    nodes = ["node-a", "node-b", "node-c"]
    first, _ = leader_for(nodes, 7, 0, 42)
    second, cert = leader_for(nodes, 7, 1, 42)
    assert second != first
    assert verify_certificate(cert, 500.0)
    # attempts 1 and 2 cover the two other nodes
    third, _ = leader_for(nodes, 7, 2, 42)
    assert {first, second, third} == set(nodes)
