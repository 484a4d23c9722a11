import pytest

from chainpas import contract
from chainpas.addresses import compute_address
from chainpas.chain import (
    GENESIS_PREV_HASH,
    Block,
    BlockStore,
    make_genesis,
    replay_state,
    verify_chain,
)
from chainpas.consensus import draw_wait, round_key
from chainpas.contract import LogRecord
from chainpas.statestore import StateStore, entries_equal
from chainpas.txn import sign_transaction
from chainpas.wire import Reader


def build_chain(plc_key, registry, data_dir, n_blocks=50, txns_per_block=2):
    """Test harness: leader-built chain of log records, one device."""
    store = BlockStore(data_dir)
    state = StateStore()
    genesis = make_genesis(seed=42, target_block_interval_ms=500.0)
    store.append(genesis, [])
    seq = 0
    for height in range(1, n_blocks):
        txns = []
        for _ in range(txns_per_block):
            record = LogRecord(
                seq=seq, plc_id="plc-1", kind="device_change",
                detail={"register": "motor", "old": "0", "new": "1"},
                logged_at=height,
            )
            txn = sign_transaction(
                plc_key, compute_address("log", "plc-1", seq), record.encode(), nonce=seq
            )
            delta = contract.apply(txn, state.get, registry)
            for address, data in delta.writes:
                state.set(address, data, txn.txn_id)
            txns.append(txn)
            seq += 1
        prev = store.tip()
        block = Block(
            height=height,
            prev_hash=prev.block_hash,
            txn_ids=tuple(t.txn_id for t in txns),
            state_root=state.state_root(),
            leader="node-a",
            wait_certificate=draw_wait("node-a", round_key(height, 0), 42, 500.0),
        ).sealed()
        store.append(block, txns)
    return store, state


def test_genesis_only_chain_ok(registry, tmp_path):
    store = BlockStore(tmp_path)
    store.append(make_genesis(42, 500.0), [])
    assert verify_chain(store.blocks(), store.get_txn, registry) is None


def test_genesis_fields():
    g = make_genesis(42, 500.0)
    assert g.height == 0
    assert g.prev_hash == GENESIS_PREV_HASH
    assert g.txn_ids == ()
    assert g.block_hash == g.compute_hash()
    # same seed -> same genesis on every node
    assert make_genesis(42, 500.0) == g
    assert make_genesis(43, 500.0) != g


def test_fifty_block_chain_verifies_and_replays(plc_key, registry, tmp_path):
    store, live_state = build_chain(plc_key, registry, tmp_path)
    blocks = store.blocks()
    assert len(blocks) == 50
    assert verify_chain(blocks, store.get_txn, registry) is None
    replayed = replay_state(blocks, store.get_txn, registry)
    assert entries_equal(replayed, live_state)
    assert replayed.state_root() == blocks[-1].state_root


def test_block_serialization_roundtrip(plc_key, registry, tmp_path):
    store, _ = build_chain(plc_key, registry, tmp_path, n_blocks=3)
    for block in store.blocks():
        assert Block.read_from(Reader(block.serialize())) == block
        assert Block.from_json(block.to_json()) == block


def test_store_reload_resumes(plc_key, registry, tmp_path):
    store, _ = build_chain(plc_key, registry, tmp_path, n_blocks=5)
    tip = store.tip()
    reloaded = BlockStore(tmp_path)
    assert reloaded.height() == 4
    assert reloaded.tip() == tip


def test_tampered_payload_detected_at_height(plc_key, registry, tmp_path):
    store, _ = build_chain(plc_key, registry, tmp_path, n_blocks=6)
    victim_block = store.block_at(3)
    victim_id = victim_block.txn_ids[0]
    path = store.txn_path(victim_id)
    raw = bytearray(path.read_bytes())
    # flip one byte inside the payload region; the record's register name
    # "motor" appears verbatim in the envelope
    idx = raw.find(b"motor")
    assert idx > 0
    raw[idx] ^= 0x01
    path.write_bytes(bytes(raw))

    reloaded = BlockStore(tmp_path)
    violation = verify_chain(reloaded.blocks(), reloaded.get_txn, registry)
    assert violation is not None
    assert violation.height == 3
    assert violation.reason == "hash-mismatch"


def test_broken_link_detected(plc_key, registry, tmp_path):
    store, _ = build_chain(plc_key, registry, tmp_path, n_blocks=4)
    blocks = store.blocks()
    forged = Block(
        height=2,
        prev_hash="ab" * 32,
        txn_ids=blocks[2].txn_ids,
        state_root=blocks[2].state_root,
        leader=blocks[2].leader,
        wait_certificate=blocks[2].wait_certificate,
    ).sealed()
    violation = verify_chain(
        [blocks[0], blocks[1], forged, blocks[3]], store.get_txn, registry
    )
    assert violation is not None and violation.height == 2
    assert violation.reason == "broken-link"


def test_append_rejects_height_gap(tmp_path):
    store = BlockStore(tmp_path)
    store.append(make_genesis(42, 500.0), [])
    bad = Block(
        height=5,
        prev_hash=store.tip().block_hash,
        txn_ids=("x",),
        state_root="0" * 64,
        leader="a",
        wait_certificate=draw_wait("a", round_key(5, 0), 42, 500.0),
    ).sealed()
    with pytest.raises(ValueError):
        store.append(bad, [])
