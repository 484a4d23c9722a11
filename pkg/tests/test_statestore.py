from chainpas.statestore import StateStore, entries_equal


def test_version_increments_per_address():
    store = StateStore()
    e1 = store.set("aa", b"1", "t1")
    e2 = store.set("aa", b"2", "t2")
    e3 = store.set("bb", b"3", "t3")
    assert (e1.version, e2.version, e3.version) == (1, 2, 1)
    assert store.get("aa").data == b"2"
    assert store.get("aa").last_txn == "t2"


def test_prefix_scan_sorted():
    store = StateStore()
    for suffix in ("03", "01", "02"):
        store.set("ab" + suffix, suffix.encode(), "t")
    store.set("zz00", b"x", "t")
    entries = store.by_prefix("ab")
    assert [e.address for e in entries] == ["ab01", "ab02", "ab03"]


def test_state_root_changes_with_content():
    a, b = StateStore(), StateStore()
    assert a.state_root() == b.state_root()
    a.set("aa", b"1", "t1")
    assert a.state_root() != b.state_root()
    b.set("aa", b"1", "t1")
    assert a.state_root() == b.state_root()
    assert entries_equal(a, b)


def test_write_counter_counts_only_writes():
    store = StateStore()
    store.set("aa", b"1", "t1")
    store.get("aa")
    store.by_prefix("a")
    store.state_root()
    assert store.write_count == 1
