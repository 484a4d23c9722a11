import json
import time

import pytest

from chainpas.contract import decode_record
from chainpas.clients import NodeClient, decode_entry_data
from chainpas.addresses import log_prefix
from chainpas.fieldbus import SPACE_COIL, FieldbusClient, FieldbusServer
from chainpas.hmi import HmiClient
from chainpas.plc import ACTION_TAKEN, NO_CHANGE, AgentConfig, PlcAgent

from cluster_util import start_cluster

PROGRAM = b"WHEN button THEN motor\n"


@pytest.fixture()
def stack(tmp_path, registry, plc_key, operator_key):
    """Cluster + fieldbus + manually-stepped agent + operator client."""
    cluster = start_cluster(tmp_path, registry)
    fieldbus = FieldbusServer(scan_ms=10.0)
    fieldbus.start()
    config = AgentConfig(
        plc_id=plc_key.id,
        key_file="",  # identity injected directly
        node_endpoints=cluster.urls,
        fieldbus_port=fieldbus.port,
        state_path=str(tmp_path / "agent-state.json"),
    )
    agent = PlcAgent(config, identity=plc_key)
    operator = HmiClient(cluster.urls, identity=operator_key)
    yield cluster, fieldbus, agent, operator
    agent.stop()
    fieldbus.stop()
    cluster.stop()


def pump_agent(agent, rounds=3):
    for _ in range(rounds):
        agent.executor_poll()
        agent.logger_poll()


class TestExecutor:
    def test_fresh_agent_executes_op_seq_zero(self, stack):
        cluster, fieldbus, agent, operator = stack
        operator.publish("compile", agent.config.plc_id, PROGRAM)
        assert agent.executor_poll() == ACTION_TAKEN
        assert agent.state.last_executed_seq == 0
        assert fieldbus.runtime.command_counts["compile"] == 1

    def test_same_record_polled_again_no_change(self, stack):
        cluster, fieldbus, agent, operator = stack
        operator.publish("compile", agent.config.plc_id, PROGRAM)
        assert agent.executor_poll() == ACTION_TAKEN
        assert agent.executor_poll() == NO_CHANGE
        assert agent.executor_poll() == NO_CHANGE
        assert fieldbus.runtime.command_counts["compile"] == 1

    def test_empty_ops_address_no_change(self, stack):
        _, _, agent, _ = stack
        assert agent.executor_poll() == NO_CHANGE

    def test_bad_program_reports_error_and_advances(self, stack):
        cluster, fieldbus, agent, operator = stack
        operator.publish("compile", agent.config.plc_id, b"WHEN THEN\n")
        assert agent.executor_poll() == ACTION_TAKEN
        assert agent.state.last_executed_seq == 0
        submitted = agent.logger_poll()
        assert submitted == 1
        client = NodeClient(cluster.urls)
        deadline = time.monotonic() + 10
        records = []
        while time.monotonic() < deadline:
            entries = client.state_prefix(log_prefix(agent.config.plc_id))
            records = [decode_record(decode_entry_data(e)) for e in entries]
            if records:
                break
            time.sleep(0.05)
        assert records, "error report never committed"
        assert records[0].kind == "plc_action"
        assert records[0].result == "error"
        assert records[0].detail.get("error_line") == "1"

    def test_restart_with_persisted_seq_never_reexecutes(self, stack, plc_key):
        cluster, fieldbus, agent, operator = stack
        operator.publish("compile", agent.config.plc_id, PROGRAM)
        operator.publish("start", agent.config.plc_id)
        pump_agent(agent, rounds=4)
        counts_before = dict(fieldbus.runtime.command_counts)
        assert agent.state.last_executed_seq == 1

        # a fresh agent process on the same persisted state file
        reborn = PlcAgent(agent.config, identity=plc_key)
        assert reborn.state.last_executed_seq == 1
        for _ in range(5):
            assert reborn.executor_poll() == NO_CHANGE
        assert dict(fieldbus.runtime.command_counts) == counts_before
        reborn.stop()


class TestLogger:
    def test_no_changes_zero_txns(self, stack):
        _, _, agent, _ = stack
        assert agent.logger_poll() == 0

    def test_button_press_single_motor_record(self, stack):
        cluster, fieldbus, agent, operator = stack
        operator.publish("compile", agent.config.plc_id, PROGRAM)
        operator.publish("start", agent.config.plc_id)
        pump_agent(agent, rounds=3)
        start_logs = agent.submitted_log_txns

        fieldbus.runtime.press_button(True)
        deadline = time.monotonic() + 3
        while time.monotonic() < deadline:
            if fieldbus.runtime.read_registers(SPACE_COIL)["motor"] == 1:
                break
            time.sleep(0.01)
        submitted = agent.logger_poll()
        assert submitted == 1

        client = NodeClient(cluster.urls)
        deadline = time.monotonic() + 10
        changes = []
        while time.monotonic() < deadline:
            entries = client.state_prefix(log_prefix(agent.config.plc_id))
            records = [decode_record(decode_entry_data(e)) for e in entries]
            changes = [r for r in records if r.kind == "device_change"]
            if changes:
                break
            time.sleep(0.05)
        assert len(changes) == 1
        assert changes[0].detail == {"register": "motor", "old": "0", "new": "1"}

    def test_rapid_changes_all_logged_in_seq_order(self, stack):
        cluster, fieldbus, agent, operator = stack
        operator.publish("compile", agent.config.plc_id, PROGRAM)
        operator.publish("start", agent.config.plc_id)
        pump_agent(agent, rounds=3)
        base_entries = NodeClient(cluster.urls).state_prefix(log_prefix(agent.config.plc_id))
        base_seq = len(base_entries)

        # 10 coil transitions driven by manual scans
        for i in range(10):
            fieldbus.runtime.press_button(i % 2 == 0)
            fieldbus.runtime.scan_cycle()
        submitted = agent.logger_poll()
        assert submitted == 10

        client = NodeClient(cluster.urls)
        deadline = time.monotonic() + 15
        while time.monotonic() < deadline:
            entries = client.state_prefix(log_prefix(agent.config.plc_id))
            if len(entries) >= base_seq + 10:
                break
            time.sleep(0.05)
        records = [decode_record(decode_entry_data(e)) for e in entries]
        changes = [r for r in records if r.kind == "device_change"]
        assert len(changes) == 10
        assert [r.seq for r in records] == list(range(len(records)))
        # every scan-cycle change item landed in exactly one committed record
        news = [r.detail["new"] for r in changes]
        assert news == ["1", "0"] * 5

    def test_logger_stays_out_of_ops_and_monitor_out_of_logs(self, stack):
        # role separation: agent writes only log addresses
        cluster, fieldbus, agent, operator = stack
        operator.publish("compile", agent.config.plc_id, PROGRAM)
        pump_agent(agent, rounds=3)
        client = NodeClient(cluster.urls)
        for block in client.blocks():
            for _txn in block["txn_ids"]:
                pass
        node = cluster.nodes[0]
        for block in node.store.blocks():
            for txn_id in block.txn_ids:
                txn = node.store.get_txn(txn_id)
                if txn.signer == agent.config.plc_id:
                    assert txn.address.startswith(log_prefix(agent.config.plc_id))


class TestAgentState:
    def test_state_roundtrip(self, tmp_path):
        from chainpas.plc import AgentState

        state = AgentState(last_executed_seq=4, last_change_generation=9, next_log_seq=12)
        path = tmp_path / "state.json"
        state.save(path)
        assert AgentState.load(path) == state
        assert json.loads(path.read_text())["last_executed_seq"] == 4

    def test_missing_state_file_defaults(self, tmp_path):
        from chainpas.plc import AgentState

        state = AgentState.load(tmp_path / "absent.json")
        assert state.last_executed_seq == -1
        assert state.next_log_seq is None
