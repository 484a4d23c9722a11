"""One-command local orchestration: 3 validators, fieldbus, agent, bridge.

`chainpas up` prepares keys and configs under the profile's run directory,
spawns every process, waits for health, and records pids; `down` terminates
the set (data directories survive, so the chain resumes where it stopped);
`status` prints one line per unit. Profile schema: docs/cluster-profile.md.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

try:
    import tomllib  # Python 3.11+
except ImportError:  # pragma: no cover
    import tomli as tomllib

from .fieldbus import FieldbusClient
from .identity import Registry, generate_identity, load_key_file, save_key_file

log = logging.getLogger("chainpas.launcher")

DEFAULT_NODES = [
    {"id": "node-control", "rest_port": 8640, "peer_port": 8641},
    {"id": "node-mgmt", "rest_port": 8642, "peer_port": 8643},
    {"id": "node-cloud", "rest_port": 8644, "peer_port": 8645},
]
STARTUP_BUDGET_S = 20.0


@dataclass
class Profile:
    run_dir: str = "chainpas-run"
    seed: int = 42
    target_block_interval_ms: float = 100.0
    replication_link_kbps: float = 0.0
    host: str = "127.0.0.1"
    nodes: list[dict] = field(default_factory=lambda: [dict(n) for n in DEFAULT_NODES])
    fieldbus_port: int = 9502
    fieldbus_scan_ms: float = 50.0
    plc_id: str = "plc-1"
    executor_poll_ms: float = 200.0
    logger_poll_ms: float = 200.0
    offchain: bool = False
    hmi_port: int = 8600
    hmi_static: str | None = None
    operator_id: str = "operator-1"
    manager_id: str = "manager-1"
    bench_id: str = "bench-plc"

    @classmethod
    def load(cls, path: str | Path | None) -> "Profile":
        if path is None:
            return cls()
        data = tomllib.loads(Path(path).read_text())
        cluster = data.get("cluster", {})
        profile = cls(
            run_dir=cluster.get("run_dir", "chainpas-run"),
            seed=cluster.get("seed", 42),
            target_block_interval_ms=cluster.get("target_block_interval_ms", 100.0),
            replication_link_kbps=cluster.get("replication_link_kbps", 0.0),
            host=cluster.get("host", "127.0.0.1"),
        )
        if "node" in data:
            profile.nodes = [dict(n) for n in data["node"]]
        fieldbus = data.get("fieldbus", {})
        profile.fieldbus_port = fieldbus.get("port", profile.fieldbus_port)
        profile.fieldbus_scan_ms = fieldbus.get("scan_ms", profile.fieldbus_scan_ms)
        plc = data.get("plc", {})
        profile.plc_id = plc.get("plc_id", profile.plc_id)
        profile.executor_poll_ms = plc.get("executor_poll_ms", profile.executor_poll_ms)
        profile.logger_poll_ms = plc.get("logger_poll_ms", profile.logger_poll_ms)
        profile.offchain = plc.get("offchain", profile.offchain)
        hmi = data.get("hmi", {})
        profile.hmi_port = hmi.get("port", profile.hmi_port)
        profile.hmi_static = hmi.get("static", profile.hmi_static)
        identities = data.get("identities", {})
        profile.operator_id = identities.get("operator", profile.operator_id)
        profile.manager_id = identities.get("manager", profile.manager_id)
        profile.bench_id = identities.get("bench", profile.bench_id)
        return profile

    @property
    def run_path(self) -> Path:
        return Path(self.run_dir)

    def node_urls(self) -> list[str]:
        return [f"http://{self.host}:{n['rest_port']}" for n in self.nodes]


@dataclass
class Unit:
    name: str
    cmd: list[str]
    health: str  # "rest" | "fieldbus" | "heartbeat" | "bridge"
    health_arg: str = ""


class Launcher:
    def __init__(self, profile: Profile):
        self.profile = profile
        self.run_dir = profile.run_path
        self.procs_path = self.run_dir / "procs.json"

    # --- key and config materialization ---

    def prepare(self) -> None:
        p = self.profile
        keys_dir = self.run_dir / "keys"
        keys_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "logs").mkdir(exist_ok=True)
        (self.run_dir / "blobs").mkdir(exist_ok=True)
        identities = []
        for id, role in (
            (p.operator_id, "operator"),
            (p.plc_id, "plc"),
            (p.manager_id, "manager"),
            (p.bench_id, "plc"),
        ):
            key_path = keys_dir / f"{id}.key"
            if key_path.exists():
                identities.append(load_key_file(key_path).public)
            else:
                ident = generate_identity(id, role)
                save_key_file(ident, key_path)
                identities.append(ident.public)
        registry_path = self.run_dir / "registry.json"
        if not registry_path.exists():
            Registry(identities).save(registry_path)

        for node in p.nodes:
            peers = [
                [other["id"], p.host, other["peer_port"]]
                for other in p.nodes
                if other["id"] != node["id"]
            ]
            config = {
                "node_id": node["id"],
                "data_dir": str(self.run_dir / node["id"]),
                "registry_path": str(registry_path),
                "listen_host": p.host,
                "peer_port": node["peer_port"],
                "rest_port": node["rest_port"],
                "peers": peers,
                "seed": p.seed,
                "target_block_interval_ms": p.target_block_interval_ms,
                "replication_link_kbps": p.replication_link_kbps,
            }
            (self.run_dir / f"{node['id']}.json").write_text(json.dumps(config, indent=2))

        agent_config = {
            "plc_id": p.plc_id,
            "key_file": str(keys_dir / f"{p.plc_id}.key"),
            "node_endpoints": p.node_urls(),
            "fieldbus_host": p.host,
            "fieldbus_port": p.fieldbus_port,
            "executor_poll_ms": p.executor_poll_ms,
            "logger_poll_ms": p.logger_poll_ms,
            "offchain": p.offchain,
            "blob_dir": str(self.run_dir / "blobs"),
            "state_path": str(self.run_dir / "plc-agent-state.json"),
        }
        (self.run_dir / "plc-agent.json").write_text(json.dumps(agent_config, indent=2))

    def units(self) -> list[Unit]:
        p = self.profile
        python = sys.executable
        units = [
            Unit(
                name=node["id"],
                cmd=[python, "-m", "chainpas.node", "--config",
                     str(self.run_dir / f"{node['id']}.json")],
                health="rest",
                health_arg=f"http://{p.host}:{node['rest_port']}/health",
            )
            for node in p.nodes
        ]
        units.append(Unit(
            name="fieldbus",
            cmd=[python, "-m", "chainpas.fieldbus", "--host", p.host,
                 "--port", str(p.fieldbus_port), "--scan-ms", str(p.fieldbus_scan_ms)],
            health="fieldbus",
            health_arg=str(p.fieldbus_port),
        ))
        units.append(Unit(
            name="plc-agent",
            cmd=[python, "-m", "chainpas.plc", "--config",
                 str(self.run_dir / "plc-agent.json")],
            health="heartbeat",
            health_arg=str(self.run_dir / "plc-agent-state.heartbeat"),
        ))
        hmi_cmd = [
            python, "-m", "chainpas.hmi",
            "--nodes", ",".join(p.node_urls()),
            "serve", "--host", p.host, "--port", str(p.hmi_port),
            "--key", str(self.run_dir / "keys" / f"{p.operator_id}.key"),
            "--blob-dir", str(self.run_dir / "blobs"),
        ]
        if p.hmi_static:
            hmi_cmd += ["--static", p.hmi_static]
        units.append(Unit(
            name="hmi-bridge",
            cmd=hmi_cmd,
            health="bridge",
            health_arg=f"http://{p.host}:{p.hmi_port}/api/health",
        ))
        return units

    # --- commands ---

    def up(self) -> int:
        if self.procs_path.exists():
            alive = [name for name, pid in self._recorded().items() if _pid_alive(pid)]
            if alive:
                print(f"already running: {', '.join(alive)} (run `chainpas down` first)")
                return 1
        conflicts = self._port_conflicts()
        if conflicts:
            for port, owner in conflicts:
                print(f"port {port} ({owner}) is already in use")
            return 1
        self.prepare()
        recorded = {}
        for unit in self.units():
            log_file = (self.run_dir / "logs" / f"{unit.name}.log").open("ab")
            proc = subprocess.Popen(
                unit.cmd, stdout=log_file, stderr=subprocess.STDOUT,
                start_new_session=True,
            )
            recorded[unit.name] = proc.pid
            log.info("spawned %s (pid %d)", unit.name, proc.pid)
        self.procs_path.write_text(json.dumps(recorded, indent=2))

        deadline = time.monotonic() + STARTUP_BUDGET_S
        pending = {u.name: u for u in self.units()}
        while pending and time.monotonic() < deadline:
            for name in list(pending):
                if self._healthy(pending[name]):
                    print(f"{name}: healthy")
                    del pending[name]
            if pending:
                time.sleep(0.25)
        if pending:
            print(f"units failed to become healthy: {', '.join(sorted(pending))}")
            self.down()
            return 1
        print(f"{len(recorded)} processes healthy; run dir {self.run_dir}")
        return 0

    def down(self) -> int:
        recorded = self._recorded()
        if not recorded:
            print("nothing recorded as running")
            return 0
        for name, pid in recorded.items():
            if _pid_alive(pid):
                try:
                    os.killpg(os.getpgid(pid), signal.SIGTERM)
                except (ProcessLookupError, PermissionError):
                    try:
                        os.kill(pid, signal.SIGTERM)
                    except ProcessLookupError:
                        pass
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            _reap(recorded.values())
            if not any(_pid_alive(pid) for pid in recorded.values()):
                break
            time.sleep(0.1)
        for name, pid in recorded.items():
            if _pid_alive(pid):
                log.warning("killing %s (pid %d)", name, pid)
                try:
                    os.killpg(os.getpgid(pid), signal.SIGKILL)
                except (ProcessLookupError, PermissionError):
                    try:
                        os.kill(pid, signal.SIGKILL)
                    except ProcessLookupError:
                        pass
        _reap(recorded.values())
        self.procs_path.unlink(missing_ok=True)
        print(f"stopped {len(recorded)} processes; data kept in {self.run_dir}")
        return 0

    def status(self) -> int:
        recorded = self._recorded()
        units = {u.name: u for u in self.units()}
        print(f"{'unit':<14} {'pid':>7} {'alive':<6} health")
        failures = 0
        for name, unit in units.items():
            pid = recorded.get(name)
            alive = pid is not None and _pid_alive(pid)
            healthy = alive and self._healthy(unit)
            if not healthy:
                failures += 1
            print(f"{name:<14} {pid or '-':>7} {str(alive).lower():<6} "
                  f"{'ok' if healthy else 'FAILED'}")
        return 0 if failures == 0 else 2

    # --- probes ---

    def _recorded(self) -> dict[str, int]:
        if not self.procs_path.exists():
            return {}
        return json.loads(self.procs_path.read_text())

    def _port_conflicts(self) -> list[tuple[int, str]]:
        p = self.profile
        wanted = [(n["rest_port"], n["id"]) for n in p.nodes]
        wanted += [(n["peer_port"], n["id"]) for n in p.nodes]
        wanted += [(p.fieldbus_port, "fieldbus"), (p.hmi_port, "hmi-bridge")]
        conflicts = []
        for port, owner in wanted:
            probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            # match the servers' own bind flags so TIME_WAIT does not false-alarm
            probe.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                probe.bind((p.host, port))
            except OSError:
                conflicts.append((port, owner))
            finally:
                probe.close()
        return conflicts

    def _healthy(self, unit: Unit) -> bool:
        try:
            if unit.health in ("rest", "bridge"):
                return requests.get(unit.health_arg, timeout=2).status_code == 200
            if unit.health == "fieldbus":
                client = FieldbusClient(self.profile.host, int(unit.health_arg),
                                        timeout_s=2)
                try:
                    client.status()
                    return True
                finally:
                    client.close()
            if unit.health == "heartbeat":
                path = Path(unit.health_arg)
                if not path.exists():
                    return False
                poll = max(self.profile.executor_poll_ms, self.profile.logger_poll_ms)
                return (time.time() - path.stat().st_mtime) < max(3 * poll / 1000.0, 3.0)
        except Exception:
            return False
        return False


def _reap(pids) -> None:
    """Collect exited children so they do not linger as zombies."""
    for pid in pids:
        try:
            os.waitpid(pid, os.WNOHANG)
        except ChildProcessError:
            pass


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="chainpas", description="local cluster orchestration"
    )
    parser.add_argument("command", choices=["up", "down", "status"])
    parser.add_argument("--profile", help="profile file (TOML); defaults are desk-scale")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    profile = Profile.load(args.profile)
    launcher = Launcher(profile)
    return {"up": launcher.up, "down": launcher.down, "status": launcher.status}[args.command]()


if __name__ == "__main__":
    raise SystemExit(main())
