"""In-process cluster harness for integration tests."""

from __future__ import annotations

import time
from pathlib import Path

from chainpas.identity import Registry
from chainpas.node import NodeConfig, ValidatorNode

NODE_IDS = ("node-cloud", "node-control", "node-mgmt")


class Cluster:
    def __init__(self, nodes: list[ValidatorNode]):
        self.nodes = nodes

    @property
    def urls(self) -> list[str]:
        return [n.rest_url() for n in self.nodes]

    def node(self, node_id: str) -> ValidatorNode:
        return next(n for n in self.nodes if n.node_id == node_id)

    def stop(self) -> None:
        for node in self.nodes:
            try:
                node.stop()
            except Exception:
                pass

    def heights(self) -> list[int]:
        return [n.store.height() for n in self.nodes]

    def wait_converged(self, timeout_s: float = 10.0) -> None:
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            tips = {(n.store.height(), n.store.tip().block_hash) for n in self.nodes}
            if len(tips) == 1 and all(not n.pending for n in self.nodes):
                return
            time.sleep(0.01)
        raise TimeoutError(f"cluster did not converge: {self.heights()}")


def start_cluster(
    base_dir: Path,
    registry: Registry,
    n: int = 3,
    seed: int = 42,
    interval_ms: float = 25.0,
    node_ids: tuple[str, ...] = NODE_IDS,
    replication_link_kbps: float = 0.0,
    reuse_dirs: bool = False,
) -> Cluster:
    registry_path = base_dir / "registry.json"
    if not registry_path.exists():
        registry.save(registry_path)
    nodes = []
    for node_id in node_ids[:n]:
        data_dir = base_dir / node_id
        data_dir.mkdir(parents=True, exist_ok=reuse_dirs)
        config = NodeConfig(
            node_id=node_id,
            data_dir=str(data_dir),
            registry_path=str(registry_path),
            seed=seed,
            target_block_interval_ms=interval_ms,
            replication_link_kbps=replication_link_kbps,
        )
        nodes.append(ValidatorNode(config, registry=registry))
    for node in nodes:
        peer_list = [
            (other.node_id, "127.0.0.1", other.peer_port)
            for other in nodes
            if other is not node
        ]
        node.connect_peers(peer_list)
    for node in nodes:
        node.start()
    return Cluster(nodes)


def restart_node(cluster: Cluster, node_id: str, base_dir: Path, registry: Registry) -> ValidatorNode:
    """Bring a stopped node back on its old data dir and rewire everyone."""
    old = cluster.node(node_id)
    config = NodeConfig(
        node_id=node_id,
        data_dir=old.config.data_dir,
        registry_path=old.config.registry_path,
        seed=old.config.seed,
        target_block_interval_ms=old.config.target_block_interval_ms,
        replication_link_kbps=old.config.replication_link_kbps,
    )
    fresh = ValidatorNode(config, registry=registry)
    cluster.nodes[cluster.nodes.index(old)] = fresh
    for node in cluster.nodes:
        peer_list = [
            (other.node_id, "127.0.0.1", other.peer_port)
            for other in cluster.nodes
            if other is not node
        ]
        node.connect_peers(peer_list)
    fresh.start()
    return fresh
