"""Transaction timing benchmark: serial payload sweep with delay decomposition.

For each payload size the driver signs and submits log records one at a time,
waiting for every node to commit a transaction before sending the next. Each
transaction's life is split into three measured components:

  create   client-side preparation: record build, hashing, envelope, coding
  upload   send start until the gateway has the full body
  latency  gateway arrival until the last node reports the commit

plus throughput (committed transactions over each size's wall-clock window).
Results land in a CSV shaped like the classic payload/create/upload/latency
table, figures are rendered next to it, and raw per-transaction samples are
kept for reruns of the analysis.

Desk runs happen on loopback, so the client can pace its uploads through a
simulated plant uplink (--link-kbps, with bandwidth jitter); pacing on the
replication path is the matching node-side setting. Payload bytes count the
full on-chain record, so a 750 kB point stays inside the platform maximum.
"""

from __future__ import annotations

import argparse
import csv
import http.client
import json
import logging
import random
import statistics
import string
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import urlparse

from .addresses import compute_address, log_prefix
from .blobstore import BlobStore
from .clients import NodeClient, decode_entry_data
from .contract import LogRecord, decode_record
from .identity import PrivateIdentity, load_key_file
from .shaping import LinkShaper
from .txn import MAX_PAYLOAD_BYTES, sign_transaction

log = logging.getLogger("chainpas.bench")

DEFAULT_SIZES_KB = [0.5, 1, 10, 25, 50, 75, 100, 125, 175, 250, 500, 750]
CSV_COLUMNS = [
    "payload_kb", "txns",
    "create_avg_ms", "create_std_ms",
    "upload_avg_ms", "upload_std_ms",
    "latency_avg_ms", "latency_std_ms",
    "total_avg_ms", "total_std_ms",
    "tps", "onchain_bytes", "flagged",
]


def now_ms() -> float:
    return time.time_ns() / 1e6


class SweepAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{message}: {self.diagnostics}")


@dataclass(frozen=True)
class TimingSample:
    payload_bytes: int
    t_create_ms: float
    t_upload_ms: float
    t_latency_ms: float
    t_total_ms: float


@dataclass(frozen=True)
class ThroughputSample:
    committed_count: int
    window_s: float

    @property
    def tps(self) -> float:
        return self.committed_count / self.window_s


@dataclass
class BenchConfig:
    sizes_kb: list[float] = field(default_factory=lambda: list(DEFAULT_SIZES_KB))
    count: int = 200
    node: str = "http://127.0.0.1:8640"
    nodes: list[str] = field(default_factory=list)  # all nodes, for commit detection
    mode: str = "inline"  # inline | offchain
    out: str = "results.csv"
    key_file: str = ""
    blob_dir: str | None = None
    link_kbps: float = 0.0
    link_jitter: float = 0.3
    seed: int = 7
    status_poll_ms: float = 2.0
    plots: bool = True

    def validate(self) -> None:
        if self.mode not in ("inline", "offchain"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.count < 30:
            raise ValueError("need at least 30 transactions per size for a stable std dev")
        for kb in self.sizes_kb:
            if kb * 1000 > MAX_PAYLOAD_BYTES:
                raise ValueError(f"{kb} kB exceeds the {MAX_PAYLOAD_BYTES // 1000} kB platform maximum")
        if self.mode == "offchain" and not self.blob_dir:
            raise ValueError("offchain mode needs --blob-dir")


def decompose(
    build_start_ms: float,
    send_start_ms: float,
    arrival_ms: float,
    last_commit_ms: float,
    payload_bytes: int = 0,
) -> TimingSample | None:
    """Split one transaction's lifecycle; None flags non-monotone timestamps."""
    create = send_start_ms - build_start_ms
    upload = arrival_ms - send_start_ms
    latency = last_commit_ms - arrival_ms
    if min(create, upload, latency) < 0:
        return None
    return TimingSample(
        payload_bytes=payload_bytes,
        t_create_ms=create,
        t_upload_ms=upload,
        t_latency_ms=latency,
        t_total_ms=last_commit_ms - build_start_ms,
    )


@dataclass
class SizeReport:
    payload_kb: float
    samples: list[TimingSample]
    throughput: ThroughputSample
    onchain_bytes: int
    flagged: int

    def row(self) -> dict:
        def stats(values):
            mean = statistics.fmean(values)
            std = statistics.stdev(values) if len(values) > 1 else 0.0
            return mean, std

        create = stats([s.t_create_ms for s in self.samples])
        upload = stats([s.t_upload_ms for s in self.samples])
        latency = stats([s.t_latency_ms for s in self.samples])
        total = stats([s.t_total_ms for s in self.samples])
        return {
            "payload_kb": self.payload_kb,
            "txns": len(self.samples),
            "create_avg_ms": round(create[0], 4),
            "create_std_ms": round(create[1], 4),
            "upload_avg_ms": round(upload[0], 4),
            "upload_std_ms": round(upload[1], 4),
            "latency_avg_ms": round(latency[0], 4),
            "latency_std_ms": round(latency[1], 4),
            "total_avg_ms": round(total[0], 4),
            "total_std_ms": round(total[1], 4),
            "tps": round(self.throughput.tps, 4),
            "onchain_bytes": self.onchain_bytes,
            "flagged": self.flagged,
        }


class BenchRunner:
    """Drives one sweep against a running cluster."""

    def __init__(self, config: BenchConfig, identity: PrivateIdentity | None = None):
        config.validate()
        self.config = config
        self.identity = identity or load_key_file(config.key_file)
        endpoints = config.nodes or [config.node]
        self.submit_url = config.node
        self.status_clients = [NodeClient([url]) for url in endpoints]
        self.reader = NodeClient(endpoints)
        self.shaper = (
            LinkShaper(config.link_kbps, config.link_jitter, seed=config.seed)
            if config.link_kbps > 0 else None
        )
        self.blobs = BlobStore(config.blob_dir) if config.blob_dir else None
        self._rng = random.Random(config.seed)
        self._next_seq: int | None = None

    # --- payload construction ---

    def _seq(self) -> int:
        if self._next_seq is None:
            entries = self.reader.state_prefix(log_prefix(self.identity.id))
            if entries:
                self._next_seq = decode_record(decode_entry_data(entries[-1])).seq + 1
            else:
                self._next_seq = 0
        return self._next_seq

    def _build_record(self, seq: int, payload_bytes: int) -> tuple[LogRecord, bytes | None]:
        """A log record whose encoded size equals payload_bytes (inline mode)."""
        if self.config.mode == "offchain":
            blob = self._rng.randbytes(payload_bytes)
            digest = self.blobs.put(blob)
            record = LogRecord(
                seq=seq, plc_id=self.identity.id, kind="device_change",
                detail={}, logged_at=int(now_ms()),
                payload_mode="offchain_hash", offchain_digest=digest,
            )
            return record, blob
        skeleton = LogRecord(
            seq=seq, plc_id=self.identity.id, kind="device_change",
            detail={"data": ""}, logged_at=int(now_ms()),
        )
        overhead = len(skeleton.encode())
        fill = max(payload_bytes - overhead, 1)
        data = "".join(self._rng.choices(string.ascii_letters + string.digits, k=fill))
        record = LogRecord(
            seq=seq, plc_id=self.identity.id, kind="device_change",
            detail={"data": data}, logged_at=skeleton.logged_at,
        )
        return record, None

    # --- one transaction ---

    def run_one(self, payload_bytes: int) -> tuple[TimingSample | None, int]:
        """Submit one transaction serially; returns (sample, onchain size)."""
        seq = self._seq()
        record, blob = self._build_record(seq, payload_bytes)

        build_start = now_ms()
        payload = record.encode()
        txn = sign_transaction(
            self.identity,
            compute_address("log", self.identity.id, seq),
            payload,
            nonce=seq,
        )
        body = json.dumps(
            {"envelope": _b64(txn.serialize())}
        ).encode()
        send_start = now_ms()
        arrival_ms, doc = self._paced_post(body)
        if doc.get("txn_id") != txn.txn_id:
            raise SweepAborted("gateway returned a different txn id", doc)

        last_commit = self._await_all_nodes(txn.txn_id)
        self._next_seq = seq + 1
        if blob is not None and self.blobs.get(doc_digest := record.offchain_digest) != blob:
            raise SweepAborted("off-chain blob failed round-trip", {"digest": doc_digest})
        sample = decompose(build_start, send_start, arrival_ms, last_commit,
                           payload_bytes=len(payload))
        return sample, len(payload)

    def _paced_post(self, body: bytes) -> tuple[float, dict]:
        parsed = urlparse(self.submit_url)
        conn = http.client.HTTPConnection(parsed.hostname, parsed.port, timeout=60)
        try:
            conn.putrequest("POST", "/transactions")
            conn.putheader("Content-Type", "application/json")
            conn.putheader("Content-Length", str(len(body)))
            conn.endheaders()
            if self.shaper is not None and self.shaper.enabled:
                self.shaper.paced_send(conn.sock, body)
            else:
                conn.send(body)
            resp = conn.getresponse()
            doc = json.loads(resp.read())
            if resp.status != 202:
                raise SweepAborted(f"gateway refused submission ({resp.status})", doc)
        finally:
            conn.close()
        return doc["arrival_ms"], doc

    def _await_all_nodes(self, txn_id: str) -> float:
        """Block until every reachable node reports the commit.

        Returns the last commit time. Nodes that stop answering are dropped
        from the wait set so a mid-run failure does not stall the sweep.
        """
        from .clients import ClusterUnavailable

        poll_s = self.config.status_poll_ms / 1000.0
        commit_times: dict[int, float] = {}
        unreachable: set[int] = set()
        while len(commit_times) + len(unreachable) < len(self.status_clients):
            for i, client in enumerate(self.status_clients):
                if i in commit_times or i in unreachable:
                    continue
                try:
                    doc = client.status(txn_id)
                except ClusterUnavailable:
                    unreachable.add(i)
                    log.warning("node %s unreachable, continuing without it",
                                client.endpoints[0])
                    continue
                status = doc.get("status")
                if status == "committed" and "committed_ms" in doc:
                    commit_times[i] = doc["committed_ms"]
                elif status == "invalid":
                    raise SweepAborted("transaction went invalid", doc)
            if len(commit_times) + len(unreachable) < len(self.status_clients):
                time.sleep(poll_s)
        if not commit_times:
            raise SweepAborted("no node reachable", {"txn_id": txn_id})
        return max(commit_times.values())

    # --- the sweep ---

    def run_sweep(self) -> list[SizeReport]:
        reports = []
        for kb in self.config.sizes_kb:
            payload_bytes = int(round(kb * 1000))
            samples: list[TimingSample] = []
            flagged = 0
            onchain_sizes = set()
            window_start = now_ms()
            last_commit_wall = window_start
            for i in range(self.config.count):
                sample, onchain = self.run_one(payload_bytes)
                onchain_sizes.add(onchain)
                last_commit_wall = now_ms()
                if sample is None:
                    flagged += 1  # clock skew artifact; excluded but counted
                    continue
                samples.append(sample)
            if not samples:
                raise SweepAborted("every sample was flagged", {"size_kb": kb})
            window_s = (last_commit_wall - window_start) / 1000.0
            throughput = ThroughputSample(
                committed_count=self.config.count, window_s=window_s
            )
            report = SizeReport(
                payload_kb=kb,
                samples=samples,
                throughput=throughput,
                onchain_bytes=max(onchain_sizes),
                flagged=flagged,
            )
            reports.append(report)
            log.info(
                "%.1f kB: create %.2f ms, upload %.2f ms, latency %.2f ms, %.1f tps",
                kb, report.row()["create_avg_ms"], report.row()["upload_avg_ms"],
                report.row()["latency_avg_ms"], throughput.tps,
            )
        return reports


def spearman(xs: list[float], ys: list[float]) -> float:
    """Rank correlation with average ranks for ties."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need two equal-length series")

    def ranks(values):
        order = sorted(range(len(values)), key=lambda i: values[i])
        out = [0.0] * len(values)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
                j += 1
            avg = (i + j) / 2 + 1
            for k in range(i, j + 1):
                out[order[k]] = avg
            i = j + 1
        return out

    rx, ry = ranks(xs), ranks(ys)
    mx, my = statistics.fmean(rx), statistics.fmean(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = (
        sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry)
    ) ** 0.5
    if den == 0:
        return 0.0
    return num / den


def emit_report(reports: list[SizeReport], out_path: str | Path,
                plots: bool = True) -> dict:
    """Write the summary CSV, raw samples, and figures; returns summary paths."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r in reports]
    with out_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    samples_path = out_path.with_name(out_path.stem + "_samples.csv")
    with samples_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["payload_kb", "index", "create_ms", "upload_ms",
                         "latency_ms", "total_ms"])
        for report in reports:
            for i, s in enumerate(report.samples):
                writer.writerow([
                    report.payload_kb, i,
                    round(s.t_create_ms, 4), round(s.t_upload_ms, 4),
                    round(s.t_latency_ms, 4), round(s.t_total_ms, 4),
                ])

    artifacts = {"csv": str(out_path), "samples": str(samples_path)}
    if plots:
        artifacts.update(_render_figures(rows, out_path))
    return artifacts


def _render_figures(rows: list[dict], out_path: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sizes = [r["payload_kb"] for r in rows]
    components = [
        ("create", "tab:blue"), ("upload", "tab:orange"), ("latency", "tab:green"),
    ]
    paths = {}

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, color in components:
        ax.plot(sizes, [r[f"{name}_avg_ms"] for r in rows], marker="o",
                color=color, label=f"transaction {name}")
    ax.plot(sizes, [r["total_avg_ms"] for r in rows], marker="s",
            color="tab:red", linestyle="--", label="total")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("payload size (kB)")
    ax.set_ylabel("mean delay (ms)")
    ax.set_title("Transaction temporal evolution")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = out_path.with_name(out_path.stem + "_temporal.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths["temporal"] = str(path)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, color in components:
        ax.plot(sizes, [r[f"{name}_std_ms"] for r in rows], marker="o",
                color=color, label=f"{name} std dev")
    ax.set_xscale("log")
    ax.set_xlabel("payload size (kB)")
    ax.set_ylabel("standard deviation (ms)")
    ax.set_title("Delay variability by payload size")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = out_path.with_name(out_path.stem + "_stddev.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths["stddev"] = str(path)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(sizes, [r["tps"] for r in rows], marker="o", color="tab:purple")
    ax.set_xscale("log")
    ax.set_xlabel("payload size (kB)")
    ax.set_ylabel("committed transactions per second")
    ax.set_title("Throughput")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    path = out_path.with_name(out_path.stem + "_throughput.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths["throughput"] = str(path)
    return paths


def _b64(data: bytes) -> str:
    import base64

    return base64.b64encode(data).decode()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description="serial transaction timing sweep")
    parser.add_argument("--sizes", default="0.5,1,10,25,50,75,100,125,175,250,500,750",
                        help="comma-separated payload sizes in kB")
    parser.add_argument("--count", type=int, default=200, help="transactions per size")
    parser.add_argument("--node", required=True, help="gateway URL to submit to")
    parser.add_argument("--nodes", default="",
                        help="all gateway URLs, for all-node commit detection")
    parser.add_argument("--mode", choices=["inline", "offchain"], default="inline")
    parser.add_argument("--out", default="results.csv")
    parser.add_argument("--key", required=True, help="benchmark identity key file (plc role)")
    parser.add_argument("--blob-dir", default=None)
    parser.add_argument("--link-kbps", type=float, default=0.0,
                        help="simulate a constrained uplink at this rate (0 = off)")
    parser.add_argument("--link-jitter", type=float, default=0.3)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--no-plots", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    config = BenchConfig(
        sizes_kb=[float(s) for s in args.sizes.split(",") if s],
        count=args.count,
        node=args.node,
        nodes=[n for n in args.nodes.split(",") if n],
        mode=args.mode,
        out=args.out,
        key_file=args.key,
        blob_dir=args.blob_dir,
        link_kbps=args.link_kbps,
        link_jitter=args.link_jitter,
        seed=args.seed,
        plots=not args.no_plots,
    )
    runner = BenchRunner(config)
    try:
        reports = runner.run_sweep()
    except SweepAborted as exc:
        log.error("sweep aborted: %s", exc)
        return 1
    artifacts = emit_report(reports, config.out, plots=config.plots)
    for row in (r.row() for r in reports):
        sys.stdout.write(json.dumps(row) + "\n")
    log.info("artifacts: %s", artifacts)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
