"""Field-device level simulator: a button, a DC motor, and a tiny rule runtime.

The register server speaks a length-prefixed read/write request-response
protocol over a local socket, shaped like the classic fieldbus function codes
for coils and discrete inputs (01/02/05) without claiming wire compatibility;
docs/fieldbus-protocol.md pins the frames. Control programs are written in a
minimal rule language, one binding per line:

    WHEN <input> THEN <coil>

While a program runs, each scan cycle copies every bound input to its coil
and journals the coil transitions; the journal is the change stream the
controller's logger drains, and it reconstructs every coil transition.
"""

from __future__ import annotations

import argparse
import csv
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from . import wire
from .identity import digest

log = logging.getLogger("chainpas.fieldbus")

SPACE_DISCRETE = 0  # inputs (the button lives here)
SPACE_COIL = 1      # outputs (the motor lives here)

FC_READ_COILS = 0x01
FC_READ_DISCRETE = 0x02
FC_WRITE_SINGLE = 0x05
FC_COMPILE = 0x10
FC_START = 0x11
FC_STOP = 0x12
FC_CHANGES = 0x13
FC_STATUS = 0x14

RESP_OK = 0x80
RESP_ERR = 0xFF

DEFAULT_SCAN_MS = 50.0


class FieldbusError(Exception):
    def __init__(self, code: str, message: str = "", line: int = 0):
        self.code = code
        self.line = line
        super().__init__(message or code)


class CompileError(FieldbusError):
    def __init__(self, line: int, message: str):
        super().__init__("compile-error", message, line)


@dataclass(frozen=True)
class ControlProgram:
    program_id: str  # digest of source
    source: bytes
    rules: tuple[tuple[str, str], ...]  # (input name, coil name)
    compiled: bool = True


@dataclass(frozen=True)
class Change:
    generation: int
    space: int
    name: str
    old: int
    new: int


@dataclass
class RegisterMap:
    discrete_inputs: dict[str, int] = field(
        default_factory=lambda: {"button": 0}
    )
    coils: dict[str, int] = field(default_factory=lambda: {"motor": 0})
    generation: int = 0


def compile_program(source: bytes) -> ControlProgram:
    """Parse the WHEN/THEN rule language; errors carry a 1-based line number."""
    text = source.decode("utf-8", errors="replace")
    rules: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4 or parts[0].upper() != "WHEN" or parts[2].upper() != "THEN":
            raise CompileError(lineno, f"expected 'WHEN <input> THEN <coil>', got {line!r}")
        rules.append((parts[1], parts[3]))
    if not rules:
        raise CompileError(1, "empty program")
    return ControlProgram(program_id=digest(source), source=source, rules=tuple(rules))


class PlcRuntime:
    """The simulated device head: registers, program store, scan executor.

    Thread-safe: the scan loop is the single mutator of coils, external
    stimulus flips discrete inputs, reads take a snapshot.
    """

    def __init__(self, registers: RegisterMap | None = None):
        self.registers = registers or RegisterMap()
        self._lock = threading.Lock()
        self.programs: dict[str, ControlProgram] = {}
        self.active_program: str | None = None
        self.last_compiled: str | None = None
        self.running = False
        self.scan_count = 0
        self._journal: list[Change] = []
        # command counters, handy for idempotency assertions in tests
        self.command_counts = {"compile": 0, "start": 0, "stop": 0}

    # --- program lifecycle ---

    def compile(self, source: bytes) -> ControlProgram:
        program = compile_program(source)
        with self._lock:
            self.command_counts["compile"] += 1
            for input_name, coil_name in program.rules:
                if input_name not in self.registers.discrete_inputs:
                    raise CompileError(0, f"unknown input {input_name!r}")
                if coil_name not in self.registers.coils:
                    raise CompileError(0, f"unknown coil {coil_name!r}")
            self.programs[program.program_id] = program
            self.last_compiled = program.program_id
        return program

    def start(self, program_id: str | None = None) -> str:
        with self._lock:
            self.command_counts["start"] += 1
            if self.running:
                raise FieldbusError("already-running", "stop the active program first")
            target = program_id or self.last_compiled
            if target is None or target not in self.programs:
                raise FieldbusError("no-program", "nothing compiled")
            self.active_program = target
            self.running = True
            return target

    def stop(self) -> None:
        with self._lock:
            self.command_counts["stop"] += 1
            self.running = False  # coils freeze at their last values

    # --- registers ---

    def press_button(self, down: bool, name: str = "button") -> None:
        self.write_register(SPACE_DISCRETE, name, 1 if down else 0)

    def write_register(self, space: int, name: str, value: int) -> None:
        value = 1 if value else 0
        with self._lock:
            bank = self._bank(space)
            if name not in bank:
                raise FieldbusError("unknown-register", name)
            old = bank[name]
            if old == value:
                return
            bank[name] = value
            self.registers.generation += 1
            self._journal.append(
                Change(self.registers.generation, space, name, old, value)
            )

    def read_registers(self, space: int, prefix: str = "") -> dict[str, int]:
        with self._lock:
            bank = self._bank(space)
            return {k: v for k, v in sorted(bank.items()) if k.startswith(prefix)}

    def snapshot(self) -> tuple[dict[str, int], dict[str, int], int]:
        with self._lock:
            return (
                dict(self.registers.discrete_inputs),
                dict(self.registers.coils),
                self.registers.generation,
            )

    def _bank(self, space: int) -> dict[str, int]:
        if space == SPACE_DISCRETE:
            return self.registers.discrete_inputs
        if space == SPACE_COIL:
            return self.registers.coils
        raise FieldbusError("unknown-space", str(space))

    # --- execution ---

    def scan_cycle(self) -> list[tuple[str, int, int]]:
        """One pass: copy bound inputs to coils; returns coil (name, old, new)."""
        with self._lock:
            self.scan_count += 1
            if not self.running or self.active_program is None:
                return []
            program = self.programs[self.active_program]
            changes = []
            for input_name, coil_name in program.rules:
                value = self.registers.discrete_inputs[input_name]
                old = self.registers.coils[coil_name]
                if old != value:
                    self.registers.coils[coil_name] = value
                    self.registers.generation += 1
                    self._journal.append(
                        Change(self.registers.generation, SPACE_COIL, coil_name, old, value)
                    )
                    changes.append((coil_name, old, value))
            return changes

    def changes_since(self, generation: int) -> list[Change]:
        """Scan-produced coil transitions after `generation`, oldest first."""
        with self._lock:
            return [
                c for c in self._journal
                if c.generation > generation and c.space == SPACE_COIL
            ]

    def status(self) -> dict:
        with self._lock:
            return {
                "running": self.running,
                "program_id": self.active_program or "",
                "generation": self.registers.generation,
                "scan_count": self.scan_count,
            }


class FieldbusServer:
    """Socket front plus the periodic scan loop around one PlcRuntime."""

    def __init__(self, runtime: PlcRuntime | None = None, host: str = "127.0.0.1",
                 port: int = 0, scan_ms: float = DEFAULT_SCAN_MS):
        self.runtime = runtime or PlcRuntime()
        self.scan_ms = scan_ms
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"fieldbus:{self.port}", daemon=True
        )
        self._scan_thread = threading.Thread(
            target=self._scan_loop, name="fieldbus-scan", daemon=True
        )

    def start(self) -> None:
        self._accept_thread.start()
        self._scan_thread.start()
        log.info("fieldbus up on port %d, scan every %.0f ms", self.port, self.scan_ms)

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def _scan_loop(self) -> None:
        while not self._stop.wait(self.scan_ms / 1000.0):
            self.runtime.scan_cycle()

    def _accept_loop(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        try:
            while not self._stop.is_set():
                header = _recv_exact(conn, 4)
                if header is None:
                    return
                (length,) = struct.unpack(">I", header)
                body = _recv_exact(conn, length)
                if body is None:
                    return
                try:
                    reply = self._dispatch(body)
                except FieldbusError as exc:
                    reply = (
                        wire.put_u8(RESP_ERR) + wire.put_str(exc.code)
                        + wire.put_u64(exc.line) + wire.put_str(str(exc))
                    )
                except Exception as exc:
                    reply = (
                        wire.put_u8(RESP_ERR) + wire.put_str("internal")
                        + wire.put_u64(0) + wire.put_str(str(exc))
                    )
                conn.sendall(struct.pack(">I", len(reply)) + reply)
        except OSError:
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _dispatch(self, body: bytes) -> bytes:
        r = wire.Reader(body)
        fc = r.u8()
        rt = self.runtime
        if fc in (FC_READ_COILS, FC_READ_DISCRETE):
            prefix = r.str_()
            space = SPACE_COIL if fc == FC_READ_COILS else SPACE_DISCRETE
            values = rt.read_registers(space, prefix)
            out = [wire.put_u8(RESP_OK | fc), wire.put_u32(len(values))]
            for name, value in values.items():
                out.append(wire.put_str(name))
                out.append(wire.put_u8(value))
            return b"".join(out)
        if fc == FC_WRITE_SINGLE:
            space = r.u8()
            name = r.str_()
            value = r.u8()
            rt.write_register(space, name, value)
            return wire.put_u8(RESP_OK | fc)
        if fc == FC_COMPILE:
            program = rt.compile(r.bytes_())
            return wire.put_u8(RESP_OK | fc) + wire.put_str(program.program_id)
        if fc == FC_START:
            program_id = r.str_()
            started = rt.start(program_id or None)
            return wire.put_u8(RESP_OK | fc) + wire.put_str(started)
        if fc == FC_STOP:
            rt.stop()
            return wire.put_u8(RESP_OK | fc)
        if fc == FC_CHANGES:
            since = r.u64()
            changes = rt.changes_since(since)
            out = [wire.put_u8(RESP_OK | fc), wire.put_u32(len(changes))]
            for c in changes:
                out.append(wire.put_u64(c.generation))
                out.append(wire.put_u8(c.space))
                out.append(wire.put_str(c.name))
                out.append(wire.put_u8(c.old))
                out.append(wire.put_u8(c.new))
            return b"".join(out)
        if fc == FC_STATUS:
            doc = rt.status()
            return (
                wire.put_u8(RESP_OK | fc)
                + wire.put_u8(1 if doc["running"] else 0)
                + wire.put_str(doc["program_id"])
                + wire.put_u64(doc["generation"])
                + wire.put_u64(doc["scan_count"])
            )
        raise FieldbusError("unknown-function", f"{fc:#x}")


def _recv_exact(conn: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


class FieldbusClient:
    def __init__(self, host: str, port: int, timeout_s: float = 5.0):
        self.host = host
        self.port = port
        self.timeout_s = timeout_s
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _roundtrip(self, body: bytes) -> wire.Reader:
        with self._lock:
            if self._sock is None:
                self._sock = socket.create_connection(
                    (self.host, self.port), timeout=self.timeout_s
                )
            try:
                self._sock.sendall(struct.pack(">I", len(body)) + body)
                header = _recv_exact(self._sock, 4)
                if header is None:
                    raise ConnectionError("fieldbus closed connection")
                (length,) = struct.unpack(">I", header)
                payload = _recv_exact(self._sock, length)
                if payload is None:
                    raise ConnectionError("fieldbus closed connection")
            except OSError:
                self.close()
                raise
        r = wire.Reader(payload)
        tag = r.u8()
        if tag == RESP_ERR:
            code = r.str_()
            line = r.u64()
            message = r.str_()
            raise FieldbusError(code, message, line)
        return r

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def read_coils(self, prefix: str = "") -> dict[str, int]:
        r = self._roundtrip(wire.put_u8(FC_READ_COILS) + wire.put_str(prefix))
        return {r.str_(): r.u8() for _ in range(r.u32())}

    def read_discrete(self, prefix: str = "") -> dict[str, int]:
        r = self._roundtrip(wire.put_u8(FC_READ_DISCRETE) + wire.put_str(prefix))
        return {r.str_(): r.u8() for _ in range(r.u32())}

    def write_single(self, space: int, name: str, value: int) -> None:
        self._roundtrip(
            wire.put_u8(FC_WRITE_SINGLE) + wire.put_u8(space)
            + wire.put_str(name) + wire.put_u8(value)
        )

    def press_button(self, down: bool, name: str = "button") -> None:
        self.write_single(SPACE_DISCRETE, name, 1 if down else 0)

    def compile(self, source: bytes) -> str:
        r = self._roundtrip(wire.put_u8(FC_COMPILE) + wire.put_bytes(source))
        return r.str_()

    def start(self, program_id: str = "") -> str:
        r = self._roundtrip(wire.put_u8(FC_START) + wire.put_str(program_id))
        return r.str_()

    def stop(self) -> None:
        self._roundtrip(wire.put_u8(FC_STOP))

    def changes_since(self, generation: int) -> list[Change]:
        r = self._roundtrip(wire.put_u8(FC_CHANGES) + wire.put_u64(generation))
        return [
            Change(r.u64(), r.u8(), r.str_(), r.u8(), r.u8())
            for _ in range(r.u32())
        ]

    def status(self) -> dict:
        r = self._roundtrip(wire.put_u8(FC_STATUS))
        return {
            "running": bool(r.u8()),
            "program_id": r.str_(),
            "generation": r.u64(),
            "scan_count": r.u64(),
        }


def run_stimulus_schedule(client: FieldbusClient, schedule: list[tuple[float, bool]]) -> int:
    """Replay (time_ms, down) button events against a running server."""
    start = time.monotonic()
    for time_ms, down in sorted(schedule, key=lambda row: row[0]):
        delay = time_ms / 1000.0 - (time.monotonic() - start)
        if delay > 0:
            time.sleep(delay)
        client.press_button(down)
    return len(schedule)


def load_schedule(path: str) -> list[tuple[float, bool]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#") or row[0] == "time_ms":
                continue
            rows.append((float(row[0]), row[1].strip().lower() in ("1", "true", "down")))
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fieldbus", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")
    serve = sub.add_parser("serve", help="run the register server (default)")
    for p in (parser, serve):
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, default=9502)
        p.add_argument("--scan-ms", type=float, default=DEFAULT_SCAN_MS)
    stim = sub.add_parser("stimulate", help="replay a button schedule")
    stim.add_argument("--host", default="127.0.0.1")
    stim.add_argument("--port", type=int, default=9502)
    stim.add_argument("--schedule", required=True, help="CSV of time_ms,down")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    if args.command == "stimulate":
        client = FieldbusClient(args.host, args.port)
        sent = run_stimulus_schedule(client, load_schedule(args.schedule))
        print(f"sent {sent} stimulus events")
        return 0

    server = FieldbusServer(host=args.host, port=args.port, scan_ms=args.scan_ms)
    server.start()
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
