"""Inter-validator protocol: length-prefixed binary frames over persistent TCP.

Message grammar (docs/wire-format.md pins the byte layout):

  HELLO      -> HELLO           height/tip exchange, drives catch-up
  CERT       -> ACK             round announcement from a proposer
  TXN        -> ACK | NACK      gossip of a pending transaction
  BLOCK      -> ACK | NACK      replication of a proposed block + its txns
  SYNC_REQ   -> SYNC_RESP       pull blocks by height range

Every request frame gets exactly one response frame on the same connection.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field

from . import wire
from .chain import Block
from .consensus import WaitCertificate
from .shaping import LinkShaper
from .txn import Transaction, deserialize_transaction

MSG_HELLO = 0x01
MSG_CERT = 0x02
MSG_BLOCK = 0x03
MSG_ACK = 0x04
MSG_NACK = 0x05
MSG_SYNC_REQ = 0x06
MSG_SYNC_RESP = 0x07
MSG_TXN = 0x08

MAX_FRAME = 256 * 1024 * 1024


class PeerError(ConnectionError):
    pass


@dataclass(frozen=True)
class Hello:
    node_id: str
    height: int
    tip_hash: str


@dataclass(frozen=True)
class Ack:
    height: int
    note: str = ""


@dataclass(frozen=True)
class Nack:
    height: int
    reason: str


@dataclass(frozen=True)
class BlockMsg:
    block: Block
    txns: tuple[Transaction, ...]


@dataclass(frozen=True)
class SyncReq:
    from_height: int
    to_height: int


@dataclass(frozen=True)
class SyncResp:
    entries: tuple[BlockMsg, ...] = field(default_factory=tuple)


Message = Hello | WaitCertificate | BlockMsg | Ack | Nack | SyncReq | SyncResp | Transaction


def _encode_blockmsg(msg: BlockMsg) -> bytes:
    out = [msg.block.serialize(), wire.put_u32(len(msg.txns))]
    out.extend(wire.put_bytes(t.serialize()) for t in msg.txns)
    return b"".join(out)


def _decode_blockmsg(r: wire.Reader) -> BlockMsg:
    block = Block.read_from(r)
    txns = tuple(deserialize_transaction(r.bytes_()) for _ in range(r.u32()))
    return BlockMsg(block=block, txns=txns)


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        return wire.put_u8(MSG_HELLO) + wire.put_str(msg.node_id) + wire.put_u64(
            msg.height + 1
        ) + wire.put_str(msg.tip_hash)
    if isinstance(msg, WaitCertificate):
        return wire.put_u8(MSG_CERT) + msg.serialize()
    if isinstance(msg, BlockMsg):
        return wire.put_u8(MSG_BLOCK) + _encode_blockmsg(msg)
    if isinstance(msg, Ack):
        return wire.put_u8(MSG_ACK) + wire.put_u64(msg.height) + wire.put_str(msg.note)
    if isinstance(msg, Nack):
        return wire.put_u8(MSG_NACK) + wire.put_u64(msg.height) + wire.put_str(msg.reason)
    if isinstance(msg, SyncReq):
        return wire.put_u8(MSG_SYNC_REQ) + wire.put_u64(msg.from_height) + wire.put_u64(
            msg.to_height
        )
    if isinstance(msg, SyncResp):
        out = [wire.put_u8(MSG_SYNC_RESP), wire.put_u32(len(msg.entries))]
        out.extend(wire.put_bytes(_encode_blockmsg(e)) for e in msg.entries)
        return b"".join(out)
    if isinstance(msg, Transaction):
        return wire.put_u8(MSG_TXN) + msg.serialize()
    raise TypeError(f"cannot encode {type(msg)!r}")


def decode_message(data: bytes) -> Message:
    r = wire.Reader(data)
    tag = r.u8()
    if tag == MSG_HELLO:
        # height is stored +1 so that -1 (empty chain) stays unsigned
        return Hello(node_id=r.str_(), height=r.u64() - 1, tip_hash=r.str_())
    if tag == MSG_CERT:
        return WaitCertificate.read_from(r)
    if tag == MSG_BLOCK:
        return _decode_blockmsg(r)
    if tag == MSG_ACK:
        return Ack(height=r.u64(), note=r.str_())
    if tag == MSG_NACK:
        return Nack(height=r.u64(), reason=r.str_())
    if tag == MSG_SYNC_REQ:
        return SyncReq(from_height=r.u64(), to_height=r.u64())
    if tag == MSG_SYNC_RESP:
        entries = tuple(
            _decode_blockmsg(wire.Reader(r.bytes_())) for _ in range(r.u32())
        )
        return SyncResp(entries=entries)
    if tag == MSG_TXN:
        return deserialize_transaction(r.raw(r.remaining))
    raise wire.WireError(f"unknown message tag {tag:#x}")


def send_frame(sock: socket.socket, msg: Message, shaper: LinkShaper | None = None) -> None:
    body = encode_message(msg)
    frame = struct.pack(">I", len(body)) + body
    if shaper is not None and shaper.enabled:
        shaper.paced_send(sock, frame)
    else:
        sock.sendall(frame)


def recv_frame(sock: socket.socket) -> Message:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise PeerError(f"frame of {length} bytes exceeds limit")
    return decode_message(_recv_exact(sock, length))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise PeerError("connection closed")
        buf.extend(chunk)
    return bytes(buf)


class PeerClient:
    """Persistent request/response connection to one peer.

    One in-flight request at a time; reconnects lazily after any failure.
    """

    def __init__(
        self,
        node_id: str,
        host: str,
        port: int,
        shaper: LinkShaper | None = None,
        connect_timeout: float = 2.0,
        io_timeout: float = 30.0,
    ):
        self.node_id = node_id
        self.host = host
        self.port = port
        self.shaper = shaper
        self.connect_timeout = connect_timeout
        self.io_timeout = io_timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def request(self, msg: Message) -> Message:
        with self._lock:
            try:
                return self._roundtrip(msg)
            except (OSError, PeerError, wire.WireError):
                self._close()
                # one reconnect attempt, then give up until the next call
                return self._roundtrip(msg)

    def _roundtrip(self, msg: Message) -> Message:
        if self._sock is None:
            sock = socket.create_connection(
                (self.host, self.port), timeout=self.connect_timeout
            )
            sock.settimeout(self.io_timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
        send_frame(self._sock, msg, self.shaper)
        return recv_frame(self._sock)

    def _close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def close(self) -> None:
        with self._lock:
            self._close()


class PeerServer:
    """Accepts peer connections and answers frames via a handler callback.

    handler(msg) -> Message runs on the connection's thread; the node keeps
    its own serialization discipline internally.
    """

    def __init__(self, host: str, port: int, handler, shaper: LinkShaper | None = None):
        self.handler = handler
        self.shaper = shaper
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"peer-server:{self.port}", daemon=True
        )

    def start(self) -> None:
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(
                target=self._serve_conn, args=(conn,), daemon=True
            )
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        conn.settimeout(None)
        try:
            while not self._stop.is_set():
                try:
                    msg = recv_frame(conn)
                except (PeerError, OSError, wire.WireError):
                    return
                try:
                    reply = self.handler(msg)
                except Exception as exc:  # handler bug must not kill the link silently
                    reply = Nack(height=0, reason=f"internal:{exc}")
                send_frame(conn, reply, self.shaper)
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
