"""The deployment's one smart contract: factory operating logic.

Interprets payloads at the two address families and turns valid transactions
into state writes. Operators publish commands to a device's operations
address; the device's controller appends action and change records under its
log prefix. Managers read everything and write nothing.

apply() is a pure function of (transaction, state view): given the same
inputs every node computes the same delta, which is what keeps replicas
byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from . import wire
from .addresses import (
    KIND_LOG,
    KIND_OPS,
    address_kind,
    compute_address,
    log_seq,
)
from .identity import Registry
from .statestore import StateEntry
from .txn import Transaction

ACTIONS = ("compile", "start", "stop")
LOG_KINDS = ("plc_action", "device_change")
RESULTS = ("ok", "error")
PAYLOAD_MODES = ("inline", "offchain_hash")

_RECORD_OP = 0x01
_RECORD_LOG = 0x02

# invalid() reasons, machine-readable
FORBIDDEN = "forbidden"
SCHEMA = "schema"
BAD_SEQ = "bad-seq"
ADDRESS_MISMATCH = "address-mismatch"


class InvalidTransaction(Exception):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class OperationRecord:
    """Operator-issued command for one device."""

    op_seq: int
    operator_id: str
    plc_id: str
    action: str  # compile | start | stop
    program: bytes | None = None  # required iff action == compile
    issued_at: int = 0  # ms epoch

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if (self.program is not None) != (self.action == "compile"):
            raise ValueError("program present iff action is compile")

    def encode(self) -> bytes:
        out = [
            wire.put_u8(_RECORD_OP),
            wire.put_u64(self.op_seq),
            wire.put_str(self.operator_id),
            wire.put_str(self.plc_id),
            wire.put_u8(ACTIONS.index(self.action)),
            wire.put_u8(1 if self.program is not None else 0),
        ]
        if self.program is not None:
            out.append(wire.put_bytes(self.program))
        out.append(wire.put_u64(self.issued_at))
        return b"".join(out)


@dataclass(frozen=True)
class LogRecord:
    """One PLC action or field-device state change."""

    seq: int
    plc_id: str
    kind: str  # plc_action | device_change
    detail: dict[str, str] = field(default_factory=dict)
    result: str = "ok"
    logged_at: int = 0
    payload_mode: str = "inline"
    offchain_digest: str | None = None

    def __post_init__(self):
        if self.kind not in LOG_KINDS:
            raise ValueError(f"unknown log kind {self.kind!r}")
        if self.result not in RESULTS:
            raise ValueError(f"unknown result {self.result!r}")
        if self.payload_mode not in PAYLOAD_MODES:
            raise ValueError(f"unknown payload mode {self.payload_mode!r}")
        if (self.offchain_digest is not None) != (self.payload_mode == "offchain_hash"):
            raise ValueError("offchain_digest present iff payload_mode is offchain_hash")

    def encode(self) -> bytes:
        out = [
            wire.put_u8(_RECORD_LOG),
            wire.put_u64(self.seq),
            wire.put_str(self.plc_id),
            wire.put_u8(LOG_KINDS.index(self.kind)),
            wire.put_u32(len(self.detail)),
        ]
        for key in sorted(self.detail):  # sorted: one canonical encoding
            out.append(wire.put_str(key))
            out.append(wire.put_str(self.detail[key]))
        out.extend(
            [
                wire.put_u8(RESULTS.index(self.result)),
                wire.put_u64(self.logged_at),
                wire.put_u8(PAYLOAD_MODES.index(self.payload_mode)),
                wire.put_u8(1 if self.offchain_digest is not None else 0),
            ]
        )
        if self.offchain_digest is not None:
            out.append(wire.put_str(self.offchain_digest))
        return b"".join(out)


def decode_record(data: bytes) -> OperationRecord | LogRecord:
    """Inverse of encode(); raises wire.WireError on foreign bytes."""
    r = wire.Reader(data)
    try:
        tag = r.u8()
        if tag == _RECORD_OP:
            op_seq = r.u64()
            operator_id = r.str_()
            plc_id = r.str_()
            action = _enum(ACTIONS, r.u8())
            program = r.bytes_() if r.u8() else None
            issued_at = r.u64()
            r.expect_end()
            return OperationRecord(
                op_seq=op_seq,
                operator_id=operator_id,
                plc_id=plc_id,
                action=action,
                program=program,
                issued_at=issued_at,
            )
        if tag == _RECORD_LOG:
            seq = r.u64()
            plc_id = r.str_()
            kind = _enum(LOG_KINDS, r.u8())
            detail = {}
            for _ in range(r.u32()):
                key = r.str_()
                detail[key] = r.str_()
            result = _enum(RESULTS, r.u8())
            logged_at = r.u64()
            payload_mode = _enum(PAYLOAD_MODES, r.u8())
            offchain_digest = r.str_() if r.u8() else None
            r.expect_end()
            return LogRecord(
                seq=seq,
                plc_id=plc_id,
                kind=kind,
                detail=detail,
                result=result,
                logged_at=logged_at,
                payload_mode=payload_mode,
                offchain_digest=offchain_digest,
            )
        raise wire.WireError(f"unknown record tag {tag:#x}")
    except ValueError as exc:
        if isinstance(exc, wire.WireError):
            raise
        raise wire.WireError(str(exc)) from exc


def _enum(values: tuple, index: int) -> str:
    if index >= len(values):
        raise wire.WireError(f"enum index {index} out of range")
    return values[index]


def decode_state(entry: StateEntry) -> OperationRecord | LogRecord:
    return decode_record(entry.data)


@dataclass(frozen=True)
class StateDelta:
    writes: tuple[tuple[str, bytes], ...]


StateGetter = Callable[[str], StateEntry | None]


def apply(txn: Transaction, get_state: StateGetter, registry: Registry) -> StateDelta:
    """Validate business rules and produce the txn's state writes.

    Assumes the envelope signature was already verified. Raises
    InvalidTransaction(reason) and touches no state on any rule violation.
    """
    signer = registry.get(txn.signer)
    if signer is None:
        raise InvalidTransaction(FORBIDDEN, "signer not registered")
    kind = address_kind(txn.address)

    try:
        record = decode_record(txn.payload)
    except wire.WireError as exc:
        raise InvalidTransaction(SCHEMA, str(exc)) from exc

    if kind == KIND_OPS:
        if signer.role != "operator":
            raise InvalidTransaction(FORBIDDEN, f"role {signer.role} cannot write operations")
        if not isinstance(record, OperationRecord):
            raise InvalidTransaction(SCHEMA, "operations address expects an OperationRecord")
        if record.operator_id != txn.signer:
            raise InvalidTransaction(SCHEMA, "operator_id does not match signer")
        if compute_address(KIND_OPS, record.plc_id) != txn.address:
            raise InvalidTransaction(ADDRESS_MISMATCH, "payload plc_id does not match address")
        prev = get_state(txn.address)
        expected = 0
        if prev is not None:
            prev_record = decode_record(prev.data)
            assert isinstance(prev_record, OperationRecord)
            expected = prev_record.op_seq + 1
        if record.op_seq != expected:
            raise InvalidTransaction(
                BAD_SEQ, f"op_seq {record.op_seq}, expected {expected}"
            )
        return StateDelta(writes=((txn.address, txn.payload),))

    assert kind == KIND_LOG
    if signer.role != "plc":
        raise InvalidTransaction(FORBIDDEN, f"role {signer.role} cannot write logs")
    if not isinstance(record, LogRecord):
        raise InvalidTransaction(SCHEMA, "log address expects a LogRecord")
    if record.plc_id != txn.signer:
        raise InvalidTransaction(SCHEMA, "plc_id does not match signer")
    if compute_address(KIND_LOG, record.plc_id, record.seq) != txn.address:
        raise InvalidTransaction(ADDRESS_MISMATCH, "payload plc_id/seq does not match address")
    if record.seq != log_seq(txn.address):
        raise InvalidTransaction(BAD_SEQ, "seq does not match address suffix")
    if get_state(txn.address) is not None:
        raise InvalidTransaction(BAD_SEQ, f"seq {record.seq} already written")
    if record.seq > 0:
        prev_address = compute_address(KIND_LOG, record.plc_id, record.seq - 1)
        if get_state(prev_address) is None:
            raise InvalidTransaction(BAD_SEQ, f"gap before seq {record.seq}")
    return StateDelta(writes=((txn.address, txn.payload),))
