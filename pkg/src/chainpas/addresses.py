"""The 70-hex-character state address scheme.

Layout:
  chars [0:6]   family namespace = first 6 hex of sha256(b"pasint")
  chars [6:8]   kind code: "00" device operations, "01" device log
  ops:  [8:70]  first 62 hex of sha256(plc_id)
  log:  [8:48]  first 40 hex of sha256(plc_id), [48:70] seq as 22-hex zero-padded

Zero-padding the sequence suffix makes lexicographic address order equal
numeric sequence order, which prefix scans rely on.
"""

from __future__ import annotations

import hashlib

FAMILY_NAME = "pasint"
NAMESPACE = hashlib.sha256(FAMILY_NAME.encode()).hexdigest()[:6]

KIND_OPS = "ops"
KIND_LOG = "log"
_KIND_CODES = {KIND_OPS: "00", KIND_LOG: "01"}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

ADDRESS_LEN = 70
LOG_PLC_PREFIX_LEN = 48  # namespace + kind + 40-hex plc digest
VALID_PREFIX_LENGTHS = (6, 8, 48, 70)

_HEX = set("0123456789abcdef")


class AddressError(ValueError):
    """Schema violation in an address or address request."""


def compute_address(kind: str, plc_id: str, seq: int | None = None) -> str:
    """Deterministic state address for a device's operations or log records."""
    if kind not in _KIND_CODES:
        raise AddressError(f"unknown address kind {kind!r}")
    if not plc_id:
        raise AddressError("plc_id must be non-empty")
    plc_digest = hashlib.sha256(plc_id.encode()).hexdigest()
    if kind == KIND_OPS:
        if seq is not None:
            raise AddressError("seq not allowed for ops addresses")
        return NAMESPACE + _KIND_CODES[kind] + plc_digest[:62]
    if seq is None:
        raise AddressError("seq required for log addresses")
    if seq < 0 or seq >= 16**22:
        raise AddressError(f"seq {seq} out of range")
    return NAMESPACE + _KIND_CODES[kind] + plc_digest[:40] + format(seq, "022x")


def log_prefix(plc_id: str) -> str:
    """48-char prefix shared by every log address of one device."""
    if not plc_id:
        raise AddressError("plc_id must be non-empty")
    return NAMESPACE + _KIND_CODES[KIND_LOG] + hashlib.sha256(plc_id.encode()).hexdigest()[:40]


def address_kind(address: str) -> str:
    """Kind of a full address ("ops" or "log")."""
    validate_address(address)
    code = address[6:8]
    if code not in _CODE_KINDS:
        raise AddressError(f"unknown kind code {code!r}")
    return _CODE_KINDS[code]


def log_seq(address: str) -> int:
    """Sequence number encoded in a log address suffix."""
    if address_kind(address) != KIND_LOG:
        raise AddressError("not a log address")
    return int(address[48:], 16)


def validate_address(address: str) -> str:
    if len(address) != ADDRESS_LEN:
        raise AddressError(f"address must be {ADDRESS_LEN} hex chars")
    if not set(address) <= _HEX:
        raise AddressError("address must be lowercase hex")
    if not address.startswith(NAMESPACE):
        raise AddressError("address outside family namespace")
    return address


def validate_prefix(prefix: str) -> str:
    if len(prefix) not in VALID_PREFIX_LENGTHS:
        raise AddressError(
            f"prefix length must be one of {VALID_PREFIX_LENGTHS}, got {len(prefix)}"
        )
    if not set(prefix) <= _HEX:
        raise AddressError("prefix must be lowercase hex")
    return prefix
