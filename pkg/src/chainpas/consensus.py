"""Elapsed-time lottery for leader election.

Each node draws a wait from an exponential distribution keyed deterministically
by (seed, node_id, round); the shortest wait wins, so any peer can recompute
and audit the whole round without trusted hardware. The proof is a digest
commitment over the draw inputs.

Round keys pack (height, attempt): attempt 0 is the pure lottery; if its
leader stalls, later attempts rotate leadership deterministically through the
remaining nodes so a crashed winner cannot block progress.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import wire
from .identity import digest, digest_bytes

DEFAULT_BLOCK_INTERVAL_MS = 500.0
ATTEMPTS_PER_HEIGHT = 64  # round = height * 64 + attempt


class InvalidCertificate(ValueError):
    """A certificate in the round does not recompute; reject the round."""


@dataclass(frozen=True)
class WaitCertificate:
    node_id: str
    round: int
    wait_ms: float
    seed: int
    proof: str  # hex digest over (node_id, round, seed)

    def serialize(self) -> bytes:
        return b"".join(
            [
                wire.put_str(self.node_id),
                wire.put_u64(self.round),
                wire.put_f64(self.wait_ms),
                wire.put_u64(self.seed),
                wire.put_str(self.proof),
            ]
        )

    @classmethod
    def read_from(cls, r: wire.Reader) -> "WaitCertificate":
        return cls(
            node_id=r.str_(),
            round=r.u64(),
            wait_ms=r.f64(),
            seed=r.u64(),
            proof=r.str_(),
        )


def _proof(node_id: str, round: int, seed: int) -> str:
    return digest(wire.put_str(node_id) + wire.put_u64(round) + wire.put_u64(seed))


def draw_wait(
    node_id: str,
    round: int,
    seed: int,
    target_block_interval_ms: float = DEFAULT_BLOCK_INTERVAL_MS,
) -> WaitCertificate:
    """Deterministic exponential draw with mean target_block_interval_ms."""
    material = digest_bytes(
        b"wait" + wire.put_u64(seed) + wire.put_str(node_id) + wire.put_u64(round)
    )
    # top 8 bytes -> uniform in [0, 1); 1-u keeps log() away from zero
    u = int.from_bytes(material[:8], "big") / 2**64
    wait_ms = -target_block_interval_ms * math.log(1.0 - u)
    return WaitCertificate(
        node_id=node_id,
        round=round,
        wait_ms=wait_ms,
        seed=seed,
        proof=_proof(node_id, round, seed),
    )


def verify_certificate(
    cert: WaitCertificate, target_block_interval_ms: float
) -> bool:
    """Recompute proof and wait from the draw inputs."""
    if cert.proof != _proof(cert.node_id, cert.round, cert.seed):
        return False
    expected = draw_wait(cert.node_id, cert.round, cert.seed, target_block_interval_ms)
    return expected.wait_ms == cert.wait_ms


def elect_leader(certs: list[WaitCertificate]) -> str:
    """Winner of one round: minimal wait, lexicographic node_id tiebreak.

    Pure function of the cert set; every honest node computes the same result.
    """
    if not certs:
        raise InvalidCertificate("empty certificate set")
    rounds = {c.round for c in certs}
    if len(rounds) != 1:
        raise InvalidCertificate(f"mixed rounds in certificate set: {sorted(rounds)}")
    for cert in certs:
        if cert.proof != _proof(cert.node_id, cert.round, cert.seed):
            raise InvalidCertificate(f"bad proof for {cert.node_id}")
    return min(certs, key=lambda c: (c.wait_ms, c.node_id)).node_id


def round_key(height: int, attempt: int) -> int:
    if attempt < 0 or attempt >= ATTEMPTS_PER_HEIGHT:
        raise ValueError(f"attempt {attempt} out of range")
    return height * ATTEMPTS_PER_HEIGHT + attempt


def split_round_key(round: int) -> tuple[int, int]:
    return round // ATTEMPTS_PER_HEIGHT, round % ATTEMPTS_PER_HEIGHT


def leader_for(
    node_ids: list[str],
    height: int,
    attempt: int,
    seed: int,
    target_block_interval_ms: float = DEFAULT_BLOCK_INTERVAL_MS,
) -> tuple[str, WaitCertificate]:
    """Scheduled leader and its certificate for (height, attempt).

    Attempt 0 runs the lottery over all configured nodes. Attempts > 0 walk
    the sorted node list starting after the attempt-0 winner, so a dead
    winner is bypassed after one timeout instead of being re-drawable.
    """
    ordered = sorted(node_ids)
    if not ordered:
        raise ValueError("empty node list")
    rk = round_key(height, attempt)
    base = round_key(height, 0)
    certs = {
        n: draw_wait(n, base, seed, target_block_interval_ms) for n in ordered
    }
    winner = elect_leader(list(certs.values()))
    if attempt == 0:
        return winner, certs[winner]
    node = ordered[(ordered.index(winner) + attempt) % len(ordered)]
    return node, draw_wait(node, rk, seed, target_block_interval_ms)
