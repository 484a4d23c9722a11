"""Byte-rate pacing for simulated plant links.

Desk runs happen on loopback, where payload size barely matters; a WAN-grade
uplink is part of the scenario being reproduced, so senders can pace their
socket writes through a LinkShaper. Per-transfer bandwidth wobbles within
a jitter band (drawn from a seeded RNG), modelling a real shared link.

kbps = 0 disables pacing entirely.
"""

from __future__ import annotations

import random
import time


class LinkShaper:
    CHUNK = 8192

    def __init__(self, kbps: float, jitter: float = 0.3, seed: int | None = None):
        if kbps < 0:
            raise ValueError("kbps must be >= 0")
        if not 0 <= jitter < 1:
            raise ValueError("jitter must be in [0, 1)")
        self.kbps = kbps
        self.jitter = jitter
        self._rng = random.Random(seed)

    @property
    def enabled(self) -> bool:
        return self.kbps > 0

    def transfer_seconds(self, n_bytes: int) -> float:
        """Planned duration for one transfer at this transfer's drawn rate."""
        if not self.enabled:
            return 0.0
        factor = 1.0 + self._rng.uniform(-self.jitter, self.jitter)
        rate_bytes_s = self.kbps * 1000.0 / 8.0 * factor
        return n_bytes / rate_bytes_s

    def paced_send(self, sock, data: bytes) -> None:
        """sendall() spread over the transfer window of a drawn link rate."""
        if not self.enabled or not data:
            sock.sendall(data)
            return
        total = self.transfer_seconds(len(data))
        start = time.monotonic()
        sent = 0
        while sent < len(data):
            chunk = data[sent : sent + self.CHUNK]
            sock.sendall(chunk)
            sent += len(chunk)
            target = start + total * (sent / len(data))
            delay = target - time.monotonic()
            if delay > 0:
                time.sleep(delay)
