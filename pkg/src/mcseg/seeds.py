"""Deterministic seed derivation.

Every random stream in the pipeline is derived from one master seed plus a
stable textual label, so results are reproducible and independent of
scheduling. Python's builtin ``hash`` is salted per process and must not be
used here; sha256 keeps derivations stable across runs and platforms.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *labels: str | int) -> int:
    """Map (master seed, label path) to a stable 63-bit seed."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode("ascii"))
    for label in labels:
        h.update(b"\x00")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF
