"""Stable seed derivation for every random draw in a run.

All randomness is derived from one run seed plus a purpose tag so that
(a) reruns are bitwise reproducible and (b) independent subsystems
(rollout sampling, flow training, reward noise) never share a stream.
Hashes go through sha256, never Python's salted ``hash``.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_U64 = (1 << 64) - 1


def derive_seed(*parts: int | str) -> int:
    """Map a tuple of ints/strings to a stable 63-bit seed."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, str):
            h.update(b"s")
            h.update(part.encode("utf-8"))
        else:
            h.update(b"i")
            h.update(struct.pack("<q", int(part)))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def numpy_rng(*parts: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def philox_normal(key: int, counter: tuple[int, int, int, int], n: int) -> np.ndarray:
    """Counter-based standard-normal draw: same (key, counter) -> same vector.

    Used for the per-(token, timestep, layer) noise in flow rewards, where
    draws must not depend on evaluation order.
    """
    bg = np.random.Philox(key=key & _U64, counter=[c & _U64 for c in counter])
    return np.random.Generator(bg).standard_normal(n)
