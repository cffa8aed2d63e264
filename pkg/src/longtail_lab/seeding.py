"""Deterministic derivation of independent child seeds from one master seed."""
from __future__ import annotations

import hashlib


def derive_seed(root: int, *parts: int | str) -> int:
    """Return a stable 63-bit seed for the random stream named by ``parts``.

    Streams derived from the same root with different tags are independent;
    the mapping is pure, so re-deriving with the same arguments always yields
    the same seed regardless of platform or call order.
    """
    h = hashlib.sha256()
    h.update(str(int(root)).encode("ascii"))
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") >> 1
