"""Deterministic seed derivation shared by training, planning and masking.

Every stream of randomness in the system is keyed by a (root seed, label,
context...) tuple through SHA-256, so independent components never share a
stream and reruns are bit-identical on any platform.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts: object) -> int:
    """Derive a 64-bit seed from a tuple of hashable context parts.

    Parts are rendered with repr() and joined with an unambiguous separator;
    ints, strings and tuples of those are the intended inputs.
    """
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
