"""Stable cross-process hashing for seed derivation and scripted sampling."""

from __future__ import annotations

import hashlib


def stable_hash64(*parts: object) -> int:
    """64-bit hash of the string forms of ``parts``; stable across runs and platforms."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")


def stable_unit(*parts: object) -> float:
    """Deterministic pseudo-uniform draw in [0, 1) keyed by ``parts``."""
    return stable_hash64(*parts) / 2.0**64


def derive_seed(*parts: object) -> int:
    """Derive a 32-bit seed from arbitrary labels (problem ids, round tags, ...)."""
    return stable_hash64(*parts) & 0x7FFFFFFF
