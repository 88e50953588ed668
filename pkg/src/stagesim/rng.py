"""Deterministic counter-based random streams.

Each consumer draws from its own stream named by (seed, label), and a draw
is a pure function of (seed, label, index).  Changing how one consumer
draws therefore never perturbs another stream's values, which is what
makes paired topology/policy comparisons attributable to the thing that
actually changed.
"""

from __future__ import annotations

import hashlib

_U64 = 2**64


def stream_uniform(seed: int, label: str, index: int) -> float:
    """Uniform draw in (0, 1] addressed by (seed, label, index)."""
    digest = hashlib.sha256(f"{seed}|{label}|{index}".encode()).digest()
    return (int.from_bytes(digest[:8], "big") + 1) / _U64


class RngStream:
    """A named uniform stream; the draw counter is its only mutable state."""

    __slots__ = ("seed", "label", "index")

    def __init__(self, seed: int, label: str, start: int = 0) -> None:
        self.seed = seed
        self.label = label
        self.index = start

    def uniform(self) -> float:
        u = stream_uniform(self.seed, self.label, self.index)
        self.index += 1
        return u

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"RngStream(seed={self.seed}, label={self.label!r}, index={self.index})"
