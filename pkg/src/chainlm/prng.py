"""splitmix64: the only randomness source in the system.

Every consumer (sampled decoding, model generation, scenario
randomization) derives its stream from this generator so that a seed
fully determines behavior. The constants are the published splitmix64
ones; outputs are checked against the reference stream in the tests.
"""

from __future__ import annotations

_MASK64 = 0xFFFFFFFFFFFFFFFF

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance one step. Returns (value, new_state), both in [0, 2**64)."""
    state = (state + GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * MIX2) & _MASK64
    z = z ^ (z >> 31)
    return z, state


class SplitMix64:
    """Stateful wrapper around splitmix64_next."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        value, self.state = splitmix64_next(self.state)
        return value

    def next_unit(self) -> float:
        # u in [0, 1]. The top end is reachable: values within 2**11 of
        # 2**64 round up to 1.0 in binary64. Consumers must tolerate it.
        return self.next_u64() / 2**64

    def next_symmetric(self) -> float:
        """Float in [-1, 1], used for generated model weights."""
        return 2.0 * self.next_unit() - 1.0
