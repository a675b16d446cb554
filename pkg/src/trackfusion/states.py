"""Binary correctness states of ``n`` tracker channels.

State ``i`` (0-based) encodes the bits of ``N - 1 - i`` with the most
significant bit belonging to tracker 0, so index 0 is the all-correct state
and index ``N - 1`` is the all-failed state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_TRACKERS = 8


def _check_n(n: int) -> int:
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool):
        raise TypeError(f"tracker count must be an integer, got {n!r}")
    if not 1 <= n <= MAX_TRACKERS:
        raise ValueError(f"tracker count must be in [1, {MAX_TRACKERS}], got {n}")
    return int(n)


@dataclass(frozen=True)
class StateSpace:
    n: int
    bits: np.ndarray = field(repr=False, compare=False)

    @property
    def size(self) -> int:
        return self.bits.shape[0]

    @property
    def correct_counts(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    @property
    def all_correct(self) -> int:
        return 0

    @property
    def all_failed(self) -> int:
        return self.size - 1

    def state_bits(self, index: int) -> tuple[int, ...]:
        return tuple(int(b) for b in self.bits[index])

    def index_of(self, bits) -> int:
        bits = tuple(int(b) for b in bits)
        if len(bits) != self.n or any(b not in (0, 1) for b in bits):
            raise ValueError(f"expected {self.n} binary flags, got {bits}")
        code = 0
        for b in bits:
            code = (code << 1) | b
        return self.size - 1 - code

    def label(self, index: int) -> str:
        return "".join(str(b) for b in self.state_bits(index))

    def majority(self) -> np.ndarray:
        """Boolean mask of states where strictly more than n/2 trackers are correct."""
        return 2 * self.correct_counts > self.n


def build_state_space(n: int) -> StateSpace:
    n = _check_n(n)
    size = 2**n
    codes = size - 1 - np.arange(size)
    shifts = np.arange(n - 1, -1, -1)
    bits = ((codes[:, None] >> shifts[None, :]) & 1).astype(np.int8)
    bits.setflags(write=False)
    return StateSpace(n=n, bits=bits)


def most_probable_state(posterior, space: StateSpace) -> int:
    """Argmax over every state except the all-failed one.

    Exact ties go to the state with more correct trackers, then the lower index.
    """
    posterior = np.asarray(posterior, dtype=float)
    if posterior.shape != (space.size,):
        raise ValueError(f"posterior must have shape ({space.size},), got {posterior.shape}")
    if space.size == 2:
        return 0
    head = posterior[:-1]
    best = head.max()
    tied = np.flatnonzero(head == best)
    if tied.size == 1:
        return int(tied[0])
    counts = space.correct_counts[tied]
    return int(tied[np.argmax(counts)])
