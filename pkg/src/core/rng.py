from dataclasses import dataclass
from typing import Tuple

import numpy as np

# Retry substreams live above every ordinary child index.
RETRY_OFFSET = 2 ** 32


@dataclass(frozen=True)
class SeedStream:
    """
    Counter-based seed for one stochastic task.

    A stream is a pure function of the master seed, its task index and the
    path of parent indices it was derived through, so the random numbers a
    task consumes never depend on scheduling or worker count.
    """
    master: int
    index: int = 0
    path: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.master < 0 or self.index < 0:
            raise ValueError("SeedStream master seed and index must be non-negative.")

    def sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.master, spawn_key=self.path + (self.index,))

    def generator(self) -> np.random.Generator:
        """Returns a fresh PCG64 generator for this substream."""
        return np.random.Generator(np.random.PCG64(self.sequence()))

    def child(self, index: int) -> "SeedStream":
        """Derives an independent substream one level down."""
        return SeedStream(self.master, int(index), self.path + (self.index,))

    def retry(self, attempt: int) -> "SeedStream":
        """Substream used for the `attempt`-th resimulation of a failed task."""
        return self.child(RETRY_OFFSET + int(attempt))

    def uint32(self) -> int:
        """A 32-bit integer seed for compiled kernels that take a scalar seed."""
        return int(self.sequence().generate_state(1, np.uint32)[0])
