"""RNG coordinates.

Every random draw in the lab is addressed by a tuple of nonnegative ints
(run seed, stream tag, indices...). A generator is a pure function of its
coordinates, so results never depend on batch layout or worker count.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

# stream tags
TASKS = 1
GROUPS = 2
EVAL = 3
INIT = 4
FIXTURE = 5

# sub-streams inside a group
INITIAL_ROLLOUT = 0
FORK = 1
BRANCH_ROLLOUT = 2


def rng_for(coords: Sequence[int]) -> np.random.Generator:
    coords = [int(c) for c in coords]
    if any(c < 0 for c in coords):
        raise ValueError(f"RNG coordinates must be nonnegative, got {coords}")
    return np.random.default_rng(np.random.SeedSequence(coords))


def extend(coords: Sequence[int], *more: int) -> tuple[int, ...]:
    return tuple(int(c) for c in coords) + tuple(int(m) for m in more)
