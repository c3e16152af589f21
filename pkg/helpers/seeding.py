import numpy as np
from typing import List


def derive_seed(master_seed: int, *keys: int) -> int:
    """
    Deterministic child seed of ``master_seed`` for the given integer keys.

    Seeds are assigned up front, so results never depend on scheduling order.
    """
    sequence = np.random.SeedSequence([int(master_seed) % (2 ** 32), *[int(k) for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def candidate_seed(master_seed: int, kernel_size: int, trial: int) -> int:
    return derive_seed(master_seed, kernel_size, trial)


def spawn_seeds(master_seed: int, count: int) -> List[int]:
    return [derive_seed(master_seed, index) for index in range(count)]
