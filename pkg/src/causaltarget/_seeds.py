"""Deterministic seed derivation.

Every stochastic component draws its seed from the master seed plus a fixed
integer domain path, so identical configurations reproduce identical results
regardless of command, thread count, or evaluation order.
"""

import numpy as np

_MASK = (1 << 63) - 1

# domain tags (append-only; renumbering changes all derived streams)
FOREST_TREE = 1
CENTER_Y = 2
CENTER_T = 3
FOLDS = 4
NUISANCE_BASELINE = 5
NUISANCE_CAUSAL = 6
POLICY_RANDOM = 7
POLICY_FOREST = 8
RATE_BOOTSTRAP = 9
REDRAW = 10
SIM_FOLDS = 11
AUX_FLAG = 12
DGP = 13


def derive_seed(seed, *path):
    """64-bit seed for the stream at `path` under the master `seed`."""
    entropy = (int(seed) & _MASK,) + tuple(int(p) & _MASK for p in path)
    ss = np.random.SeedSequence(entropy=entropy)
    return int(ss.generate_state(1, np.uint64)[0])


def generator(seed, *path):
    """numpy Generator seeded at the derived stream."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *path)))
