"""Counter-based, splittable random streams.

Every random draw in the package is addressed by a key tuple, e.g.
``(seed, chain, block)``; the key is hashed through :class:`numpy.random.SeedSequence`
into a Philox key, so results never depend on scheduling or thread count.
"""
from __future__ import annotations

import numpy as np

# Sweeps per Philox counter block in heat-bath chains.
SWEEP_BLOCK = 1024


def philox_key(*key: int) -> np.ndarray:
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key])
    return ss.generate_state(2, dtype=np.uint64)


def stream(*key: int) -> np.random.Generator:
    """Independent generator for the given key path."""
    return np.random.Generator(np.random.Philox(key=philox_key(*key)))


def derive_seed(*key: int) -> int:
    """63-bit integer seed derived from a key path (for numba's internal RNG)."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def sweep_uniforms(seed: int, chain: int, first_sweep: int, n_sweeps: int, n_edges: int) -> np.ndarray:
    """Uniforms for sweeps ``first_sweep .. first_sweep + n_sweeps - 1``.

    Row ``s`` column ``e`` is the uniform assigned to (seed, chain, sweep, edge);
    the value is the same whichever window it is requested through.
    """
    out = np.empty((n_sweeps, n_edges))
    s = first_sweep
    row = 0
    while row < n_sweeps:
        block, offset = divmod(s, SWEEP_BLOCK)
        take = min(SWEEP_BLOCK - offset, n_sweeps - row)
        gen = stream(seed, chain, block)
        if offset:
            gen.random(offset * n_edges)
        out[row:row + take] = gen.random(take * n_edges).reshape(take, n_edges)
        row += take
        s += take
    return out
