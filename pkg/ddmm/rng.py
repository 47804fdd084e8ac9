"""Named, seeded, counter-based random streams.

Every random draw in ddmm comes from a numpy ``Generator`` backed by the
Philox counter-based bit generator. A stream is identified by
``(seed, name, *counters)``: the name picks a fixed spawn-key slot, so
drawing more numbers from one stream never shifts another. Epoch and index
counters extend the spawn key, which keeps e.g. the noise of epoch 7 a pure
function of the seed even when a run is resumed from a checkpoint.
"""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np
import torch

from .errors import ValidationError

# Slot numbers are part of the reproducibility contract: never renumber.
STREAMS: Dict[str, int] = {
    "init": 0,
    "supervised": 1,
    "unsupervised": 2,
    "sampler": 3,
    "shuffle": 4,
    "phantom": 5,
    "split": 6,
    "vlb": 7,
    "pairing": 8,
    "segmenter": 9,
    "mask-step": 10,
    "kid": 11,
}


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Return the Philox generator for ``(seed, name, *counters)``."""
    if name not in STREAMS:
        raise ValidationError(f"unknown random stream {name!r}; expected one of {sorted(STREAMS)}")
    if int(seed) < 0:
        raise ValidationError(f"seeds must be nonnegative integers; got {seed}")
    for c in counters:
        if int(c) < 0:
            raise ValidationError(f"stream counters must be nonnegative; got {c}")
    key: Tuple[int, ...] = (STREAMS[name],) + tuple(int(c) for c in counters)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def normal(gen: np.random.Generator, shape: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Draw a standard-normal tensor of ``shape`` (drawn in float64, then cast)."""
    return torch.from_numpy(gen.standard_normal(tuple(shape))).to(dtype)


def timesteps(gen: np.random.Generator, n: int, t_max: int) -> torch.Tensor:
    """Draw ``n`` timesteps uniformly from ``1..t_max`` as an int64 tensor."""
    return torch.from_numpy(gen.integers(1, t_max + 1, size=n, dtype=np.int64))


def permutation(gen: np.random.Generator, n: int) -> np.ndarray:
    """Return a permutation of ``range(n)``."""
    return gen.permutation(n)
