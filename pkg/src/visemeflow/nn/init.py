"""Parameter initialization."""

import numpy as np


def xavier_init(fan_in: int, fan_out: int, shape, seed, dtype=np.float32) -> np.ndarray:
    """Uniform Xavier/Glorot initialization on [-L, L], L = sqrt(6/(fan_in+fan_out)).

    ``seed`` may be an int or a numpy SeedSequence; the draw is deterministic
    for a given seed.  Values are sampled strictly inside the open interval.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in/fan_out must be >= 1, got {fan_in}/{fan_out}")
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    rng = np.random.default_rng(seed)
    out = rng.uniform(-limit, limit, size=tuple(int(d) for d in shape)).astype(dtype)
    # float32 rounding can land a sample exactly on the bound; pin it inside
    edge = np.nextafter(np.asarray(limit, dtype), np.asarray(0, dtype))
    return np.clip(out, -edge, edge)
