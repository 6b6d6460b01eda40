"""Central finite-difference gradient verification.

Runs in float64.  ``fn`` maps a list of float64 arrays to
``(scalar_loss, [grad_per_array])``; every coordinate of every array is
perturbed by +/-eps and the worst relative error is returned:

    |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
"""

import numpy as np


def grad_check(fn, arrays, eps: float = 1e-5) -> float:
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    _, grads = fn(arrays)
    if len(grads) != len(arrays):
        raise ValueError(f"fn returned {len(grads)} gradients for {len(arrays)} inputs")
    worst = 0.0
    for a, g in zip(arrays, grads):
        g = np.asarray(g, dtype=np.float64)
        flat = a.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            plus, _ = fn(arrays)
            flat[idx] = orig - eps
            minus, _ = fn(arrays)
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * eps)
            analytic = g.reshape(-1)[idx]
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            if err > worst:
                worst = err
    return worst
