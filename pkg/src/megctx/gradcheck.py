"""Central-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_check(f, params, h=1e-3, samples_per_tensor: int = 4,
                      seed: int = 0) -> float:
    """Compare backprop gradients of f against central differences.

    f maps a list of leaf Tensors to a scalar Tensor.  Leaves are copied to
    float64 before checking; f is re-evaluated 2*samples_per_tensor times per
    leaf with single coordinates perturbed by +/-h.  Returns the worst
    relative error |analytic - numeric| / (|analytic| + |numeric| + 1e-8)
    over all sampled coordinates.

    h may be a single step or a sequence of steps; with several, each
    coordinate keeps its best error over the grid.  No single step suits
    every coordinate: one too coarse straddles a selu kink, one too fine
    drowns a nearly flat coordinate in rounding noise.  A wrong gradient
    disagrees at every step, so the grid only removes false alarms.
    """
    steps = (float(h),) if np.isscalar(h) else tuple(float(v) for v in h)
    if not steps or any(v <= 0 for v in steps):
        raise ValueError("h must be one or more positive step sizes")
    leaves = [Tensor(np.array(p.data, dtype=np.float64), requires_grad=True) for p in params]
    out = f(leaves)
    if out.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar objective")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("objective is not finite")
    out.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        gflat = (np.zeros_like(flat) if leaf.grad is None else leaf.grad.reshape(-1))
        n = flat.size
        picks = rng.choice(n, size=min(n, samples_per_tensor), replace=False)
        for i in picks:
            keep = flat[i]
            analytic = float(gflat[i])
            best = np.inf
            for hv in steps:
                flat[i] = keep + hv
                with no_grad():
                    fp = float(f(leaves).data)
                flat[i] = keep - hv
                with no_grad():
                    fm = float(f(leaves).data)
                numeric = (fp - fm) / (2.0 * hv)
                rel = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8)
                best = min(best, rel)
            flat[i] = keep
            worst = max(worst, best)
    return worst
