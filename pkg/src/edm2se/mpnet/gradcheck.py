from __future__ import annotations

import numpy as np

from .tensor import no_grad


def grad_check(net, loss_fn, n_coords=200, step=1e-4, seed=0, abs_floor=1e-6, return_details=False):
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn(net)`` must be deterministic and return a Tensor; a non-scalar
    result is treated as the sum of its entries, and finite differences are
    then taken entry by entry before summing, which avoids cancellation in
    large sums. The network should be in float64. Coordinates are drawn uniformly over all
    parameter entries. ``abs_floor`` is added to the denominator so that
    gradients at the finite-difference roundoff level do not dominate.
    """
    if net.dtype != np.float64:
        raise ValueError("grad_check needs a float64 network (net.astype(np.float64))")
    net.zero_grad()
    loss = loss_fn(net)
    loss.backward(np.ones_like(loss.data))
    names = list(net.params)
    sizes = np.array([net.params[k].data.size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(offsets[-1], size=min(n_coords, offsets[-1]), replace=False)

    details = []
    worst = 0.0
    for fid in np.sort(flat_ids):
        j = int(np.searchsorted(offsets, fid, side="right") - 1)
        p = net.params[names[j]]
        idx = np.unravel_index(int(fid - offsets[j]), p.data.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        orig = p.data[idx]
        with no_grad():
            p.data[idx] = orig + step
            lp = np.array(loss_fn(net).data, dtype=np.float64)
            p.data[idx] = orig - step
            lm = np.array(loss_fn(net).data, dtype=np.float64)
        p.data[idx] = orig
        numeric = float(np.sum(lp - lm)) / (2 * step)
        denom = max(abs(analytic), abs(numeric)) + abs_floor
        rel = abs(analytic - numeric) / denom
        worst = max(worst, rel)
        details.append((names[j], idx, analytic, numeric, rel))
    net.zero_grad()
    if return_details:
        return worst, details
    return worst
