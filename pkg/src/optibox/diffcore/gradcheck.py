"""Finite-difference verification of tape gradients.

The relative error for one coordinate is |analytic - numeric| divided by
max(1e-12, |analytic| + |numeric|); ``grad_check`` returns the maximum over
every checked coordinate so callers can assert a single threshold.
"""

import numpy as np

from .tensor import Tape, Tensor, backward, zero_grad


def grad_check(fn, inputs, eps=1e-6, coords=None, rng=None):
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor; ``inputs`` are the
    ndarrays to differentiate with respect to (anything else ``fn`` closes
    over is held fixed). By default every coordinate of every input is
    perturbed; passing ``coords`` spot-checks that many randomly chosen
    coordinates instead (``rng`` seeds the choice).
    """
    tensors = [Tensor(np.array(x, dtype=np.float64)) for x in inputs]
    with Tape() as tape:
        loss = fn(tensors)
    if loss.data.shape != ():
        raise ValueError("grad_check needs fn to return a scalar")
    zero_grad(tensors)
    backward(loss, tape)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    def value():
        # No active tape: forward computation only.
        return float(fn(tensors).data)

    all_coords = [
        (ti, i) for ti, t in enumerate(tensors) for i in range(t.data.size)
    ]
    if coords is not None and coords < len(all_coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        picked = rng.choice(len(all_coords), size=coords, replace=False)
        all_coords = [all_coords[int(k)] for k in picked]

    max_err = 0.0
    for ti, i in all_coords:
        flat = tensors[ti].data.ravel()
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = value()
        flat[i] = orig - eps
        f_minus = value()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        ana = analytic[ti].ravel()[i]
        err = abs(ana - numeric) / max(1e-12, abs(ana) + abs(numeric))
        max_err = max(max_err, err)
    return max_err
