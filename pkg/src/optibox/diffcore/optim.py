"""Adam with coupled L2 weight decay and a milestone learning-rate schedule.

Decay is folded into the gradient before the moment updates (g + wd * p),
i.e. classic L2 regularisation rather than decoupled decay. Milestones map
a 1-based epoch number to a multiplicative factor applied to the learning
rate at the *start* of that epoch, before any of its steps run.
"""

from dataclasses import dataclass, field

import numpy as np

from .. import _kernels as kernels
from .tensor import Tensor


@dataclass
class OptimState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    milestones: dict = field(default_factory=dict)
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def start_epoch(state, epoch):
    """Apply the milestone factor for a (1-based) epoch, if one is set."""
    factor = state.milestones.get(int(epoch))
    if factor is not None:
        state.lr *= factor
    return state.lr


def _flat(a):
    if not a.flags.c_contiguous:
        raise ValueError("optimiser parameters must be C-contiguous")
    return a.reshape(-1)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place over ``params``.

    ``params`` and ``grads`` are dicts of name -> ndarray (same shapes);
    iteration order is the dict insertion order, so updates are
    deterministic. Missing moment slots are created lazily.
    """
    state.step_count += 1
    for name, p in params.items():
        g = np.ascontiguousarray(grads[name], dtype=np.float64).reshape(-1)
        if name not in state.m:
            state.m[name] = np.zeros(p.size)
            state.v[name] = np.zeros(p.size)
        kernels.adam_update(
            _flat(p),
            g,
            state.m[name],
            state.v[name],
            state.step_count,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
            state.weight_decay,
        )
    return params, state


def step_tensors(named, state):
    """Adam-update a dict of name -> Tensor from their .grad fields.

    Tensors with no accumulated gradient this step are left untouched (but
    still advance their moment buffers with a zero gradient, keeping the
    update count consistent across parameters).
    """
    params = {}
    grads = {}
    for name, t in named.items():
        params[name] = t.data
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return adam_step(params, grads, state)


def collect(named):
    """Flatten a nested {str: Tensor | dict} structure into name -> Tensor."""
    out = {}
    for key, value in named.items():
        if isinstance(value, Tensor):
            out[key] = value
        elif isinstance(value, dict):
            for sub, t in collect(value).items():
                out[f"{key}.{sub}"] = t
        else:
            raise TypeError(f"cannot collect parameter {key!r} of type {type(value)}")
    return out
