"""Differentiable primitives over :class:`~optibox.diffcore.tensor.Tensor`.

Every public op here follows one pattern: compute the forward value with
numpy, then (if a tape is active) record a backward closure that takes the
output cotangents and accumulates into the inputs' ``.grad``, and a forward
closure used by ``Tape.replay``. ``PRIMITIVES`` maps the public op names to
their callables so tests can enumerate exactly what must stay grad-checked.

Broadcasting is supported where noted (add/sub/mul/div); the backward of a
broadcast reduces the cotangent back down to the input's shape.
"""

import numpy as np

from .. import _kernels as kernels
from ..errors import NumericalError
from .tensor import Tensor, accumulate, record


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(dy, shape):
    """Reduce a cotangent produced under broadcasting back to ``shape``."""
    while dy.ndim > len(shape):
        dy = dy.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and dy.shape[axis] != 1:
            dy = dy.sum(axis=axis, keepdims=True)
    return dy


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects two rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward_fn(douts):
        (dy,) = douts
        accumulate(a, dy @ b.data.T)
        accumulate(b, a.data.T @ dy)

    record("matmul", (a, b), (out,), backward_fn, lambda: (a.data @ b.data,))
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward_fn(douts):
        (dy,) = douts
        accumulate(a, _unbroadcast(dy, a.shape))
        accumulate(b, _unbroadcast(dy, b.shape))

    record("add", (a, b), (out,), backward_fn, lambda: (a.data + b.data,))
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward_fn(douts):
        (dy,) = douts
        accumulate(a, _unbroadcast(dy, a.shape))
        accumulate(b, _unbroadcast(-dy, b.shape))

    record("sub", (a, b), (out,), backward_fn, lambda: (a.data - b.data,))
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward_fn(douts):
        (dy,) = douts
        accumulate(a, _unbroadcast(dy * b.data, a.shape))
        accumulate(b, _unbroadcast(dy * a.data, b.shape))

    record("mul", (a, b), (out,), backward_fn, lambda: (a.data * b.data,))
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def backward_fn(douts):
        (dy,) = douts
        accumulate(a, _unbroadcast(dy / b.data, a.shape))
        accumulate(b, _unbroadcast(-dy * a.data / (b.data * b.data), b.shape))

    record("div", (a, b), (out,), backward_fn, lambda: (a.data / b.data,))
    return out


def scale(t, c):
    """Multiply by a python float constant (no grad for the constant)."""
    return mul(t, Tensor(float(c)))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(t):
    t = as_tensor(t)
    out = Tensor(np.maximum(t.data, 0.0))

    def backward_fn(douts):
        (dy,) = douts
        # subgradient 0 exactly at 0
        accumulate(t, dy * (t.data > 0.0))

    record("relu", (t,), (out,), backward_fn, lambda: (np.maximum(t.data, 0.0),))
    return out


def sigmoid(t):
    t = as_tensor(t)

    def _f(x):
        return 1.0 / (1.0 + np.exp(-x))

    out = Tensor(_f(t.data))

    def backward_fn(douts):
        (dy,) = douts
        y = out.data
        accumulate(t, dy * y * (1.0 - y))

    record("sigmoid", (t,), (out,), backward_fn, lambda: (_f(t.data),))
    return out


def tanh(t):
    t = as_tensor(t)
    out = Tensor(np.tanh(t.data))

    def backward_fn(douts):
        (dy,) = douts
        y = out.data
        accumulate(t, dy * (1.0 - y * y))

    record("tanh", (t,), (out,), backward_fn, lambda: (np.tanh(t.data),))
    return out


def softmax(t):
    """Softmax over a rank-1 tensor, stabilised by max subtraction."""
    t = as_tensor(t)
    if t.data.ndim != 1:
        raise ValueError("softmax expects a rank-1 tensor")
    if not np.all(np.isfinite(t.data)):
        raise NumericalError("softmax over non-finite logits")

    def _f(x):
        z = np.exp(x - np.max(x))
        return z / z.sum()

    out = Tensor(_f(t.data))

    def backward_fn(douts):
        (dy,) = douts
        y = out.data
        accumulate(t, y * (dy - np.dot(dy, y)))

    record("softmax", (t,), (out,), backward_fn, lambda: (_f(t.data),))
    return out


# ---------------------------------------------------------------------------
# shape surgery


def concat(parts, axis=0):
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ValueError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def backward_fn(douts):
        (dy,) = douts
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * dy.ndim
            sl[axis] = slice(offset, offset + n)
            accumulate(p, dy[tuple(sl)])
            offset += n

    record(
        "concat",
        parts,
        (out,),
        backward_fn,
        lambda: (np.concatenate([p.data for p in parts], axis=axis),),
    )
    return out


def split(t, sizes, axis=0):
    """Cut ``t`` along ``axis`` into pieces of the given sizes."""
    t = as_tensor(t)
    if sum(sizes) != t.data.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of {t.shape}")
    offsets = np.cumsum([0] + list(sizes))

    def _pieces(x):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * x.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(x[tuple(sl)].copy())
        return tuple(pieces)

    outs = tuple(Tensor(p) for p in _pieces(t.data))

    def backward_fn(douts):
        accumulate(t, np.concatenate(douts, axis=axis))

    record("split", (t,), outs, backward_fn, lambda: _pieces(t.data))
    return outs


def reshape(t, shape):
    t = as_tensor(t)
    old = t.data.shape
    out = Tensor(t.data.reshape(shape))

    def backward_fn(douts):
        (dy,) = douts
        accumulate(t, dy.reshape(old))

    record("reshape", (t,), (out,), backward_fn, lambda: (t.data.reshape(shape),))
    return out


# ---------------------------------------------------------------------------
# reductions / losses


def mean(t):
    t = as_tensor(t)
    out = Tensor(np.mean(t.data))
    n = t.data.size

    def backward_fn(douts):
        (dy,) = douts
        accumulate(t, np.full(t.data.shape, float(dy) / n))

    record("mean", (t,), (out,), backward_fn, lambda: (np.mean(t.data),))
    return out


def l1_loss(a, b):
    """Sum of absolute differences, as a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.sum(np.abs(a.data - b.data)))

    def backward_fn(douts):
        (dy,) = douts
        s = np.sign(a.data - b.data) * float(dy)
        accumulate(a, s)
        accumulate(b, -s)

    record(
        "l1_loss", (a, b), (out,), backward_fn, lambda: (np.sum(np.abs(a.data - b.data)),)
    )
    return out


def l2norm(t):
    """Euclidean norm over all elements, as a scalar."""
    t = as_tensor(t)
    out = Tensor(np.sqrt(np.sum(t.data * t.data)))

    def backward_fn(douts):
        (dy,) = douts
        n = float(out.data)
        if n > 0.0:
            accumulate(t, float(dy) * t.data / n)
        else:
            accumulate(t, np.zeros_like(t.data))

    record(
        "l2norm", (t,), (out,), backward_fn, lambda: (np.sqrt(np.sum(t.data * t.data)),)
    )
    return out


def cross_entropy_with_softmax(logits, target):
    """-log softmax(logits)[target] for a rank-1 logit vector."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1:
        raise ValueError("cross_entropy_with_softmax expects rank-1 logits")
    target = int(target)
    if not 0 <= target < logits.data.shape[0]:
        raise ValueError(
            f"target index {target} out of range for {logits.data.shape[0]} classes"
        )

    def _f(x):
        z = x - np.max(x)
        lse = np.log(np.sum(np.exp(z)))
        return lse - z[target]

    out = Tensor(_f(logits.data))

    def backward_fn(douts):
        (dy,) = douts
        z = logits.data - np.max(logits.data)
        p = np.exp(z)
        p /= p.sum()
        p[target] -= 1.0
        accumulate(logits, float(dy) * p)

    record(
        "cross_entropy_with_softmax",
        (logits,),
        (out,),
        backward_fn,
        lambda: (_f(logits.data),),
    )
    return out


# ---------------------------------------------------------------------------
# batch normalisation


class BatchNormParams:
    """Learnable scale/shift plus running statistics for one feature axis."""

    def __init__(self, dim, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(dim))
        self.beta = Tensor(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eps = float(eps)
        self.momentum = float(momentum)


def batchnorm(x, bn, training):
    """Normalise rows of ``x`` [B, d] per feature.

    Training mode uses biased batch statistics to normalise and folds the
    unbiased variance into the running estimates (momentum blend); eval mode
    normalises with the stored running statistics. The replay closure reuses
    batch statistics without touching the running buffers again.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("batchnorm expects [batch, features]")
    B = x.data.shape[0]
    if training and B < 2:
        raise ValueError("batchnorm in training mode needs batch size >= 2")
    gamma, beta, eps = bn.gamma, bn.beta, bn.eps

    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)  # biased
        bn.running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * mu
        bn.running_var = (
            1.0 - bn.momentum
        ) * bn.running_var + bn.momentum * var * B / (B - 1.0)

        def _f(xv):
            m = xv.mean(axis=0)
            v = xv.var(axis=0)
            return ((xv - m) / np.sqrt(v + eps) * gamma.data + beta.data,)

        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = Tensor(xhat * gamma.data + beta.data)

        def backward_fn(douts):
            (dy,) = douts
            m = x.data.mean(axis=0)
            v = x.data.var(axis=0)
            istd = 1.0 / np.sqrt(v + eps)
            xh = (x.data - m) * istd
            accumulate(gamma, np.sum(dy * xh, axis=0))
            accumulate(beta, np.sum(dy, axis=0))
            dxh = dy * gamma.data
            n = x.data.shape[0]
            dx = (
                istd
                / n
                * (n * dxh - np.sum(dxh, axis=0) - xh * np.sum(dxh * xh, axis=0))
            )
            accumulate(x, dx)

    else:
        rm = bn.running_mean.copy()
        rv = bn.running_var.copy()
        istd_e = 1.0 / np.sqrt(rv + eps)

        def _f(xv):
            return ((xv - rm) * istd_e * gamma.data + beta.data,)

        out = Tensor(_f(x.data)[0])

        def backward_fn(douts):
            (dy,) = douts
            xh = (x.data - rm) * istd_e
            accumulate(gamma, np.sum(dy * xh, axis=0))
            accumulate(beta, np.sum(dy, axis=0))
            accumulate(x, dy * gamma.data * istd_e)

    record("batchnorm", (x, gamma, beta), (out,), backward_fn, lambda: _f(x.data))
    return out


# ---------------------------------------------------------------------------
# lookup & recurrence


def gather_rows(table, ids):
    """Row lookup (embedding): out[i] = table[ids[i]]; scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("gather_rows expects a rank-1 id array")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"row id out of range for table with {table.data.shape[0]} rows"
        )
    out = Tensor(table.data[ids])

    def backward_fn(douts):
        (dy,) = douts
        g = np.zeros_like(table.data)
        np.add.at(g, ids, dy)
        accumulate(table, g)

    record("gather_rows", (table,), (out,), backward_fn, lambda: (table.data[ids],))
    return out


def lstm_sequence(xs, h0, c0, wx, wh, b):
    """Run a single-layer LSTM over a [T, E] sequence.

    Returns ``(hs, c_last)``: all hidden states [T, H] and the final cell
    state [H]. The heavy per-step loops live in the kernel backend; this op
    caches the kernel's intermediates for the backward call. Gate blocks on
    the 4H axis are ordered input, forget, candidate, output.
    """
    xs, h0, c0 = as_tensor(xs), as_tensor(h0), as_tensor(c0)
    wx, wh, b = as_tensor(wx), as_tensor(wh), as_tensor(b)
    if xs.data.ndim != 2:
        raise ValueError("lstm_sequence expects [T, E] inputs")
    if xs.data.shape[0] == 0:
        raise ValueError("lstm_sequence over an empty sequence")

    cache = {}

    def _f():
        hs, cs, gates, tcs = kernels.lstm_seq_forward(
            np.ascontiguousarray(xs.data),
            np.ascontiguousarray(h0.data),
            np.ascontiguousarray(c0.data),
            np.ascontiguousarray(wx.data),
            np.ascontiguousarray(wh.data),
            np.ascontiguousarray(b.data),
        )
        cache["hs"], cache["cs"] = hs, cs
        cache["gates"], cache["tcs"] = gates, tcs
        return hs, cs[-1].copy()

    hs0, clast0 = _f()
    out_hs = Tensor(hs0)
    out_c = Tensor(clast0)

    def backward_fn(douts):
        dhs, dc_last = douts
        dxs, dh0, dc0, dwx, dwh, db = kernels.lstm_seq_backward(
            np.ascontiguousarray(xs.data),
            np.ascontiguousarray(h0.data),
            np.ascontiguousarray(c0.data),
            np.ascontiguousarray(wx.data),
            np.ascontiguousarray(wh.data),
            cache["hs"],
            cache["cs"],
            cache["gates"],
            cache["tcs"],
            np.ascontiguousarray(dhs),
            np.ascontiguousarray(dc_last),
        )
        accumulate(xs, dxs)
        accumulate(h0, dh0)
        accumulate(c0, dc0)
        accumulate(wx, dwx)
        accumulate(wh, dwh)
        accumulate(b, db)

    record("lstm_sequence", (xs, h0, c0, wx, wh, b), (out_hs, out_c), backward_fn, _f)
    return out_hs, out_c


# ---------------------------------------------------------------------------
# composition helpers (no new primitives below this line)


def affine(x, w, b):
    """x @ w + b."""
    return add(matmul(x, w), b)


def dot(u, v):
    """Scalar inner product of two rank-1 tensors."""
    u, v = as_tensor(u), as_tensor(v)
    n = u.data.shape[0]
    prod = matmul(reshape(u, (1, n)), reshape(v, (n, 1)))
    return reshape(prod, ())


def cosine(u, v):
    return div(dot(u, v), mul(l2norm(u), l2norm(v)))


def stack_rows(vectors):
    """Stack rank-1 tensors of equal length into a [B, d] matrix."""
    d = vectors[0].data.shape[0]
    return concat([reshape(v, (1, d)) for v in vectors], axis=0)


def mean_of(scalars):
    """Mean of scalar tensors, as a scalar tensor."""
    return mean(concat([reshape(s, (1,)) for s in scalars], axis=0))


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
    "concat": concat,
    "split": split,
    "reshape": reshape,
    "mean": mean,
    "l1_loss": l1_loss,
    "l2norm": l2norm,
    "cross_entropy_with_softmax": cross_entropy_with_softmax,
    "batchnorm": batchnorm,
    "gather_rows": gather_rows,
    "lstm_sequence": lstm_sequence,
}
