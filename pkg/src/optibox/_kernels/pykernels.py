"""Pure-numpy kernel implementations.

Reference semantics for the hot inner loops; the compiled backend in
``_core.pyx`` mirrors these signatures exactly. Gate layout along the 4H
axis is (input, forget, candidate, output).
"""

import numpy as np

BACKEND = "python"


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_seq_forward(xs, h0, c0, wx, wh, b):
    """Run a gated recurrent cell over a whole sequence.

    Args:
        xs: [T, E] input vectors.
        h0, c0: [H] initial hidden and cell state.
        wx: [E, 4H] input weights, wh: [H, 4H] recurrent weights, b: [4H].

    Returns:
        (hs [T, H], cs [T, H], gates [T, 4H], tcs [T, H]) where gates holds
        post-activation (i, f, g, o) and tcs is tanh of each cell state,
        both kept for the backward pass.
    """
    steps = xs.shape[0]
    hid = h0.shape[0]
    hs = np.empty((steps, hid))
    cs = np.empty((steps, hid))
    gates = np.empty((steps, 4 * hid))
    tcs = np.empty((steps, hid))
    h, c = h0, c0
    for t in range(steps):
        a = xs[t] @ wx + h @ wh + b
        i = _sigmoid(a[:hid])
        f = _sigmoid(a[hid : 2 * hid])
        g = np.tanh(a[2 * hid : 3 * hid])
        o = _sigmoid(a[3 * hid :])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[t, :hid] = i
        gates[t, hid : 2 * hid] = f
        gates[t, 2 * hid : 3 * hid] = g
        gates[t, 3 * hid :] = o
        cs[t] = c
        tcs[t] = tc
        hs[t] = h
    return hs, cs, gates, tcs


def lstm_seq_backward(xs, h0, c0, wx, wh, hs, cs, gates, tcs, dhs, dc_last):
    """Reverse sweep matching :func:`lstm_seq_forward`.

    ``dhs`` carries the upstream gradient on every hidden state, ``dc_last``
    the gradient on the final cell state. Returns
    (dxs, dh0, dc0, dwx, dwh, db).
    """
    steps, hid = hs.shape
    dxs = np.empty_like(xs)
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * hid)
    dh_carry = np.zeros(hid)
    dc_carry = dc_last.copy()
    da = np.empty(4 * hid)
    for t in range(steps - 1, -1, -1):
        i = gates[t, :hid]
        f = gates[t, hid : 2 * hid]
        g = gates[t, 2 * hid : 3 * hid]
        o = gates[t, 3 * hid :]
        tc = tcs[t]
        c_prev = cs[t - 1] if t > 0 else c0
        h_prev = hs[t - 1] if t > 0 else h0
        dh = dhs[t] + dh_carry
        dc = dc_carry + dh * o * (1.0 - tc * tc)
        da[:hid] = dc * g * i * (1.0 - i)
        da[hid : 2 * hid] = dc * c_prev * f * (1.0 - f)
        da[2 * hid : 3 * hid] = dc * i * (1.0 - g * g)
        da[3 * hid :] = dh * tc * o * (1.0 - o)
        dc_carry = dc * f
        dxs[t] = da @ wx.T
        dh_carry = da @ wh.T
        dwx += np.outer(xs[t], da)
        dwh += np.outer(h_prev, da)
        db += da
    return dxs, dh_carry, dc_carry, dwx, dwh, db


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    """One fused Adam step, in place on flat views ``p``, ``m``, ``v``.

    Weight decay is L2-coupled: ``wd * p`` is added to the gradient before
    the moment updates. ``t`` is the 1-based step count.
    """
    if wd != 0.0:
        g = g + wd * p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def iou_matrix(a, b):
    """Pairwise IoU between center-form box arrays [n, 4] and [m, 4]."""
    ax1 = a[:, 0] - a[:, 2] / 2.0
    ay1 = a[:, 1] - a[:, 3] / 2.0
    ax2 = a[:, 0] + a[:, 2] / 2.0
    ay2 = a[:, 1] + a[:, 3] / 2.0
    bx1 = b[:, 0] - b[:, 2] / 2.0
    by1 = b[:, 1] - b[:, 3] / 2.0
    bx2 = b[:, 0] + b[:, 2] / 2.0
    by2 = b[:, 1] + b[:, 3] / 2.0
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    return inter / (area_a + area_b - inter)
