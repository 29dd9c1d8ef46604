# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel implementations.

Same contracts as ``pykernels``; fused C loops replace per-op numpy
dispatch, which is what dominates at the small tensor sizes this package
trains with.
"""

from libc.math cimport exp, log, sqrt, tanh

import numpy as np

BACKEND = "compiled"


cdef inline double _sig(double x) noexcept nogil:
    return 1.0 / (1.0 + exp(-x))


def lstm_seq_forward(double[:, ::1] xs, double[::1] h0, double[::1] c0,
                     double[:, ::1] wx, double[:, ::1] wh, double[::1] b):
    cdef Py_ssize_t steps = xs.shape[0]
    cdef Py_ssize_t emb = xs.shape[1]
    cdef Py_ssize_t hid = h0.shape[0]
    hs_arr = np.empty((steps, hid))
    cs_arr = np.empty((steps, hid))
    gates_arr = np.empty((steps, 4 * hid))
    tcs_arr = np.empty((steps, hid))
    cdef double[:, ::1] hs = hs_arr
    cdef double[:, ::1] cs = cs_arr
    cdef double[:, ::1] gates = gates_arr
    cdef double[:, ::1] tcs = tcs_arr
    cdef double[::1] a = np.empty(4 * hid)
    cdef double[::1] h = np.array(h0, copy=True)
    cdef double[::1] c = np.array(c0, copy=True)
    cdef Py_ssize_t t, j, k
    cdef double xv, hv, iv, fv, gv, ov, cv
    with nogil:
        for t in range(steps):
            # k-outer order keeps the inner loop on contiguous weight rows
            for j in range(4 * hid):
                a[j] = b[j]
            for k in range(emb):
                xv = xs[t, k]
                for j in range(4 * hid):
                    a[j] += xv * wx[k, j]
            for k in range(hid):
                hv = h[k]
                for j in range(4 * hid):
                    a[j] += hv * wh[k, j]
            for j in range(hid):
                iv = _sig(a[j])
                fv = _sig(a[hid + j])
                gv = tanh(a[2 * hid + j])
                ov = _sig(a[3 * hid + j])
                cv = fv * c[j] + iv * gv
                gates[t, j] = iv
                gates[t, hid + j] = fv
                gates[t, 2 * hid + j] = gv
                gates[t, 3 * hid + j] = ov
                cs[t, j] = cv
                tcs[t, j] = tanh(cv)
                c[j] = cv
                h[j] = gates[t, 3 * hid + j] * tcs[t, j]
                hs[t, j] = h[j]
    return hs_arr, cs_arr, gates_arr, tcs_arr


def lstm_seq_backward(double[:, ::1] xs, double[::1] h0, double[::1] c0,
                      double[:, ::1] wx, double[:, ::1] wh,
                      double[:, ::1] hs, double[:, ::1] cs,
                      double[:, ::1] gates, double[:, ::1] tcs,
                      double[:, ::1] dhs, double[::1] dc_last):
    cdef Py_ssize_t steps = xs.shape[0]
    cdef Py_ssize_t emb = xs.shape[1]
    cdef Py_ssize_t hid = h0.shape[0]
    dxs_arr = np.empty((steps, emb))
    dwx_arr = np.zeros((emb, 4 * hid))
    dwh_arr = np.zeros((hid, 4 * hid))
    db_arr = np.zeros(4 * hid)
    dh0_arr = np.zeros(hid)
    dc0_arr = np.zeros(hid)
    cdef double[:, ::1] dxs = dxs_arr
    cdef double[:, ::1] dwx = dwx_arr
    cdef double[:, ::1] dwh = dwh_arr
    cdef double[::1] db = db_arr
    cdef double[::1] dh0 = dh0_arr
    cdef double[::1] dc0 = dc0_arr
    cdef double[::1] dh_carry = np.zeros(hid)
    cdef double[::1] dc_carry = np.array(dc_last, copy=True)
    cdef double[::1] da = np.empty(4 * hid)
    cdef Py_ssize_t t, j, k
    cdef double iv, fv, gv, ov, tc, cp, xv, hv, dh, dc, acc
    with nogil:
        for t in range(steps - 1, -1, -1):
            for j in range(hid):
                iv = gates[t, j]
                fv = gates[t, hid + j]
                gv = gates[t, 2 * hid + j]
                ov = gates[t, 3 * hid + j]
                tc = tcs[t, j]
                cp = cs[t - 1, j] if t > 0 else c0[j]
                dh = dhs[t, j] + dh_carry[j]
                dc = dc_carry[j] + dh * ov * (1.0 - tc * tc)
                da[j] = dc * gv * iv * (1.0 - iv)
                da[hid + j] = dc * cp * fv * (1.0 - fv)
                da[2 * hid + j] = dc * iv * (1.0 - gv * gv)
                da[3 * hid + j] = dh * tc * ov * (1.0 - ov)
                dc_carry[j] = dc * fv
            for k in range(emb):
                acc = 0.0
                for j in range(4 * hid):
                    acc += da[j] * wx[k, j]
                dxs[t, k] = acc
            for k in range(hid):
                acc = 0.0
                for j in range(4 * hid):
                    acc += da[j] * wh[k, j]
                dh_carry[k] = acc
            for k in range(emb):
                xv = xs[t, k]
                for j in range(4 * hid):
                    dwx[k, j] += xv * da[j]
            for k in range(hid):
                hv = hs[t - 1, k] if t > 0 else h0[k]
                for j in range(4 * hid):
                    dwh[k, j] += hv * da[j]
            for j in range(4 * hid):
                db[j] += da[j]
        for k in range(hid):
            dh0[k] = dh_carry[k]
            dc0[k] = dc_carry[k]
    return dxs_arr, dh0_arr, dc0_arr, dwx_arr, dwh_arr, db_arr


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                long t, double lr, double beta1, double beta2, double eps,
                double wd):
    cdef Py_ssize_t n = p.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef Py_ssize_t j
    cdef double gj
    with nogil:
        for j in range(n):
            gj = g[j] + wd * p[j]
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj
            p[j] -= lr * (m[j] / bc1) / (sqrt(v[j] / bc2) + eps)


def iou_matrix(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    out_arr = np.empty((n, m))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double ax1, ay1, ax2, ay2, bx1, by1, bx2, by2
    cdef double iw, ih, inter, area_a, area_b
    with nogil:
        for i in range(n):
            ax1 = a[i, 0] - a[i, 2] / 2.0
            ay1 = a[i, 1] - a[i, 3] / 2.0
            ax2 = a[i, 0] + a[i, 2] / 2.0
            ay2 = a[i, 1] + a[i, 3] / 2.0
            area_a = a[i, 2] * a[i, 3]
            for j in range(m):
                bx1 = b[j, 0] - b[j, 2] / 2.0
                by1 = b[j, 1] - b[j, 3] / 2.0
                bx2 = b[j, 0] + b[j, 2] / 2.0
                by2 = b[j, 1] + b[j, 3] / 2.0
                iw = (ax2 if ax2 < bx2 else bx2) - (ax1 if ax1 > bx1 else bx1)
                ih = (ay2 if ay2 < by2 else by2) - (ay1 if ay1 > by1 else by1)
                if iw < 0.0:
                    iw = 0.0
                if ih < 0.0:
                    ih = 0.0
                inter = iw * ih
                area_b = b[j, 2] * b[j, 3]
                out[i, j] = inter / (area_a + area_b - inter)
    return out_arr
