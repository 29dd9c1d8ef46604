"""Backend equivalence: the compiled kernels must match the numpy reference."""

import numpy as np
import pytest

from optibox._kernels import backend_name, pykernels

compiled = pytest.importorskip(
    "optibox._kernels._core", reason="compiled kernel extension not built"
)

RNG = np.random.default_rng(99)


def _lstm_inputs(T=6, E=5, H=8):
    return (
        RNG.normal(size=(T, E)),
        RNG.normal(size=H),
        RNG.normal(size=H),
        RNG.normal(size=(E, 4 * H)),
        RNG.normal(size=(H, 4 * H)),
        RNG.normal(size=4 * H),
    )


def test_backend_name_is_known():
    assert backend_name() in ("python", "compiled")


def test_lstm_forward_agreement():
    args = _lstm_inputs()
    got_py = pykernels.lstm_seq_forward(*args)
    got_c = compiled.lstm_seq_forward(*args)
    for a, b in zip(got_py, got_c):
        assert np.allclose(a, b, atol=1e-13, rtol=0.0)


def test_lstm_backward_agreement():
    xs, h0, c0, wx, wh, b = _lstm_inputs()
    fwd = pykernels.lstm_seq_forward(xs, h0, c0, wx, wh, b)
    dhs = RNG.normal(size=fwd[0].shape)
    dc_last = RNG.normal(size=h0.shape)
    got_py = pykernels.lstm_seq_backward(xs, h0, c0, wx, wh, *fwd, dhs, dc_last)
    got_c = compiled.lstm_seq_backward(xs, h0, c0, wx, wh, *fwd, dhs, dc_last)
    for a, b_ in zip(got_py, got_c):
        assert np.allclose(a, b_, atol=1e-12, rtol=0.0)


def test_adam_agreement():
    p1 = RNG.normal(size=41)
    g = RNG.normal(size=41)
    m1, v1 = np.zeros(41), np.zeros(41)
    p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
    for t in (1, 2, 3):
        pykernels.adam_update(p1, g, m1, v1, t, 1e-3, 0.9, 0.999, 1e-8, 0.02)
        compiled.adam_update(p2, g, m2, v2, t, 1e-3, 0.9, 0.999, 1e-8, 0.02)
    assert np.allclose(p1, p2, atol=1e-15, rtol=0.0)
    assert np.allclose(m1, m2, atol=1e-15, rtol=0.0)
    assert np.allclose(v1, v2, atol=1e-15, rtol=0.0)


def test_iou_matrix_agreement():
    a = np.c_[RNG.uniform(0, 100, (9, 2)), RNG.uniform(1, 40, (9, 2))]
    b = np.c_[RNG.uniform(0, 100, (7, 2)), RNG.uniform(1, 40, (7, 2))]
    assert np.allclose(
        pykernels.iou_matrix(a, b), compiled.iou_matrix(a, b), atol=1e-14, rtol=0.0
    )


def test_kernels_are_deterministic():
    args = _lstm_inputs()
    first = pykernels.lstm_seq_forward(*args)
    second = pykernels.lstm_seq_forward(*args)
    for a, b in zip(first, second):
        assert np.array_equal(a, b)
    first_c = compiled.lstm_seq_forward(*args)
    second_c = compiled.lstm_seq_forward(*args)
    for a, b in zip(first_c, second_c):
        assert np.array_equal(a, b)


def test_env_var_backend_override(tmp_path):
    import subprocess
    import sys

    code = "from optibox._kernels import backend_name; print(backend_name())"
    for value, expected in (("py", "python"), ("auto", backend_name())):
        out = subprocess.run(
            [sys.executable, "-c", code],
            env={"OPTIBOX_KERNELS": value, "PATH": "/usr/bin:/bin"},
            capture_output=True,
            text=True,
        )
        assert out.stdout.strip() == expected, out.stderr
