import math
import struct

import numpy as np
import pytest

import optibox.diffcore as dc
from optibox.diffcore import (
    BatchNormParams,
    OptimState,
    PRIMITIVES,
    Tape,
    Tensor,
    backward,
    grad_check,
    load_arrays,
    load_into,
    save_arrays,
    save_tensors,
    zero_grad,
)
from optibox.diffcore.optim import adam_step, collect, start_epoch, step_tensors
from optibox.errors import DataFormatError, NumericalError

from oracles import adam_oracle, cross_entropy_oracle, l1_oracle, softmax_oracle

RNG = np.random.default_rng(42)


# ---------------------------------------------------------------------------
# gradient integrity, one case per registered primitive


def _bn_case(ts):
    bn = BatchNormParams(4)
    bn.gamma, bn.beta = ts[1], ts[2]
    weights = Tensor(np.linspace(-1.0, 1.0, 24).reshape(6, 4))
    return dc.mean(dc.mul(dc.batchnorm(ts[0], bn, training=True), weights))


def _lstm_case(ts):
    hs, c_last = dc.lstm_sequence(ts[0], ts[1], ts[2], ts[3], ts[4], ts[5])
    return dc.add(dc.mean(hs), dc.mean(c_last))


GRAD_CASES = {
    "matmul": (lambda ts: dc.mean(dc.matmul(ts[0], ts[1])), [(3, 4), (4, 5)]),
    "add": (lambda ts: dc.mean(dc.add(ts[0], ts[1])), [(3, 4), (4,)]),
    "sub": (lambda ts: dc.mean(dc.sub(ts[0], ts[1])), [(3, 4), (1, 4)]),
    "mul": (lambda ts: dc.mean(dc.mul(ts[0], ts[1])), [(3, 4), (4,)]),
    "div": (
        lambda ts: dc.mean(dc.div(ts[0], dc.add(dc.mul(ts[1], ts[1]), Tensor(np.full((3, 4), 0.5))))),
        [(3, 4), (3, 4)],
    ),
    "relu": (lambda ts: dc.mean(dc.relu(ts[0])), [(5, 5)]),
    "sigmoid": (lambda ts: dc.mean(dc.sigmoid(ts[0])), [(6,)]),
    "tanh": (lambda ts: dc.mean(dc.tanh(ts[0])), [(6,)]),
    "softmax": (
        lambda ts: dc.mean(dc.mul(dc.softmax(ts[0]), Tensor(np.linspace(-1, 2, 7)))),
        [(7,)],
    ),
    "concat": (lambda ts: dc.mean(dc.concat([ts[0], ts[1]], axis=0)), [(2, 3), (4, 3)]),
    "split": (lambda ts: dc.mean(dc.split(ts[0], [2, 3], axis=0)[1]), [(5, 4)]),
    "reshape": (lambda ts: dc.mean(dc.reshape(ts[0], (12,))), [(3, 4)]),
    "mean": (lambda ts: dc.mean(ts[0]), [(6,)]),
    "l1_loss": (lambda ts: dc.l1_loss(ts[0], ts[1]), [(8,), (8,)]),
    "l2norm": (lambda ts: dc.l2norm(ts[0]), [(8,)]),
    "cross_entropy_with_softmax": (
        lambda ts: dc.cross_entropy_with_softmax(ts[0], 2),
        [(6,)],
    ),
    "batchnorm": (_bn_case, [(6, 4), (4,), (4,)]),
    "gather_rows": (
        lambda ts: dc.mean(dc.gather_rows(ts[0], np.array([0, 2, 2, 1]))),
        [(4, 3)],
    ),
    "lstm_sequence": (_lstm_case, [(4, 3), (6,), (6,), (3, 24), (6, 24), (24,)]),
}


def test_grad_cases_cover_registry():
    assert set(GRAD_CASES) == set(PRIMITIVES)


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_gradients(name):
    fn, shapes = GRAD_CASES[name]
    arrs = [RNG.normal(size=s) for s in shapes]
    assert grad_check(fn, arrs) < 1e-4


# ---------------------------------------------------------------------------
# forward-value oracles


def test_softmax_known_values():
    logits = [0.0, math.log(2.0), math.log(3.0)]
    got = dc.softmax(Tensor(np.array(logits))).data
    assert got == pytest.approx([1 / 6, 2 / 6, 3 / 6])
    assert got == pytest.approx(softmax_oracle(logits))
    assert float(got.sum()) == pytest.approx(1.0, abs=1e-12)


def test_softmax_max_subtraction_handles_large_logits():
    got = dc.softmax(Tensor(np.array([1000.0, 1000.0]))).data
    assert got == pytest.approx([0.5, 0.5])


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericalError):
        dc.softmax(Tensor(np.array([0.0, float("nan")])))


def test_cross_entropy_uniform_is_log_n():
    n = 8
    loss = dc.cross_entropy_with_softmax(Tensor(np.zeros(n)), 3)
    assert loss.item() == pytest.approx(math.log(n))


def test_cross_entropy_matches_oracle():
    logits = [0.2, -1.0, 0.7, 0.1]
    loss = dc.cross_entropy_with_softmax(Tensor(np.array(logits)), 2)
    assert loss.item() == pytest.approx(cross_entropy_oracle(logits, 2))
    with pytest.raises(ValueError):
        dc.cross_entropy_with_softmax(Tensor(np.array(logits)), 4)


def test_l1_matches_oracle():
    a, b = [1.0, -2.0, 0.5], [0.0, 1.0, 0.5]
    got = dc.l1_loss(Tensor(np.array(a)), Tensor(np.array(b)))
    assert got.item() == pytest.approx(l1_oracle(a, b))


def test_l2norm_zero_vector_has_zero_grad():
    x = Tensor(np.zeros(5))
    with Tape() as tape:
        out = dc.l2norm(x)
    backward(out, tape)
    assert out.item() == 0.0
    assert np.all(x.grad == 0.0)


def test_matmul_shape_errors():
    with pytest.raises(ValueError):
        dc.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        dc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_split_validates_sizes():
    with pytest.raises(ValueError):
        dc.split(Tensor(np.zeros((5, 2))), [2, 2], axis=0)


# ---------------------------------------------------------------------------
# tape mechanics


def test_ops_run_without_tape():
    x = Tensor(np.array([1.0, -1.0]))
    y = dc.relu(x)
    assert y.grad is None
    assert np.all(y.data == [1.0, 0.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        y = dc.relu(x)
    with pytest.raises(ValueError):
        backward(y, tape)


def test_gradients_accumulate_across_uses():
    x = Tensor(np.array(2.0))
    with Tape() as tape:
        y = dc.add(x, x)  # dy/dx = 2
    backward(y, tape)
    assert x.grad == pytest.approx(2.0)
    # A second sweep without reset re-seeds the loss (grad 1 -> 2) and then
    # adds d(2*loss)/dx = 4 on top of the stored 2.
    backward(y, tape)
    assert x.grad == pytest.approx(6.0)
    zero_grad([x])
    assert x.grad is None


def test_replay_recomputes_from_new_leaf_values():
    x = Tensor(np.array([1.0, 2.0]))
    w = Tensor(np.array([[1.0], [1.0]]))
    with Tape() as tape:
        y = dc.matmul(dc.reshape(x, (1, 2)), w)
    assert float(y.data[0, 0]) == pytest.approx(3.0)
    x.data = np.array([5.0, 7.0])
    tape.replay()
    assert float(y.data[0, 0]) == pytest.approx(12.0)


def test_nested_tapes_record_independently():
    x = Tensor(np.ones(2))
    with Tape() as outer:
        dc.relu(x)
        with Tape() as inner:
            dc.relu(x)
            dc.relu(x)
        dc.relu(x)
    assert len(inner) == 2
    assert len(outer) == 2


# ---------------------------------------------------------------------------
# batch normalization semantics


def test_batchnorm_train_output_is_standardized():
    bn = BatchNormParams(3)
    x = RNG.normal(2.0, 3.0, size=(64, 3))
    y = dc.batchnorm(Tensor(x), bn, training=True).data
    assert y.mean(axis=0) == pytest.approx(np.zeros(3), abs=1e-10)
    # Normalization uses the biased batch variance.
    assert y.std(axis=0) == pytest.approx(np.ones(3), abs=1e-6)


def test_batchnorm_running_stats_update():
    bn = BatchNormParams(2, momentum=0.1)
    x = np.array([[1.0, 10.0], [3.0, 14.0]])
    dc.batchnorm(Tensor(x), bn, training=True)
    # Buffers blend 10% of the batch statistics (unbiased variance).
    assert bn.running_mean == pytest.approx(0.9 * 0.0 + 0.1 * np.array([2.0, 12.0]))
    assert bn.running_var == pytest.approx(0.9 * 1.0 + 0.1 * np.array([2.0, 8.0]))


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNormParams(1)
    bn.running_mean = np.array([4.0])
    bn.running_var = np.array([9.0])
    x = np.array([[7.0]])
    y = dc.batchnorm(Tensor(x), bn, training=False).data
    assert y[0, 0] == pytest.approx((7.0 - 4.0) / math.sqrt(9.0 + bn.eps))


def test_batchnorm_train_needs_two_rows():
    bn = BatchNormParams(2)
    with pytest.raises(ValueError):
        dc.batchnorm(Tensor(np.ones((1, 2))), bn, training=True)


def test_batchnorm_replay_does_not_touch_running_stats():
    bn = BatchNormParams(2)
    x = Tensor(RNG.normal(size=(8, 2)))
    with Tape() as tape:
        y = dc.batchnorm(x, bn, training=True)
    mean_after_record = bn.running_mean.copy()
    var_after_record = bn.running_var.copy()
    x.data = RNG.normal(size=(8, 2)) + 5.0
    tape.replay()
    assert np.array_equal(bn.running_mean, mean_after_record)
    assert np.array_equal(bn.running_var, var_after_record)
    # The replayed output still standardizes the new batch.
    assert y.data.mean(axis=0) == pytest.approx(np.zeros(2), abs=1e-10)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_matches_scalar_oracle():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.1, 0.3, -0.2])
    state = OptimState(lr=0.01, weight_decay=0.04)
    params = {"p": p}
    want_p, want_m, want_v = adam_oracle(
        list(p), list(g), [0, 0, 0], [0, 0, 0], 1, 0.01, 0.9, 0.999, 1e-8, 0.04
    )
    adam_step(params, {"p": g}, state)
    assert p == pytest.approx(np.array(want_p), abs=1e-15)
    assert state.m["p"] == pytest.approx(np.array(want_m))
    assert state.v["p"] == pytest.approx(np.array(want_v))
    # Second step with a different gradient, continuing the moments.
    g2 = np.array([-0.05, 0.2, 0.0])
    want_p2, _, _ = adam_oracle(
        want_p, list(g2), want_m, want_v, 2, 0.01, 0.9, 0.999, 1e-8, 0.04
    )
    adam_step(params, {"p": g2}, state)
    assert p == pytest.approx(np.array(want_p2), abs=1e-14)
    assert state.step_count == 2


def test_milestones_scale_lr_at_epoch_start():
    state = OptimState(lr=1e-3, milestones={2: 0.1, 4: 0.5})
    seen = []
    for epoch in (1, 2, 3, 4):
        start_epoch(state, epoch)
        seen.append(state.lr)
    assert seen == pytest.approx([1e-3, 1e-4, 1e-4, 5e-5])


def test_step_tensors_uses_grad_fields():
    t = Tensor(np.array([1.0, 2.0]))
    t.grad = np.array([1.0, 1.0])
    state = OptimState(lr=0.1)
    step_tensors({"t": t}, state)
    # First Adam step moves each coordinate by about lr against the gradient.
    assert t.data == pytest.approx([0.9, 1.9], abs=1e-6)


def test_adam_requires_contiguous_views():
    base = np.zeros((4, 4))
    view = base[:, ::2]  # non-contiguous
    state = OptimState(lr=0.1)
    with pytest.raises(ValueError):
        adam_step({"v": view}, {"v": np.zeros_like(view)}, state)


def test_collect_flattens_nested_names():
    x, y, b = Tensor(np.zeros(1)), Tensor(np.zeros(2)), Tensor(np.zeros(3))
    tree = {"a": {"x": x, "y": y}, "b": b}
    assert collect(tree) == {"a.x": x, "a.y": y, "b": b}


# ---------------------------------------------------------------------------
# checkpoint serialization


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "w.ckpt"
    arrays = {
        "w": RNG.normal(size=(3, 4)),
        "b": RNG.normal(size=(4,)),
        "s": np.array(2.5),
    }
    save_arrays(path, arrays)
    back = load_arrays(path)
    assert set(back) == set(arrays)
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
        assert back[k].dtype == np.float64


def test_checkpoint_tensor_round_trip(tmp_path):
    path = tmp_path / "t.ckpt"
    named = {"w": Tensor(RNG.normal(size=(2, 2))), "b": Tensor(np.zeros(2))}
    save_tensors(path, named)
    fresh = {"w": Tensor(np.zeros((2, 2))), "b": Tensor(np.ones(2))}
    load_into(path, fresh)
    assert np.array_equal(fresh["w"].data, named["w"].data)
    assert np.array_equal(fresh["b"].data, named["b"].data)


def test_checkpoint_rejects_wrong_names(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(path, {"w": Tensor(np.zeros(2))})
    with pytest.raises(DataFormatError):
        load_into(path, {"w": Tensor(np.zeros(2)), "extra": Tensor(np.zeros(1))})
    with pytest.raises(DataFormatError):
        load_into(path, {"w": Tensor(np.zeros(3))})  # shape mismatch


def test_checkpoint_corruption_errors(tmp_path):
    path = tmp_path / "c.ckpt"
    save_arrays(path, {"w": np.ones(4)})
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-5])
    with pytest.raises(DataFormatError):
        load_arrays(tmp_path / "trunc.ckpt")
    (tmp_path / "trail.ckpt").write_bytes(raw + b"xx")
    with pytest.raises(DataFormatError):
        load_arrays(tmp_path / "trail.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataFormatError):
        load_arrays(tmp_path / "magic.ckpt")
    bad_version = raw[:4] + struct.pack("<I", 999) + raw[8:]
    (tmp_path / "ver.ckpt").write_bytes(bad_version)
    with pytest.raises(DataFormatError):
        load_arrays(tmp_path / "ver.ckpt")


# ---------------------------------------------------------------------------
# composed-graph check: a small two-layer network against finite differences


def test_composed_network_gradient():
    def net(ts):
        x, w1, b1, w2, b2 = ts
        h = dc.relu(dc.affine(x, w1, b1))
        z = dc.affine(h, w2, b2)
        return dc.cross_entropy_with_softmax(dc.reshape(z, (3,)), 1)

    arrs = [
        RNG.normal(size=(1, 5)),
        RNG.normal(size=(5, 4)),
        RNG.normal(size=(4,)),
        RNG.normal(size=(4, 3)),
        RNG.normal(size=(3,)),
    ]
    assert grad_check(net, arrs) < 1e-4
