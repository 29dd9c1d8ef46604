import numpy as np
import pytest

from optibox.dataio import Query, SampleRecord
from optibox.errors import NumericalError
from optibox.evalkit import evaluate
from optibox.geometry import Box, iou
from optibox.grounder import init_grounder
from optibox.refinement import init_refiner
from optibox.synthdata import SceneConfig, config_vocabulary
from optibox.train import (
    STAGES,
    TrainConfig,
    TrainHistory,
    apply_encoder_init,
    apply_projection_init,
    build_regression_pairs,
    grid_search,
    train_grounder,
    train_optibox,
    train_optibox_independent,
)
from optibox import textenc

VOCAB = len(config_vocabulary(SceneConfig()))
FEAT = SceneConfig().feat_dim


def _gmodel(seed=0):
    return init_grounder(vocab_size=VOCAB, embed_dim=8, query_hidden=12,
                         feat_dim=FEAT, proj_dim=8,
                         rng=np.random.default_rng(seed))


def _rmodel(seed=0):
    return init_refiner(vocab_size=VOCAB, embed_dim=8, query_hidden=12,
                        feat_dim=FEAT, channels=FEAT, local_dim=8,
                        refine_dim=8, rng=np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# configuration and history


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(annotation_fraction=1.5)
    with pytest.raises(ValueError):
        TrainConfig(stage="finetune")
    with pytest.raises(ValueError):
        TrainConfig(milestones={0: 0.1})
    cfg = TrainConfig(milestones={"25": "0.1", 15: 0.1})
    assert cfg.milestones == {15: 0.1, 25: 0.1}
    assert list(cfg.milestones) == [15, 25]
    for stage in STAGES:
        assert TrainConfig(stage=stage).stage == stage


def test_train_config_replace_is_functional():
    cfg = TrainConfig(lr=1e-3)
    other = cfg.replace(lr=5e-4, epochs=3)
    assert (other.lr, other.epochs) == (5e-4, 3)
    assert (cfg.lr, cfg.epochs) == (1e-3, 25)


def test_history_best_epoch_and_csv():
    h = TrainHistory()
    for loss, acc, lr in [(1.0, 50.0, 1e-3), (0.5, 80.0, 1e-3), (0.4, 80.0, 1e-4)]:
        h.append(loss, acc, lr)
    assert h.best_epoch == 1  # first maximal accuracy wins
    assert h.to_csv() == (
        "epoch,loss,val_acc,lr\n"
        "1,1.000000,50.00,0.001\n"
        "2,0.500000,80.00,0.001\n"
        "3,0.400000,80.00,0.0001\n"
    )
    with pytest.raises(ValueError):
        TrainHistory().best_epoch


# ---------------------------------------------------------------------------
# regression-pair gating


def test_build_regression_pairs_brute_force(tiny_dataset):
    records = tiny_dataset[2][:6]
    for lo, hi in [(0.3, None), (0.3, 0.5), (0.5, None), (0.0, 0.3)]:
        got = build_regression_pairs(records, lo, hi)
        want = []
        for ri, rec in enumerate(records):
            for pi, prop in enumerate(rec.proposals):
                for qi, q in enumerate(rec.queries):
                    v = iou(prop, q.gt)
                    if v >= lo and (hi is None or v < hi):
                        want.append((ri, pi, qi, v))
        assert got == want


def test_build_regression_pairs_gate_edges():
    gt = Box(50, 50, 2, 2)
    rec = SampleRecord(
        image_id="x", width=100, height=100,
        proposals=[Box(50, 50, 2, 1)],  # IoU with gt is exactly 0.5
        features=np.zeros((1, 4)),
        queries=[Query("x#0", [4], gt)],
    )
    assert build_regression_pairs([rec], 0.5, None) == [(0, 0, 0, 0.5)]
    assert build_regression_pairs([rec], 0.5, None, strict=True) == []
    assert build_regression_pairs([rec], 0.3, 0.5) == []  # upper gate exclusive


# ---------------------------------------------------------------------------
# grounder training loop


def test_train_grounder_restores_best_epoch(tiny_dataset):
    train, val, _, _ = tiny_dataset
    cfg = TrainConfig(epochs=3, batch_size=8, lr=1e-3, seed=0)
    model, history = train_grounder(train[:4], val[:2], cfg, _gmodel())
    assert len(history.losses) == 3
    best = max(history.val_accuracies)
    assert history.val_accuracies[history.best_epoch] == best
    assert evaluate(val[:2], model).selection_accuracy == best


def test_train_grounder_milestones_drop_lr(tiny_dataset):
    train, val, _, _ = tiny_dataset
    cfg = TrainConfig(epochs=3, batch_size=8, lr=1e-3, milestones={2: 0.1}, seed=0)
    _, history = train_grounder(train[:3], val[:2], cfg, _gmodel())
    assert history.lrs == pytest.approx([1e-3, 1e-4, 1e-4])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # inf - inf is the point
def test_train_grounder_aborts_on_non_finite(tiny_dataset):
    import copy
    train, val, _, _ = tiny_dataset
    poisoned = copy.deepcopy(train[:3])
    poisoned[0].features[0, 0] = np.inf
    cfg = TrainConfig(epochs=1, batch_size=8, seed=0)
    with pytest.raises(NumericalError):
        train_grounder(poisoned, val[:2], cfg, _gmodel())


def test_classification_only_needs_labels(tiny_dataset):
    import copy
    train, val, _, _ = tiny_dataset
    unlabeled = copy.deepcopy(train[:3])
    for rec in unlabeled:
        rec.labeled = False
    cfg = TrainConfig(epochs=1, batch_size=8, use_semantic=False, seed=0)
    with pytest.raises(ValueError):
        train_grounder(unlabeled, val[:2], cfg, _gmodel())


# ---------------------------------------------------------------------------
# staged refinement


def test_train_optibox_freezes_the_grounder(tiny_dataset):
    train, val, _, _ = tiny_dataset
    cfg = TrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=0, stage="optibox")
    gmodel, _ = train_grounder(
        train[:4], val[:2], TrainConfig(epochs=2, batch_size=8, seed=0), _gmodel()
    )
    frozen = {k: v.copy() for k, v in gmodel.state_arrays().items()}
    rmodel = _rmodel()
    loose = {k: v.copy() for k, v in rmodel.state_arrays().items()}

    rmodel, history = train_optibox(train[:4], val[:2], cfg, gmodel, rmodel)
    after = gmodel.state_arrays()
    for name, arr in frozen.items():
        assert np.array_equal(arr, after[name]), f"grounder drifted at {name}"
    assert any(
        not np.array_equal(loose[k], v) for k, v in rmodel.state_arrays().items()
    )
    assert len(history.losses) == 2
    with pytest.raises(ValueError):
        train_optibox(train[:4], val[:2], cfg, None, _rmodel())


# ---------------------------------------------------------------------------
# independent regression experiment


def test_independent_refiner_smoke(tiny_dataset):
    train, val, test, _ = tiny_dataset
    cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-3, seed=0,
                      stage="optibox_independent", pair_iou_min=0.3)
    model, history, stats = train_optibox_independent(
        train[:4], val[:2], test[:2], cfg, _rmodel()
    )
    assert len(history.losses) == 2
    assert set(stats) == {"fraction_reaching", "median_delta_iou", "n_pairs"}
    assert stats["n_pairs"] == len(
        build_regression_pairs(test[:2], cfg.pair_iou_min, cfg.pair_iou_max)
    )
    assert 0.0 <= stats["fraction_reaching"] <= 100.0


def test_independent_refiner_requires_pairs_and_model(tiny_dataset):
    train, val, test, _ = tiny_dataset
    cfg = TrainConfig(epochs=1, pair_iou_min=0.999999, stage="optibox_independent")
    with pytest.raises(ValueError):
        train_optibox_independent(train[:3], val[:2], test[:2], cfg, _rmodel())
    cfg2 = TrainConfig(epochs=1, stage="optibox_independent")
    with pytest.raises(ValueError):
        train_optibox_independent(train[:3], val[:2], test[:2], cfg2, None)


# ---------------------------------------------------------------------------
# grid search


def test_grid_search_tie_breaks_toward_smaller_values(tiny_dataset):
    train, val, _, _ = tiny_dataset
    # lr=0 makes every cell train to the same model, forcing a full tie.
    cfg = TrainConfig(epochs=1, batch_size=8, lr=0.0, seed=0)
    lam, wd, rows = grid_search(
        [100.0, 10.0], [0.01, 0.0005], train[:3], val[:2], cfg, _gmodel
    )
    assert (lam, wd) == (10.0, 0.0005)
    assert [(l, w) for l, w, _ in rows] == [
        (10.0, 0.0005), (100.0, 0.0005), (10.0, 0.01), (100.0, 0.01)
    ]
    accs = {a for _, _, a in rows}
    assert len(accs) == 1  # the tie really happened
    with pytest.raises(ValueError):
        grid_search([], [0.01], train[:3], val[:2], cfg, _gmodel)


# ---------------------------------------------------------------------------
# pretraining hand-off


def test_apply_encoder_init_copies(rng):
    model = _gmodel()
    table = textenc.init_embedding(VOCAB, 8, rng)
    encoder = textenc.init_recurrent(8, 12, rng)
    apply_encoder_init(model, table, encoder)
    assert np.array_equal(model.table.data, table.data)
    assert np.array_equal(model.encoder.wx.data, encoder.wx.data)
    table.data[0, 0] += 1.0  # the copy must be independent
    assert model.table.data[0, 0] != table.data[0, 0]


def test_apply_projection_init_copies(rng):
    from optibox.diffcore import Tensor

    model = _gmodel()
    params = {
        "w_v": Tensor(rng.normal(size=(FEAT, 8))),
        "b_v": Tensor(rng.normal(size=8)),
        "w_q": Tensor(rng.normal(size=(12, 8))),
        "b_q": Tensor(rng.normal(size=8)),
    }
    apply_projection_init(model, params)
    assert np.array_equal(model.params.w_v.data, params["w_v"].data)
    assert np.array_equal(model.params.b_q.data, params["b_q"].data)
    params["w_v"].data[0, 0] += 1.0  # the copy must be independent
    assert model.params.w_v.data[0, 0] != params["w_v"].data[0, 0]
