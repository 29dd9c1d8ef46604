"""Training loops: staged grounding + refinement, the independent
regression experiment, and hyperparameter grid search.

Stage order is enforced — refinement training requires a trained grounding
model, whose parameters stay frozen (bitwise) while the refiner learns.
Every loop aborts with a diagnostic on a non-finite loss, selects its
checkpoint by argmax of validation accuracy, and is a pure function of
(data, config): all shuffling and init flows from the config seed.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import evalkit, grounder, refinement
from .diffcore import Tensor
from .errors import NumericalError
from .geometry import best_target_proposal, encode_offset, iou
from .refinement import NO_MASK

STAGES = ("autoencoder", "projections", "grounder", "optibox", "optibox_independent")


@dataclass
class TrainConfig:
    lam: float = 100.0  # joint-loss weight on the classification term
    weight_decay: float = 0.0005
    lr: float = 1e-3
    milestones: dict = field(default_factory=dict)  # 1-based epoch -> factor
    batch_size: int = 128
    epochs: int = 25
    annotation_fraction: float = 1.0
    seed: int = 0
    stage: str = "grounder"
    use_semantic: bool = True  # False trains on the classification term only
    pair_iou_min: float = 0.3  # regression-pair gate (inclusive)
    pair_iou_max: float = None  # exclusive upper gate; None = unbounded
    iterations: int = 1  # refinement applications at eval time

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("loss weight must be non-negative")
        if not 0.0 <= self.annotation_fraction <= 1.0:
            raise ValueError("annotation fraction must lie in [0, 1]")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if any(int(k) < 1 for k in self.milestones):
            raise ValueError("milestone epochs are 1-based and must be >= 1")
        self.milestones = dict(
            sorted((int(k), float(v)) for k, v in self.milestones.items())
        )

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    val_accuracies: list = field(default_factory=list)
    lrs: list = field(default_factory=list)

    @property
    def best_epoch(self):
        """0-based index of the first maximal validation accuracy."""
        if not self.val_accuracies:
            raise ValueError("empty history has no best epoch")
        return int(np.argmax(self.val_accuracies))

    def append(self, loss, val_acc, lr):
        self.losses.append(float(loss))
        self.val_accuracies.append(float(val_acc))
        self.lrs.append(float(lr))

    def to_csv(self):
        lines = ["epoch,loss,val_acc,lr"]
        for i, (l, a, r) in enumerate(
            zip(self.losses, self.val_accuracies, self.lrs), start=1
        ):
            lines.append(f"{i},{l:.6f},{a:.2f},{r:g}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv())


def _check_finite(value, where):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss at {where}: {value!r}")


def _restore(model, arrays):
    for name, t in model.trainables().items():
        t.data = arrays[name].copy()


def _snapshot(model):
    return {k: v.copy() for k, v in model.state_arrays().items()}


# ---------------------------------------------------------------------------
# stage: grounder


def _grounding_samples(records):
    """Flatten records into (token_ids, features, target-or-None) triples.

    Unlabeled images always yield target None; labeled queries whose gt has
    no qualifying proposal also fall back to None (they still carry the
    reconstruction term).
    """
    samples = []
    for rec in records:
        for q in rec.queries:
            target = None
            if rec.labeled:
                target = best_target_proposal(rec.proposals, q.gt)
            samples.append((q.ids, rec.features, target))
    return samples


def train_grounder(train_records, val_records, config, model):
    """Semi-supervised grounding training; returns (model, history).

    Labeled samples contribute lam * L_cls + L_sem, unlabeled ones L_sem
    alone (both averaged per batch). The returned model carries the
    parameters of the best-validation epoch.
    """
    samples = _grounding_samples(train_records)
    n_labeled = sum(1 for s in samples if s[2] is not None)
    if not config.use_semantic and n_labeled == 0:
        raise ValueError(
            "classification-only training requested but no sample has a usable label"
        )

    named = model.trainables()
    state = dc.OptimState(
        lr=config.lr,
        weight_decay=config.weight_decay,
        milestones=dict(config.milestones),
    )
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best = None

    for epoch in range(1, config.epochs + 1):
        dc.start_epoch(state, epoch)
        order = rng.permutation(len(samples))
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[lo : lo + config.batch_size]]
            if len(batch) < 2:
                continue  # batch statistics need at least two rows
            with dc.Tape() as tape:
                if config.use_semantic:
                    loss, _, _ = grounder.batch_forward(batch, model, config.lam)
                else:
                    labeled = [s for s in batch if s[2] is not None]
                    if len(labeled) < 2:
                        continue
                    _, cls_losses, _ = grounder.batch_forward(
                        labeled, model, config.lam
                    )
                    loss = dc.scale(
                        dc.mean_of([c for c in cls_losses if c is not None]),
                        config.lam,
                    )
            _check_finite(loss.item(), f"grounder epoch {epoch}")
            dc.zero_grad(named.values())
            dc.backward(loss, tape)
            dc.step_tensors(named, state)
            epoch_loss += loss.item()
            n_batches += 1
        val_acc = evalkit.evaluate(val_records, model).selection_accuracy
        history.append(epoch_loss / max(n_batches, 1), val_acc, state.lr)
        if best is None or val_acc > best[0]:
            best = (val_acc, _snapshot(model))

    _restore(model, best[1])
    model.params.bn_x.running_mean = best[1]["bn_x.running_mean"].copy()
    model.params.bn_x.running_var = best[1]["bn_x.running_var"].copy()
    model.params.bn_h.running_mean = best[1]["bn_h.running_mean"].copy()
    model.params.bn_h.running_var = best[1]["bn_h.running_var"].copy()
    return model, history


# ---------------------------------------------------------------------------
# stage: refinement on grounder selections


def _refine_forward(x_arr, box, q_ids, gmap, rmodel, bounds, mask):
    """Differentiable refinement forward; returns the offset tensor."""
    x = Tensor(np.asarray(x_arr, dtype=np.float64))
    if mask.drop_query:
        q = Tensor(np.zeros(rmodel.encoder.hidden))
    else:
        from . import textenc

        q = textenc.encode_tokens(q_ids, rmodel.table, rmodel.encoder)
    r_vec = refinement.box_to_vec(box, bounds)
    if mask.drop_global:
        channels = rmodel.params.w_in.shape[0] - rmodel.params.w_local.shape[0]
        c = Tensor(np.zeros(channels))
    else:
        c, _ = refinement.global_attention(gmap, x, r_vec, q, rmodel.params, mask)
    return refinement.refine(x, r_vec, q, c, rmodel.params, mask)


def _train_refiner_on_pairs(pairs, val_fn, config, rmodel, mask):
    """Shared loop: l1 offset regression over (x, box, q, gmap, target) pairs."""
    named = rmodel.trainables()
    state = dc.OptimState(
        lr=config.lr,
        weight_decay=config.weight_decay,
        milestones=dict(config.milestones),
    )
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best = None
    for epoch in range(1, config.epochs + 1):
        dc.start_epoch(state, epoch)
        order = rng.permutation(len(pairs))
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[lo : lo + config.batch_size]]
            with dc.Tape() as tape:
                losses = []
                for x_arr, box, q_ids, gmap, target, bounds in batch:
                    t_pred = _refine_forward(
                        x_arr, box, q_ids, gmap, rmodel, bounds, mask
                    )
                    losses.append(refinement.optibox_loss(t_pred, target))
                loss = dc.mean_of(losses)
            _check_finite(loss.item(), f"refinement epoch {epoch}")
            dc.zero_grad(named.values())
            dc.backward(loss, tape)
            dc.step_tensors(named, state)
            epoch_loss += loss.item()
            n_batches += 1
        val_acc = val_fn(rmodel)
        history.append(epoch_loss / max(n_batches, 1), val_acc, state.lr)
        if best is None or val_acc > best[0]:
            best = (val_acc, _snapshot(rmodel))
    _restore(rmodel, best[1])
    return rmodel, history


def train_optibox(train_records, val_records, config, gmodel, rmodel, mask=NO_MASK):
    """Refinement training on the frozen grounder's selected proposals.

    For every training query the grounder picks a source box; the target is
    the offset from that box to the query's gt. Grounder parameters are
    never stepped (bitwise identical before and after).
    """
    if gmodel is None:
        raise ValueError(
            "refinement training requires a trained grounding model checkpoint"
        )
    pairs = []
    for rec in train_records:
        bounds = (rec.width, rec.height)
        for q in rec.queries:
            box_sel, out = grounder.ground(q.ids, rec, gmodel)
            pairs.append(
                (
                    rec.features[out.selected],
                    box_sel,
                    q.ids,
                    rec.gmap,
                    encode_offset(box_sel, q.gt),
                    bounds,
                )
            )

    def val_fn(model):
        return evalkit.evaluate(
            val_records, gmodel, refiner=model, mask=mask
        ).accuracy

    return _train_refiner_on_pairs(pairs, val_fn, config, rmodel, mask)


# ---------------------------------------------------------------------------
# stage: independent regression experiment


def build_regression_pairs(records, lo=0.3, hi=None, strict=False):
    """All (proposal, query) pairs whose IoU clears the gate.

    Inclusive at ``lo`` by default (strict=True uses >). ``hi`` bounds the
    IoU from above, exclusively; None leaves it open. Returns tuples of
    (record index, proposal index, query index, iou).
    """
    pairs = []
    for ri, rec in enumerate(records):
        for pi, prop in enumerate(rec.proposals):
            for qi, q in enumerate(rec.queries):
                v = iou(prop, q.gt)
                ok = v > lo if strict else v >= lo
                if ok and (hi is None or v < hi):
                    pairs.append((ri, pi, qi, v))
    return pairs


def _materialise_pairs(records, index_pairs):
    out = []
    for ri, pi, qi, _ in index_pairs:
        rec = records[ri]
        prop = rec.proposals[pi]
        q = rec.queries[qi]
        out.append(
            (
                rec.features[pi],
                prop,
                q.ids,
                rec.gmap,
                encode_offset(prop, q.gt),
                (rec.width, rec.height),
            )
        )
    return out


def _refined_pair_stats(records, index_pairs, rmodel, mask, iterations=1):
    """Refine every pair; report reach@0.5 (percent) and median ΔIoU."""
    deltas, hits = [], 0
    for ri, pi, qi, before_iou in index_pairs:
        rec = records[ri]
        refined = refinement.refine_box(
            rec.proposals[pi],
            rec.features[pi],
            rec.gmap,
            rec.queries[qi].ids,
            rmodel,
            bounds=(rec.width, rec.height),
            iterations=iterations,
            mask=mask,
        )
        after_iou = iou(refined, rec.queries[qi].gt)
        deltas.append(after_iou - before_iou)
        hits += after_iou >= 0.5
    return {
        "fraction_reaching": evalkit.round_pct(100.0 * hits / len(index_pairs)),
        "median_delta_iou": float(np.median(deltas)),
        "n_pairs": len(index_pairs),
    }


def train_optibox_independent(
    train_records, val_records, test_records, config, rmodel=None, mask=NO_MASK
):
    """Regression over all qualifying (proposal, gt) pairs, no grounder.

    Pairs are gated by config.pair_iou_min/max. Validation accuracy is the
    percentage of refined val pairs reaching IoU 0.5. Returns
    (model, history, test statistics of the best checkpoint).
    """
    train_pairs_idx = build_regression_pairs(
        train_records, config.pair_iou_min, config.pair_iou_max
    )
    if not train_pairs_idx:
        raise ValueError("no proposal/gt pairs clear the IoU gate; nothing to train")
    val_pairs_idx = build_regression_pairs(
        val_records, config.pair_iou_min, config.pair_iou_max
    )
    test_pairs_idx = build_regression_pairs(
        test_records, config.pair_iou_min, config.pair_iou_max
    )
    if rmodel is None:
        raise ValueError("an initialised refiner model is required")
    pairs = _materialise_pairs(train_records, train_pairs_idx)

    def val_fn(model):
        if not val_pairs_idx:
            return 0.0
        return _refined_pair_stats(val_records, val_pairs_idx, model, mask)[
            "fraction_reaching"
        ]

    rmodel, history = _train_refiner_on_pairs(pairs, val_fn, config, rmodel, mask)
    test_stats = (
        _refined_pair_stats(test_records, test_pairs_idx, rmodel, mask)
        if test_pairs_idx
        else {"fraction_reaching": 0.0, "median_delta_iou": 0.0, "n_pairs": 0}
    )
    return rmodel, history, test_stats


# ---------------------------------------------------------------------------
# grid search


def grid_search(lams, wds, train_records, val_records, config, model_factory):
    """Train one grounder per (weight decay, lam) cell; pick max val accuracy.

    Ties resolve toward the smaller weight decay, then the smaller lam
    (cells are visited in that order and only strict improvements move the
    winner). Returns (best lam, best wd, rows) with one (lam, wd, val_acc)
    row per cell.
    """
    if not lams or not wds:
        raise ValueError("grid search needs non-empty value lists")
    rows = []
    best = None
    for wd in sorted(wds):
        for lam in sorted(lams):
            cell_cfg = config.replace(lam=lam, weight_decay=wd)
            model = model_factory(cell_cfg.seed)
            _, history = train_grounder(train_records, val_records, cell_cfg, model)
            acc = history.val_accuracies[history.best_epoch]
            rows.append((lam, wd, acc))
            if best is None or acc > best[0]:
                best = (acc, lam, wd)
    return best[1], best[2], rows


# ---------------------------------------------------------------------------
# pretraining hand-off


def apply_encoder_init(model, table, encoder):
    """Copy pretrained embedding + encoder weights into a model (bit-exact)."""
    model.table.data = table.data.copy()
    model.encoder.wx.data = encoder.wx.data.copy()
    model.encoder.wh.data = encoder.wh.data.copy()
    model.encoder.b.data = encoder.b.data.copy()
    return model


def apply_projection_init(gmodel, proj_params):
    """Copy pretrained ranking projections into the grounder's two heads."""
    gmodel.params.w_v.data = proj_params["w_v"].data.copy()
    gmodel.params.b_v.data = proj_params["b_v"].data.copy()
    gmodel.params.w_q.data = proj_params["w_q"].data.copy()
    gmodel.params.b_q.data = proj_params["b_q"].data.copy()
    return gmodel
