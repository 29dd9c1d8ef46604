"""Query-guided box refinement.

The network sees four things: the selected proposal's visual feature x, its
box r (normalised to [0,1] by image extent), the query feature q from this
module's own recurrent encoder, and a context vector c summarising the
whole image. c comes from attention over an S x S global feature map: the
concat [x; r; q] is projected to a local descriptor, appended to every grid
cell's channel vector, scored by a 1x1 convolution, and softmaxed over all
S^2 positions; c is the attention-weighted average of the cells.

The regression trunk is deliberately skinny: concat [x; r; q; c] projected
once, then the SAME relu layer applied five times (one weight set, five
applications), then a linear 4-d head with no activation. The head output
is a center/log-extent box offset decoded against r.

Input ablations (drop x / r / q / c) zero the corresponding segment while
keeping shapes fixed, at train and test time alike.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import textenc
from .diffcore import Tensor
from .errors import DataFormatError, NumericalError
from .geometry import Box, BoxOffset, clip_box, decode_offset, image_bounds, iou


@dataclass
class FeatureMask:
    """Which refinement inputs to zero out (for input ablations)."""

    drop_visual: bool = False
    drop_box: bool = False
    drop_query: bool = False
    drop_global: bool = False


NO_MASK = FeatureMask()


@dataclass
class RefinerParams:
    w_local: Tensor  # [D_x + 4 + D_q, A] attention descriptor projection
    b_local: Tensor
    w_conv: Tensor  # [C + A, 1] the 1x1 convolution over stacked channels
    b_conv: Tensor
    w_in: Tensor  # [D_x + 4 + D_q + C, R] trunk input projection
    b_in: Tensor
    w_shared: Tensor  # [R, R] the single shared refinement layer
    b_shared: Tensor
    w_out: Tensor  # [R, 4] offset head, no activation
    b_out: Tensor

    def tensors(self, prefix=""):
        named = {
            "w_local": self.w_local,
            "b_local": self.b_local,
            "w_conv": self.w_conv,
            "b_conv": self.b_conv,
            "w_in": self.w_in,
            "b_in": self.b_in,
            "w_shared": self.w_shared,
            "b_shared": self.b_shared,
            "w_out": self.w_out,
            "b_out": self.b_out,
        }
        return {prefix + k: v for k, v in named.items()}


@dataclass
class RefinerModel:
    table: Tensor
    encoder: textenc.RecurrentParams
    params: RefinerParams

    def trainables(self):
        named = {"table": self.table}
        named.update(self.encoder.tensors("enc."))
        named.update(self.params.tensors())
        return named

    def state_arrays(self):
        return {k: t.data for k, t in self.trainables().items()}

    def save(self, path):
        dc.save_arrays(path, self.state_arrays())

    def load(self, path):
        dc.load_into(path, self.trainables())


def init_refiner(
    vocab_size, embed_dim, query_hidden, feat_dim, channels, local_dim, refine_dim, rng
):
    table = textenc.init_embedding(vocab_size, embed_dim, rng)
    encoder = textenc.init_recurrent(embed_dim, query_hidden, rng)

    def w(rows, cols):
        return Tensor(rng.normal(0.0, 0.1, size=(rows, cols)))

    d_in = feat_dim + 4 + query_hidden
    params = RefinerParams(
        w_local=w(d_in, local_dim),
        b_local=Tensor(np.zeros(local_dim)),
        w_conv=w(channels + local_dim, 1),
        b_conv=Tensor(np.zeros(1)),
        w_in=w(d_in + channels, refine_dim),
        b_in=Tensor(np.zeros(refine_dim)),
        w_shared=w(refine_dim, refine_dim),
        b_shared=Tensor(np.zeros(refine_dim)),
        w_out=w(refine_dim, 4),
        b_out=Tensor(np.zeros(4)),
    )
    return RefinerModel(table=table, encoder=encoder, params=params)


def box_to_vec(r, extent):
    """Box as a rank-1 constant tensor, normalised to [0,1] by image extent."""
    w, h = float(extent[0]), float(extent[1])
    return Tensor(np.array([r.cx / w, r.cy / h, r.w / w, r.h / h]))


def _segment(t, dim, dropped):
    if dropped:
        return Tensor(np.zeros(dim))
    return t


def global_attention(gmap, x, r_vec, q, params, mask=NO_MASK):
    """Context vector from soft attention over the global feature map.

    ``gmap`` is [C, S, S]; ``x``, ``r_vec``, ``q`` are rank-1 tensors.
    Returns (c [C], weights [S^2]) with weights on the simplex; c is a
    convex combination of the grid cells' channel vectors.
    """
    gmap = np.asarray(gmap, dtype=np.float64)
    if gmap.ndim != 3 or gmap.shape[1] != gmap.shape[2]:
        raise ValueError(f"global feature map must be [C, S, S], got {gmap.shape}")
    if not np.all(np.isfinite(gmap)):
        raise NumericalError("global feature map contains non-finite values")
    C, S, _ = gmap.shape
    n_cells = S * S

    x = _segment(x, x.shape[0], mask.drop_visual)
    r_vec = _segment(r_vec, 4, mask.drop_box)
    q = _segment(q, q.shape[0], mask.drop_query)
    desc_in = dc.concat([x, r_vec, q], axis=0)
    if desc_in.shape[0] != params.w_local.shape[0]:
        raise ValueError(
            f"attention descriptor length {desc_in.shape[0]} does not match "
            f"projection rows {params.w_local.shape[0]}"
        )
    local = dc.relu(
        dc.add(
            dc.reshape(
                dc.matmul(dc.reshape(desc_in, (1, -1)), params.w_local), (-1,)
            ),
            params.b_local,
        )
    )

    cells = Tensor(gmap.reshape(C, n_cells).T.copy())  # [S^2, C]
    ones = Tensor(np.ones((n_cells, 1)))
    local_rows = dc.matmul(ones, dc.reshape(local, (1, -1)))  # broadcast to rows
    stacked = dc.concat([cells, local_rows], axis=1)  # [S^2, C + A]
    logits = dc.reshape(dc.affine(stacked, params.w_conv, params.b_conv), (n_cells,))
    weights = dc.softmax(logits)
    c = dc.reshape(dc.matmul(dc.reshape(weights, (1, n_cells)), cells), (C,))
    return c, weights


def refine(x, r_vec, q, c, params, mask=NO_MASK):
    """Predict a 4-d box offset from [x; r; q; c].

    One input projection (relu), then five applications of the single
    shared relu layer, then the linear head. Returns a rank-1 tensor of
    length 4: (t_x, t_y, t_w, t_h).
    """
    for name, t in (("x", x), ("r", r_vec), ("q", q), ("c", c)):
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"refinement input {name} is non-finite")
    x = _segment(x, x.shape[0], mask.drop_visual)
    r_vec = _segment(r_vec, 4, mask.drop_box)
    q = _segment(q, q.shape[0], mask.drop_query)
    c = _segment(c, c.shape[0], mask.drop_global)

    full = dc.concat([x, r_vec, q, c], axis=0)
    if full.shape[0] != params.w_in.shape[0]:
        raise ValueError(
            f"refinement input length {full.shape[0]} does not match "
            f"projection rows {params.w_in.shape[0]}"
        )
    row = dc.reshape(full, (1, -1))
    hidden = dc.relu(dc.affine(row, params.w_in, params.b_in))
    for _ in range(5):
        hidden = dc.relu(dc.affine(hidden, params.w_shared, params.b_shared))
    out = dc.affine(hidden, params.w_out, params.b_out)
    return dc.reshape(out, (4,))


def optibox_loss(t_pred, t_target):
    """l1 distance between predicted and target offsets."""
    if isinstance(t_target, BoxOffset):
        t_target = Tensor(np.array(t_target.astuple()))
    return dc.l1_loss(t_pred, t_target)


def refine_box(
    selected,
    x_feat,
    gmap,
    token_ids,
    model,
    *,
    bounds,
    iterations=1,
    mask=NO_MASK,
):
    """Full refinement path: encode the query, attend, regress, decode, clip.

    ``bounds`` is the (width, height) image extent used both to normalise
    the box input and to clip the decoded result. ``iterations`` > 1
    re-applies the network to its own output box (off by default).
    """
    if iterations < 1:
        raise ValueError("refinement needs at least one iteration")
    x = Tensor(np.asarray(x_feat, dtype=np.float64))
    if mask.drop_query:
        q = Tensor(np.zeros(model.encoder.hidden))
    else:
        q = textenc.encode_tokens(token_ids, model.table, model.encoder)
    box = selected
    for _ in range(iterations):
        r_vec = box_to_vec(box, bounds)
        if mask.drop_global:
            channels = model.params.w_in.shape[0] - model.params.w_local.shape[0]
            c = Tensor(np.zeros(channels))
        else:
            c, _ = global_attention(gmap, x, r_vec, q, model.params, mask)
        t = refine(x, r_vec, q, c, model.params, mask)
        offset = BoxOffset(*(float(v) for v in t.data))
        box = clip_box(decode_offset(box, offset), image_bounds(*bounds))
    return box


def write_refinements(path, records):
    """Dump one JSON record per line: ids, boxes before/after, IoUs."""
    with open(path, "w", encoding="utf-8") as f:
        for query_id, before, after, gt in records:
            f.write(
                json.dumps(
                    {
                        "query_id": query_id,
                        "before": [before.cx, before.cy, before.w, before.h],
                        "after": [after.cx, after.cy, after.w, after.h],
                        "iou_before": iou(before, gt),
                        "iou_after": iou(after, gt),
                    }
                )
                + "\n"
            )


def read_refinements(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(
                    (
                        obj["query_id"],
                        Box(*obj["before"]),
                        Box(*obj["after"]),
                        float(obj["iou_before"]),
                        float(obj["iou_after"]),
                    )
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise DataFormatError(str(exc), line=lineno) from None
    return records
