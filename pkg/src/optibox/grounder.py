"""Decision stage of the grounding pipeline.

Given proposal features x_i and a query feature h, both modalities are
projected into a shared space and fused by addition; the fused vector goes
through a relu and a linear attention head. The relu has to sit after the
sum: with any affine score on top, separately-activated projections let the
query only shift all proposal scores by one constant, which the softmax
cancels, and selection would ignore the text entirely. The proposal with
the largest raw score wins. For weak supervision the attention distribution
also drives a semantic reconstruction: the attended visual feature is
projected back to query-feature space and penalised by l1 distance to h, so
unlabeled queries still shape the attention.

Batch-norm over h and x_i uses batch statistics only in the batched
training forward (`batch_forward`); single-sample scoring always
normalises with the running estimates.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import textenc
from .diffcore import BatchNormParams, Tensor
from .errors import DataFormatError
from .geometry import Box


@dataclass
class GrounderParams:
    w_v: Tensor  # visual projection [D_x, P]
    b_v: Tensor
    w_q: Tensor  # query projection [D_h, P]
    b_q: Tensor
    w_att: Tensor  # scoring head [P, 1]
    b_att: Tensor
    w_sem: Tensor  # semantic reconstruction [D_x, D_h]
    b_sem: Tensor
    bn_x: BatchNormParams
    bn_h: BatchNormParams

    def tensors(self, prefix=""):
        named = {
            "w_v": self.w_v,
            "b_v": self.b_v,
            "w_q": self.w_q,
            "b_q": self.b_q,
            "w_att": self.w_att,
            "b_att": self.b_att,
            "w_sem": self.w_sem,
            "b_sem": self.b_sem,
            "bn_x.gamma": self.bn_x.gamma,
            "bn_x.beta": self.bn_x.beta,
            "bn_h.gamma": self.bn_h.gamma,
            "bn_h.beta": self.bn_h.beta,
        }
        return {prefix + k: v for k, v in named.items()}


@dataclass
class GrounderModel:
    """Text encoder plus decision-stage parameters."""

    table: Tensor
    encoder: textenc.RecurrentParams
    params: GrounderParams

    def trainables(self):
        named = {"table": self.table}
        named.update(self.encoder.tensors("enc."))
        named.update(self.params.tensors())
        return named

    def state_arrays(self):
        arrays = {k: t.data for k, t in self.trainables().items()}
        arrays["bn_x.running_mean"] = self.params.bn_x.running_mean
        arrays["bn_x.running_var"] = self.params.bn_x.running_var
        arrays["bn_h.running_mean"] = self.params.bn_h.running_mean
        arrays["bn_h.running_var"] = self.params.bn_h.running_var
        return arrays

    def save(self, path):
        dc.save_arrays(path, self.state_arrays())

    def load(self, path):
        arrays = dc.load_arrays(path)
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            raise DataFormatError(
                "checkpoint entries do not match grounder model: "
                f"missing={sorted(expected - set(arrays))}, "
                f"unexpected={sorted(set(arrays) - expected)}"
            )
        for name, t in self.trainables().items():
            if arrays[name].shape != t.data.shape:
                raise DataFormatError(f"shape mismatch for {name!r} in checkpoint")
            t.data = arrays[name]
        self.params.bn_x.running_mean = arrays["bn_x.running_mean"]
        self.params.bn_x.running_var = arrays["bn_x.running_var"]
        self.params.bn_h.running_mean = arrays["bn_h.running_mean"]
        self.params.bn_h.running_var = arrays["bn_h.running_var"]


@dataclass
class GroundingOutput:
    alpha: np.ndarray  # raw scores [N]
    alpha_prime: np.ndarray  # softmax of alpha, on the simplex
    fused: np.ndarray  # [N, P]
    selected: int  # argmax of alpha (lowest index on ties)
    x_att: np.ndarray  # attention-weighted visual feature
    h_hat: np.ndarray  # reconstructed query feature


def init_grounder(vocab_size, embed_dim, query_hidden, feat_dim, proj_dim, rng):
    table = textenc.init_embedding(vocab_size, embed_dim, rng)
    encoder = textenc.init_recurrent(embed_dim, query_hidden, rng)

    def w(rows, cols):
        return Tensor(rng.normal(0.0, 0.1, size=(rows, cols)))

    params = GrounderParams(
        w_v=w(feat_dim, proj_dim),
        b_v=Tensor(np.zeros(proj_dim)),
        w_q=w(query_hidden, proj_dim),
        b_q=Tensor(np.zeros(proj_dim)),
        w_att=w(proj_dim, 1),
        b_att=Tensor(np.zeros(1)),
        w_sem=w(feat_dim, query_hidden),
        b_sem=Tensor(np.zeros(query_hidden)),
        bn_x=BatchNormParams(feat_dim),
        bn_h=BatchNormParams(query_hidden),
    )
    return GrounderModel(table=table, encoder=encoder, params=params)


def _score_from_projected(px, ph_row, params):
    """Fuse projected rows and score: z = relu(px + ph), alpha = head(z)."""
    n = px.shape[0]
    z = dc.relu(dc.add(px, ph_row))
    alpha = dc.reshape(dc.affine(z, params.w_att, params.b_att), (n,))
    alpha_prime = dc.softmax(alpha)
    selected = int(np.argmax(alpha.data))  # np.argmax already takes the lowest tie
    return z, alpha, alpha_prime, selected


def fuse_and_score(x, h, params):
    """Score proposals against a query feature (running-stat normalisation).

    ``x`` is [N, D_x]; ``h`` is a rank-1 query feature. Returns
    (z, alpha, alpha_prime, selected) with the first three as graph tensors.
    """
    x = dc.as_tensor(x)
    h = dc.as_tensor(h)
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ValueError("fuse_and_score needs at least one proposal row")
    x_bn = dc.batchnorm(x, params.bn_x, training=False)
    h_bn = dc.batchnorm(dc.reshape(h, (1, -1)), params.bn_h, training=False)
    px = dc.affine(x_bn, params.w_v, params.b_v)
    ph = dc.affine(h_bn, params.w_q, params.b_q)
    return _score_from_projected(px, ph, params)


def attend_visual(alpha_prime, x):
    """Convex combination of visual rows: x_att = sum_i alpha'_i x_i."""
    alpha_prime = dc.as_tensor(alpha_prime)
    x = dc.as_tensor(x)
    w = alpha_prime.data
    if w.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ValueError("attention weights must align with proposal rows")
    if np.any(w < -1e-6) or abs(float(w.sum()) - 1.0) > 1e-6:
        raise ValueError("attention weights are off the probability simplex")
    n = w.shape[0]
    out = dc.matmul(dc.reshape(alpha_prime, (1, n)), x)
    return dc.reshape(out, (x.shape[1],))


def project_attended(x_att, params):
    """Reconstruct a query feature from the attended visual feature."""
    row = dc.reshape(x_att, (1, -1))
    h_hat = dc.affine(row, params.w_sem, params.b_sem)
    return dc.reshape(h_hat, (params.w_sem.shape[1],))


def semantic_loss(h, x_att, params):
    """l1 distance between h and its reconstruction from x_att."""
    return dc.l1_loss(h, project_attended(x_att, params))


def classification_loss(alpha, target):
    """Softmax cross-entropy of raw scores against the target proposal."""
    return dc.cross_entropy_with_softmax(alpha, target)


def joint_loss(l_cls, l_sem, lam):
    """lam * L_cls + L_sem; pass l_cls=None for unlabeled samples."""
    if lam < 0:
        raise ValueError("loss weight must be non-negative")
    if l_cls is None:
        return l_sem
    return dc.add(dc.scale(l_cls, lam), l_sem)


def ground(token_ids, sample, model):
    """Full inference: encode the query, score proposals, pick the argmax.

    Returns (selected Box, GroundingOutput). Run without an active tape
    this is pure forward computation.
    """
    h = textenc.encode_tokens(token_ids, model.table, model.encoder)
    x = Tensor(np.asarray(sample.features, dtype=np.float64))
    z, alpha, alpha_prime, selected = fuse_and_score(x, h, model.params)
    x_att = attend_visual(alpha_prime, x)
    h_hat = project_attended(x_att, model.params)

    ap = alpha_prime.data
    assert np.all(ap >= 0.0) and abs(float(ap.sum()) - 1.0) <= 1e-9
    out = GroundingOutput(
        alpha=alpha.data.copy(),
        alpha_prime=ap.copy(),
        fused=z.data.copy(),
        selected=selected,
        x_att=x_att.data.copy(),
        h_hat=h_hat.data.copy(),
    )
    return sample.proposals[selected], out


def batch_forward(batch, model, lam, *, bn_training=True):
    """Training forward over a list of (token_ids, features, target) triples.

    ``features`` is [N_i, D_x]; ``target`` is the index of the proposal to
    classify into, or None for an unlabeled sample (it then contributes only
    the reconstruction term). Query features and proposal rows are batch-
    normalised jointly across the whole batch (training mode updates the
    running statistics). Returns (joint loss, cls losses, sem losses) where
    the per-sample lists hold graph tensors (cls entry None when unlabeled).
    """
    if len(batch) < 2 and bn_training:
        raise ValueError("batched training forward needs at least 2 samples")
    hs = [
        textenc.encode_tokens(token_ids, model.table, model.encoder)
        for token_ids, _, _ in batch
    ]
    xs = [Tensor(np.asarray(feats, dtype=np.float64)) for _, feats, _ in batch]
    counts = [x.shape[0] for x in xs]

    h_mat = dc.stack_rows(hs)
    h_bn = dc.batchnorm(h_mat, model.params.bn_h, training=bn_training)
    x_all = dc.concat(xs, axis=0)
    x_bn = dc.batchnorm(x_all, model.params.bn_x, training=bn_training)

    ph_all = dc.affine(h_bn, model.params.w_q, model.params.b_q)
    px_all = dc.affine(x_bn, model.params.w_v, model.params.b_v)
    ph_rows = dc.split(ph_all, [1] * len(batch), axis=0)
    px_parts = dc.split(px_all, counts, axis=0)

    cls_losses = []
    sem_losses = []
    for i, (_, _, target) in enumerate(batch):
        _, alpha, alpha_prime, _ = _score_from_projected(
            px_parts[i], ph_rows[i], model.params
        )
        x_att = attend_visual(alpha_prime, xs[i])
        sem_losses.append(semantic_loss(hs[i], x_att, model.params))
        cls_losses.append(
            None if target is None else classification_loss(alpha, target)
        )

    labeled = [c for c in cls_losses if c is not None]
    sem_term = dc.mean_of(sem_losses)
    if labeled and lam > 0:
        total = dc.add(dc.scale(dc.mean_of(labeled), lam), sem_term)
    else:
        total = sem_term
    return total, cls_losses, sem_losses


def write_predictions(path, records):
    """Dump one JSON record per line: query id, selected box, alpha' vector."""
    with open(path, "w", encoding="utf-8") as f:
        for query_id, box, alpha_prime in records:
            f.write(
                json.dumps(
                    {
                        "query_id": query_id,
                        "box": [box.cx, box.cy, box.w, box.h],
                        "alpha_prime": [float(a) for a in alpha_prime],
                    }
                )
                + "\n"
            )


def read_predictions(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                box = Box(*obj["box"])
                records.append((obj["query_id"], box, list(obj["alpha_prime"])))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise DataFormatError(str(exc), line=lineno) from None
    return records
