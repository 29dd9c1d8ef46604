"""Query-side text machinery: vocabulary, embeddings, recurrent encoder,
and the two pretraining routines (sequence autoencoder, ranking projections).

The encoder is a single uni-directional LSTM; its final hidden state is the
query feature consumed by both downstream heads. Sequences are processed
unpadded per sample, so a trailing-pad mask is just a prefix length.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DataFormatError, EmptyQueryError

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")


class Vocabulary:
    """Token -> contiguous id map with four reserved ids at the bottom."""

    def __init__(self, tokens=()):
        self._token_to_id = {}
        self._id_to_token = []
        for tok in RESERVED_TOKENS:
            self._add(tok)
        for tok in tokens:
            if tok not in self._token_to_id:
                self._add(tok)

    def _add(self, tok):
        self._token_to_id[tok] = len(self._id_to_token)
        self._id_to_token.append(tok)

    @staticmethod
    def tokenize(text):
        return text.lower().split()

    @classmethod
    def from_corpus(cls, phrases):
        """Build from phrases in first-seen token order (deterministic)."""
        vocab = cls()
        for phrase in phrases:
            for tok in cls.tokenize(phrase):
                if tok not in vocab._token_to_id:
                    vocab._add(tok)
        return vocab

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, tok):
        return tok in self._token_to_id

    def id_of(self, tok):
        return self._token_to_id.get(tok, UNK_ID)

    def token_of(self, idx):
        return self._id_to_token[idx]

    def encode(self, text):
        tokens = self.tokenize(text) if isinstance(text, str) else list(text)
        return [self.id_of(t) for t in tokens]

    def decode(self, ids):
        return [self._id_to_token[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self._id_to_token[len(RESERVED_TOKENS):]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(line.strip() for line in f if line.strip())


@dataclass
class RecurrentParams:
    """One LSTM cell's weights; gate blocks on the 4H axis are i, f, g, o."""

    wx: Tensor  # [E, 4H]
    wh: Tensor  # [H, 4H]
    b: Tensor  # [4H]

    @property
    def hidden(self):
        return self.wh.shape[0]

    def tensors(self, prefix=""):
        return {f"{prefix}wx": self.wx, f"{prefix}wh": self.wh, f"{prefix}b": self.b}


def init_recurrent(embed_dim, hidden, rng):
    wx = Tensor(rng.normal(0.0, 0.1, size=(embed_dim, 4 * hidden)))
    wh = Tensor(rng.normal(0.0, 0.1, size=(hidden, 4 * hidden)))
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0  # open the forget gate at init
    return RecurrentParams(wx, wh, Tensor(b))


def init_embedding(vocab_size, embed_dim, rng):
    return Tensor(rng.normal(0.0, 0.1, size=(vocab_size, embed_dim)))


@dataclass
class QueryEncoding:
    h: Tensor  # grounder-side query feature
    q: Tensor  # refinement-side query feature


def embed(token_ids, table):
    """Look up embedding rows for a token id sequence -> [T, E]."""
    ids = np.asarray(list(token_ids), dtype=np.int64)
    if ids.size and ids.max() >= table.shape[0]:
        raise ValueError(f"token id {int(ids.max())} >= vocab size {table.shape[0]}")
    if ids.size == 0:
        return Tensor(np.zeros((0, table.shape[1])))
    return dc.gather_rows(table, ids)


def encode_sequence(embeddings, params, length=None):
    """Run the recurrent encoder over [T, E] rows.

    Returns (hidden states [T', H], final hidden [H], final cell [H]) where
    T' is ``length`` when given (masking off trailing padding) else T.
    """
    T = embeddings.shape[0]
    if length is not None:
        if not 1 <= length <= T:
            raise ValueError(f"mask length {length} outside 1..{T}")
        if length < T:
            embeddings = dc.split(embeddings, [length, T - length], axis=0)[0]
            T = length
    if T == 0:
        raise EmptyQueryError("cannot encode an empty token sequence")
    H = params.hidden
    h0 = Tensor(np.zeros(H))
    c0 = Tensor(np.zeros(H))
    hs, c_last = dc.lstm_sequence(embeddings, h0, c0, params.wx, params.wh, params.b)
    if T == 1:
        h_last = dc.reshape(hs, (H,))
    else:
        h_last = dc.reshape(dc.split(hs, [T - 1, 1], axis=0)[1], (H,))
    return hs, h_last, c_last


def encode_tokens(token_ids, table, params, length=None):
    """Embed + encode in one call; returns only the final hidden state."""
    ids = list(token_ids)
    if len(ids) == 0:
        raise EmptyQueryError("cannot encode an empty token sequence")
    _, h_last, _ = encode_sequence(embed(ids, table), params, length=length)
    return h_last


# ---------------------------------------------------------------------------
# pretraining: sequence autoencoder


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _sequence_ce(seq_ids, table, encoder, decoder, w_out, b_out):
    """Teacher-forced reconstruction loss for one id sequence (mean CE/step)."""
    T = len(seq_ids)
    xs = embed(seq_ids, table)
    _, h_last, c_last = encode_sequence(xs, encoder)
    dec_in = embed([BOS_ID] + list(seq_ids[:-1]), table)
    dec_hs, _ = dc.lstm_sequence(
        dec_in, h_last, c_last, decoder.wx, decoder.wh, decoder.b
    )
    logits = dc.add(dc.matmul(dec_hs, w_out), b_out)  # [T, V]
    V = w_out.shape[1]
    rows = dc.split(logits, [1] * T, axis=0) if T > 1 else (logits,)
    steps = [
        dc.cross_entropy_with_softmax(dc.reshape(rows[t], (V,)), seq_ids[t])
        for t in range(T)
    ]
    return dc.mean_of(steps)


def pretrain_autoencoder(
    corpus_ids,
    vocab_size,
    embed_dim,
    hidden,
    *,
    epochs=60,
    lr=1e-4,
    batch_size=128,
    milestones=None,
    weight_decay=0.0,
    seed=0,
):
    """Train encoder/decoder to reproduce input token sequences.

    Per-step softmax cross-entropy, teacher forcing, decoder initialised
    from the encoder's final (h, c). Returns the embedding table, the
    encoder weights (the part reused downstream), and per-epoch losses.
    """
    corpus = [list(s) for s in corpus_ids]
    if not corpus:
        raise ValueError("autoencoder pretraining needs a non-empty corpus")
    if any(len(s) == 0 for s in corpus):
        raise EmptyQueryError("autoencoder corpus contains an empty sequence")
    if milestones is None:
        milestones = {40: 0.1}

    rng = np.random.default_rng(seed)
    table = init_embedding(vocab_size, embed_dim, rng)
    encoder = init_recurrent(embed_dim, hidden, rng)
    decoder = init_recurrent(embed_dim, hidden, rng)
    w_out = Tensor(rng.normal(0.0, 0.1, size=(hidden, vocab_size)))
    b_out = Tensor(np.zeros(vocab_size))

    named = {"table": table, "w_out": w_out, "b_out": b_out}
    named.update(encoder.tensors("enc."))
    named.update(decoder.tensors("dec."))
    state = dc.OptimState(lr=lr, weight_decay=weight_decay, milestones=dict(milestones))

    losses = []
    for epoch in range(1, epochs + 1):
        dc.start_epoch(state, epoch)
        epoch_loss = 0.0
        n_batches = 0
        for batch in _batches(len(corpus), batch_size, rng):
            with dc.Tape() as tape:
                loss = dc.mean_of(
                    [
                        _sequence_ce(corpus[i], table, encoder, decoder, w_out, b_out)
                        for i in batch
                    ]
                )
            dc.zero_grad(named.values())
            dc.backward(loss, tape)
            dc.step_tensors(named, state)
            epoch_loss += loss.item()
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return table, encoder, losses


# ---------------------------------------------------------------------------
# pretraining: cross-modal ranking projections


def ranking_loss(proj_visual, proj_query, margin):
    """Bidirectional triplet hinge over in-batch negatives, cosine similarity.

    For each aligned pair i, every j != i supplies two violations:
    replacing the query and replacing the visual side. Mean over all terms.
    """
    B = len(proj_visual)
    if B < 2:
        raise ValueError("ranking loss needs a batch of at least 2 (no negatives)")
    if len(proj_query) != B:
        raise ValueError("ranking loss needs aligned feature lists")
    sims = [
        [dc.cosine(proj_visual[i], proj_query[j]) for j in range(B)] for i in range(B)
    ]
    margin_t = Tensor(float(margin))
    terms = []
    for i in range(B):
        pos = sims[i][i]
        for j in range(B):
            if j == i:
                continue
            terms.append(dc.relu(dc.add(dc.sub(sims[i][j], pos), margin_t)))
            terms.append(dc.relu(dc.add(dc.sub(sims[j][i], pos), margin_t)))
    return dc.mean_of(terms)


def pretrain_projections(
    visual_feats,
    query_feats,
    proj_dim,
    *,
    margin=0.1,
    epochs=20,
    lr=1e-4,
    batch_size=256,
    milestones=None,
    weight_decay=0.0,
    seed=0,
):
    """Fit the two modality projections with the ranking loss.

    ``visual_feats`` [N, D_x] and ``query_feats`` [N, D_h] are precomputed
    aligned pairs (the query encoder stays frozen here). Returns the four
    projection tensors and per-epoch losses.
    """
    visual_feats = np.asarray(visual_feats, dtype=np.float64)
    query_feats = np.asarray(query_feats, dtype=np.float64)
    n = visual_feats.shape[0]
    if n != query_feats.shape[0]:
        raise ValueError("visual/query pair counts differ")
    if n < 2:
        raise ValueError("projection pretraining needs at least 2 pairs")
    if milestones is None:
        milestones = {10: 0.1, 15: 0.1, 18: 0.1}

    rng = np.random.default_rng(seed)
    params = {
        "w_v": Tensor(rng.normal(0.0, 0.1, size=(visual_feats.shape[1], proj_dim))),
        "b_v": Tensor(np.zeros(proj_dim)),
        "w_q": Tensor(rng.normal(0.0, 0.1, size=(query_feats.shape[1], proj_dim))),
        "b_q": Tensor(np.zeros(proj_dim)),
    }
    state = dc.OptimState(lr=lr, weight_decay=weight_decay, milestones=dict(milestones))

    losses = []
    for epoch in range(1, epochs + 1):
        dc.start_epoch(state, epoch)
        epoch_loss = 0.0
        n_batches = 0
        for batch in _batches(n, batch_size, rng):
            if batch.size < 2:
                continue  # a trailing singleton has no negatives
            with dc.Tape() as tape:
                pv = [
                    dc.affine(
                        dc.reshape(Tensor(visual_feats[i]), (1, -1)),
                        params["w_v"],
                        params["b_v"],
                    )
                    for i in batch
                ]
                pq = [
                    dc.affine(
                        dc.reshape(Tensor(query_feats[i]), (1, -1)),
                        params["w_q"],
                        params["b_q"],
                    )
                    for i in batch
                ]
                pv = [dc.reshape(t, (proj_dim,)) for t in pv]
                pq = [dc.reshape(t, (proj_dim,)) for t in pq]
                loss = ranking_loss(pv, pq, margin)
            dc.zero_grad(params.values())
            dc.backward(loss, tape)
            dc.step_tensors(params, state)
            epoch_loss += loss.item()
            n_batches += 1
        losses.append(epoch_loss / max(n_batches, 1))
    return params, losses


# ---------------------------------------------------------------------------
# external embedding files


def load_embeddings(path, vocab, table):
    """Fill embedding rows from a text file of ``token v1 .. vE`` lines.

    Rows for tokens absent from the file keep their current values. Returns
    the number of vocabulary tokens that were loaded.
    """
    dim = table.data.shape[1]
    loaded = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            tok, values = parts[0], parts[1:]
            if len(values) != dim:
                raise DataFormatError(
                    f"expected {dim} values for {tok!r}, got {len(values)}",
                    line=lineno,
                )
            if tok in vocab:
                try:
                    table.data[vocab.id_of(tok)] = [float(v) for v in values]
                except ValueError as exc:
                    raise DataFormatError(str(exc), line=lineno) from None
                loaded += 1
    return loaded
