"""Synthetic oracle benchmark: scenes with known objects and queries.

Each scene plants K distinct (attribute, noun) objects on a fixed-extent
canvas. Object identity lives in a pair of random codebooks, so a feature
vector is a direct, noisy statement of what the object is. A proposal's
feature vector has three segments:

    [attr code | noun code]   the owning object's concept, plus noise
    [framing]                 a noisy center/log-extent offset from the
                              proposal to its owning ground-truth box (the
                              stand-in for what a pooled ROI feature knows
                              about how the crop frames the object)
    [nuisance]                pure noise dims

Distractor proposals carry noise in all segments. The global feature map
stores, at each object's center cell, its concept code and normalised
geometry; empty cells are zero. Every query ("the <attr> <noun>") refers
to exactly one object because concept pairs are sampled without
replacement.

Generation is a pure function of (config, seed): the codebooks and
vocabulary depend only on the config, each scene only on (config, index).
"""

from dataclasses import dataclass

import numpy as np

from .dataio import Query, SampleRecord, validate_record
from .geometry import Box, clip_box, encode_offset, image_bounds, iou
from .textenc import Vocabulary

DEFAULT_ATTRIBUTES = (
    "red", "blue", "green", "yellow", "purple", "orange",
    "black", "white", "gray", "brown", "pink", "teal",
)
DEFAULT_NOUNS = (
    "box", "ball", "star", "ring", "cone", "cube",
    "disc", "tile", "leaf", "drum", "bell", "kite",
)


@dataclass
class SceneConfig:
    width: float = 100.0
    height: float = 100.0
    objects_min: int = 3
    objects_max: int = 5
    attributes: tuple = DEFAULT_ATTRIBUTES
    nouns: tuple = DEFAULT_NOUNS
    attr_code_dim: int = 12
    noun_code_dim: int = 12
    noise_dim: int = 4
    jitter: float = 0.05
    distractors: int = 4
    feature_noise: float = 0.1
    framing_noise: float = 0.05
    grid_size: int = 5
    seed: int = 0
    target_upper_bound: float = None  # optional generation gate, in percent

    def __post_init__(self):
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ValueError("object count range must be positive and ordered")
        if self.distractors < 0:
            raise ValueError("distractor count must be non-negative")
        if self.grid_size < 1:
            raise ValueError("grid size must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image extent must be positive")

    @property
    def concept_dim(self):
        return self.attr_code_dim + self.noun_code_dim

    @property
    def feat_dim(self):
        return self.concept_dim + 4 + self.noise_dim

    @property
    def map_channels(self):
        # concept code + normalised geometry + padding to feat_dim width
        return self.feat_dim


def config_vocabulary(config):
    return Vocabulary(("the",) + tuple(config.attributes) + tuple(config.nouns))


def _codebooks(config):
    rng = np.random.default_rng([config.seed, 771177])
    attr_codes = rng.normal(0.0, 1.0, size=(len(config.attributes), config.attr_code_dim))
    noun_codes = rng.normal(0.0, 1.0, size=(len(config.nouns), config.noun_code_dim))
    return attr_codes, noun_codes


def _place_objects(config, k, rng):
    """Sample K in-bounds boxes, rejection-sampling heavy overlap."""
    boxes = []
    for _ in range(k):
        best = None
        for _attempt in range(40):
            w = rng.uniform(0.12, 0.30) * config.width
            h = rng.uniform(0.12, 0.30) * config.height
            cx = rng.uniform(w / 2.0, config.width - w / 2.0)
            cy = rng.uniform(h / 2.0, config.height - h / 2.0)
            cand = Box(cx, cy, w, h)
            worst = max((iou(cand, b) for b in boxes), default=0.0)
            if best is None or worst < best[0]:
                best = (worst, cand)
            if worst < 0.3:
                break
        boxes.append(best[1])
    return boxes


def _jitter_box(box, jitter, bounds, rng):
    cx = box.cx + rng.uniform(-jitter, jitter) * box.w
    cy = box.cy + rng.uniform(-jitter, jitter) * box.h
    w = box.w * float(np.exp(rng.uniform(-jitter, jitter)))
    h = box.h * float(np.exp(rng.uniform(-jitter, jitter)))
    return clip_box(Box(cx, cy, w, h), bounds)


def _random_box(config, rng):
    w = rng.uniform(0.08, 0.30) * config.width
    h = rng.uniform(0.08, 0.30) * config.height
    cx = rng.uniform(w / 2.0, config.width - w / 2.0)
    cy = rng.uniform(h / 2.0, config.height - h / 2.0)
    return Box(cx, cy, w, h)


def make_proposals(gt_boxes, object_features, n, jitter, config, rng):
    """Jitter every gt box once, pad with random distractors, shuffle.

    Returns (boxes, features [n, feat_dim], owner indices) where owner is
    the index of the originating object, or -1 for a distractor. Jittered
    proposals inherit their object's concept (plus noise) and a noisy
    framing segment encoding the proposal -> gt offset; distractor features
    are noise throughout.
    """
    k = len(gt_boxes)
    if n < k:
        raise ValueError(f"need at least {k} proposals to cover {k} objects, got {n}")
    bounds = image_bounds(config.width, config.height)
    boxes, feats, owners = [], [], []
    for i, gt in enumerate(gt_boxes):
        prop = _jitter_box(gt, jitter, bounds, rng) if jitter > 0 else gt
        off = encode_offset(prop, gt)
        framing = np.array(off.astuple()) + rng.normal(
            0.0, config.framing_noise, size=4
        )
        concept = object_features[i] + rng.normal(
            0.0, config.feature_noise, size=config.concept_dim
        )
        nuisance = rng.normal(0.0, 0.3, size=config.noise_dim)
        boxes.append(prop)
        feats.append(np.concatenate([concept, framing, nuisance]))
        owners.append(i)
    for _ in range(n - k):
        boxes.append(_random_box(config, rng))
        feats.append(
            np.concatenate(
                [
                    rng.normal(0.0, 1.0, size=config.concept_dim),
                    rng.uniform(-0.5, 0.5, size=4),
                    rng.normal(0.0, 0.3, size=config.noise_dim),
                ]
            )
        )
        owners.append(-1)
    order = rng.permutation(n)
    boxes = [boxes[i] for i in order]
    feats = np.asarray([feats[i] for i in order])
    owners = [owners[i] for i in order]
    return boxes, feats, owners


def generate_scene(config, index):
    """Build one deterministic scene record for (config, index)."""
    rng = np.random.default_rng([config.seed, 40427, index])
    n_pairs = len(config.attributes) * len(config.nouns)
    k = int(rng.integers(config.objects_min, config.objects_max + 1))
    if k > n_pairs:
        raise ValueError(
            f"grammar yields only {n_pairs} distinct concepts, cannot place {k} objects"
        )
    attr_codes, noun_codes = _codebooks(config)
    vocab = config_vocabulary(config)

    pair_ids = rng.choice(n_pairs, size=k, replace=False)
    concepts = [(int(p) // len(config.nouns), int(p) % len(config.nouns)) for p in pair_ids]
    gt_boxes = _place_objects(config, k, rng)
    object_features = [
        np.concatenate([attr_codes[a], noun_codes[n]]) for a, n in concepts
    ]

    S = config.grid_size
    gmap = np.zeros((config.map_channels, S, S))
    for (a, n), box, feat in zip(concepts, gt_boxes, object_features):
        gx = min(int(box.cx / config.width * S), S - 1)
        gy = min(int(box.cy / config.height * S), S - 1)
        gmap[: config.concept_dim, gy, gx] = feat
        gmap[config.concept_dim : config.concept_dim + 4, gy, gx] = (
            box.cx / config.width,
            box.cy / config.height,
            box.w / config.width,
            box.h / config.height,
        )

    boxes, feats, _ = make_proposals(
        gt_boxes, object_features, k + config.distractors, config.jitter, config, rng
    )

    image_id = f"scene{index:05d}"
    queries = []
    for qi, ((a, n), gt) in enumerate(zip(concepts, gt_boxes)):
        phrase = f"the {config.attributes[a]} {config.nouns[n]}"
        queries.append(
            Query(
                query_id=f"{image_id}#{qi}",
                ids=vocab.encode(phrase),
                gt=gt,
                phrase=phrase,
            )
        )

    rec = SampleRecord(
        image_id=image_id,
        width=config.width,
        height=config.height,
        proposals=boxes,
        features=feats,
        queries=queries,
        labeled=True,
        gmap=gmap,
    )
    return validate_record(rec)


def split_annotations(records, fraction, seed):
    """Flag exactly round(fraction * len) records as labeled, by seeded shuffle.

    The split is per image: all of an image's queries share its flag.
    Mutates the records' ``labeled`` fields in place and returns the list.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"annotation fraction must lie in [0, 1], got {fraction}")
    n = len(records)
    n_labeled = int(np.floor(fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    chosen = set(rng.permutation(n)[:n_labeled].tolist())
    for i, rec in enumerate(records):
        rec.labeled = i in chosen
    return records


def generate_dataset(config, n_train, n_val, n_test):
    """Generate consecutive train/val/test scene splits.

    When ``config.target_upper_bound`` is set, the test split's proposal
    upper bound (percent) is checked against it and generation fails loudly
    rather than returning a dataset the configured jitter cannot support.
    Returns (train, val, test, vocabulary).
    """
    counts = (n_train, n_val, n_test)
    if any(c < 0 for c in counts) or sum(counts) < 1:
        raise ValueError(f"bad split sizes {counts}")
    scenes = [generate_scene(config, i) for i in range(sum(counts))]
    train = scenes[:n_train]
    val = scenes[n_train : n_train + n_val]
    test = scenes[n_train + n_val :]
    if config.target_upper_bound is not None:
        from .evalkit import proposal_upper_bound

        ub = proposal_upper_bound(test if test else scenes)
        if ub < config.target_upper_bound:
            raise ValueError(
                f"proposal upper bound {ub:.2f}% below the configured target "
                f"{config.target_upper_bound:.2f}%; lower the jitter or add proposals"
            )
    return train, val, test, config_vocabulary(config)
