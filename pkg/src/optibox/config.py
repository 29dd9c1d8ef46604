"""Flat key=value configuration with presets and strict key checking.

A config file is plain text: one ``key = value`` per line, ``#`` comments,
blank lines ignored. Every key must be one of the documented KEYS below —
anything else is a ConfigError. Values are typed per key (int, float,
bool, str, an optional float where ``none`` clears it, or a milestone map
written ``15:0.1,25:0.1``).

Two presets exist. ``desk`` runs in minutes on one CPU core and is the
default everywhere. ``full`` pins the full-scale dimensions and schedules
(embedding 200, hidden 512, projection 128, 10x10 global grid, the
full-scale per-stage epoch/lr/milestone settings) for documentation and
shape tests; nothing at that scale is a runtime target here. Presets carry
per-command overrides so e.g. ``pretrain-projections`` and
``train-grounder`` each get their own schedule.

Effective precedence: command-line --set > config file > preset.
"""

from .errors import ConfigError
from .synthdata import SceneConfig
from .train import TrainConfig


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_milestones(s):
    s = s.strip()
    if not s or s.lower() == "none":
        return {}
    out = {}
    for part in s.split(","):
        epoch, _, factor = part.partition(":")
        out[int(epoch.strip())] = float(factor.strip())
    return out


def _parse_opt_float(s):
    return None if s.strip().lower() == "none" else float(s)


def _fmt_milestones(m):
    return ",".join(f"{k}:{v:g}" for k, v in sorted(m.items())) if m else "none"


# key -> (parser, description)
KEYS = {
    "stage": (str, "training stage this config drives"),
    "lambda": (float, "joint-loss weight on the classification term"),
    "weight_decay": (float, "L2 coefficient folded into Adam gradients"),
    "lr": (float, "initial Adam learning rate"),
    "milestones": (_parse_milestones, "epoch:factor lr decays, e.g. 15:0.1,25:0.1"),
    "batch": (int, "minibatch size"),
    "epochs": (int, "training epoch count"),
    "p": (float, "annotation fraction in [0,1]"),
    "seed": (int, "master RNG seed"),
    "use_semantic": (_parse_bool, "include the reconstruction term in training"),
    "pair_iou_min": (float, "inclusive lower IoU gate for regression pairs"),
    "pair_iou_max": (_parse_opt_float, "exclusive upper IoU gate, or none"),
    "iterations": (int, "refinement applications at inference"),
    "margin": (float, "ranking-loss margin for projection pretraining"),
    "threshold": (float, "IoU threshold for accuracy metrics"),
    "strict": (_parse_bool, "use strict (>) instead of inclusive IoU compare"),
    "grid_lambda": (str, "comma-separated loss-weight candidates for grid-search"),
    "grid_weight_decay": (str, "comma-separated decay candidates for grid-search"),
    # model dimensions
    "embed_dim": (int, "word embedding size"),
    "hidden": (int, "recurrent hidden size (query features)"),
    "proj_dim": (int, "shared projection size in the grounding head"),
    "local_dim": (int, "attention descriptor size in the refiner"),
    "refine_dim": (int, "width of the shared refinement layer"),
    # synthetic scene generation
    "width": (float, "image extent in x"),
    "height": (float, "image extent in y"),
    "objects_min": (int, "fewest objects per scene"),
    "objects_max": (int, "most objects per scene"),
    "distractors": (int, "random proposals added per scene"),
    "jitter": (float, "proposal jitter magnitude (fraction of extent)"),
    "feature_noise": (float, "noise sigma on proposal concept features"),
    "framing_noise": (float, "noise sigma on proposal framing features"),
    "grid": (int, "global feature map is grid x grid"),
    "target_upper_bound": (_parse_opt_float, "generation gate on test UB %, or none"),
    "scenes_train": (int, "training scene count"),
    "scenes_val": (int, "validation scene count"),
    "scenes_test": (int, "test scene count"),
    # file locations (dataset fields inside a config stay relative to cwd)
    "train_path": (str, "training JSONL path"),
    "val_path": (str, "validation JSONL path"),
    "test_path": (str, "test JSONL path"),
    "sidecar_path": (str, "feature-map sidecar path"),
    "vocab_path": (str, "vocabulary file path"),
    "grounder_path": (str, "grounding checkpoint path"),
    "refiner_path": (str, "refinement checkpoint path"),
}

_DESK_BASE = {
    "stage": "grounder",
    "lambda": 100.0,
    "weight_decay": 0.0005,
    "lr": 1e-3,
    "milestones": {15: 0.1, 25: 0.1},
    "batch": 16,
    "epochs": 25,
    "p": 1.0,
    "seed": 0,
    "use_semantic": True,
    "pair_iou_min": 0.3,
    "pair_iou_max": None,
    "iterations": 1,
    "margin": 0.1,
    "threshold": 0.5,
    "strict": False,
    "grid_lambda": "10,100",
    "grid_weight_decay": "0.0005,0.01",
    "embed_dim": 32,
    "hidden": 64,
    "proj_dim": 64,
    "local_dim": 64,
    "refine_dim": 64,
    "width": 100.0,
    "height": 100.0,
    "objects_min": 3,
    "objects_max": 5,
    "distractors": 4,
    "jitter": 0.05,
    "feature_noise": 0.1,
    "framing_noise": 0.05,
    "grid": 5,
    "target_upper_bound": 95.0,
    "scenes_train": 500,
    "scenes_val": 100,
    "scenes_test": 100,
    "train_path": "train.jsonl",
    "val_path": "val.jsonl",
    "test_path": "test.jsonl",
    "sidecar_path": "gmaps.bin",
    "vocab_path": "vocab.txt",
    "grounder_path": "grounder.ckpt",
    "refiner_path": "refiner.ckpt",
}

_PAPER_BASE = dict(
    _DESK_BASE,
    **{
        "weight_decay": 0.01,  # the full-supervision grid choice
        "batch": 128,
        "embed_dim": 200,
        "hidden": 512,
        "proj_dim": 128,
        "local_dim": 512,
        "refine_dim": 512,
        "grid": 10,
    },
)

PRESETS = {
    "desk": {
        "_base": _DESK_BASE,
        "pretrain-autoencoder": {
            "stage": "autoencoder",
            "epochs": 40,
            "lr": 1e-2,
            "batch": 16,
            "milestones": {30: 0.1},
        },
        "pretrain-projections": {
            "stage": "projections",
            "epochs": 15,
            "lr": 1e-2,
            "batch": 16,
            "milestones": {10: 0.1},
        },
        "train-grounder": {"stage": "grounder"},
        "train-optibox": {
            "stage": "optibox",
            "lr": 1e-3,
            "epochs": 20,
            "batch": 32,
            "milestones": {12: 0.1},
        },
        "train-optibox-independent": {
            "stage": "optibox_independent",
            "lr": 3e-3,
            "epochs": 30,
            "batch": 32,
            "milestones": {18: 0.1, 26: 0.1},
        },
    },
    "full": {
        "_base": _PAPER_BASE,
        "pretrain-autoencoder": {
            "stage": "autoencoder",
            "epochs": 60,
            "lr": 1e-4,
            "batch": 128,
            "milestones": {40: 0.1},
        },
        "pretrain-projections": {
            "stage": "projections",
            "epochs": 20,
            "lr": 1e-4,
            "batch": 256,
            "milestones": {10: 0.1, 15: 0.1, 18: 0.1},
        },
        "train-grounder": {
            "stage": "grounder",
            "epochs": 25,
            "lr": 1e-3,
            "batch": 128,
            "milestones": {15: 0.1, 25: 0.1},
            "weight_decay": 0.0005,
        },
        "train-optibox": {
            "stage": "optibox",
            "lr": 1e-4,
            "batch": 128,
            "epochs": 25,
        },
        "train-optibox-independent": {
            "stage": "optibox_independent",
            "epochs": 40,
            "lr": 1e-3,
            "batch": 32,
            "milestones": {3: 0.1, 10: 0.1, 20: 0.1, 30: 0.1},
        },
    },
}

# The published grid choices: annotation fraction -> (lambda, weight decay).
GRID_CHOICES = {
    0.0312: (10.0, 0.01),
    0.5: (100.0, 0.0005),
    1.0: (100.0, 0.01),
}


def parse_value(key, raw):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    parser = KEYS[key][0]
    try:
        return parser(raw) if isinstance(raw, str) else raw
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def parse_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            key, sep, raw = text.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key = value, got {text!r}")
            key = key.strip()
            try:
                values[key] = parse_value(key, raw.strip())
            except ConfigError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
    return values


def parse_overrides(pairs):
    values = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"override must be KEY=VALUE, got {pair!r}")
        values[key.strip()] = parse_value(key.strip(), raw.strip())
    return values


def resolve(command, preset="desk", config_path=None, overrides=(), seed=None):
    """Effective config for one command: preset, then file, then overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = dict(PRESETS[preset]["_base"])
    cfg.update(PRESETS[preset].get(command, {}))
    if config_path is not None:
        cfg.update(parse_config_file(config_path))
    cfg.update(parse_overrides(overrides))
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def write_config(path, cfg):
    """Persist an effective config in the same flat format it is read from."""
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(cfg):
            value = cfg[key]
            if key == "milestones":
                value = _fmt_milestones(value)
            elif value is None:
                value = "none"
            f.write(f"{key} = {value}\n")


def train_config_from(cfg):
    return TrainConfig(
        lam=cfg["lambda"],
        weight_decay=cfg["weight_decay"],
        lr=cfg["lr"],
        milestones=dict(cfg["milestones"]),
        batch_size=cfg["batch"],
        epochs=cfg["epochs"],
        annotation_fraction=cfg["p"],
        seed=cfg["seed"],
        stage=cfg["stage"],
        use_semantic=cfg["use_semantic"],
        pair_iou_min=cfg["pair_iou_min"],
        pair_iou_max=cfg["pair_iou_max"],
        iterations=cfg["iterations"],
    )


def scene_config_from(cfg):
    return SceneConfig(
        width=cfg["width"],
        height=cfg["height"],
        objects_min=cfg["objects_min"],
        objects_max=cfg["objects_max"],
        jitter=cfg["jitter"],
        distractors=cfg["distractors"],
        feature_noise=cfg["feature_noise"],
        framing_noise=cfg["framing_noise"],
        grid_size=cfg["grid"],
        seed=cfg["seed"],
        target_upper_bound=cfg["target_upper_bound"],
    )
