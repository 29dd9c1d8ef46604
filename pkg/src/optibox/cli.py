"""Command-line driver for the whole pipeline.

    optibox gen-data --out runs/a --seed 0
    optibox pretrain-autoencoder --out runs/a
    optibox pretrain-projections --out runs/a
    optibox train-grounder --out runs/a
    optibox train-optibox --out runs/a
    optibox eval --out runs/a
    optibox refine --out runs/a
    optibox analyze --out runs/a
    optibox train-optibox-independent --out runs/a
    optibox grid-search --out runs/a --set grid_lambda=10,100

Shared flags: --preset {desk,full}, --config FILE, --set KEY=VALUE
(repeatable), --out DIR, --seed N. Relative paths named in the config
resolve under --out, so a chain of commands over one directory forms one
experiment. Every command writes a manifest recording its effective
config, seed, and library versions; no output embeds timestamps, so a
fixed seed reproduces every artifact byte for byte.

Exit codes: 0 success, 1 usage error, 2 data or config error,
3 numerical failure.
"""

import argparse
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, config, dataio, evalkit, grounder, refinement, synthdata, textenc, train
from ._kernels import backend_name
from .errors import ConfigError, NumericalError, OptiboxError
from .geometry import best_target_proposal
from .train import TrainHistory

COMMANDS = (
    "gen-data",
    "pretrain-autoencoder",
    "pretrain-projections",
    "train-grounder",
    "train-optibox",
    "train-optibox-independent",
    "eval",
    "refine",
    "analyze",
    "grid-search",
)


class _Parser(argparse.ArgumentParser):
    """argparse flavor that exits 1 (not 2) on usage problems."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="optibox", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--preset", choices=sorted(config.PRESETS), default="desk")
    return parser


def _resolve_path(out, name):
    p = Path(name)
    return p if p.is_absolute() else out / p


def _sidecar_for(jsonl_path):
    return jsonl_path.with_suffix(".gmaps.bin")


def _load_split(out, cfg, key):
    path = _resolve_path(out, cfg[key])
    sidecar = _sidecar_for(path)
    return dataio.load_dataset(path, sidecar if sidecar.exists() else None)


def _write_manifest(out, command, preset, cfg):
    lines = [
        f"command = {command}",
        f"preset = {preset}",
        f"package_version = {__version__}",
        f"numpy_version = {np.__version__}",
        f"python_version = {platform.python_version()}",
        f"kernel_backend = {backend_name()}",
        "config:",
    ]
    for key in sorted(cfg):
        value = cfg[key]
        if key == "milestones":
            value = config._fmt_milestones(value)
        lines.append(f"  {key} = {value}")
    with open(out / f"manifest-{command}.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _load_vocab(out, cfg):
    return textenc.Vocabulary.load(_resolve_path(out, cfg["vocab_path"]))


def _dims_from_records(records):
    feat_dim = records[0].features.shape[1]
    channels = records[0].gmap.shape[0] if records[0].gmap is not None else feat_dim
    return feat_dim, channels


def _build_grounder(cfg, vocab_size, feat_dim, seed):
    rng = np.random.default_rng(seed)
    return grounder.init_grounder(
        vocab_size, cfg["embed_dim"], cfg["hidden"], feat_dim, cfg["proj_dim"], rng
    )


def _build_refiner(cfg, vocab_size, feat_dim, channels, seed):
    rng = np.random.default_rng(seed)
    return refinement.init_refiner(
        vocab_size,
        cfg["embed_dim"],
        cfg["hidden"],
        feat_dim,
        channels,
        cfg["local_dim"],
        cfg["refine_dim"],
        rng,
    )


# ---------------------------------------------------------------------------
# command handlers


def _cmd_gen_data(out, cfg):
    scfg = config.scene_config_from(cfg)
    tr, va, te, vocab = synthdata.generate_dataset(
        scfg, cfg["scenes_train"], cfg["scenes_val"], cfg["scenes_test"]
    )
    synthdata.split_annotations(tr, cfg["p"], seed=cfg["seed"] + 1)
    for key, records in (("train_path", tr), ("val_path", va), ("test_path", te)):
        path = _resolve_path(out, cfg[key])
        dataio.write_dataset(records, path, _sidecar_for(path))
    vocab.save(_resolve_path(out, cfg["vocab_path"]))
    ub = evalkit.proposal_upper_bound(te)
    with open(out / "gen-data-summary.txt", "w", encoding="utf-8") as f:
        f.write(
            f"scenes: {len(tr)}/{len(va)}/{len(te)}\n"
            f"test_upper_bound: {ub:.2f}\n"
            f"vocab_size: {len(vocab)}\n"
        )


def _cmd_pretrain_autoencoder(out, cfg):
    records = _load_split(out, cfg, "train_path")
    vocab = _load_vocab(out, cfg)
    corpus = [q.ids for rec in records for q in rec.queries]
    table, encoder, losses = textenc.pretrain_autoencoder(
        corpus,
        len(vocab),
        cfg["embed_dim"],
        cfg["hidden"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        batch_size=cfg["batch"],
        milestones=cfg["milestones"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
    )
    arrays = {"table": table.data}
    arrays.update({k: t.data for k, t in encoder.tensors("enc.").items()})
    from .diffcore import save_arrays

    save_arrays(out / "encoder.ckpt", arrays)
    with open(out / "autoencoder-history.csv", "w", encoding="utf-8") as f:
        f.write("epoch,loss\n")
        for i, l in enumerate(losses, start=1):
            f.write(f"{i},{l:.6f}\n")


def _load_encoder_ckpt(out, cfg):
    from .diffcore import Tensor, load_arrays

    arrays = load_arrays(out / "encoder.ckpt")
    table = Tensor(arrays["table"])
    encoder = textenc.RecurrentParams(
        Tensor(arrays["enc.wx"]), Tensor(arrays["enc.wh"]), Tensor(arrays["enc.b"])
    )
    return table, encoder


def _cmd_pretrain_projections(out, cfg):
    records = _load_split(out, cfg, "train_path")
    table, encoder = _load_encoder_ckpt(out, cfg)
    xs, hs = [], []
    for rec in records:
        for q in rec.queries:
            target = best_target_proposal(rec.proposals, q.gt, cfg["threshold"])
            if target is None:
                continue
            h = textenc.encode_tokens(q.ids, table, encoder)
            xs.append(rec.features[target])
            hs.append(h.data.copy())
    params, losses = textenc.pretrain_projections(
        np.asarray(xs),
        np.asarray(hs),
        cfg["proj_dim"],
        margin=cfg["margin"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        batch_size=cfg["batch"],
        milestones=cfg["milestones"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
    )
    from .diffcore import save_arrays

    save_arrays(out / "projections.ckpt", {k: t.data for k, t in params.items()})
    with open(out / "projections-history.csv", "w", encoding="utf-8") as f:
        f.write("epoch,loss\n")
        for i, l in enumerate(losses, start=1):
            f.write(f"{i},{l:.6f}\n")


def _cmd_train_grounder(out, cfg):
    tr = _load_split(out, cfg, "train_path")
    va = _load_split(out, cfg, "val_path")
    vocab = _load_vocab(out, cfg)
    feat_dim, _ = _dims_from_records(tr)
    model = _build_grounder(cfg, len(vocab), feat_dim, cfg["seed"])
    if (out / "encoder.ckpt").exists():
        table, encoder = _load_encoder_ckpt(out, cfg)
        train.apply_encoder_init(model, table, encoder)
    if (out / "projections.ckpt").exists():
        from .diffcore import Tensor, load_arrays

        proj = {k: Tensor(v) for k, v in load_arrays(out / "projections.ckpt").items()}
        train.apply_projection_init(model, proj)
    tcfg = config.train_config_from(cfg).replace(stage="grounder")
    model, history = train.train_grounder(tr, va, tcfg, model)
    model.save(_resolve_path(out, cfg["grounder_path"]))
    history.save(out / "grounder-history.csv")


def _cmd_train_optibox(out, cfg):
    tr = _load_split(out, cfg, "train_path")
    va = _load_split(out, cfg, "val_path")
    vocab = _load_vocab(out, cfg)
    feat_dim, channels = _dims_from_records(tr)
    gpath = _resolve_path(out, cfg["grounder_path"])
    if not gpath.exists():
        raise ConfigError(f"grounding checkpoint {gpath} not found; train it first")
    gmodel = _build_grounder(cfg, len(vocab), feat_dim, cfg["seed"])
    gmodel.load(gpath)
    before = {k: v.copy() for k, v in gmodel.state_arrays().items()}
    rmodel = _build_refiner(cfg, len(vocab), feat_dim, channels, cfg["seed"])
    if (out / "encoder.ckpt").exists():
        table, encoder = _load_encoder_ckpt(out, cfg)
        train.apply_encoder_init(rmodel, table, encoder)
    tcfg = config.train_config_from(cfg).replace(stage="optibox")
    rmodel, history = train.train_optibox(tr, va, tcfg, gmodel, rmodel)
    after = gmodel.state_arrays()
    frozen = all(np.array_equal(before[k], after[k]) for k in before)
    if not frozen:
        raise NumericalError("grounder parameters changed during refinement training")
    rmodel.save(_resolve_path(out, cfg["refiner_path"]))
    history.save(out / "optibox-history.csv")


def _cmd_train_optibox_independent(out, cfg):
    tr = _load_split(out, cfg, "train_path")
    va = _load_split(out, cfg, "val_path")
    te = _load_split(out, cfg, "test_path")
    vocab = _load_vocab(out, cfg)
    feat_dim, channels = _dims_from_records(tr)
    rmodel = _build_refiner(cfg, len(vocab), feat_dim, channels, cfg["seed"])
    if (out / "encoder.ckpt").exists():
        table, encoder = _load_encoder_ckpt(out, cfg)
        train.apply_encoder_init(rmodel, table, encoder)
    tcfg = config.train_config_from(cfg).replace(stage="optibox_independent")
    rmodel, history, stats = train.train_optibox_independent(tr, va, te, tcfg, rmodel)
    rmodel.save(out / "refiner-independent.ckpt")
    history.save(out / "optibox-independent-history.csv")
    with open(out / "optibox-independent-stats.txt", "w", encoding="utf-8") as f:
        f.write(
            f"n_pairs: {stats['n_pairs']}\n"
            f"fraction_reaching_0.5: {stats['fraction_reaching']:.2f}\n"
            f"median_delta_iou: {stats['median_delta_iou']:.6f}\n"
        )


def _cmd_eval(out, cfg):
    te = _load_split(out, cfg, "test_path")
    vocab = _load_vocab(out, cfg)
    feat_dim, channels = _dims_from_records(te)
    gpath = _resolve_path(out, cfg["grounder_path"])
    if not gpath.exists():
        raise ConfigError(f"grounding checkpoint {gpath} not found")
    gmodel = _build_grounder(cfg, len(vocab), feat_dim, cfg["seed"])
    gmodel.load(gpath)
    rmodel = None
    rpath = _resolve_path(out, cfg["refiner_path"])
    if rpath.exists():
        rmodel = _build_refiner(cfg, len(vocab), feat_dim, channels, cfg["seed"])
        rmodel.load(rpath)
    report = evalkit.evaluate(
        te, gmodel, refiner=rmodel, threshold=cfg["threshold"]
    )
    report.save(out / "report.txt", out / "report.csv")
    predictions = []
    for rec in te:
        for q in rec.queries:
            box, gout = grounder.ground(q.ids, rec, gmodel)
            predictions.append((q.query_id, box, gout.alpha_prime))
    grounder.write_predictions(out / "predictions.jsonl", predictions)


def _cmd_refine(out, cfg):
    te = _load_split(out, cfg, "test_path")
    vocab = _load_vocab(out, cfg)
    feat_dim, channels = _dims_from_records(te)
    rpath = out / "refiner-independent.ckpt"
    if not rpath.exists():
        rpath = _resolve_path(out, cfg["refiner_path"])
    if not rpath.exists():
        raise ConfigError(f"refinement checkpoint {rpath} not found")
    rmodel = _build_refiner(cfg, len(vocab), feat_dim, channels, cfg["seed"])
    rmodel.load(rpath)
    pairs = train.build_regression_pairs(te, cfg["pair_iou_min"], cfg["pair_iou_max"])
    records = []
    for ri, pi, qi, _ in pairs:
        rec = te[ri]
        q = rec.queries[qi]
        refined = refinement.refine_box(
            rec.proposals[pi],
            rec.features[pi],
            rec.gmap,
            q.ids,
            rmodel,
            bounds=(rec.width, rec.height),
            iterations=cfg["iterations"],
        )
        records.append((q.query_id, rec.proposals[pi], refined, q.gt))
    refinement.write_refinements(out / "refinements.jsonl", records)


def _cmd_analyze(out, cfg):
    rows = refinement.read_refinements(out / "refinements.jsonl")
    if not rows:
        raise ConfigError("refinements.jsonl is empty; run `refine` first")
    deltas = sorted(a - b for _, _, _, b, a in rows)
    n = len(deltas)
    median = (
        deltas[n // 2] if n % 2 else 0.5 * (deltas[n // 2 - 1] + deltas[n // 2])
    )
    reach = sum(1 for _, _, _, _b, a in rows if a >= 0.5)
    ious_before = [b for _, _, _, b, _ in rows]
    ious_after = [a for _, _, _, _, a in rows]
    n_bins = 20
    hist_b, hist_a = [0] * n_bins, [0] * n_bins
    for v in ious_before:
        hist_b[min(int(v / 0.05), n_bins - 1)] += 1
    for v in ious_after:
        hist_a[min(int(v / 0.05), n_bins - 1)] += 1
    fine_rows = [
        (round(i * 0.05, 10), round((i + 1) * 0.05, 10), hist_b[i], hist_a[i])
        for i in range(n_bins)
    ]
    evalkit.write_histogram_csv(out / "iou-histogram.csv", fine_rows)
    with open(out / "analysis.txt", "w", encoding="utf-8") as f:
        f.write(
            f"pairs: {n}\n"
            f"median_delta_iou: {median:.6f}\n"
            f"fraction_reaching_0.5: {evalkit.round_pct(100.0 * reach / n):.2f}\n"
        )


def _parse_float_list(raw):
    return [float(v) for v in str(raw).split(",") if str(v).strip()]


def _cmd_grid_search(out, cfg):
    tr = _load_split(out, cfg, "train_path")
    va = _load_split(out, cfg, "val_path")
    vocab = _load_vocab(out, cfg)
    feat_dim, _ = _dims_from_records(tr)
    lams = _parse_float_list(cfg.get("grid_lambda", "10,100"))
    wds = _parse_float_list(cfg.get("grid_weight_decay", "0.0005,0.01"))
    tcfg = config.train_config_from(cfg)

    def factory(seed):
        return _build_grounder(cfg, len(vocab), feat_dim, seed)

    best_lam, best_wd, rows = train.grid_search(lams, wds, tr, va, tcfg, factory)
    with open(out / "grid-search.csv", "w", encoding="utf-8") as f:
        f.write("lambda,weight_decay,val_acc\n")
        for lam, wd, acc in rows:
            f.write(f"{lam:g},{wd:g},{acc:.2f}\n")
        f.write(f"# best: lambda={best_lam:g} weight_decay={best_wd:g}\n")


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "pretrain-autoencoder": _cmd_pretrain_autoencoder,
    "pretrain-projections": _cmd_pretrain_projections,
    "train-grounder": _cmd_train_grounder,
    "train-optibox": _cmd_train_optibox,
    "train-optibox-independent": _cmd_train_optibox_independent,
    "eval": _cmd_eval,
    "refine": _cmd_refine,
    "analyze": _cmd_analyze,
    "grid-search": _cmd_grid_search,
}


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        cfg = config.resolve(
            args.command, args.preset, args.config, args.set, args.seed
        )
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, args.command, args.preset, cfg)
        _HANDLERS[args.command](out, cfg)
        return 0
    except NumericalError as exc:
        print(f"optibox: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (OptiboxError, FileNotFoundError) as exc:
        print(f"optibox: {exc}", file=sys.stderr)
        return 2


def main():
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
