"""Command-line front door for the synthesis-to-report pipeline.

Subcommands mirror the pipeline stages: synth, extract, train, predict,
evaluate, plot. Every command is deterministic for a fixed seed and safe to
rerun; extract skips files that already exist unless --force is given.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import evaluation, models, pipeline
from .config import load_config
from .dataset import MANIFEST_NAME, read_label_file, read_manifest, synthesize_dataset
from .errors import (ConfigError, DataError, SpeechQAError,
                     TrainingDivergedError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

EXTRACT_KINDS = pipeline.FEATURE_KINDS + ("all",)


def model_path(data_dir, name):
    return os.path.join(data_dir, "models", f"{name}.mdl")


def report_dir(data_dir):
    return os.path.join(data_dir, "reports")


def parse_model(arg):
    """Split a --model argument like mel_dnn+elm into (kind, use_elm)."""
    parts = arg.split("+")
    kind = parts[0]
    if kind not in models.MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; "
                          f"choose from {', '.join(models.MODEL_KINDS)}")
    if len(parts) == 1:
        return kind, False
    if len(parts) > 2 or parts[1] != "elm":
        raise ConfigError(f"bad model suffix in {arg!r}; only '+elm' is supported")
    if kind != "mel_dnn":
        raise ConfigError("the ELM aggregation head applies to mel_dnn only")
    return kind, True


def _model_name(arg):
    return arg.replace("+", "_")


def _configure(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.__post_init__()
    if args.data is not None:
        cfg.data_dir = args.data
    return cfg


def _manifest(cfg):
    path = os.path.join(cfg.data_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no manifest at {path}; run synth first")
    return read_manifest(path)


def _labeled_split(cfg, manifest):
    labels = manifest.labels()
    ids = [uid for uid in manifest.ids() if uid in labels]
    if len(ids) < 3:
        raise DataError("manifest has fewer than 3 labeled utterances")
    return labels, evaluation.split(ids, cfg.seed)


def cmd_synth(cfg, args):
    out_dir = cfg.data_dir
    parent = os.path.dirname(os.path.abspath(out_dir)) or "."
    if not os.path.isdir(parent):
        raise DataError(f"output location {parent} does not exist")
    if args.n is not None:
        cfg.synth.n_utterances = args.n
    cfg.synth.out_dir = out_dir
    external = read_label_file(cfg.label_file) if cfg.label_file else None
    manifest = synthesize_dataset(cfg.synth, external)
    print(f"synth: wrote {len(manifest.records)} utterances to {out_dir}")
    return EXIT_OK


def cmd_extract(cfg, args):
    manifest = _manifest(cfg)
    _, assignment = _labeled_split(cfg, manifest)
    kinds = pipeline.FEATURE_KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        n = pipeline.extract_features(
            cfg.data_dir, manifest, kind, force=args.force,
            ivec_cfg=cfg.ivec, train_ids=assignment.ids("train"),
            jobs=args.jobs)
        print(f"extract: {kind}: wrote {n} feature files")
    return EXIT_OK


def cmd_train(cfg, args):
    kind, use_elm = parse_model(args.model)
    manifest = _manifest(cfg)
    spec = models.default_spec(kind, **cfg.model.spec_kwargs())
    if kind == "ivec_dnn":
        spec.input_shape = (cfg.ivec.dim,)
    checkpoint, assignment, features = pipeline.train_from_manifest(
        cfg.data_dir, manifest, kind, spec=spec, train_cfg=cfg.train,
        seed=cfg.seed, windows_per_utt=cfg.model.windows_per_utt)
    if use_elm:
        checkpoint = models.fit_elm_head(
            checkpoint, features, manifest.labels(), assignment.ids("train"),
            val_ids=assignment.ids("val"), n_hidden=cfg.model.elm_hidden,
            ridge=cfg.model.elm_ridge, seed=cfg.seed)
    path = model_path(cfg.data_dir, _model_name(args.model))
    os.makedirs(os.path.dirname(path), exist_ok=True)
    models.save(checkpoint, path)
    best = min(checkpoint.val_history) if checkpoint.val_history else float("nan")
    print(f"train: {args.model}: {checkpoint.epochs} epochs, "
          f"best val MSE {best:.6f}, saved {path}")
    return EXIT_OK


def cmd_predict(cfg, args):
    name = _model_name(args.model)
    path = model_path(cfg.data_dir, name)
    if not os.path.exists(path):
        raise DataError(f"no checkpoint at {path}; run train first")
    checkpoint = models.load(path)
    manifest = _manifest(cfg)
    fkind = pipeline.MODEL_FEATURE_KIND[checkpoint.spec.kind]
    features = pipeline.load_features(cfg.data_dir, fkind, manifest.ids())
    predictions, errored = pipeline.predict_all(checkpoint, features,
                                                manifest.ids())
    os.makedirs(report_dir(cfg.data_dir), exist_ok=True)
    out = os.path.join(report_dir(cfg.data_dir), f"predictions_{name}.csv")
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["utterance_id", "mos"])
        for uid in sorted(predictions):
            writer.writerow([uid, f"{np.clip(predictions[uid], 1.0, 5.0):.6f}"])
    print(f"predict: {name}: {len(predictions)} utterances scored, "
          f"{len(errored)} errored, wrote {out}")
    return EXIT_OK


def cmd_evaluate(cfg, args):
    manifest = _manifest(cfg)
    labels, assignment = _labeled_split(cfg, manifest)
    test_ids = assignment.ids("test")
    os.makedirs(report_dir(cfg.data_dir), exist_ok=True)
    reports = []
    for arg in args.model.split(","):
        name = _model_name(arg.strip())
        path = model_path(cfg.data_dir, name)
        if not os.path.exists(path):
            raise DataError(f"no checkpoint at {path}; run train first")
        checkpoint = models.load(path)
        fkind = pipeline.MODEL_FEATURE_KIND[checkpoint.spec.kind]
        features = pipeline.load_features(cfg.data_dir, fkind, test_ids)
        report = pipeline.evaluate_on_split(checkpoint, features, labels,
                                            test_ids, name)
        evaluation.write_residuals_csv(
            report, os.path.join(report_dir(cfg.data_dir),
                                 f"residuals_{name}.csv"))
        reports.append(report)
    for scores_path in args.scores or ():
        scores = evaluation.import_external_scores(scores_path)
        name = os.path.splitext(os.path.basename(scores_path))[0]
        subset = {uid: scores[uid] for uid in test_ids if uid in scores}
        reports.append(evaluation.evaluate(subset, labels, name))
    out = os.path.join(report_dir(cfg.data_dir), "report.csv")
    evaluation.write_report_csv(reports, out)
    for r in reports:
        print(f"evaluate: {r.model}: rho={r.rho:.4f} mse={r.mse:.4f} n={r.n}")
    print(f"evaluate: wrote {out}")
    return EXIT_OK


def cmd_plot(cfg, args):
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "speechqa"
    import matplotlib.pyplot as plt

    name = _model_name(args.model)
    src = os.path.join(report_dir(cfg.data_dir), f"residuals_{name}.csv")
    if not os.path.exists(src):
        raise DataError(f"no residuals file at {src}; run evaluate first")
    preds, labs = [], []
    with open(src, encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            preds.append(float(row["prediction"]))
            labs.append(float(row["label"]))

    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].scatter(labs, preds, s=12, alpha=0.7)
    axes[0].plot([1, 5], [1, 5], "k--", linewidth=1)
    axes[0].set_xlabel("label MOS")
    axes[0].set_ylabel("predicted MOS")
    axes[0].set_title(name)
    residuals = np.array(preds) - np.array(labs)
    axes[1].hist(residuals, bins=20)
    axes[1].set_xlabel("prediction - label")
    axes[1].set_ylabel("count")
    axes[1].set_title("residuals")
    fig.tight_layout()
    out = os.path.join(report_dir(cfg.data_dir), f"plot_{name}.svg")
    fig.savefig(out, metadata={"Date": None})
    plt.close(fig)
    print(f"plot: wrote {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="speechqa",
        description="Non-intrusive speech quality estimation pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="INI config file")
    common.add_argument("--seed", type=int, default=None,
                        help="override the pipeline seed")
    common.add_argument("--data", default=None,
                        help="override the dataset directory")
    common.add_argument("--jobs", type=int, default=1,
                        help="worker processes for per-utterance extraction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="render the synthetic dataset and manifest")
    p.add_argument("--n", type=int, default=None, help="number of utterances")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", parents=[common],
                       help="write per-utterance feature files")
    p.add_argument("--kind", choices=EXTRACT_KINDS, default="all")
    p.add_argument("--force", action="store_true",
                   help="recompute feature files that already exist")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--model", required=True,
                   help="cqt_cnn, ivec_dnn, mel_dnn, or mel_dnn+elm")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common],
                       help="score every utterance with a trained model")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common],
                       help="test-split report CSV for one or more models")
    p.add_argument("--model", required=True,
                   help="comma-separated model list, e.g. mel_dnn,mel_dnn+elm")
    p.add_argument("--scores", action="append", default=None,
                   help="external (id score) file added as a baseline row")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", parents=[common],
                       help="SVG scatter and residual histogram for a model")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _configure(args)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SpeechQAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
