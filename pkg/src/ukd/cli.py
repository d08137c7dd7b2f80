"""``ukd`` command line: data synthesis, individual stages, the full pipeline and reports.

Exit codes: 0 on success, 2 for invalid input or configuration, 3 when a stage fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from .datamodel import (
    FormatError,
    SplitSpec,
    generate_synthetic,
    load_features,
    load_labels,
    make_split,
    save_features,
    save_labels,
)
from .distill import RelevantPairSet, build_relevant_pairs
from .embednet import TrainConfig, TrainingDivergedError, load_model, save_model
from .pipeline import ConfigError, ExperimentConfig, StageError, run_pipeline, write_report
from .retrieval import DIRECTIONS, evaluate_cross_modal
from .student import STUDENT_KINDS, train_student
from .teacher import STRATEGIES, train_teacher, write_loss_log

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("ukd")


class InvalidInput(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InvalidInput(f"file not found: {path}")
    return p


def _train_set(args):
    ds = load_features(_existing(args.features))
    if args.split:
        split = SplitSpec.from_dict(json.loads(_existing(args.split).read_text()))
        split.validate(ds.n)
        ds = ds.subset(split.retrieval_indices)
    return ds


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=args.lr,
            weight_decay=args.weight_decay,
            batch_size=args.batch_size,
            epochs=args.epochs,
            margin=args.margin,
            seed=args.seed,
            negative_samples=args.negatives,
            contrastive_margin=args.contrastive_margin,
        )
    except ValueError as err:
        raise InvalidInput(str(err)) from err


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--margin", type=float, default=d.margin, help="triplet margin")
    p.add_argument("--contrastive-margin", type=float, default=d.contrastive_margin)
    p.add_argument("--negatives", type=int, default=d.negative_samples, help="negatives per anchor")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--hidden", type=int, default=None, help="hidden width (default 4*K)")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    if args.classes < 2:
        raise InvalidInput("--classes must be >= 2")
    try:
        ds, labels = generate_synthetic(
            args.pairs, args.classes, args.dim_image, args.dim_text, args.noise, args.seed, args.max_labels
        )
    except ValueError as err:
        raise InvalidInput(str(err)) from err
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_features(ds, out / "features.ukdf")
    save_labels(labels, out / "labels.ukdl")
    if args.query:
        try:
            split = make_split(ds.n, args.query, args.seed)
        except ValueError as err:
            raise InvalidInput(str(err)) from err
        (out / "split.json").write_text(json.dumps(split.to_dict(), sort_keys=True) + "\n")
    log.info("wrote %d pairs to %s", ds.n, out)
    return EXIT_OK


def _fit(args, fn):
    """Run a training call; on divergence keep the last good model next to ``--out``."""
    try:
        return fn()
    except TrainingDivergedError as err:
        if err.last_good is not None:
            path = f"{args.out}.last_good"
            save_model(err.last_good, path)
            log.error("last good model written to %s", path)
        raise


def cmd_train_teacher(args) -> int:
    ds = _train_set(args)
    cfg = _train_config(args)
    model = _fit(args, lambda: train_teacher(ds, cfg, args.strategy, args.k, args.hidden))
    save_model(model, args.out)
    if args.loss_log:
        write_loss_log(model, args.loss_log)
    return EXIT_OK


def cmd_distill(args) -> int:
    ds = _train_set(args)
    model = load_model(_existing(args.model))
    n = ds.n
    if args.budget is not None and not 1 <= args.budget <= n * (n - 1):
        raise InvalidInput(f"--budget must lie in [1, N(N-1) = {n * (n - 1)}]")
    if max(args.k_img, args.k_txt) > n - 1 or min(args.k_img, args.k_txt) < 0:
        raise InvalidInput(f"--k-img/--k-txt must lie in [0, {n - 1}]")
    pairs = build_relevant_pairs(model, ds, args.k_img, args.k_txt, args.budget, args.per_instance_k)
    pairs.to_csv(args.out)
    log.info("wrote %d pairs to %s", len(pairs), args.out)
    return EXIT_OK


def cmd_train_student(args) -> int:
    ds = _train_set(args)
    try:
        pairs = RelevantPairSet.from_csv(_existing(args.pairs))
    except (ValueError, IndexError) as err:
        raise InvalidInput(f"{args.pairs}: {err}") from err
    if len(pairs) and max(pairs.i.max(), pairs.j.max()) >= ds.n:
        raise InvalidInput(f"{args.pairs}: pair index beyond the {ds.n} training rows")
    cfg = _train_config(args)
    model = _fit(args, lambda: train_student(args.kind, ds, pairs, cfg, args.k, args.hidden))
    save_model(model, args.out)
    if args.loss_log:
        write_loss_log(model, args.loss_log)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(_existing(args.model))
    if args.k_bits is not None and args.k_bits != model.k:
        raise InvalidInput(f"--k-bits {args.k_bits} does not match the checkpoint's {model.k} bits")
    ds = load_features(_existing(args.features))
    labels = load_labels(_existing(args.labels))
    split = SplitSpec.from_dict(json.loads(_existing(args.split).read_text()))
    try:
        split.validate(ds.n)
    except IndexError as err:
        raise InvalidInput(str(err)) from err
    report = evaluate_cross_modal(model, ds, labels, split, args.direction, args.k_list)
    report.write(args.out, args.curve)
    print(f"{args.direction} {report.k_bits} bits: mAP {report.map:.4f}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = ExperimentConfig.load(_existing(args.config))
    if args.output_dir:
        cfg.output_dir = args.output_dir
    records = run_pipeline(cfg)
    log.info("pipeline finished with %d records in %s", len(records), cfg.output_dir)
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.experiment_dir)
    if not (root / "manifest.jsonl").is_file():
        raise InvalidInput(f"{root}: no manifest.jsonl")
    try:
        summary, pairs = write_report(root)
    except (ValueError, KeyError, OSError) as err:
        raise InvalidInput(str(err)) from err
    print(summary)
    print(pairs)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ukd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim-image", type=int, required=True)
    p.add_argument("--dim-text", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-labels", type=int, default=2)
    p.add_argument("--query", type=int, default=0, help="also write split.json with this many queries")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    for name, fn, text in (
        ("train-teacher", cmd_train_teacher, "train the paired-only teacher"),
        ("train-student", cmd_train_student, "train a student from a pair CSV"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--features", required=True)
        p.add_argument("--split", help="train on the retrieval rows of this split")
        p.add_argument("--k", type=int, default=32 if name == "train-teacher" else 16, help="code length")
        p.add_argument("--out", required=True)
        p.add_argument("--loss-log")
        _add_train_flags(p)
        if name == "train-teacher":
            p.add_argument("--strategy", choices=STRATEGIES, default="uniform")
        else:
            p.add_argument("--kind", choices=STUDENT_KINDS, required=True)
            p.add_argument("--pairs", required=True, help="pair CSV from 'distill'")
        p.set_defaults(fn=fn)

    p = sub.add_parser("distill", help="select relevant pairs from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split")
    p.add_argument("--k-img", type=int, default=20)
    p.add_argument("--k-txt", type=int, default=20)
    size = p.add_mutually_exclusive_group()
    size.add_argument("--budget", type=int, help="keep this many pairs overall")
    size.add_argument("--per-instance-k", type=int, help="keep this many pairs per anchor")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint in Hamming space")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--direction", choices=sorted(DIRECTIONS), required=True)
    p.add_argument("--k-bits", type=int)
    p.add_argument("--k-list", type=int, nargs="+", default=[1, 10, 100, 500])
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="run or resume a full experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("report", help="rebuild summary tables of an experiment")
    p.add_argument("experiment_dir")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        warnings.showwarning = lambda msg, *a, **k: log.warning("%s", msg)
        try:
            return args.fn(args)
        except (InvalidInput, ConfigError, FormatError) as err:
            log.error("%s", err)
            return EXIT_INVALID
        except StageError as err:
            log.error("%s (outputs of earlier stages kept)", err)
            return EXIT_STAGE
        except TrainingDivergedError as err:
            log.error("training diverged: %s", err)
            return EXIT_STAGE
        except (ValueError, IndexError, KeyError, FileNotFoundError) as err:
            log.error("%s", err)
            return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
