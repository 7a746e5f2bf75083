"""Command-line pipeline: generate -> preprocess -> train -> eval -> report.

Every command resolves its full configuration, writes it to a provenance
file beside its outputs, refuses to clobber a non-empty output directory
unless --force is given, and reports failures as one JSON object on stderr
with a nonzero exit code. Given the same seeds, reruns produce byte-identical
artifacts (pass --single-thread to pin BLAS reductions). Set EEGMOTION_LOG
to DEBUG/INFO/WARNING to control verbosity.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, binio, dsp, evaluate, network, synth
from .data import (
    InsufficientTrialsError,
    PreprocessConfig,
    build_intent_dataset,
    build_rt_dataset,
    load_dataset,
    load_recording,
    merge_datasets,
    preprocess_recording,
    save_dataset,
)

log = logging.getLogger("eegmotion")


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(
            f"{path} already contains files; pass --force to overwrite"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_provenance(path: Path, command: str, resolved: dict) -> None:
    payload = {
        "tool": "eegmotion",
        "version": __version__,
        "command": command,
        "config": resolved,
    }
    (path / "provenance.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _json_error(exc: Exception) -> None:
    payload = {"error": str(exc), "type": type(exc).__name__}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = synth.CohortConfig(
        n_subjects=args.subjects,
        trials_per_mode=args.trials,
        snr=args.snr,
        seed=args.seed,
    )
    out = _prepare_out(Path(args.out), args.force)
    log.info("generating %d subjects x %d trials/mode (snr %.2f, seed %d)",
             cfg.n_subjects, cfg.trials_per_mode, cfg.snr, cfg.seed)
    recordings, truth = synth.generate_cohort(cfg)
    synth.save_cohort(recordings, truth, out, config=cfg)
    _write_provenance(
        out,
        "generate",
        {
            "subjects": cfg.n_subjects,
            "trials_per_mode": cfg.trials_per_mode,
            "snr": cfg.snr,
            "seed": cfg.seed,
            "rt_shift": cfg.rt_shift,
            "rt_mu": cfg.rt_mu,
            "rt_sigma": cfg.rt_sigma,
            "subject_variability": cfg.subject_variability,
        },
    )
    log.info("wrote cohort to %s", out)
    return 0


def cmd_preprocess(args) -> int:
    raw = Path(args.raw)
    if not raw.is_dir():
        raise FileNotFoundError(f"raw cohort directory {raw} not found")
    subject_dirs = sorted(p for p in raw.iterdir() if p.is_dir())
    if not subject_dirs:
        raise FileNotFoundError(f"{raw} contains no subject recordings")
    out = _prepare_out(Path(args.out), args.force)

    pre_cfg = PreprocessConfig(
        filter_spec=dsp.FilterSpec(mode=args.filter_mode),
        ica_threshold=args.ica_threshold,
        ica_seed=args.seed,
        skip_ica=args.no_ica,
    )
    tasks = ("intent", "rt") if args.task == "both" else (args.task,)

    intent_parts, rt_parts, reports, rt_excluded = [], [], [], []
    for sub in subject_dirs:
        rec = load_recording(sub)
        log.info("preprocessing %s", rec.subject_id)
        pre = preprocess_recording(rec, pre_cfg)
        reports.append(pre.report)
        if "intent" in tasks:
            intent_parts.append(build_intent_dataset(rec, pre))
        if "rt" in tasks:
            try:
                rt_parts.append(
                    build_rt_dataset(
                        rec, pre, policy=args.rt_policy, min_trials=args.min_trials
                    )
                )
            except InsufficientTrialsError as e:
                log.warning("excluding %s from rt task: %s", rec.subject_id, e)
                rt_excluded.append(rec.subject_id)

    resolved = {
        "raw": str(raw),
        "task": args.task,
        "filter_mode": args.filter_mode,
        "ica_threshold": args.ica_threshold,
        "no_ica": args.no_ica,
        "rt_policy": args.rt_policy,
        "min_trials": args.min_trials,
        "seed": args.seed,
        "rt_excluded_subjects": rt_excluded,
        "subject_reports": reports,
    }
    if "intent" in tasks:
        ds = merge_datasets(intent_parts)
        save_dataset(ds, out / "intent", provenance={"seed": args.seed})
        log.info("intent: %d trials, classes %s", len(ds), ds.class_counts())
    if "rt" in tasks:
        if not rt_parts:
            raise InsufficientTrialsError(
                "every subject was excluded from the rt task"
            )
        ds = merge_datasets(rt_parts)
        save_dataset(ds, out / "rt", provenance={"seed": args.seed})
        log.info("rt: %d trials, classes %s", len(ds), ds.class_counts())
    _write_provenance(out, "preprocess", resolved)
    return 0


def _train_config(args) -> network.TrainConfig:
    return network.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        holdout_fraction=args.holdout,
        patience=args.patience,
    )


def cmd_train(args) -> int:
    ds = load_dataset(Path(args.data))
    out = _prepare_out(Path(args.out), args.force)
    cfg = _train_config(args)
    net = network.build_network(ds.task, seed=args.seed)
    log.info("training %s network on %d trials", ds.task, len(ds))
    history = network.train(net, ds, cfg)
    network.save_checkpoint(
        net, out / "checkpoint.bin", meta={"task": ds.task, "seed": args.seed}
    )
    (out / "history.json").write_text(
        json.dumps(
            {
                "train_loss": history.train_loss,
                "train_accuracy": history.train_accuracy,
                "val_loss": history.val_loss,
                "epochs_run": history.epochs_run,
                "best_epoch": history.best_epoch,
                "stopped_early": history.stopped_early,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    _write_provenance(
        out,
        "train",
        {
            "data": str(args.data),
            "task": ds.task,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "holdout_fraction": cfg.holdout_fraction,
            "patience": cfg.patience,
            "seed": args.seed,
        },
    )
    log.info("final train loss %.4f after %d epochs",
             history.train_loss[-1], history.epochs_run)
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(Path(args.data))
    out = _prepare_out(Path(args.out), args.force)
    cfg = _train_config(args)
    report = evaluate.run_scheme(
        ds,
        args.scheme,
        train_config=cfg,
        seed=args.seed,
        repeats=args.repeats,
    )
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.text_table() + "\n")
    _write_provenance(
        out,
        "eval",
        {
            "data": str(args.data),
            "task": ds.task,
            "scheme": args.scheme,
            "repeats": args.repeats,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "holdout_fraction": cfg.holdout_fraction,
            "patience": cfg.patience,
            "seed": args.seed,
        },
    )
    print(report.text_table())
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        payload = json.loads((Path(path) / "report.json").read_text())
        reports.append(payload)
    lines = ["Task   | Scheme           | Mean Accuracy | SD    | Macro F1"]
    lines.append("-------+------------------+---------------+-------+---------")
    for r in reports:
        lines.append(
            f"{r['task']:<6} | {r['scheme']:<16} | "
            f"{100 * r['mean_accuracy']:12.1f}% | "
            f"{100 * r['sd_accuracy']:5.1f} | {r['macro_f1']:.3f}"
        )
    table = "\n".join(lines)
    print(table)
    if args.csv:
        rows = ["task,scheme,mean_accuracy,sd_accuracy,macro_f1,n_folds"]
        for r in reports:
            rows.append(
                f"{r['task']},{r['scheme']},{r['mean_accuracy']:.6f},"
                f"{r['sd_accuracy']:.6f},{r['macro_f1']:.6f},{len(r['folds'])}"
            )
        Path(args.csv).write_text("\n".join(rows) + "\n")
        log.info("wrote %s", args.csv)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--holdout", type=float, default=0.1,
                   help="validation fraction for early stopping (0 disables)")
    p.add_argument("--patience", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eegmotion",
        description="EEG movement decoding pipeline: synthesize, preprocess, "
                    "train, and evaluate.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--force", action="store_true",
                        help="overwrite a non-empty output directory")
    common.add_argument("--single-thread", action="store_true",
                        help="pin numeric libraries to one thread")

    g = sub.add_parser("generate", parents=[common],
                       help="synthesize a raw cohort with ground truth")
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", type=int, default=13)
    g.add_argument("--trials", type=int, default=210,
                   help="trials per mode per subject")
    g.add_argument("--snr", type=float, default=2.0)
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", parents=[common],
                       help="filter, clean, segment, and label a raw cohort")
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("intent", "rt", "both"), default="both")
    p.add_argument("--filter-mode", choices=("zero-phase", "causal"),
                   default="zero-phase")
    p.add_argument("--ica-threshold", type=float, default=0.7)
    p.add_argument("--no-ica", action="store_true")
    p.add_argument("--rt-policy", choices=("median", "tercile"), default="median")
    p.add_argument("--min-trials", type=int, default=20)
    p.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", parents=[common],
                       help="train one task network on a trials directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common],
                       help="train and score under an evaluation scheme")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--scheme", choices=evaluate.SCHEMES, required=True)
    e.add_argument("--repeats", type=int, default=10,
                   help="partitions for the all-data scheme")
    _add_train_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarize one or more eval reports")
    r.add_argument("reports", nargs="+")
    r.add_argument("--csv", help="also write a CSV summary to this path")
    r.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("EEGMOTION_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)

    limit = contextlib.nullcontext()
    if getattr(args, "single_thread", False):
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(limits=1)

    try:
        with limit:
            return args.func(args)
    except (ValueError, OSError, binio.FormatError, KeyError) as exc:
        _json_error(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
