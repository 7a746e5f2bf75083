"""Evaluation schemes, confusion statistics, and report serialization.

Three schemes mirror the study designs:

* ``loo``: leave one subject out; train on the rest, test on the held-out
  subject, one fold per subject.
* ``subject-specific``: per subject, a stratified 4:1 split trained and
  tested within that subject. Refused for the rt task, whose fast/slow
  classes are defined relative to each subject's own median and are only
  meaningfully decoded across subjects.
* ``all-data``: pool all subjects and repeat a seeded stratified 4:1
  split (10 repeats by default), one fold per repeat.

Accuracy, confusion matrices (counts and row percentages), and per-class
F1 are computed per fold and averaged. Reports serialize to JSON and to a
small text table. Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .network import TrainConfig, build_network, predict, train

SCHEMES = ("loo", "subject-specific", "all-data")


# ---------------------------------------------------------------------------
# confusion statistics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionStats:
    counts: np.ndarray        # 2x2 int64, rows = true class, cols = predicted
    percent: np.ndarray       # rows sum to 100 (all-zero for an empty row)
    f1: tuple                 # per-class F1, (class 0, class 1)
    macro_f1: float
    accuracy: float
    zero_denominator: bool    # some F1 or row had an empty denominator


def confusion_and_f1(y_true, y_pred) -> ConfusionStats:
    """Exact tallies for binary labels; zero-denominator F1 terms become 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("y_true and y_pred must be equal-length 1-D arrays")
    if y_true.size == 0:
        raise ValueError("cannot score an empty fold")
    for arr in (y_true, y_pred):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)

    percent = np.zeros((2, 2), dtype=np.float64)
    flagged = False
    for c in (0, 1):
        row = counts[c].sum()
        if row:
            percent[c] = 100.0 * counts[c] / row
        else:
            flagged = True

    f1 = []
    for c in (0, 1):
        tp = counts[c, c]
        predicted = counts[:, c].sum()
        actual = counts[c].sum()
        if predicted == 0 or actual == 0:
            flagged = True
        prec = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        if prec + rec == 0.0:
            flagged = True
            f1.append(0.0)
        else:
            f1.append(2.0 * prec * rec / (prec + rec))

    accuracy = float(np.trace(counts)) / y_true.size
    return ConfusionStats(
        counts=counts,
        percent=percent,
        f1=(float(f1[0]), float(f1[1])),
        macro_f1=0.5 * (f1[0] + f1[1]),
        accuracy=accuracy,
        zero_denominator=flagged,
    )


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

def split_loo(dataset):
    """Yield (held_out_subject, train_indices, test_indices) per subject."""
    subjects = list(dataset.subjects)
    if len(subjects) < 2:
        raise ValueError(
            "leave-one-out needs at least two subjects; "
            "use the subject-specific scheme for one"
        )
    ids = dataset.subject_ids
    for held in subjects:
        test = np.flatnonzero(ids == held)
        train = np.flatnonzero(ids != held)
        yield held, train, test


def split_ratio(labels, seed, test_fraction: float = 0.2):
    """Stratified shuffled split with round(n * fraction) test trials.

    Per-class test quotas are proportional, with remainders assigned by the
    largest fractional part, so the total is exact and classes stay balanced.
    Warns if either side ends up missing a class entirely.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    n_test = int(round(n * test_fraction))
    if not 0 < n_test < n:
        raise ValueError(f"cannot carve a test set of {n_test} from {n} trials")
    rng = np.random.default_rng(seed)

    classes = np.unique(labels)
    exact = {c: (labels == c).sum() * n_test / n for c in classes}
    quota = {c: int(np.floor(exact[c])) for c in classes}
    short = n_test - sum(quota.values())
    for c in sorted(classes, key=lambda c: (exact[c] - quota[c], -c), reverse=True):
        if short <= 0:
            break
        quota[c] += 1
        short -= 1

    test_parts = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        rng.shuffle(members)
        test_parts.append(members[: quota[c]])
    test = np.sort(np.concatenate(test_parts))
    mask = np.zeros(n, dtype=bool)
    mask[test] = True
    train = np.flatnonzero(~mask)

    for side, idx in (("train", train), ("test", test)):
        present = np.unique(labels[idx])
        missing = [int(c) for c in classes if c not in present]
        if missing:
            warnings.warn(
                f"class {missing} absent from the {side} side of the split",
                stacklevel=2,
            )
    return train, test


# ---------------------------------------------------------------------------
# scheme runner
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: str
    n_train: int
    n_test: int
    stats: ConfusionStats


@dataclass
class EvalReport:
    task: str
    scheme: str
    seed: int
    folds: list
    config: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.stats.accuracy for f in self.folds])

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def sd_accuracy(self) -> float:
        return float(self.accuracies.std())

    @property
    def mean_confusion_percent(self) -> np.ndarray:
        return np.mean([f.stats.percent for f in self.folds], axis=0)

    @property
    def macro_f1(self) -> float:
        return float(np.mean([f.stats.macro_f1 for f in self.folds]))

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "scheme": self.scheme,
            "seed": self.seed,
            "config": self.config,
            "mean_accuracy": self.mean_accuracy,
            "sd_accuracy": self.sd_accuracy,
            "macro_f1": self.macro_f1,
            "mean_confusion_percent": self.mean_confusion_percent.tolist(),
            "folds": [
                {
                    "fold": f.fold,
                    "n_train": f.n_train,
                    "n_test": f.n_test,
                    "accuracy": f.stats.accuracy,
                    "confusion_counts": f.stats.counts.tolist(),
                    "confusion_percent": f.stats.percent.tolist(),
                    "f1": list(f.stats.f1),
                    "macro_f1": f.stats.macro_f1,
                    "zero_denominator": f.stats.zero_denominator,
                }
                for f in self.folds
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def text_table(self) -> str:
        lines = [
            "Task   | Scheme           | Mean Accuracy",
            "-------+------------------+--------------",
            f"{self.task:<6} | {self.scheme:<16} | "
            f"{100 * self.mean_accuracy:.1f}% (sd {100 * self.sd_accuracy:.1f})",
            "",
            "fold            | n_test | accuracy",
        ]
        for f in self.folds:
            lines.append(
                f"{f.fold:<15} | {f.n_test:>6} | {100 * f.stats.accuracy:6.1f}%"
            )
        return "\n".join(lines)


def summary_table(reports) -> str:
    """One-line-per-report roll-up: Task | Mean Accuracy."""
    lines = ["Task   | Mean Accuracy", "-------+--------------"]
    for r in reports:
        lines.append(f"{r.task:<6} | {100 * r.mean_accuracy:.1f}%")
    return "\n".join(lines)


def _fit_and_score(x, y, train_idx, test_idx, arch, cfg, net_seed):
    net = build_network(arch, seed=net_seed)
    train(net, (x[train_idx], y[train_idx]), cfg)
    pred, _ = predict(net, x[test_idx])
    return confusion_and_f1(y[test_idx], pred)


def run_scheme(
    dataset,
    scheme: str,
    train_config: TrainConfig | None = None,
    seed: int = 0,
    repeats: int = 10,
    arch: str | None = None,
) -> EvalReport:
    """Train and score the task network under one evaluation scheme."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    task = dataset.task
    if scheme == "subject-specific" and task == "rt":
        raise ValueError(
            "the subject-specific scheme does not apply to the rt task: "
            "fast/slow labels are relative to each subject's median"
        )
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    arch = arch or task
    cfg = train_config or TrainConfig()
    x, y = dataset.x, dataset.y

    folds = []
    if scheme == "loo":
        for k, (held, tr, te) in enumerate(split_loo(dataset)):
            stats = _fit_and_score(x, y, tr, te, arch, replace(cfg, seed=cfg.seed + k),
                                   net_seed=seed + 1000 * k)
            folds.append(FoldResult(f"subject:{held}", tr.size, te.size, stats))
    elif scheme == "subject-specific":
        for k, subject in enumerate(dataset.subjects):
            idx = np.flatnonzero(dataset.subject_ids == subject)
            tr_local, te_local = split_ratio(y[idx], seed=seed + k)
            tr, te = idx[tr_local], idx[te_local]
            stats = _fit_and_score(x, y, tr, te, arch, replace(cfg, seed=cfg.seed + k),
                                   net_seed=seed + 1000 * k)
            folds.append(FoldResult(f"subject:{subject}", tr.size, te.size, stats))
    else:  # all-data
        for k in range(repeats):
            tr, te = split_ratio(y, seed=seed + k)
            stats = _fit_and_score(x, y, tr, te, arch, replace(cfg, seed=cfg.seed + k),
                                   net_seed=seed + 1000 * k)
            folds.append(FoldResult(f"repeat:{k}", tr.size, te.size, stats))

    return EvalReport(
        task=task,
        scheme=scheme,
        seed=seed,
        folds=folds,
        config={
            "arch": arch,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "holdout_fraction": cfg.holdout_fraction,
            "patience": cfg.patience,
            "repeats": repeats if scheme == "all-data" else None,
            "n_trials": int(len(dataset)),
            "subjects": list(dataset.subjects),
            "class_counts": {str(k): v for k, v in dataset.class_counts().items()},
        },
    )
