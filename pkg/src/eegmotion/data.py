"""Data model, labeling rules, preprocessing pipeline, and dataset files.

A `RawRecording` holds one subject's continuous EEG (1024 Hz), robot
kinematics (180 Hz), and per-trial events. The pipeline turns it into
`LabeledDataset`s of 128x125 trials for two binary tasks:

* intent: self-initiated (active, label 1) vs robot-driven (passive, 0);
* rt: fast (0) vs slow (1) reaction time, split per subject.

Reaction time is the lag from stimulus onset to the first kinematic sample
at or above the velocity threshold. RTs outside [0.15, 0.8] s are removed
before discretization. All file formats are checksummed little-endian
float32 arrays beside a JSON manifest.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio, dsp, ica

EEG_CHANNELS = 128
EEG_FS = 1024
KIN_FS = 180
TRIAL_SHAPE = (128, 125)
RT_BOUNDS = (0.15, 0.8)
DIRECTIONS = ("left", "right", "up", "down")
MODES = ("active", "passive")

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


class InsufficientTrialsError(ValueError):
    """A subject has too few surviving RT trials to discretize."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class Events:
    """Per-trial markers, parallel arrays of equal length.

    `stimulus_sample` and `movement_sample` are EEG-rate sample indices
    (movement_sample may be -1 when unknown); `mode` entries are "active",
    "passive", or "" for unmarked trials.
    """

    stimulus_sample: np.ndarray
    direction: list
    movement_sample: np.ndarray
    mode: list

    def __post_init__(self):
        self.stimulus_sample = np.asarray(self.stimulus_sample, dtype=np.int64)
        self.movement_sample = np.asarray(self.movement_sample, dtype=np.int64)
        self.direction = [str(d) for d in self.direction]
        self.mode = [str(m) for m in self.mode]
        n = len(self.stimulus_sample)
        if not (len(self.direction) == len(self.movement_sample) == len(self.mode) == n):
            raise ValueError("event arrays must have equal length")
        for d in self.direction:
            if d not in DIRECTIONS + ("",):
                raise ValueError(f"unknown direction {d!r}")
        for m in self.mode:
            if m not in MODES + ("",):
                raise ValueError(f"unknown trial mode {m!r}")

    def __len__(self):
        return len(self.stimulus_sample)


@dataclass
class RawRecording:
    """One subject's synchronized EEG, kinematics, and event streams.

    Kinematics rows are (x, y, vx, vy). Both streams share t=0.
    """

    subject_id: str
    eeg: np.ndarray
    kinematics: np.ndarray
    events: Events
    fs_eeg: int = EEG_FS
    fs_kin: int = KIN_FS

    def __post_init__(self):
        self.eeg = np.asarray(self.eeg)
        self.kinematics = np.asarray(self.kinematics)
        if self.eeg.ndim != 2:
            raise ValueError("eeg must be (channels, samples)")
        if self.kinematics.ndim != 2 or self.kinematics.shape[0] != 4:
            raise ValueError("kinematics must be (4, samples): x, y, vx, vy")
        dur = self.eeg.shape[1] / self.fs_eeg
        stim = self.events.stimulus_sample
        if stim.size and (stim.min() < 0 or stim.max() >= self.eeg.shape[1]):
            raise ValueError("stimulus events fall outside the recording")
        move = self.events.movement_sample
        valid = move[move >= 0]
        if valid.size and valid.max() >= self.eeg.shape[1]:
            raise ValueError("movement events fall outside the recording")
        if abs(self.kinematics.shape[1] / self.fs_kin - dur) > 1.0:
            raise ValueError("EEG and kinematics durations disagree by more than 1 s")

    @property
    def duration(self) -> float:
        return self.eeg.shape[1] / self.fs_eeg


@dataclass
class Trial:
    """One preprocessed 128x125 trial with its binary label."""

    x: np.ndarray
    y: int
    subject_id: str
    trial_index: int
    task: str
    rt_seconds: float | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        if self.x.shape != TRIAL_SHAPE:
            raise ValueError(f"trial x must be {TRIAL_SHAPE}, got {self.x.shape}")
        if self.y not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.y}")
        if self.task not in ("intent", "rt"):
            raise ValueError(f"task must be 'intent' or 'rt', got {self.task!r}")
        if self.task == "rt":
            if self.rt_seconds is None:
                raise ValueError("rt trials must carry rt_seconds")
            if not RT_BOUNDS[0] <= self.rt_seconds <= RT_BOUNDS[1]:
                raise ValueError(
                    f"rt_seconds {self.rt_seconds} outside {RT_BOUNDS}"
                )
        elif self.rt_seconds is not None:
            raise ValueError("intent trials must not carry rt_seconds")


@dataclass
class LabeledDataset:
    """Trials for one task, possibly spanning several subjects."""

    trials: list
    task: str
    subjects: list

    def __post_init__(self):
        for t in self.trials:
            if t.task != self.task:
                raise ValueError(f"trial task {t.task!r} != dataset task {self.task!r}")

    def __len__(self):
        return len(self.trials)

    @property
    def x(self) -> np.ndarray:
        return np.stack([t.x for t in self.trials]) if self.trials else \
            np.zeros((0,) + TRIAL_SHAPE, dtype=np.float32)

    @property
    def y(self) -> np.ndarray:
        return np.array([t.y for t in self.trials], dtype=np.int64)

    @property
    def subject_ids(self) -> np.ndarray:
        return np.array([t.subject_id for t in self.trials])

    def class_counts(self) -> dict:
        y = self.y
        return {0: int((y == 0).sum()), 1: int((y == 1).sum())}

    def for_subject(self, subject_id: str) -> "LabeledDataset":
        kept = [t for t in self.trials if t.subject_id == subject_id]
        return LabeledDataset(kept, self.task, [subject_id])


# ---------------------------------------------------------------------------
# labeling
# ---------------------------------------------------------------------------

@dataclass
class IntentLabels:
    indices: np.ndarray   # event indices that carried a mode marker
    labels: np.ndarray    # 1 = active, 0 = passive, aligned with indices
    skipped: int          # trials without a mode marker


def label_intent(recording: RawRecording) -> IntentLabels:
    """Active trials -> 1, passive -> 0; unmarked trials are skipped."""
    idx, labels = [], []
    skipped = 0
    for i, mode in enumerate(recording.events.mode):
        if mode == "active":
            idx.append(i)
            labels.append(1)
        elif mode == "passive":
            idx.append(i)
            labels.append(0)
        else:
            skipped += 1
    return IntentLabels(
        np.asarray(idx, dtype=np.int64), np.asarray(labels, dtype=np.int64), skipped
    )


def compute_rt(
    kinematics: np.ndarray,
    stimulus_seconds: float,
    fs_kin: int = KIN_FS,
    threshold: float = 0.05,
    max_wait: float = 1.5,
):
    """Reaction time: stimulus onset to the first above-threshold speed sample.

    Speed is sqrt(vx^2 + vy^2). Returns the time difference in seconds, or
    None when the threshold is never crossed within `max_wait` seconds
    (a no-response trial). Kinematics must cover `max_wait` s post-stimulus.
    """
    kin = np.asarray(kinematics, dtype=np.float64)
    if kin.ndim != 2 or kin.shape[0] != 4:
        raise ValueError("kinematics must be (4, samples): x, y, vx, vy")
    n = kin.shape[1]
    if (stimulus_seconds + max_wait) * fs_kin > n:
        raise ValueError(
            f"kinematics end {n / fs_kin:.3f} s; need {max_wait} s after the "
            f"stimulus at {stimulus_seconds:.3f} s"
        )
    speed = np.hypot(kin[2], kin[3])
    first = int(np.floor(stimulus_seconds * fs_kin)) + 1  # strictly after onset
    last = int(np.floor((stimulus_seconds + max_wait) * fs_kin))
    window = speed[first : last + 1]
    hits = np.flatnonzero(window >= threshold)
    if hits.size == 0:
        return None
    return (first + int(hits[0])) / fs_kin - stimulus_seconds


@dataclass
class RtOutlierReport:
    kept_indices: np.ndarray
    kept_rts: np.ndarray
    n_below: int
    n_above: int


def remove_rt_outliers(rts, bounds=RT_BOUNDS) -> RtOutlierReport:
    """Keep reaction times within the closed interval `bounds`."""
    rts = np.asarray(rts, dtype=np.float64)
    below = rts < bounds[0]
    above = rts > bounds[1]
    keep = ~(below | above)
    return RtOutlierReport(
        kept_indices=np.flatnonzero(keep),
        kept_rts=rts[keep],
        n_below=int(below.sum()),
        n_above=int(above.sum()),
    )


def discretize_rt(rts, policy: str = "median", min_trials: int = 20):
    """Binary fast/slow classes from one subject's surviving RTs.

    median policy: below the subject median -> fast (0), at or above ->
    slow (1). tercile policy: fastest third -> 0, slowest third -> 1, the
    middle third is dropped. Returns (kept_indices, classes). Raises
    InsufficientTrialsError below `min_trials` so callers can exclude the
    subject.
    """
    rts = np.asarray(rts, dtype=np.float64)
    if rts.ndim != 1:
        raise ValueError("rts must be a 1-D array")
    if rts.size < min_trials:
        raise InsufficientTrialsError(
            f"need at least {min_trials} surviving trials, got {rts.size}"
        )
    if policy == "median":
        med = np.median(rts)
        classes = (rts >= med).astype(np.int64)
        if classes.all() or not classes.any():
            warnings.warn(
                "degenerate reaction-time split: all trials in one class",
                stacklevel=2,
            )
        return np.arange(rts.size, dtype=np.int64), classes
    if policy == "tercile":
        order = np.argsort(rts, kind="stable")
        third = rts.size // 3
        fast = order[:third]
        slow = order[-third:]
        kept = np.sort(np.concatenate([fast, slow]))
        classes = np.isin(kept, slow).astype(np.int64)
        return kept, classes
    raise ValueError(f"unknown policy {policy!r}")


# ---------------------------------------------------------------------------
# preprocessing pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    """Everything the raw-to-trials pipeline needs, with logged defaults."""

    filter_spec: dsp.FilterSpec = dsp.FilterSpec()
    ica_components: int = 20
    ica_threshold: float = 0.7
    ica_seed: int = 0
    ica_max_iter: int = 500
    frontal_channels: tuple = tuple(range(16))
    velocity_threshold: float = 0.05
    window_seconds: float = 0.5
    out_fs: int = 250
    skip_ica: bool = False


@dataclass
class PreprocessResult:
    """Per-kept-trial windows plus bookkeeping from every pipeline stage."""

    windows: np.ndarray          # (K, 128, 125) float32
    trial_indices: np.ndarray    # event index of each window
    rts: np.ndarray              # RT seconds per window (nan if no response)
    report: dict


def preprocess_recording(
    rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig()
) -> PreprocessResult:
    """Run bandpass -> ICA cleanup -> segment -> z-score -> resample.

    Trial windows are anchored at movement onset, derived from kinematics
    with the same velocity rule that defines reaction time; trials whose
    threshold is never crossed, or that lack 0.5 s of context, are dropped
    and counted in the report.
    """
    filtered = dsp.bandpass(rec.eeg, rec.fs_eeg, cfg.filter_spec)
    ica_info = {"rejected": [], "scores": None, "stalled_at": None}
    if not cfg.skip_ica:
        cleaned, model = ica.clean_recording(
            filtered,
            frontal_channels=cfg.frontal_channels,
            threshold=cfg.ica_threshold,
            n_components=min(cfg.ica_components, rec.eeg.shape[0]),
            max_iter=cfg.ica_max_iter,
            seed=cfg.ica_seed,
            on_stall="truncate",
        )
        ica_info = {
            "rejected": model.rejected,
            "scores": None if model.ocular_scores is None
            else [round(float(s), 4) for s in model.ocular_scores],
            "stalled_at": model.stalled_at,
        }
    else:
        cleaned = filtered

    rts, onset_samples, responsive = [], [], []
    no_response = 0
    for j, stim in enumerate(rec.events.stimulus_sample):
        stim_s = stim / rec.fs_eeg
        rt = compute_rt(
            rec.kinematics, stim_s, rec.fs_kin, threshold=cfg.velocity_threshold
        )
        if rt is None:
            no_response += 1
            continue
        responsive.append(j)
        rts.append(rt)
        onset_samples.append(int(round((stim_s + rt) * rec.fs_eeg)))

    if not responsive:
        raise ValueError("no trial crossed the velocity threshold")

    width_ok, skipped_ctx, windows, kept, kept_rts = [], [], [], [], []
    zero_var_channels = 0
    for j, rt, anchor in zip(responsive, rts, onset_samples):
        try:
            wins, skipped = dsp.segment(
                cleaned, rec.fs_eeg, [anchor], pre_seconds=cfg.window_seconds
            )
        except ValueError:
            skipped_ctx.append(j)
            continue
        z, flagged = dsp.zscore(wins[0])
        zero_var_channels += flagged.size
        out = dsp.resample(z, rec.fs_eeg, cfg.out_fs)
        windows.append(out.astype(np.float32))
        kept.append(j)
        kept_rts.append(rt)

    if not windows:
        raise ValueError("no trial had enough context for a window")

    report = {
        "subject_id": rec.subject_id,
        "n_events": len(rec.events),
        "n_no_response": no_response,
        "n_skipped_context": len(skipped_ctx),
        "n_windows": len(windows),
        "zero_variance_channels": zero_var_channels,
        "ica": ica_info,
        "filter": {
            "low_hz": cfg.filter_spec.low_hz,
            "high_hz": cfg.filter_spec.high_hz,
            "order": cfg.filter_spec.order,
            "mode": cfg.filter_spec.mode,
        },
        "velocity_threshold": cfg.velocity_threshold,
    }
    return PreprocessResult(
        windows=np.stack(windows),
        trial_indices=np.asarray(kept, dtype=np.int64),
        rts=np.asarray(kept_rts, dtype=np.float64),
        report=report,
    )


def build_intent_dataset(
    rec: RawRecording, pre: PreprocessResult
) -> LabeledDataset:
    """Pair preprocessed windows with active/passive labels."""
    marks = label_intent(rec)
    label_of = dict(zip(marks.indices.tolist(), marks.labels.tolist()))
    trials = []
    for w, j in zip(pre.windows, pre.trial_indices):
        if int(j) not in label_of:
            continue
        trials.append(
            Trial(
                x=w,
                y=label_of[int(j)],
                subject_id=rec.subject_id,
                trial_index=int(j),
                task="intent",
            )
        )
    return LabeledDataset(trials, "intent", [rec.subject_id])


def build_rt_dataset(
    rec: RawRecording,
    pre: PreprocessResult,
    policy: str = "median",
    min_trials: int = 20,
) -> LabeledDataset:
    """Outlier-filter and discretize this subject's RTs into fast/slow trials."""
    surv = remove_rt_outliers(pre.rts)
    kept_local, classes = discretize_rt(
        surv.kept_rts, policy=policy, min_trials=min_trials
    )
    trials = []
    for local, cls in zip(kept_local, classes):
        pos = int(surv.kept_indices[local])
        # float32 so saved datasets round-trip bitwise; clamp because the
        # cast can nudge a boundary RT just past the closed interval
        rt32 = float(np.float32(pre.rts[pos]))
        rt32 = min(max(rt32, RT_BOUNDS[0]), RT_BOUNDS[1])
        trials.append(
            Trial(
                x=pre.windows[pos],
                y=int(cls),
                subject_id=rec.subject_id,
                trial_index=int(pre.trial_indices[pos]),
                task="rt",
                rt_seconds=rt32,
            )
        )
    return LabeledDataset(trials, "rt", [rec.subject_id])


def merge_datasets(datasets) -> LabeledDataset:
    """Concatenate per-subject datasets for one task."""
    datasets = list(datasets)
    if not datasets:
        raise ValueError("no datasets to merge")
    task = datasets[0].task
    trials, subjects = [], []
    for ds in datasets:
        if ds.task != task:
            raise ValueError("cannot merge datasets of different tasks")
        trials.extend(ds.trials)
        subjects.extend(s for s in ds.subjects if s not in subjects)
    return LabeledDataset(trials, task, subjects)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _write_manifest(path: Path, payload: dict) -> None:
    payload = {"format_version": FORMAT_VERSION, **payload}
    (path / MANIFEST_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True))


def _read_manifest(path: Path, kind: str) -> dict:
    mpath = path / MANIFEST_NAME
    if not mpath.exists():
        raise binio.FormatError(f"{mpath}: manifest not found")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise binio.FormatError(f"{mpath}: malformed manifest: {e}") from e
    if manifest.get("kind") != kind:
        raise binio.FormatError(
            f"{mpath}: expected kind {kind!r}, found {manifest.get('kind')!r}"
        )
    if manifest.get("format_version") != FORMAT_VERSION:
        raise binio.FormatError(
            f"{mpath}: unsupported format version {manifest.get('format_version')}"
        )
    return manifest


def save_recording(rec: RawRecording, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    binio.write_array(path / "eeg.bin", rec.eeg)
    binio.write_array(path / "kinematics.bin", rec.kinematics)
    _write_manifest(
        path,
        {
            "kind": "recording",
            "subject_id": rec.subject_id,
            "fs_eeg": rec.fs_eeg,
            "fs_kin": rec.fs_kin,
            "eeg_shape": list(rec.eeg.shape),
            "kin_shape": list(rec.kinematics.shape),
            "events": {
                "stimulus_sample": rec.events.stimulus_sample.tolist(),
                "direction": rec.events.direction,
                "movement_sample": rec.events.movement_sample.tolist(),
                "mode": rec.events.mode,
            },
        },
    )


def load_recording(path) -> RawRecording:
    path = Path(path)
    manifest = _read_manifest(path, "recording")
    kin_path = path / "kinematics.bin"
    if not kin_path.exists():
        raise binio.FormatError(f"{kin_path}: kinematics stream missing")
    eeg = binio.read_array(path / "eeg.bin", tuple(manifest["eeg_shape"]))
    kin = binio.read_array(kin_path, tuple(manifest["kin_shape"]))
    ev = manifest["events"]
    return RawRecording(
        subject_id=manifest["subject_id"],
        eeg=eeg,
        kinematics=kin,
        events=Events(
            stimulus_sample=ev["stimulus_sample"],
            direction=ev["direction"],
            movement_sample=ev["movement_sample"],
            mode=ev["mode"],
        ),
        fs_eeg=manifest["fs_eeg"],
        fs_kin=manifest["fs_kin"],
    )


def save_dataset(ds: LabeledDataset, path, provenance: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    binio.write_array(path / "x.bin", ds.x)
    binio.write_array(path / "y.bin", ds.y.astype(np.float32))
    manifest = {
        "kind": "dataset",
        "task": ds.task,
        "subjects": list(ds.subjects),
        "n_trials": len(ds),
        "x_shape": list(ds.x.shape),
        "trial_subject": [t.subject_id for t in ds.trials],
        "trial_index": [t.trial_index for t in ds.trials],
        "provenance": provenance or {},
    }
    if ds.task == "rt":
        rt = np.array([t.rt_seconds for t in ds.trials], dtype=np.float32)
        binio.write_array(path / "rt.bin", rt)
        manifest["rt_file"] = "rt.bin"
    _write_manifest(path, manifest)


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    manifest = _read_manifest(path, "dataset")
    x = binio.read_array(path / "x.bin", tuple(manifest["x_shape"]))
    y = binio.read_array(path / "y.bin", (manifest["n_trials"],)).astype(np.int64)
    task = manifest["task"]
    rts = None
    if task == "rt":
        if "rt_file" not in manifest:
            raise binio.FormatError(f"{path}: rt dataset without rt array")
        rts = binio.read_array(path / manifest["rt_file"], (manifest["n_trials"],))
    trials = []
    for i in range(manifest["n_trials"]):
        trials.append(
            Trial(
                x=x[i],
                y=int(y[i]),
                subject_id=manifest["trial_subject"][i],
                trial_index=int(manifest["trial_index"][i]),
                task=task,
                rt_seconds=float(rts[i]) if rts is not None else None,
            )
        )
    return LabeledDataset(trials, task, list(manifest["subjects"]))
