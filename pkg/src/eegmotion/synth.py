"""Synthetic cohorts with ground-truth class structure.

Each subject gets a continuous 128-channel EEG stream at 1024 Hz, planar
robot kinematics at 180 Hz, and per-trial events. The background mixes
per-channel 1/f noise (unit RMS), a ~10 Hz alpha rhythm with random phase
per channel, and shared blink bursts on the frontal channels. Self-initiated
(active) trials additionally carry a slow negative drift on central channels
that ramps up over the final fraction of a second before movement onset;
its amplitude is `snr` times the background RMS and its onset lead encodes
the trial's reaction time (faster trials start the drift earlier). Passive
trials have no drift and a short robot latency instead of a reaction time.

Movement onset is defined analytically as the instant the minimum-jerk
speed profile crosses the velocity threshold, so the recorded ground-truth
RT agrees with threshold-based detection to within one kinematic sample.
All randomness derives from per-subject child seeds of the master seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    EEG_FS,
    KIN_FS,
    Events,
    RawRecording,
    load_recording,
    save_recording,
)

FRONTAL_CHANNELS = tuple(range(16))
CENTRAL_CHANNELS = tuple(range(54, 75))

MOVE_DISTANCE = 0.14   # meters per reach
MOVE_DURATION = 0.6    # seconds per reach
VELOCITY_THRESHOLD = 0.05
LEAD_RANGE = (0.10, 0.45)   # drift onset lead vs movement onset, seconds
LEAD_RT_RANGE = (0.15, 0.65)  # rt interval the lead mapping spans
PASSIVE_LATENCY = (0.06, 0.12)
BLINK_WIDTH = 0.25
BLINK_AMPLITUDE = 8.0
VELOCITY_NOISE = 3e-4


@dataclass(frozen=True)
class CohortConfig:
    """Knobs of the generator; the cohort is a pure function of this."""

    n_subjects: int = 13
    trials_per_mode: int = 210
    snr: float = 2.0
    rt_shift: float = 0.08
    rt_mu: float = math.log(0.28)
    rt_sigma: float = 0.5
    seed: int = 0
    subject_variability: float = 0.2

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValueError("n_subjects must be >= 2")
        if self.trials_per_mode < 1:
            raise ValueError("trials_per_mode must be >= 1")
        if self.snr < 0:
            raise ValueError("snr must be >= 0")
        if self.rt_sigma <= 0:
            raise ValueError("rt_sigma must be > 0")


def _minjerk_shape(u):
    """Speed shape of a minimum-jerk reach, peaking at u = 0.5."""
    return 30.0 * u * u * (1.0 - u) * (1.0 - u)


def _threshold_lead() -> float:
    """Seconds from profile start to the velocity-threshold crossing.

    Solves (d/T) * shape(u) = threshold by bisection on the rising flank.
    """
    target = VELOCITY_THRESHOLD * MOVE_DURATION / MOVE_DISTANCE
    lo, hi = 0.0, 0.5
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _minjerk_shape(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) * MOVE_DURATION


_DELTA = _threshold_lead()

_DIRECTION_VECTORS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "up": (0.0, 1.0),
    "down": (0.0, -1.0),
}


def _sample_rt(rng, shift, mu, sigma):
    """Shifted log-normal reaction time, truncated to (0, 1.5) s."""
    for _ in range(1000):
        rt = shift + float(rng.lognormal(mu, sigma))
        if 0.0 < rt < 1.5:
            return rt
    raise RuntimeError("reaction-time sampling failed to fall inside (0, 1.5) s")


def _one_over_f(rng, n: int) -> np.ndarray:
    """Unit-RMS noise with power spectral density proportional to 1/f."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / EEG_FS)
    spec[0] = 0.0
    spec[1:] /= np.sqrt(freqs[1:])
    x = np.fft.irfft(spec, n)
    return x / x.std()


def _smoothstep(u):
    return u * u * (3.0 - 2.0 * u)


def _subject_rng(config: CohortConfig, subject_index: int):
    if not 0 <= subject_index < config.n_subjects:
        raise ValueError(
            f"subject_index must lie in [0, {config.n_subjects}), got {subject_index}"
        )
    children = np.random.SeedSequence(config.seed).spawn(config.n_subjects)
    return np.random.default_rng(children[subject_index])


def subject_name(i: int) -> str:
    return f"s{i:02d}"


def generate_subject(config: CohortConfig, subject_index: int, return_truth=False):
    """Build one subject's recording (and optionally its ground-truth rows)."""
    rng = _subject_rng(config, subject_index)
    sv = config.subject_variability
    mu_i = config.rt_mu + rng.normal(0.0, 0.1 * sv)
    alpha_hz = 10.0 + rng.uniform(-0.5, 0.5)
    alpha_scale = 1.0 + rng.uniform(-sv, sv)
    blink_rate = 0.18 * (1.0 + rng.uniform(-0.3, 0.3))

    # trial schedule: interleave modes, then lay trials out in time
    n = config.trials_per_mode
    modes = np.array(["active"] * n + ["passive"] * n)
    rng.shuffle(modes)
    directions = rng.choice(list(_DIRECTION_VECTORS), size=2 * n)

    t = 1.0  # lead-in
    rows = []
    for j, (mode, direction) in enumerate(zip(modes, directions)):
        stim = t
        while True:
            if mode == "active":
                rt = _sample_rt(rng, config.rt_shift, mu_i, config.rt_sigma)
            else:
                rt = rng.uniform(*PASSIVE_LATENCY)
            # snap the threshold crossing to a half-sample offset so the
            # first kinematic sample past it clears the threshold by far
            # more than the sensor noise; detection then lands exactly one
            # half-sample late on every trial
            k = math.floor((stim + rt) * KIN_FS)
            onset = (k + 0.5) / KIN_FS
            rt = onset - stim
            if 0.0 < rt < 1.5:
                break
        profile_start = onset - _DELTA
        move_end = profile_start + MOVE_DURATION
        if mode == "active":
            # faster trials start the drift proportionally earlier; the
            # mapping spans the typical rt interval so the class signature
            # stays steep where reaction times actually fall
            span = LEAD_RANGE[1] - LEAD_RANGE[0]
            frac = (LEAD_RT_RANGE[1] - rt) / (LEAD_RT_RANGE[1] - LEAD_RT_RANGE[0])
            lead = LEAD_RANGE[0] + span * min(max(frac, 0.0), 1.0)
        else:
            lead = math.nan
        rows.append(
            {
                "subject_id": subject_name(subject_index),
                "trial_index": j,
                "mode": str(mode),
                "direction": str(direction),
                "stimulus_s": stim,
                "true_rt": rt,
                "movement_onset_s": onset,
                "drift_onset_s": onset - lead if mode == "active" else math.nan,
            }
        )
        t = move_end + 0.02 + rng.uniform(0.0, 0.05)
    duration = t + 2.0

    n_eeg = int(math.ceil(duration * EEG_FS))
    n_kin = int(math.ceil(duration * KIN_FS))

    # --- kinematics ---------------------------------------------------
    vx = rng.normal(0.0, VELOCITY_NOISE, n_kin)
    vy = rng.normal(0.0, VELOCITY_NOISE, n_kin)
    for row in rows:
        ex, ey = _DIRECTION_VECTORS[row["direction"]]
        start = row["movement_onset_s"] - _DELTA
        k0 = int(math.ceil(start * KIN_FS))
        k1 = min(int(math.floor((start + MOVE_DURATION) * KIN_FS)), n_kin - 1)
        k = np.arange(k0, k1 + 1)
        u = (k / KIN_FS - start) / MOVE_DURATION
        speed = (MOVE_DISTANCE / MOVE_DURATION) * _minjerk_shape(u)
        vx[k] += ex * speed
        vy[k] += ey * speed
    x = np.cumsum(vx) / KIN_FS
    y = np.cumsum(vy) / KIN_FS
    kinematics = np.stack([x, y, vx, vy]).astype(np.float32)

    # --- EEG ------------------------------------------------------------
    eeg = np.empty((128, n_eeg), dtype=np.float32)
    tgrid = np.arange(n_eeg) / EEG_FS
    for c in range(128):
        chan = _one_over_f(rng, n_eeg)
        amp = alpha_scale * rng.uniform(0.25, 0.6)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        chan += amp * np.sin(2.0 * math.pi * alpha_hz * tgrid + phase)
        eeg[c] = chan.astype(np.float32)

    # blinks: one shared burst train, frontally weighted
    blink_len = int(BLINK_WIDTH * EEG_FS)
    template = (np.hanning(blink_len) ** 2) * BLINK_AMPLITUDE
    weights = np.exp(-np.arange(len(FRONTAL_CHANNELS)) / 5.0)
    tb = 0.5 + rng.exponential(1.0 / blink_rate)
    while tb < duration - BLINK_WIDTH - 0.5:
        s0 = int(tb * EEG_FS)
        for w, c in zip(weights, FRONTAL_CHANNELS):
            eeg[c, s0 : s0 + blink_len] += (w * template).astype(np.float32)
        tb += max(rng.exponential(1.0 / blink_rate), 0.5)

    # readiness drift on central channels for active trials
    central = np.asarray(CENTRAL_CHANNELS)
    spatial = np.exp(-((central - 64.0) ** 2) / (2.0 * 6.0**2))
    release = 0.3
    if config.snr > 0:
        for row in rows:
            if row["mode"] != "active":
                continue
            onset = row["movement_onset_s"]
            t_on = row["drift_onset_s"]
            i0, i1 = int(t_on * EEG_FS), int(onset * EEG_FS)
            i2 = min(int((onset + release) * EEG_FS), n_eeg)
            up = _smoothstep(np.arange(i1 - i0) / max(i1 - i0, 1))
            down = 1.0 - _smoothstep(np.arange(i2 - i1) / max(i2 - i1, 1))
            ramp = np.concatenate([up, down])
            seg = -config.snr * spatial[:, None] * ramp[None, :]
            eeg[central[0] : central[-1] + 1, i0:i2] += seg.astype(np.float32)

    events = Events(
        stimulus_sample=[int(round(r["stimulus_s"] * EEG_FS)) for r in rows],
        direction=[r["direction"] for r in rows],
        movement_sample=[int(round(r["movement_onset_s"] * EEG_FS)) for r in rows],
        mode=[r["mode"] for r in rows],
    )
    rec = RawRecording(
        subject_id=subject_name(subject_index),
        eeg=eeg,
        kinematics=kinematics,
        events=events,
    )
    return (rec, rows) if return_truth else rec


def generate_cohort(config: CohortConfig):
    """All subjects plus the flat ground-truth table."""
    recordings, truth = [], []
    for i in range(config.n_subjects):
        rec, rows = generate_subject(config, i, return_truth=True)
        recordings.append(rec)
        truth.extend(rows)
    return recordings, truth


GROUND_TRUTH_FIELDS = (
    "subject_id",
    "trial_index",
    "mode",
    "direction",
    "stimulus_s",
    "true_rt",
    "movement_onset_s",
    "drift_onset_s",
)


def save_cohort(recordings, truth, path, config: CohortConfig | None = None) -> None:
    """Write per-subject recording directories plus ground_truth.csv."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for rec in recordings:
        save_recording(rec, path / rec.subject_id)
    with open(path / "ground_truth.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=GROUND_TRUTH_FIELDS)
        writer.writeheader()
        for row in truth:
            writer.writerow({k: _format_cell(row[k]) for k in GROUND_TRUTH_FIELDS})
    if config is not None:
        cfg_rows = [
            f"n_subjects={config.n_subjects}",
            f"trials_per_mode={config.trials_per_mode}",
            f"snr={config.snr}",
            f"rt_shift={config.rt_shift}",
            f"rt_mu={config.rt_mu}",
            f"rt_sigma={config.rt_sigma}",
            f"seed={config.seed}",
            f"subject_variability={config.subject_variability}",
        ]
        (path / "cohort_config.txt").write_text("\n".join(cfg_rows) + "\n")


def _format_cell(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.9f}"
    return v


def load_ground_truth(path):
    """Read ground_truth.csv back as a list of typed row dicts."""
    rows = []
    with open(Path(path) / "ground_truth.csv", newline="") as f:
        for raw in csv.DictReader(f):
            rows.append(
                {
                    "subject_id": raw["subject_id"],
                    "trial_index": int(raw["trial_index"]),
                    "mode": raw["mode"],
                    "direction": raw["direction"],
                    "stimulus_s": float(raw["stimulus_s"]),
                    "true_rt": float(raw["true_rt"]),
                    "movement_onset_s": float(raw["movement_onset_s"]),
                    "drift_onset_s": float(raw["drift_onset_s"])
                    if raw["drift_onset_s"]
                    else math.nan,
                }
            )
    return rows


def load_cohort(path):
    """Read every s??/ recording directory plus the ground-truth table."""
    path = Path(path)
    recordings = []
    for sub in sorted(p for p in path.iterdir() if p.is_dir()):
        recordings.append(load_recording(sub))
    return recordings, load_ground_truth(path)
