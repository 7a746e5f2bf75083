"""Signal conditioning for multichannel EEG.

Continuous-data stages (bandpass, with ICA living in `ica`) run on whole
recordings; trial-local stages (segmentation, z-scoring, resampling) run on
fixed windows. The canonical pipeline order is: bandpass the continuous
recording, remove ocular components, then per trial segment -> z-score ->
resample, which turns a 128-channel 1024 Hz recording into 128x125 trials
at 250 Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps


@dataclass(frozen=True)
class FilterSpec:
    """Butterworth bandpass design plus how it is applied.

    `mode` is "zero-phase" (forward-backward, no group delay; offline) or
    "causal" (single forward pass, usable sample-by-sample).
    """

    low_hz: float = 1.0
    high_hz: float = 40.0
    order: int = 4
    mode: str = "zero-phase"

    def __post_init__(self):
        if not 0 < self.low_hz < self.high_hz:
            raise ValueError(
                f"need 0 < low_hz < high_hz, got {self.low_hz}, {self.high_hz}"
            )
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.mode not in ("zero-phase", "causal"):
            raise ValueError(f"mode must be 'zero-phase' or 'causal', got {self.mode!r}")

    def sos(self, fs: float) -> np.ndarray:
        if fs <= 2 * self.high_hz:
            raise ValueError(
                f"sampling rate {fs} Hz violates Nyquist for high cut {self.high_hz} Hz"
            )
        return sps.butter(
            self.order, (self.low_hz, self.high_hz), btype="bandpass", fs=fs,
            output="sos",
        )


def bandpass(x: np.ndarray, fs: float, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    """Filter each channel of (channels, samples) data.

    Zero-phase mode runs the cascade forward and backward, squaring the
    magnitude response and cancelling group delay.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (channels, samples), got shape {x.shape}")
    sos = spec.sos(fs)
    min_len = 3 * (2 * sos.shape[0] + 1)
    if x.shape[1] <= min_len:
        raise ValueError(
            f"need more than {min_len} samples for edge padding, got {x.shape[1]}"
        )
    if spec.mode == "zero-phase":
        return sps.sosfiltfilt(sos, x, axis=1)
    return sps.sosfilt(sos, x, axis=1)


def resample(x: np.ndarray, fs_in: int, fs_out: int) -> np.ndarray:
    """Polyphase rational resampling along the last axis.

    Output length is round(n * fs_out / fs_in); the anti-alias filter is a
    Kaiser-windowed sinc. 512 samples at 1024 Hz map to exactly 125 at 250.
    """
    x = np.asarray(x, dtype=np.float64)
    if fs_out >= fs_in:
        raise ValueError(f"fs_out must be < fs_in, got {fs_out} >= {fs_in}")
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError("sampling rates must be positive")
    n = x.shape[-1]
    n_out = round(n * fs_out / fs_in)
    if n_out == 0:
        raise ValueError(
            f"resampling {n} samples from {fs_in} to {fs_out} Hz yields no output"
        )
    g = math.gcd(int(fs_out), int(fs_in))
    up, down = int(fs_out) // g, int(fs_in) // g
    # line padding keeps edge transients small on trend-like boundaries
    y = sps.resample_poly(x, up, down, axis=-1, window=("kaiser", 5.0),
                          padtype="line")
    # resample_poly emits ceil(n*up/down) samples; trim to the rounded length
    return y[..., :n_out]


def segment(x: np.ndarray, fs: int, anchors, pre_seconds: float = 0.5):
    """Cut one window per anchor, ending one sample before the anchor.

    Each window spans [anchor - fs*pre_seconds, anchor). Anchors without
    enough preceding context (or beyond the recording) are skipped and
    returned in the second output. Raises if no anchor yields a window.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected (channels, samples), got shape {x.shape}")
    n = x.shape[1]
    width = int(round(fs * pre_seconds))
    windows = []
    skipped = []
    for a in np.asarray(anchors, dtype=np.int64):
        if a - width < 0 or a > n:
            skipped.append(int(a))
        else:
            windows.append(x[:, a - width : a])
    if not windows:
        raise ValueError(f"no anchor had {pre_seconds} s of preceding data")
    return np.stack(windows), skipped


def zscore(trial: np.ndarray):
    """Standardize each channel of one trial to mean 0, variance 1.

    Uses the population standard deviation. Channels with zero variance are
    set to all zeros and their indices returned as the second output.
    """
    trial = np.asarray(trial, dtype=np.float64)
    if trial.ndim != 2:
        raise ValueError(f"expected (channels, samples), got shape {trial.shape}")
    mean = trial.mean(axis=1, keepdims=True)
    std = trial.std(axis=1, keepdims=True)
    flat = np.flatnonzero(std[:, 0] == 0)
    std[std == 0] = 1.0
    out = (trial - mean) / std
    out[flat] = 0.0
    return out, flat
