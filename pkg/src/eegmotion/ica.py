"""Independent component analysis for ocular artifact removal.

A from-scratch FastICA (deflation scheme, tanh contrast) factors the
centered multichannel signal into statistically independent sources after a
PCA whitening step. Components are scored for ocular content by correlating
their time courses with the mean of designated frontal channels; components
scoring above threshold are subtracted out of the recording.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class IcaConvergenceError(RuntimeError):
    """Deflation failed to converge; carries per-component iteration info."""

    def __init__(self, component: int, iterations: int, delta: float, tol: float):
        self.component = component
        self.iterations = iterations
        self.delta = delta
        self.tol = tol
        super().__init__(
            f"component {component} did not converge after {iterations} iterations "
            f"(last delta {delta:.3e}, tol {tol:.1e})"
        )


@dataclass
class IcaModel:
    """A fitted unmixing of channels into independent sources.

    `unmixing` (components x channels) maps centered data to sources;
    `mixing` (channels x components) maps sources back. Their product in
    source space, unmixing @ mixing, is the identity within 1e-6. Ocular
    scores and the rejected set are filled by `score_ocular` /
    `select_ocular`. `stalled_at` is set when fitting ran with
    on_stall="truncate" and stopped early.
    """

    unmixing: np.ndarray
    mixing: np.ndarray
    mean: np.ndarray
    ocular_scores: np.ndarray | None = None
    rejected: list = field(default_factory=list)
    stalled_at: int | None = None

    @property
    def n_components(self) -> int:
        return self.unmixing.shape[0]

    def sources(self, x: np.ndarray) -> np.ndarray:
        return self.unmixing @ (np.asarray(x, dtype=np.float64) - self.mean[:, None])


def fit_ica(
    x: np.ndarray,
    n_components: int | None = None,
    max_iter: int = 500,
    tol: float = 1e-5,
    seed: int = 0,
    on_stall: str = "error",
    restarts: int = 2,
) -> IcaModel:
    """Fit FastICA to (channels, samples) data.

    The signal is centered and PCA-whitened to `n_components` dimensions
    (default min(20, channels)); each source direction is then found by
    fixed-point iteration with the tanh contrast, deflating against the
    directions already found.

    An unlucky start can drop the iteration into a stable period-2 orbit
    between two neighboring directions; that state is detected (the iterate
    keeps returning to where it was two steps ago with no shrink in the
    gap) and the component is retried from up to `restarts` fresh random
    starts.

    The fixed point only exists along non-gaussian directions, so once the
    deflated subspace is essentially gaussian the iteration wanders until
    max_iter and stalls. on_stall="error" (default) raises
    IcaConvergenceError there; on_stall="truncate" keeps the components
    extracted so far and records the stall index on the model, which is the
    right behavior for signals with a gaussian background and only a few
    structured sources.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (channels, samples), got shape {x.shape}")
    if on_stall not in ("error", "truncate"):
        raise ValueError(f"on_stall must be 'error' or 'truncate', got {on_stall!r}")
    c, n = x.shape
    if n < 2 * c:
        raise ValueError(f"need samples >> channels, got {n} samples for {c} channels")
    k = min(20, c) if n_components is None else int(n_components)
    if not 1 <= k <= c:
        raise ValueError(f"n_components must lie in [1, {c}], got {k}")

    mean = x.mean(axis=1)
    xm = x - mean[:, None]

    # PCA whitening: z = K xm with cov(z) = I
    cov = (xm @ xm.T) / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals = np.maximum(evals[order], 1e-12)
    whiten = (evecs[:, order] / np.sqrt(evals)).T  # (k, c)
    z = whiten @ xm

    if restarts < 0:
        raise ValueError(f"restarts must be >= 0, got {restarts}")

    rng = np.random.default_rng(seed)
    w_rows = np.zeros((k, k))
    stalled_at = None
    extracted = 0
    last_delta = np.inf
    for i in range(k):
        converged = False
        for _ in range(restarts + 1):
            w = rng.standard_normal(k)
            if i:
                w -= w_rows[:i].T @ (w_rows[:i] @ w)
            w /= np.linalg.norm(w)
            w_prev = None
            delta_prev = delta_prev2 = None
            cycle_hits = 0
            cycled = False
            for it in range(1, max_iter + 1):
                wz = w @ z
                g = np.tanh(wz)
                g_prime = 1.0 - g * g
                w_new = (z * g).mean(axis=1) - g_prime.mean() * w
                # deflate: stay orthogonal to the components already extracted
                if i:
                    w_new -= w_rows[:i].T @ (w_rows[:i] @ w_new)
                norm = np.linalg.norm(w_new)
                if norm < 1e-12:
                    w_new = rng.standard_normal(k)
                    if i:
                        w_new -= w_rows[:i].T @ (w_rows[:i] @ w_new)
                    norm = np.linalg.norm(w_new)
                w_new /= norm
                last_delta = abs(abs(w_new @ w) - 1.0)
                # stable period-2 orbit: the iterate keeps returning to
                # where it was two steps ago and the gap stops shrinking
                # (a decaying alternation toward the fixed point also
                # returns, but its gap contracts geometrically)
                returned = (
                    w_prev is not None
                    and abs(abs(w_new @ w_prev) - 1.0) < tol
                )
                stagnant = (
                    delta_prev2 is not None and last_delta > 0.98 * delta_prev2
                )
                if returned and stagnant and last_delta >= tol:
                    cycle_hits += 1
                else:
                    cycle_hits = 0
                w_prev = w
                delta_prev2 = delta_prev
                delta_prev = last_delta
                w = w_new
                if last_delta < tol:
                    converged = True
                    break
                if cycle_hits >= 3:
                    cycled = True
                    break
            if converged or not cycled:
                break
        if not converged:
            if on_stall == "error":
                raise IcaConvergenceError(i, max_iter, last_delta, tol)
            stalled_at = i
            break
        w_rows[i] = w
        extracted = i + 1

    if extracted == 0:
        raise IcaConvergenceError(0, max_iter, last_delta, tol)
    w_rows = w_rows[:extracted]
    unmixing = w_rows @ whiten  # (extracted, c)
    mixing = np.linalg.pinv(unmixing)  # (c, extracted)
    return IcaModel(unmixing=unmixing, mixing=mixing, mean=mean,
                    stalled_at=stalled_at)


def score_ocular(model: IcaModel, x: np.ndarray, frontal_channels) -> np.ndarray:
    """Absolute correlation of each source with the mean frontal signal.

    Stores and returns the per-component scores; a zero-variance source or
    reference scores 0.
    """
    frontal = np.asarray(frontal_channels, dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    if frontal.size == 0:
        raise ValueError("frontal_channels must be non-empty")
    if frontal.min() < 0 or frontal.max() >= x.shape[0]:
        raise ValueError(
            f"frontal channel indices out of range for {x.shape[0]} channels"
        )
    ref = x[frontal].mean(axis=0)
    ref = ref - ref.mean()
    ref_norm = np.linalg.norm(ref)
    s = model.sources(x)
    s = s - s.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(s, axis=1)
    scores = np.zeros(model.n_components)
    ok = (norms > 0) & (ref_norm > 0)
    scores[ok] = np.abs(s[ok] @ ref) / (norms[ok] * ref_norm)
    model.ocular_scores = scores
    return scores


def select_ocular(model: IcaModel, threshold: float = 0.7) -> list:
    """Mark components with ocular score above `threshold` as rejected."""
    if model.ocular_scores is None:
        raise ValueError("score_ocular must run before select_ocular")
    model.rejected = [int(i) for i in np.flatnonzero(model.ocular_scores > threshold)]
    return model.rejected


def remove_ocular(x: np.ndarray, model: IcaModel) -> np.ndarray:
    """Subtract the rejected components' contribution from the signal.

    With an empty rejected set the input is returned unchanged (exact
    identity); otherwise cleaned = x - mixing[:, rej] @ sources[rej].
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != model.mixing.shape[0]:
        raise ValueError(
            f"signal has {x.shape[0]} channels, model expects {model.mixing.shape[0]}"
        )
    if not model.rejected:
        return x.copy()
    rej = np.asarray(model.rejected, dtype=np.int64)
    if rej.min() < 0 or rej.max() >= model.n_components:
        raise ValueError("rejected set contains out-of-range component indices")
    s = model.sources(x)
    return x - model.mixing[:, rej] @ s[rej]


def clean_recording(
    x: np.ndarray,
    frontal_channels,
    threshold: float = 0.7,
    n_components: int | None = None,
    max_iter: int = 500,
    tol: float = 1e-5,
    seed: int = 0,
    on_stall: str = "error",
):
    """Fit, score, select, and remove in one step. Returns (cleaned, model)."""
    model = fit_ica(x, n_components=n_components, max_iter=max_iter, tol=tol,
                    seed=seed, on_stall=on_stall)
    score_ocular(model, x, frontal_channels)
    select_ocular(model, threshold)
    return remove_ocular(x, model), model
