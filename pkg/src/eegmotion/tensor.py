"""Dense tensors and the differentiable ops behind the trial classifiers.

The op set is exactly what the two convolutional classifiers need: valid
cross-correlation, non-overlapping max pooling, per-channel batch
normalization, ReLU, affine maps, softmax and two-class cross entropy.
Every public op returns a `Tensor` wired with a backward closure that fills
the gradients of its inputs; `gradient_check` validates any op against
central finite differences.

This is deliberately not a general autodiff library: `Tensor.backward`
follows simple op chains (enough for softmax -> cross_entropy), and the
training path in `network` drives the same math kernels through explicit
layer objects instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """A dense n-dimensional real array with an optional gradient buffer.

    `data` is a C-contiguous float array (float32 for training, float64 for
    gradient checks); `grad`, once touched, always has the same shape.
    """

    __slots__ = ("data", "grad", "_backward", "_parents")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            dtype = np.float64
        if dtype is not None and arr.dtype != np.dtype(dtype):
            arr = arr.astype(dtype)
        # ascontiguousarray would promote 0-d to shape (1,); keep scalars 0-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Run the backward closures along the op chain that produced this tensor.

        Supports chains only (each op may feed at most one downstream op);
        general DAGs are out of scope.
        """
        g = np.ones_like(self.data) if grad is None else np.asarray(grad, self.data.dtype)
        self.accumulate_grad(g)
        node = self
        while node._backward is not None:
            node._backward(node.grad)
            upstream = [p for p in node._parents if p._backward is not None]
            if not upstream:
                break
            if len(upstream) > 1:
                raise NotImplementedError(
                    "Tensor.backward supports op chains only, not branching graphs"
                )
            node = upstream[0]

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _as_tensor(x, name: str) -> Tensor:
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"{name} must be a Tensor, got {type(x).__name__}")


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# batched math kernels (shared with the layer objects in `network`)
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw):
    """(B,Ci,H,W) -> (B*Ho*Wo, Ci*kh*kw) patch matrix for stride-1 windows."""
    bsz, cin, h, wd = x.shape
    ho, wo = h - kh + 1, wd - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (B,Ci,Ho,Wo,kh,kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * ho * wo, cin * kh * kw
    )


def _conv2d_forward(x, w, b, return_cols: bool = False):
    """Valid cross-correlation, stride 1. x:(B,Ci,H,W) w:(Co,Ci,kh,kw) b:(Co,)."""
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    cols = _im2col(x, kh, kw)
    y = cols @ w.reshape(cout, -1).T
    y += b
    y = np.ascontiguousarray(y.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    return (y, cols) if return_cols else y


def _conv2d_backward(x, w, dy, cols=None, need_dx: bool = True):
    """Gradients of valid cross-correlation w.r.t. input, kernels, and bias.

    `cols` may pass the forward's patch matrix to skip rebuilding it; the
    first layer of a network sets need_dx=False (its input has no gradient)
    and gets dx=None.
    """
    cout, cin, kh, kw = w.shape
    bsz, _, ho, wo = dy.shape
    if cols is None:
        cols = _im2col(x, kh, kw)
    dy_flat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, cout)
    dw = (dy_flat.T @ cols).reshape(cout, cin, kh, kw)
    db = dy.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db
    # scatter the per-patch input gradients back onto the image grid; one
    # up-front transpose keeps the accumulation loop on contiguous blocks
    dxcols = (dy_flat @ w.reshape(cout, -1)).reshape(bsz, ho, wo, cin, kh, kw)
    dxcols = np.ascontiguousarray(dxcols.transpose(4, 5, 0, 3, 1, 2))
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + ho, j : j + wo] += dxcols[i, j]
    return dx, dw, db


def _maxpool2d_forward(x, kh, kw, need_idx: bool = True):
    """Non-overlapping max pooling; stride equals the window, remainder dropped.

    Returns the pooled array and the uint8 argmax index (first occurrence in
    row-major window order) needed for the backward pass; inference callers
    pass need_idx=False and get (y, None).
    """
    bsz, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    cropped = x[:, :, : ho * kh, : wo * kw]
    win = cropped.reshape(bsz, c, ho, kh, wo, kw).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(win).reshape(bsz, c, ho, wo, kh * kw)
    if not need_idx:
        return flat.max(axis=-1), None
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, idx.astype(np.uint8)


def _maxpool2d_backward(dy, idx, in_shape, kh, kw):
    bsz, c, h, w = in_shape
    ho, wo = h // kh, w // kw
    dflat = np.zeros((bsz, c, ho, wo, kh * kw), dtype=dy.dtype)
    np.put_along_axis(dflat, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dwin = dflat.reshape(bsz, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, :, : ho * kh, : wo * kw] = dwin.reshape(bsz, c, ho * kh, wo * kw)
    return dx


def _batchnorm_forward(x, gamma, beta, state, training: bool, update_running: bool = True):
    """Per-channel batch normalization on (B,C,H,W).

    Training mode normalizes with batch statistics (population variance) and
    updates the running stats; eval mode normalizes with the running stats.
    Returns (y, cache) where cache is None in eval mode.
    """
    c = x.shape[1]
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ValueError(
                f"batchnorm training needs B*H*W >= 2 per channel, got {m}"
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_running:
            if state.running_mean is None:
                state.initialize(c, x.dtype)
            mom = state.momentum
            state.running_mean = (1.0 - mom) * state.running_mean + mom * mean
            state.running_var = (1.0 - mom) * state.running_var + mom * var
            state.batches_seen += 1
    else:
        if state.running_mean is None:
            raise ValueError(
                "batchnorm eval mode before any training batch and without "
                "initialized running stats; call BatchNormState.initialized() "
                "or run a training batch first"
            )
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = x - mean[None, :, None, None]
    xhat *= inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat
    y += beta[None, :, None, None]
    return y, (xhat, inv_std)


def _batchnorm_backward(dy, gamma, cache, training: bool):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std = cache
    if not training:
        # running stats are constants w.r.t. this batch
        dbeta = dy.sum(axis=(0, 2, 3))
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dx = dy * (gamma * inv_std)[None, :, None, None]
        return dx, dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = np.einsum("bchw,bchw->c", dy, xhat)
    dx = dy * m
    dx -= dbeta[None, :, None, None]
    dx -= xhat * dgamma[None, :, None, None]
    dx *= (gamma * inv_std)[None, :, None, None] / m
    return dx, dgamma, dbeta


def _softmax(z):
    """Row-wise stable softmax for 1-D or 2-D input."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# batchnorm state
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics for one batchnorm op.

    Running stats start uninitialized; `initialized()` builds the (0, 1)
    default that makes eval mode legal before any training batch.
    """

    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = 1e-5
    batches_seen: int = 0

    def initialize(self, channels: int, dtype=np.float32) -> "BatchNormState":
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        return self

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32, momentum=0.1, eps=1e-5):
        return cls(momentum=momentum, eps=eps).initialize(channels, dtype)


# ---------------------------------------------------------------------------
# public ops
# ---------------------------------------------------------------------------

def conv2d(input: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation of (C_in,H,W) with (C_out,C_in,kH,kW) kernels.

    Stride 1, no padding; output is (C_out, H-kH+1, W-kW+1). The backward
    pass fills the grads of input, kernels, and bias.
    """
    x, w, b = _as_tensor(input, "input"), _as_tensor(kernels, "kernels"), _as_tensor(bias, "bias")
    if x.ndim != 3:
        raise ValueError(f"conv2d input must be (C_in,H,W), got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d kernels must be (C_out,C_in,kH,kW), got shape {w.shape}")
    cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(
            f"channel mismatch: input has {cin} channels, kernels expect {wcin}"
        )
    if h < kh or wd < kw:
        raise ValueError(
            f"kernel {kh}x{kw} larger than input {h}x{wd} (valid convolution)"
        )
    if b.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {b.shape}")
    y = _conv2d_forward(x.data[None], w.data, b.data)[0]
    out = Tensor(y)

    def _backward(dy):
        dx, dw, db = _conv2d_backward(x.data[None], w.data, dy[None])
        x.accumulate_grad(dx[0])
        w.accumulate_grad(dw)
        b.accumulate_grad(db)

    out._backward = _backward
    out._parents = (x, w, b)
    return out


def maxpool2d(input: Tensor, k) -> Tensor:
    """Non-overlapping max pooling of (C,H,W); stride equals the window.

    Trailing rows/columns that do not fill a window are dropped. The backward
    pass routes each gradient to the first (row-major) argmax of its window.
    """
    x = _as_tensor(input, "input")
    if x.ndim != 3:
        raise ValueError(f"maxpool2d input must be (C,H,W), got shape {x.shape}")
    kh, kw = (k, k) if np.isscalar(k) else tuple(k)
    c, h, w = x.shape
    if h < kh or w < kw:
        raise ValueError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    y, idx = _maxpool2d_forward(x.data[None], kh, kw)
    out = Tensor(y[0])

    def _backward(dy):
        dx = _maxpool2d_backward(dy[None], idx, (1, c, h, w), kh, kw)
        x.accumulate_grad(dx[0])

    out._backward = _backward
    out._parents = (x,)
    return out


def batchnorm2d(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
) -> Tensor:
    """Per-channel batch normalization of (B,C,H,W) with learned scale/shift.

    Train mode uses batch statistics and updates `state`'s running stats;
    eval mode uses the running stats.
    """
    x = _as_tensor(input, "input")
    g, bt = _as_tensor(gamma, "gamma"), _as_tensor(beta, "beta")
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d input must be (B,C,H,W), got shape {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    c = x.shape[1]
    if g.shape != (c,) or bt.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    training = mode == "train"
    y, cache = _batchnorm_forward(x.data, g.data, bt.data, state, training)
    out = Tensor(y)

    def _backward(dy):
        dx, dgamma, dbeta = _batchnorm_backward(dy, g.data, cache, training)
        x.accumulate_grad(dx)
        g.accumulate_grad(dgamma)
        bt.accumulate_grad(dbeta)

    out._backward = _backward
    out._parents = (x, g, bt)
    return out


def relu(input: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    x = _as_tensor(input, "input")
    _require_finite("relu input", x.data)
    out = Tensor(np.maximum(x.data, 0))

    def _backward(dy):
        x.accumulate_grad(dy * (x.data > 0))

    out._backward = _backward
    out._parents = (x,)
    return out


def linear(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map W x + b for x of shape (n,) or a batch (B,n)."""
    x, w, b = _as_tensor(input, "input"), _as_tensor(weight, "weight"), _as_tensor(bias, "bias")
    _require_finite("linear input", x.data)
    if w.ndim != 2:
        raise ValueError(f"weight must be (m,n), got shape {w.shape}")
    m, n = w.shape
    if b.shape != (m,):
        raise ValueError(f"bias must have shape ({m},), got {b.shape}")
    batched = x.ndim == 2
    if (batched and x.shape[1] != n) or (not batched and x.shape != (n,)):
        raise ValueError(f"input shape {x.shape} incompatible with weight {w.shape}")
    x2 = x.data if batched else x.data[None]
    y = x2 @ w.data.T + b.data
    out = Tensor(y if batched else y[0])

    def _backward(dy):
        dy2 = dy if batched else dy[None]
        x.accumulate_grad(dy2 @ w.data if batched else (dy2 @ w.data)[0])
        w.accumulate_grad(dy2.T @ x2)
        b.accumulate_grad(dy2.sum(axis=0))

    out._backward = _backward
    out._parents = (x, w, b)
    return out


def softmax(logits: Tensor) -> Tensor:
    """Stable softmax over the last axis; outputs are positive and sum to 1."""
    z = _as_tensor(logits, "logits")
    _require_finite("softmax logits", z.data)
    p = _softmax(z.data)
    out = Tensor(p)

    def _backward(dy):
        # J^T dy with J the softmax Jacobian: p * (dy - <dy, p>)
        inner = (dy * p).sum(axis=-1, keepdims=True)
        z.accumulate_grad(p * (dy - inner))

    out._backward = _backward
    out._parents = (z,)
    return out


def cross_entropy(probabilities: Tensor, labels) -> Tensor:
    """Mean over the batch of -log p[label], for (B,2) probability rows.

    Probabilities are clamped below at 1e-12 before the log. Composed with
    `softmax`, the chained gradient w.r.t. the logits is (p - onehot)/B.
    """
    p = _as_tensor(probabilities, "probabilities")
    y = np.asarray(labels)
    if p.ndim != 2:
        raise ValueError(f"probabilities must be (B,K), got shape {p.shape}")
    bsz, k = p.shape
    if y.shape != (bsz,):
        raise ValueError(f"labels must have shape ({bsz},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integer class indices")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    rows = p.data.sum(axis=1)
    if not np.allclose(rows, 1.0, atol=1e-6):
        raise ValueError("probability rows must sum to 1")
    picked = np.clip(p.data[np.arange(bsz), y], 1e-12, None)
    loss = -np.log(picked).mean()
    out = Tensor(np.asarray(loss, dtype=p.dtype))

    def _backward(dy):
        dp = np.zeros_like(p.data)
        dp[np.arange(bsz), y] = -1.0 / (picked * bsz)
        p.accumulate_grad(dp * dy)

    out._backward = _backward
    out._parents = (p,)
    return out


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Fused loss used by the training loop.

    Returns (loss, probs, dlogits) with dlogits = (p - onehot)/B, the exact
    gradient of the mean cross entropy w.r.t. the logits.
    """
    p = _softmax(logits)
    bsz = logits.shape[0]
    idx = np.arange(bsz)
    picked = np.clip(p[idx, labels], 1e-12, None)
    loss = float(-np.log(picked).mean())
    dlogits = p.copy()
    dlogits[idx, labels] -= 1.0
    dlogits /= bsz
    return loss, p, dlogits


def gradient_check(fn, *inputs: Tensor, h: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error between reverse-mode and central-difference grads.

    `fn` maps the input tensors to one output tensor and must be pure given
    them. The output is projected onto a fixed random direction so a scalar
    finite difference probes the whole Jacobian action. Use float64 inputs.
    """
    rng = np.random.default_rng(seed)
    ref = fn(*inputs)
    proj = rng.standard_normal(ref.data.shape)

    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    out.backward(proj)

    def objective():
        return float(np.sum(fn(*inputs).data * proj))

    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = objective()
            flat[i] = orig - h
            fm = objective()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst
