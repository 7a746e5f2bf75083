"""The two trial classifiers: construction, training, inference, checkpoints.

Both networks map a single-channel 128x125 trial image to two-class logits.
The "intent" variant stacks three conv blocks (5x5 kernels, 3x3 pools); the
"rt" variant stacks four (3x5 kernels, 2x2 pools). Every block is
convolution -> ReLU -> batch normalization -> max pooling, then a single
fully connected layer and softmax.

Training minimizes mean two-class cross entropy with Adam over shuffled
minibatches; with a two-class softmax head this is the same objective as
binary cross entropy on the positive-class probability. Runs are
deterministic given (seed, data, config) in single-threaded mode.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .binio import ChecksumError, FormatError
from .tensor import (
    BatchNormState,
    _batchnorm_backward,
    _batchnorm_forward,
    _conv2d_backward,
    _conv2d_forward,
    _maxpool2d_backward,
    _maxpool2d_forward,
    _softmax,
    softmax_cross_entropy,
)

ARCHITECTURES = ("intent", "rt")

CHECKPOINT_MAGIC = b"EMCK"
CHECKPOINT_VERSION = 1


class ArchitectureMismatchError(ValueError):
    """Checkpoint architecture differs from the one the caller asked for."""


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d:
    def __init__(self, label, cin, cout, kh, kw, rng, dtype, first=False):
        self.label = label
        self.first = first   # first layer skips the unused input gradient
        bound = 1.0 / np.sqrt(cin * kh * kw)
        self.w = rng.uniform(-bound, bound, (cout, cin, kh, kw)).astype(dtype)
        self.b = rng.uniform(-bound, bound, cout).astype(dtype)
        self.dw = None
        self.db = None
        self._x = None
        self._cols = None

    def forward(self, x, mode):
        if mode == "train":
            y, self._cols = _conv2d_forward(x, self.w, self.b, return_cols=True)
            self._x = x
            return y
        return _conv2d_forward(x, self.w, self.b)

    def backward(self, dy):
        dx, self.dw, self.db = _conv2d_backward(
            self._x, self.w, dy, cols=self._cols, need_dx=not self.first
        )
        self._x = None
        self._cols = None
        return dx

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}


class Relu:
    def __init__(self, label):
        self.label = label
        self._mask = None

    def forward(self, x, mode):
        if mode == "train":
            self._mask = x > 0
            return x * self._mask
        return np.maximum(x, 0)

    def backward(self, dy):
        dx = dy * self._mask
        self._mask = None
        return dx

    def params(self):
        return {}

    def grads(self):
        return {}


class BatchNorm2d:
    def __init__(self, label, channels, dtype):
        self.label = label
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        # (0, 1) defaults keep eval mode legal on a freshly built network
        self.state = BatchNormState.initialized(channels, dtype=dtype)
        self.dgamma = None
        self.dbeta = None
        self._cache = None

    def forward(self, x, mode):
        y, cache = _batchnorm_forward(
            x, self.gamma, self.beta, self.state, training=(mode == "train")
        )
        if mode == "train":
            self._cache = cache
        return y

    def backward(self, dy):
        dx, self.dgamma, self.dbeta = _batchnorm_backward(
            dy, self.gamma, self._cache, training=True
        )
        self._cache = None
        return dx

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}


class MaxPool2d:
    def __init__(self, label, k):
        self.label = label
        self.k = k
        self._idx = None
        self._in_shape = None

    def forward(self, x, mode):
        y, idx = _maxpool2d_forward(x, self.k, self.k, need_idx=mode == "train")
        if mode == "train":
            self._idx = idx
            self._in_shape = x.shape
        return y

    def backward(self, dy):
        dx = _maxpool2d_backward(dy, self._idx, self._in_shape, self.k, self.k)
        self._idx = None
        return dx

    def params(self):
        return {}

    def grads(self):
        return {}


class Flatten:
    def __init__(self, label="flatten"):
        self.label = label
        self._in_shape = None

    def forward(self, x, mode):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._in_shape)

    def params(self):
        return {}

    def grads(self):
        return {}


class Linear:
    def __init__(self, label, n_in, n_out, rng, dtype):
        self.label = label
        bound = 1.0 / np.sqrt(n_in)
        self.w = rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype)
        self.b = rng.uniform(-bound, bound, n_out).astype(dtype)
        self.dw = None
        self.db = None
        self._x = None

    def forward(self, x, mode):
        if mode == "train":
            self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy):
        self.dw = dy.T @ self._x
        self.db = dy.sum(axis=0)
        dx = dy @ self.w
        self._x = None
        return dx

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

_ARCH_PLAN = {
    # (kernel hw, pool, conv channels)
    "intent": ((5, 5), 3, (32, 64, 128)),
    "rt": ((3, 5), 2, (32, 64, 128, 256)),
}

INPUT_SHAPE = (1, 128, 125)


class Network:
    """An ordered layer stack plus its architecture id and build seed."""

    def __init__(self, arch: str, seed: int, layers, dtype=np.float32):
        self.arch = arch
        self.seed = seed
        self.layers = layers
        self.dtype = dtype

    def forward(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.ndim != 4 or x.shape[1:] != INPUT_SHAPE:
            raise ValueError(
                f"expected input of shape (B, {INPUT_SHAPE[0]}, {INPUT_SHAPE[1]}, "
                f"{INPUT_SHAPE[2]}), got {x.shape}"
            )
        y = np.ascontiguousarray(x, dtype=self.dtype)
        for layer in self.layers:
            y = layer.forward(y, mode)
        return y

    def backward(self, dlogits: np.ndarray) -> None:
        dy = dlogits.astype(self.dtype, copy=False)
        for layer in reversed(self.layers):
            dy = layer.backward(dy)

    def parameters(self) -> dict:
        out = {}
        for layer in self.layers:
            for k, v in layer.params().items():
                out[f"{layer.label}.{k}"] = v
        return out

    def gradients(self) -> dict:
        out = {}
        for layer in self.layers:
            for k, v in layer.grads().items():
                out[f"{layer.label}.{k}"] = v
        return out

    def set_parameters(self, values: dict) -> None:
        for layer in self.layers:
            p = layer.params()
            for k in p:
                src = values[f"{layer.label}.{k}"]
                if src.shape != p[k].shape:
                    raise ValueError(
                        f"parameter {layer.label}.{k}: shape {src.shape} != {p[k].shape}"
                    )
                p[k][...] = src

    def running_stats(self) -> dict:
        out = {}
        for layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                out[f"{layer.label}.running_mean"] = layer.state.running_mean
                out[f"{layer.label}.running_var"] = layer.state.running_var
        return out

    def parameter_count(self) -> int:
        return sum(int(p.size) for p in self.parameters().values())


def build_network(arch: str, seed: int = 0, dtype=np.float32) -> Network:
    """Construct one of the two classifier stacks with seeded fan-in init.

    Weights and biases draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); batch
    norm starts at identity (gamma 1, beta 0) with (0, 1) running stats.
    """
    if arch not in ARCHITECTURES:
        raise ValueError(f"arch must be one of {ARCHITECTURES}, got {arch!r}")
    (kh, kw), pool, channels = _ARCH_PLAN[arch]
    rng = np.random.default_rng(seed)
    layers = []
    cin, h, w = INPUT_SHAPE
    for i, cout in enumerate(channels, start=1):
        layers.append(Conv2d(f"conv{i}", cin, cout, kh, kw, rng, dtype, first=i == 1))
        h, w = h - kh + 1, w - kw + 1
        layers.append(Relu(f"relu{i}"))
        layers.append(BatchNorm2d(f"bn{i}", cout, dtype))
        layers.append(MaxPool2d(f"pool{i}", pool))
        h, w = h // pool, w // pool
        cin = cout
    layers.append(Flatten())
    layers.append(Linear("fc", cin * h * w, 2, rng, dtype))
    return Network(arch, seed, layers, dtype)


def architecture_rows(net: Network):
    """Label and output shape of every layer, probed with a one-trial batch.

    The fully connected and softmax rows report the (1, 2) batched shape.
    """
    x = np.zeros((1,) + INPUT_SHAPE, dtype=net.dtype)
    rows = []
    for layer in net.layers:
        x = layer.forward(x, "eval")
        if isinstance(layer, Flatten):
            continue
        shape = tuple(x.shape[1:]) if x.ndim == 4 else tuple(x.shape)
        rows.append((layer.label, shape))
    rows.append(("softmax", tuple(_softmax(x).shape)))
    return rows


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    `holdout_fraction` > 0 reserves a seeded validation split used for early
    stopping: training stops after `patience` epochs without a validation
    loss improvement and the best-epoch parameters are restored.
    """

    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    holdout_fraction: float = 0.1
    patience: int = 10

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


@dataclass
class AdamState:
    """First/second moment buffers per named parameter, plus a step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on `params` and `state`."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}"
            )
        if not np.isfinite(g).all():
            raise FloatingPointError(
                f"non-finite gradient for parameter {name!r} at step {t}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

@dataclass
class TrainHistory:
    train_loss: list
    train_accuracy: list
    val_loss: list
    epochs_run: int
    best_epoch: int
    stopped_early: bool


def _coerce_trials_labels(data):
    if hasattr(data, "x") and hasattr(data, "y"):
        return np.asarray(data.x), np.asarray(data.y)
    trials, labels = data
    return np.asarray(trials), np.asarray(labels)


def train(net: Network, data, cfg: TrainConfig) -> TrainHistory:
    """Minibatch Adam training on (N,128,125) trials with {0,1} labels.

    Shuffles per epoch with the seeded generator, keeps the last partial
    minibatch (epoch loss is weighted by true batch sizes), and early-stops
    on holdout validation loss when configured.
    """
    trials, labels = _coerce_trials_labels(data)
    if trials.ndim == 3:
        trials = trials[:, None]
    n = trials.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if trials.shape[1:] != INPUT_SHAPE:
        raise ValueError(
            f"trials must be (N, 128, 125), got per-trial shape {trials.shape[1:]}"
        )
    labels = labels.astype(np.int64)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if np.unique(labels).size < 2:
        warnings.warn("training labels contain a single class", stacklevel=2)

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = int(round(n * cfg.holdout_fraction))
    use_holdout = n_val > 0 and n - n_val >= 2
    if use_holdout:
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
    else:
        val_idx, tr_idx = np.empty(0, dtype=np.int64), perm
    x_tr, y_tr = trials[tr_idx], labels[tr_idx]
    x_val, y_val = trials[val_idx], labels[val_idx]
    n_tr = x_tr.shape[0]

    params = net.parameters()
    state = AdamState.for_params(params)
    hist = TrainHistory([], [], [], 0, 0, False)
    best_val = np.inf
    best_params = None
    since_best = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(n_tr)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n_tr, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x_tr[idx]
            yb = y_tr[idx]
            logits = net.forward(xb, "train")
            loss, probs, dlogits = softmax_cross_entropy(
                logits.astype(np.float64), yb
            )
            net.backward(dlogits)
            adam_step(params, net.gradients(), state, cfg)
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == yb).sum())
        hist.train_loss.append(loss_sum / n_tr)
        hist.train_accuracy.append(correct / n_tr)
        hist.epochs_run = epoch + 1

        if use_holdout:
            vloss = _eval_loss(net, x_val, y_val, cfg.batch_size)
            hist.val_loss.append(vloss)
            if vloss < best_val:
                best_val = vloss
                hist.best_epoch = epoch
                best_params = {k: p.copy() for k, p in params.items()}
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    hist.stopped_early = True
                    break
        else:
            hist.best_epoch = epoch

    if best_params is not None:
        net.set_parameters(best_params)
    return hist


def _eval_loss(net: Network, x, y, batch_size: int) -> float:
    total = 0.0
    for start in range(0, x.shape[0], batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        logits = net.forward(xb, "eval").astype(np.float64)
        loss, _, _ = softmax_cross_entropy(logits, yb)
        total += loss * len(yb)
    return total / x.shape[0]


def predict(net: Network, trials: np.ndarray, batch_size: int = 64):
    """Class index and class probabilities per trial, in eval mode.

    Accepts (N,128,125), (N,1,128,125), or a single (128,125) trial.
    """
    x = np.asarray(trials)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != INPUT_SHAPE:
        raise ValueError(
            f"trials must be (N, 128, 125), got per-trial shape {x.shape[1:]}"
        )
    probs = np.empty((x.shape[0], 2), dtype=np.float64)
    for start in range(0, x.shape[0], batch_size):
        logits = net.forward(x[start : start + batch_size], "eval")
        probs[start : start + logits.shape[0]] = _softmax(logits.astype(np.float64))
    labels = probs.argmax(axis=1)
    if single:
        return int(labels[0]), probs[0]
    return labels, probs


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: Network, path, meta: dict | None = None) -> None:
    """Serialize parameters, running stats, and build metadata.

    Layout: magic, u16 version, arch string, JSON metadata record, named
    float32 little-endian arrays, trailing crc32 of everything before it.
    `meta` entries are merged into the metadata record (reserved keys win).
    """
    arrays = dict(net.parameters())
    arrays.update(net.running_stats())
    meta = {
        **(meta or {}),
        "seed": int(net.seed),
        "dtype": np.dtype(net.dtype).name,
        "init": "uniform-fan-in",
        "bn_momentum": 0.1,
        "bn_eps": 1e-5,
        "bn_batches_seen": {
            layer.label: layer.state.batches_seen
            for layer in net.layers
            if isinstance(layer, BatchNorm2d)
        },
    }
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    arch_b = net.arch.encode()
    parts.append(struct.pack("<B", len(arch_b)))
    parts.append(arch_b)
    meta_b = json.dumps(meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta_b)))
    parts.append(meta_b)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        name_b = name.encode()
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob)))


def load_checkpoint(path, expect_arch: str | None = None) -> Network:
    """Rebuild a network from a checkpoint file, verifying the checksum."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    body, crc_b = blob[:-4], blob[-4:]
    if struct.unpack("<I", crc_b)[0] != zlib.crc32(body):
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupt)")
    off = 4
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (alen,) = struct.unpack_from("<B", body, off)
    off += 1
    arch = body[off : off + alen].decode()
    off += alen
    if arch not in ARCHITECTURES:
        raise FormatError(f"{path}: unknown architecture {arch!r}")
    if expect_arch is not None and arch != expect_arch:
        raise ArchitectureMismatchError(
            f"{path}: checkpoint holds a {arch!r} network, expected {expect_arch!r}"
        )
    (mlen,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off : off + mlen].decode())
    off += mlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        (plen,) = struct.unpack_from("<Q", body, off)
        off += 8
        arr = np.frombuffer(body, dtype="<f4", count=plen // 4, offset=off)
        arrays[name] = arr.reshape(shape).copy()
        off += plen

    net = build_network(arch, seed=meta.get("seed", 0))
    want = dict(net.parameters())
    want.update(net.running_stats())
    if set(arrays) != set(want):
        raise FormatError(f"{path}: parameter names do not match the {arch} layout")
    net.set_parameters({k: arrays[k] for k in net.parameters()})
    for layer in net.layers:
        if isinstance(layer, BatchNorm2d):
            layer.state.running_mean[...] = arrays[f"{layer.label}.running_mean"]
            layer.state.running_var[...] = arrays[f"{layer.label}.running_var"]
            layer.state.batches_seen = meta.get("bn_batches_seen", {}).get(
                layer.label, 0
            )
    return net
