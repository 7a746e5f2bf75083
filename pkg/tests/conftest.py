"""Shared helpers for the test suite."""

import numpy as np

from eegmotion.network import build_network
from eegmotion.tensor import softmax_cross_entropy


def sampled_network_fd_error(arch: str, n_coords: int = 2, seed: int = 0,
                             h: float = 1e-6) -> float:
    """Worst relative error between backprop and central differences.

    Builds a float64 network, computes the loss gradient on a 2-trial batch,
    then probes `n_coords` randomly sampled coordinates of every parameter
    tensor with central finite differences. The step is small enough that a
    +-h nudge almost never pushes a pre-activation across the ReLU kink or
    flips a pooling argmax.
    """
    rng = np.random.default_rng(seed)
    net = build_network(arch, seed=seed, dtype=np.float64)
    x = rng.standard_normal((2, 1, 128, 125))
    y = np.array([0, 1])

    def loss_value():
        logits = net.forward(x, "train")
        loss, _, _ = softmax_cross_entropy(logits, y)
        return loss

    logits = net.forward(x, "train")
    _, _, dlogits = softmax_cross_entropy(logits, y)
    net.backward(dlogits)
    grads = net.gradients()

    worst = 0.0
    for name, p in net.parameters().items():
        g = grads[name]
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            analytic = gflat[i]
            rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def separable_trials(n: int, seed: int = 0):
    """Balanced two-class trials split by a strong localized mean offset."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 128, 125)).astype(np.float32)
    y = np.arange(n) % 2
    sign = np.where(y == 1, 1.0, -1.0).astype(np.float32)
    x[:, 40:80, 60:] += sign[:, None, None] * 1.5
    return x, y.astype(np.int64)
