"""Tanh MLP with hand-written reverse mode.

Layers alternate weight ``(fan_in, fan_out)`` and bias ``(fan_out,)``.
Hidden layers use tanh; the last layer is linear and its output is
multiplied by ``output_scale``.
"""
import numpy as np

from .errors import DivergenceError


def lecun_init(widths, rng, ratio=1.0):
    """LeCun-normal weights (std ``ratio / sqrt(fan_in)``) and zero biases."""
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        layers.append(rng.standard_normal((fan_in, fan_out)) * (ratio / np.sqrt(fan_in)))
        layers.append(np.zeros(fan_out))
    return layers


def mlp_forward(layers, x, output_scale=1.0):
    h = x
    n_lin = len(layers) // 2
    for k in range(n_lin - 1):
        h = np.tanh(h @ layers[2 * k] + layers[2 * k + 1])
    return output_scale * (h @ layers[-2] + layers[-1])


def mlp_loss(layers, x, y_scaled, output_scale=1.0):
    r = mlp_forward(layers, x, output_scale) - y_scaled
    return 0.5 * float(np.sum(r * r)) / x.shape[0]


def mlp_forward_backward(layers, x, y_scaled, output_scale=1.0):
    """Return ``(loss, grads)`` for ``0.5 * mean_batch ||output_scale * f(x) - y||^2``."""
    n_lin = len(layers) // 2
    acts = [x]
    h = x
    for k in range(n_lin - 1):
        h = np.tanh(h @ layers[2 * k] + layers[2 * k + 1])
        acts.append(h)
    out = output_scale * (h @ layers[-2] + layers[-1])
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite MLP activations")
    r = out - y_scaled
    n = x.shape[0]
    value = 0.5 * float(np.sum(r * r)) / n

    grads = [None] * len(layers)
    delta = r * (output_scale / n)
    for k in range(n_lin - 1, -1, -1):
        a = acts[k]
        grads[2 * k] = a.T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ layers[2 * k].T) * (1.0 - a * a)
    return value, grads
