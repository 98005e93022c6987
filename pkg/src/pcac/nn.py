"""Tiny numpy layers with explicit backward passes, plus Adam.

Parameters live in a flat ``dict[str, ndarray]`` so the optimizer, the
gradient checker and the model file all see the same ordered view.
"""

from __future__ import annotations

import numpy as np


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    return np.log(np.expm1(y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def glorot(rng, fan_in, fan_out):
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def init_mlp(params, rng, prefix, dims):
    """Declare ``prefix.W{i}``, ``prefix.b{i}`` for a chain of layer sizes."""
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"{prefix}.W{i}"] = glorot(rng, fan_in, fan_out)
        params[f"{prefix}.b{i}"] = np.zeros(fan_out)


def mlp_forward(params, prefix, x, n_layers):
    """tanh on hidden layers, linear output."""
    cache = []
    h = x
    for i in range(n_layers):
        z = h @ params[f"{prefix}.W{i}"] + params[f"{prefix}.b{i}"]
        last = i == n_layers - 1
        a = z if last else np.tanh(z)
        cache.append((h, a, last))
        h = a
    return h, cache


def mlp_backward(params, prefix, cache, dy, grads):
    """Accumulate parameter gradients into ``grads``; return d(input)."""
    for i in range(len(cache) - 1, -1, -1):
        h, a, last = cache[i]
        dz = dy if last else dy * (1.0 - a * a)
        grads[f"{prefix}.W{i}"] += h.T @ dz
        grads[f"{prefix}.b{i}"] += dz.sum(axis=0)
        dy = dz @ params[f"{prefix}.W{i}"].T
    return dy


class Adam:
    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
