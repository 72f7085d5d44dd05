"""Elementwise first-order optimizers operating on dicts of arrays."""

from __future__ import annotations

import numpy as np


class RMSProp:
    """RMSProp with the usual library defaults (rho 0.9, eps 1e-7)."""

    def __init__(self, lr=0.001, rho=0.9, eps=1e-7):
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self._sq = {}

    def step(self, params: dict, grads: dict) -> dict:
        out = {}
        for k, p in params.items():
            g = grads[k]
            sq = self._sq.get(k)
            sq = (1.0 - self.rho) * g * g if sq is None else self.rho * sq + (1.0 - self.rho) * g * g
            self._sq[k] = sq
            out[k] = p - self.lr * g / (np.sqrt(sq) + self.eps)
        return out


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = b1 * self._m.get(k, 0.0) + (1.0 - b1) * g
            v = b2 * self._v.get(k, 0.0) + (1.0 - b2) * g * g
            self._m[k], self._v[k] = m, v
            mhat = m / (1.0 - b1**self._t)
            vhat = v / (1.0 - b2**self._t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def make_optimizer(name: str, lr: float):
    name = name.lower()
    if name in ("rmsprop", "rmsprop-style"):
        return RMSProp(lr=lr)
    if name in ("adam", "adam-style"):
        return Adam(lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total
