"""Small neural-network building blocks with explicit backward passes.

Everything is float64 and full-batch; forward functions return caches that
their backward counterparts consume. Parameter sets are plain dicts of
name -> ndarray so optimizers and serializers can stay generic.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def relu(x):
    return np.maximum(x, 0.0)


def linear_forward(x, w, b):
    """x: (B, F) @ w: (F, G) + b -> (B, G)."""
    return x @ w + b


def linear_backward(dout, x, w):
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, dw, db


def softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout, s, axis=-1):
    """Jacobian-vector product of softmax outputs s against upstream dout."""
    inner = np.sum(dout * s, axis=axis, keepdims=True)
    return s * (dout - inner)


def squash(v, axis=-1):
    """Norm-shrinking capsule activation: |out| = |v|^2 / (1 + |v|^2) < 1.

    The zero vector maps to zero (limit convention); direction is preserved.
    """
    n2 = np.sum(v * v, axis=axis, keepdims=True)
    norm = np.sqrt(n2)
    scale = np.where(norm > 0.0, norm / (1.0 + n2), 0.0)
    return scale * v


def squash_backward(dout, v, axis=-1):
    n2 = np.sum(v * v, axis=axis, keepdims=True)
    norm = np.sqrt(n2)
    safe = np.where(norm > 0.0, norm, 1.0)
    scale = np.where(norm > 0.0, norm / (1.0 + n2), 0.0)
    # d scale / d n2, times the chain through |v|^2
    dscale_dn2 = np.where(norm > 0.0, (1.0 - n2) / (2.0 * safe * (1.0 + n2) ** 2), 0.0)
    inner = np.sum(dout * v, axis=axis, keepdims=True)
    return scale * dout + 2.0 * dscale_dn2 * inner * v


def conv2d_forward(x, kern, bias, stride):
    """Valid 2-D convolution with strides.

    x: (C, Hin, Win); kern: (F, C, kh, kw); bias: (F,); stride: (sh, sw).
    Returns (F, Ho, Wo).
    """
    C, Hin, Win = x.shape
    F, _, kh, kw = kern.shape
    sh, sw = stride
    Ho = (Hin - kh) // sh + 1
    Wo = (Win - kw) // sw + 1
    out = np.broadcast_to(bias[:, None, None], (F, Ho, Wo)).copy()
    for a in range(kh):
        for b in range(kw):
            patch = x[:, a : a + sh * Ho : sh, b : b + sw * Wo : sw]
            out += np.einsum("fc,chw->fhw", kern[:, :, a, b], patch)
    return out


def conv2d_backward(dout, x, kern, stride):
    C, Hin, Win = x.shape
    F, _, kh, kw = kern.shape
    sh, sw = stride
    Ho, Wo = dout.shape[1:]
    dx = np.zeros_like(x)
    dk = np.zeros_like(kern)
    for a in range(kh):
        for b in range(kw):
            patch = x[:, a : a + sh * Ho : sh, b : b + sw * Wo : sw]
            dk[:, :, a, b] = np.einsum("fhw,chw->fc", dout, patch)
            dx[:, a : a + sh * Ho : sh, b : b + sw * Wo : sw] += np.einsum(
                "fc,fhw->chw", kern[:, :, a, b], dout
            )
    db = dout.sum(axis=(1, 2))
    return dx, dk, db


class Adam:
    """Adam update rule (beta1=0.9, beta2=0.999) over a parameter dict."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for key in sorted(params):
            g = grads[key]
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            mhat = self.m[key] / bc1
            vhat = self.v[key] / bc2
            params[key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def check_finite_loss(loss: float, epoch: int) -> None:
    if not np.isfinite(loss):
        raise NumericalError(f"training loss became non-finite at epoch {epoch}")
