"""Temporal capsule network for cycle-rich stages.

Per cycle, a strided convolution over the discrepancy components produces
feature maps whose filter groups form basic capsules; agreement-based dynamic
routing condenses them into a few advanced capsules, differentiated end to
end through the unrolled routing iterations. The flattened advanced capsules
of L consecutive cycles then feed an LSTM whose final state regresses the
last cycle's capacity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels as kernels
from ..errors import ValidationError
from . import nn


@dataclass
class TemCapSpec:
    """Architecture knobs; the defaults mirror the cycle-rich stage setup."""

    filters: int = 32
    kernel_size: tuple[int, int] = (1, 2)
    strides: tuple[int, int] = (1, 2)
    capsule_dim: int = 4        # M: length of one basic capsule
    advanced_count: int = 4     # D
    advanced_dim: int = 8
    trl_hidden: int = 16
    window: int = 5             # L cycles per training sequence
    routing_iters: int = 3

    def validate(self) -> None:
        if self.filters % self.capsule_dim != 0:
            raise ValidationError(
                f"filter count {self.filters} must be divisible by capsule dim {self.capsule_dim}"
            )
        if min(self.kernel_size) < 1 or min(self.strides) < 1:
            raise ValidationError("kernel size and strides must be positive")
        if self.window < 1 or self.routing_iters < 1:
            raise ValidationError("window and routing_iters must be >= 1")


def routing_forward(uhat: np.ndarray, iters: int):
    """Dynamic routing over prediction vectors uhat: (n, D, d).

    Logits start at zero; each iteration takes the softmax over advanced
    capsules, forms the weighted sums, squashes them, and (between
    iterations) reinforces logits by the agreement uhat . s.
    Returns the final advanced capsules s: (D, d) and the iteration cache.
    """
    n, D, d = uhat.shape
    logits = np.zeros((n, D))
    steps = []
    s = None
    for k in range(iters):
        c = nn.softmax(logits, axis=1)
        v = np.einsum("nd,ndk->dk", c, uhat)
        s = nn.squash(v, axis=-1)
        steps.append((c, v, s))
        if k + 1 < iters:
            logits = logits + np.einsum("ndk,dk->nd", uhat, s)
    return s, steps


def routing_backward(dout: np.ndarray, uhat: np.ndarray, steps):
    """Backpropagate through the unrolled routing; returns d uhat: (n, D, d)."""
    duhat = np.zeros_like(uhat)
    dlogits = np.zeros(uhat.shape[:2])
    ds = dout
    for k in range(len(steps) - 1, -1, -1):
        c, v, s = steps[k]
        dv = nn.squash_backward(ds, v, axis=-1)
        duhat += c[:, :, None] * dv[None, :, :]
        dc = np.einsum("ndk,dk->nd", uhat, dv)
        dlogits += nn.softmax_backward(dc, c, axis=1)
        if k > 0:
            _, _, s_prev = steps[k - 1]
            ds = np.einsum("nd,ndk->dk", dlogits, uhat)
            duhat += dlogits[:, :, None] * s_prev[None, :, :]
    return duhat


class TemCapModel:
    def __init__(self, input_shape: tuple[int, int], spec: TemCapSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.input_shape = (int(input_shape[0]), int(input_shape[1]))
        self.seed = int(seed)

        hin, win = self.input_shape
        kh, kw = spec.kernel_size
        sh, sw = spec.strides
        if hin < kh or win < kw:
            raise ValidationError(
                f"input {self.input_shape} smaller than convolution kernel {spec.kernel_size}"
            )
        self.out_h = (hin - kh) // sh + 1
        self.out_w = (win - kw) // sw + 1
        self.groups = spec.filters // spec.capsule_dim
        self.n_capsules = self.groups * self.out_h * self.out_w

        rng = np.random.default_rng(seed)
        fan_conv = kh * kw
        M, D, d = spec.capsule_dim, spec.advanced_count, spec.advanced_dim
        flat = D * d
        self.params: dict[str, np.ndarray] = {
            "conv.k": nn.uniform_init(rng, (spec.filters, 1, kh, kw), fan_conv),
            "conv.b": nn.uniform_init(rng, (spec.filters,), fan_conv),
            "route.W": nn.uniform_init(rng, (self.n_capsules, D, d, M), M),
            "trl.wx": nn.uniform_init(rng, (flat, 4 * spec.trl_hidden), flat),
            "trl.wh": nn.uniform_init(rng, (spec.trl_hidden, 4 * spec.trl_hidden), spec.trl_hidden),
            "trl.b": nn.uniform_init(rng, (4 * spec.trl_hidden,), spec.trl_hidden),
            "head.w": nn.uniform_init(rng, (spec.trl_hidden, 1), spec.trl_hidden),
            "head.b": nn.uniform_init(rng, (1,), spec.trl_hidden),
        }

    # -- per-cycle capsule encoder -----------------------------------------

    def encode_cycle(self, s_d: np.ndarray):
        """BCL + ACL for one (J-S) x K' matrix -> flattened capsules (D*d,)."""
        if s_d.shape != self.input_shape:
            raise ValidationError(
                f"expected discrepancy matrix {self.input_shape}, got {tuple(s_d.shape)}"
            )
        x = s_d[None, :, :]
        pre = nn.conv2d_forward(x, self.params["conv.k"], self.params["conv.b"], self.spec.strides)
        act = nn.relu(pre)
        M = self.spec.capsule_dim
        u = (
            act.reshape(self.groups, M, self.out_h, self.out_w)
            .transpose(0, 2, 3, 1)
            .reshape(self.n_capsules, M)
        )
        uhat = np.einsum("ndkm,nm->ndk", self.params["route.W"], u)
        s, steps = routing_forward(uhat, self.spec.routing_iters)
        cache = (x, pre, u, uhat, steps)
        return s.reshape(-1), cache

    def encode_backward(self, dflat: np.ndarray, cache):
        """Gradient of one cycle's encoder; returns a per-cycle grads dict."""
        x, pre, u, uhat, steps = cache
        D, d = self.spec.advanced_count, self.spec.advanced_dim
        duhat = routing_backward(dflat.reshape(D, d), uhat, steps)
        dW = np.einsum("ndk,nm->ndkm", duhat, u)
        du = np.einsum("ndkm,ndk->nm", self.params["route.W"], duhat)
        M = self.spec.capsule_dim
        dact = (
            du.reshape(self.groups, self.out_h, self.out_w, M)
            .transpose(0, 3, 1, 2)
            .reshape(self.spec.filters, self.out_h, self.out_w)
        )
        dpre = dact * (pre > 0.0)
        _, dk, db = nn.conv2d_backward(dpre, x, self.params["conv.k"], self.spec.strides)
        return {"conv.k": dk, "conv.b": db, "route.W": dW}

    # -- windowed sequence regressor ----------------------------------------

    def forward_windows(self, s_d_list, window_ends):
        """Predict the last-cycle capacity of each window.

        s_d_list: discrepancy matrices for all available cycles, in order.
        window_ends: indices i (0-based) of window-final cycles; each window
        covers cycles [i - L + 1, i].
        """
        L = self.spec.window
        for i in window_ends:
            if i - L + 1 < 0 or i >= len(s_d_list):
                raise ValidationError(
                    f"window ending at cycle position {i} needs {L} cycles of history"
                )
        flats = []
        caches = []
        for m in s_d_list:
            f, cache = self.encode_cycle(m)
            flats.append(f)
            caches.append(cache)
        V = np.stack(flats)  # (n_cycles, D*d)

        idx = np.array([[i - L + 1 + t for i in window_ends] for t in range(L)])
        seq = np.ascontiguousarray(V[idx])  # (L, n_windows, D*d)
        h_all, trl_cache = kernels.lstm_forward(
            seq, self.params["trl.wx"], self.params["trl.wh"], self.params["trl.b"]
        )
        pred = nn.linear_forward(h_all[-1], self.params["head.w"], self.params["head.b"])[:, 0]
        return pred, (caches, idx, h_all, trl_cache)

    def backward_windows(self, dpred: np.ndarray, cache):
        caches, idx, h_all, trl_cache = cache
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        da, grads["head.w"], grads["head.b"] = nn.linear_backward(
            dpred[:, None], h_all[-1], self.params["head.w"]
        )
        dh_all = np.zeros_like(h_all)
        dh_all[-1] = da
        dseq, grads["trl.wx"], grads["trl.wh"], grads["trl.b"] = kernels.lstm_backward(
            dh_all, trl_cache
        )
        dV = np.zeros((len(caches), dseq.shape[2]))
        L, n_windows = idx.shape
        for t in range(L):
            np.add.at(dV, idx[t], dseq[t])
        for ci, cyc_cache in enumerate(caches):
            if not np.any(dV[ci]):
                continue
            enc_grads = self.encode_backward(dV[ci], cyc_cache)
            for k, g in enc_grads.items():
                grads[k] += g
        return grads

    def predict_window(self, s_d_window) -> float:
        """Capacity estimate for a list of exactly L discrepancy matrices."""
        if len(s_d_window) != self.spec.window:
            raise ValidationError(
                f"expected a window of {self.spec.window} cycles, got {len(s_d_window)}"
            )
        pred, _ = self.forward_windows(list(s_d_window), [self.spec.window - 1])
        return float(pred[0])
