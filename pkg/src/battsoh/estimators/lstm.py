"""Within-cycle LSTM capacity regressor.

One cycle's discrepancy components form a sequence of K' feature vectors
(dimension J - S); the stacked LSTM compresses the sequence into its final
hidden state, and a fully connected head (ReLU hidden layers, linear scalar
output) emits the capacity estimate.
"""

from __future__ import annotations

import numpy as np

from .. import _kernels as kernels
from ..errors import ValidationError
from . import nn


class LstmRegressor:
    def __init__(self, input_dim: int, hidden_sizes=(30,), fc_sizes=(), seed: int = 0):
        if input_dim < 1 or any(h < 1 for h in hidden_sizes):
            raise ValidationError("input_dim and hidden sizes must be positive")
        self.input_dim = int(input_dim)
        self.hidden_sizes = [int(h) for h in hidden_sizes]
        self.fc_sizes = [int(f) for f in fc_sizes]
        self.seed = int(seed)
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        fan = self.input_dim
        for l, h in enumerate(self.hidden_sizes):
            self.params[f"lstm{l}.wx"] = nn.uniform_init(rng, (fan, 4 * h), fan)
            self.params[f"lstm{l}.wh"] = nn.uniform_init(rng, (h, 4 * h), h)
            self.params[f"lstm{l}.b"] = nn.uniform_init(rng, (4 * h,), h)
            fan = h
        for l, f in enumerate(self.fc_sizes):
            self.params[f"fc{l}.w"] = nn.uniform_init(rng, (fan, f), fan)
            self.params[f"fc{l}.b"] = nn.uniform_init(rng, (f,), fan)
            fan = f
        self.params["head.w"] = nn.uniform_init(rng, (fan, 1), fan)
        self.params["head.b"] = nn.uniform_init(rng, (1,), fan)

    def forward(self, x: np.ndarray):
        """x: (T, B, input_dim) -> predictions (B,), plus caches."""
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise ValidationError(
                f"expected input (T, B, {self.input_dim}), got shape {tuple(x.shape)}"
            )
        lstm_caches = []
        h = x
        for l in range(len(self.hidden_sizes)):
            h, cache = kernels.lstm_forward(
                h, self.params[f"lstm{l}.wx"], self.params[f"lstm{l}.wh"], self.params[f"lstm{l}.b"]
            )
            lstm_caches.append(cache)
        a = h[-1]  # (B, H_last)
        fc_caches = []
        for l in range(len(self.fc_sizes)):
            z = nn.linear_forward(a, self.params[f"fc{l}.w"], self.params[f"fc{l}.b"])
            a_next = nn.relu(z)
            fc_caches.append((a, z))
            a = a_next
        pred = nn.linear_forward(a, self.params["head.w"], self.params["head.b"])[:, 0]
        return pred, (x, lstm_caches, fc_caches, a)

    def backward(self, dpred: np.ndarray, caches):
        x, lstm_caches, fc_caches, a_last = caches
        grads = {}
        da, grads["head.w"], grads["head.b"] = nn.linear_backward(
            dpred[:, None], a_last, self.params["head.w"]
        )
        for l in range(len(self.fc_sizes) - 1, -1, -1):
            a_in, z = fc_caches[l]
            da = da * (z > 0.0)
            da, grads[f"fc{l}.w"], grads[f"fc{l}.b"] = nn.linear_backward(
                da, a_in, self.params[f"fc{l}.w"]
            )
        T, B, _ = x.shape
        dh_all = np.zeros((T, B, self.hidden_sizes[-1]))
        dh_all[-1] = da
        for l in range(len(self.hidden_sizes) - 1, -1, -1):
            dh_all, grads[f"lstm{l}.wx"], grads[f"lstm{l}.wh"], grads[f"lstm{l}.b"] = (
                kernels.lstm_backward(dh_all, lstm_caches[l])
            )
        return grads

    def predict_cycle(self, s_d: np.ndarray) -> float:
        """Capacity estimate for one (J - S) x K' discrepancy matrix."""
        x = np.ascontiguousarray(s_d.T[:, None, :])
        pred, _ = self.forward(x)
        return float(pred[0])


def stack_cycles(s_d_list) -> np.ndarray:
    """Batch per-cycle discrepancy matrices into one (K', n_cycles, J-S) array."""
    return np.ascontiguousarray(np.stack([m.T for m in s_d_list], axis=1))
