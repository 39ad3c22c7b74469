"""Reference NumPy implementation of the LSTM sequence kernels.

These define the semantics; the compiled extension must match them closely
(same operation order, same gate layout). Gate order in the fused weight
matrices is [input, forget, candidate, output].
"""

from __future__ import annotations

import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_forward(x, wx, wh, b):
    """Run a single LSTM layer over a full sequence.

    Args:
        x: (T, B, F) inputs.
        wx: (F, 4H) input weights, gate blocks [i, f, g, o].
        wh: (H, 4H) recurrent weights.
        b: (4H,) bias.

    Returns:
        h_all: (T, B, H) hidden states, and a cache for the backward pass.
    """
    T, B, F = x.shape
    H = wh.shape[0]
    gates = np.empty((T, B, 4 * H))
    cells = np.empty((T, B, H))
    h_all = np.empty((T, B, H))

    pre_x = x.reshape(T * B, F) @ wx
    pre_x = pre_x.reshape(T, B, 4 * H)

    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = pre_x[t] + h @ wh + b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sigmoid(z[:, 3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[t, :, :H] = i
        gates[t, :, H : 2 * H] = f
        gates[t, :, 2 * H : 3 * H] = g
        gates[t, :, 3 * H :] = o
        cells[t] = c
        h_all[t] = h

    cache = (x, wx, wh, gates, cells, h_all)
    return h_all, cache


def lstm_backward(dh_all, cache):
    """Backpropagate through the full sequence.

    Args:
        dh_all: (T, B, H) upstream gradient on every hidden state.
        cache: as returned by lstm_forward.

    Returns:
        dx: (T, B, F), dwx: (F, 4H), dwh: (H, 4H), db: (4H,).
    """
    x, wx, wh, gates, cells, h_all = cache
    T, B, F = x.shape
    H = wh.shape[0]

    dz_all = np.empty((T, B, 4 * H))
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dh + dh_all[t]
        i = gates[t, :, :H]
        f = gates[t, :, H : 2 * H]
        g = gates[t, :, 2 * H : 3 * H]
        o = gates[t, :, 3 * H :]
        c = cells[t]
        c_prev = cells[t - 1] if t > 0 else np.zeros((B, H))
        tc = np.tanh(c)

        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dc = dc * f

        dz = dz_all[t]
        dz[:, :H] = di * i * (1.0 - i)
        dz[:, H : 2 * H] = df * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dg * (1.0 - g * g)
        dz[:, 3 * H :] = do * o * (1.0 - o)
        dh = dz @ wh.T

    flat_dz = dz_all.reshape(T * B, 4 * H)
    dx = (flat_dz @ wx.T).reshape(T, B, F)
    dwx = x.reshape(T * B, F).T @ flat_dz
    db = flat_dz.sum(axis=0)
    if T > 1:
        dwh = h_all[:-1].reshape((T - 1) * B, H).T @ dz_all[1:].reshape((T - 1) * B, 4 * H)
    else:
        dwh = np.zeros_like(wh)
    return dx, dwx, dwh, db
