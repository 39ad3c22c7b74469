"""LSTM sequence kernels with a compiled fast path.

The Cython extension accelerates the sequential recurrence (the training
hot loop); the NumPy implementation is the reference and the fallback.
Selection happens once at import: the extension is used when importable,
unless BATTSOH_KERNELS forces "numpy" or "cython".
"""

from __future__ import annotations

import os

import numpy as np

from . import lstm_numpy

_cy = None
_requested = os.environ.get("BATTSOH_KERNELS", "auto").strip().lower()
if _requested in ("auto", "cython"):
    try:
        from . import _lstm_cy as _cy
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "BATTSOH_KERNELS=cython but the compiled kernel is not built; "
                "run `python setup.py build_ext --inplace`"
            )
elif _requested not in ("numpy", "python"):
    raise ValueError(f"BATTSOH_KERNELS must be auto|cython|numpy, got {_requested!r}")

BACKEND = "cython" if _cy is not None else "numpy"


def lstm_forward(x, wx, wh, b):
    """Dispatching wrapper; see lstm_numpy.lstm_forward for the contract."""
    if _cy is None:
        return lstm_numpy.lstm_forward(x, wx, wh, b)
    x = np.ascontiguousarray(x)
    T, B, F = x.shape
    H = wh.shape[0]
    pre_x = np.ascontiguousarray((x.reshape(T * B, F) @ wx).reshape(T, B, 4 * H))
    gates = np.empty((T, B, 4 * H))
    cells = np.empty((T, B, H))
    h_all = np.empty((T, B, H))
    _cy.recurrence_forward(pre_x, np.ascontiguousarray(wh), np.ascontiguousarray(b), gates, cells, h_all)
    return h_all, (x, wx, wh, gates, cells, h_all)


def lstm_backward(dh_all, cache):
    """Dispatching wrapper; see lstm_numpy.lstm_backward for the contract."""
    if _cy is None:
        return lstm_numpy.lstm_backward(dh_all, cache)
    x, wx, wh, gates, cells, h_all = cache
    T, B, F = x.shape
    H = wh.shape[0]
    dz_all = np.empty((T, B, 4 * H))
    _cy.recurrence_backward(
        gates, cells, np.ascontiguousarray(wh), np.ascontiguousarray(dh_all), dz_all
    )
    flat_dz = dz_all.reshape(T * B, 4 * H)
    dx = (flat_dz @ wx.T).reshape(T, B, F)
    dwx = x.reshape(T * B, F).T @ flat_dz
    db = flat_dz.sum(axis=0)
    if T > 1:
        dwh = h_all[:-1].reshape((T - 1) * B, H).T @ dz_all[1:].reshape((T - 1) * B, 4 * H)
    else:
        dwh = np.zeros_like(wh)
    return dx, dwx, dwh, db
