# Compiled LSTM recurrence: the sequential per-timestep work that NumPy
# cannot batch. The surrounding projections (x @ wx, weight-gradient
# reductions) stay in NumPy/BLAS; only the t-loop lives here.
#
# Semantics must match lstm_numpy exactly: gate order [i, f, g, o],
# c_t = f*c + i*g, h_t = o*tanh(c_t).

import numpy as np

from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm


cdef inline double sigmoid(double x) noexcept nogil:
    return 1.0 / (1.0 + exp(-x))


cdef void gemm_rowmajor(bint trans_a, bint trans_b, int m, int n, int k,
                        double alpha, double* a, int lda,
                        double* b, int ldb, double beta,
                        double* c, int ldc) noexcept nogil:
    # Row-major C(m,n) = alpha * op(A) op(B) + beta * C via the
    # column-major identity C^T = op(B)^T op(A)^T.
    cdef char fta = c'T' if trans_b else c'N'
    cdef char ftb = c'T' if trans_a else c'N'
    dgemm(&fta, &ftb, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


def recurrence_forward(double[:, :, ::1] pre_x, double[:, ::1] wh, double[::1] b,
                       double[:, :, ::1] gates, double[:, :, ::1] cells,
                       double[:, :, ::1] h_all):
    """Fill gates/cells/h_all given the precomputed input projection."""
    cdef Py_ssize_t T = pre_x.shape[0]
    cdef Py_ssize_t B = pre_x.shape[1]
    cdef Py_ssize_t H = wh.shape[0]
    cdef Py_ssize_t G = 4 * H
    cdef Py_ssize_t t, r, j
    cdef double i_g, f_g, g_g, o_g, c_new

    z_buf = np.empty((B, G))
    cdef double[:, ::1] z = z_buf
    cdef double* h_prev
    cdef double* c_prev

    with nogil:
        for t in range(T):
            for r in range(B):
                for j in range(G):
                    z[r, j] = pre_x[t, r, j] + b[j]
            if t > 0:
                gemm_rowmajor(0, 0, <int>B, <int>G, <int>H, 1.0,
                              &h_all[t - 1, 0, 0], <int>H,
                              &wh[0, 0], <int>G, 1.0, &z[0, 0], <int>G)
            for r in range(B):
                for j in range(H):
                    i_g = sigmoid(z[r, j])
                    f_g = sigmoid(z[r, H + j])
                    g_g = tanh(z[r, 2 * H + j])
                    o_g = sigmoid(z[r, 3 * H + j])
                    c_new = i_g * g_g
                    if t > 0:
                        c_new = f_g * cells[t - 1, r, j] + c_new
                    gates[t, r, j] = i_g
                    gates[t, r, H + j] = f_g
                    gates[t, r, 2 * H + j] = g_g
                    gates[t, r, 3 * H + j] = o_g
                    cells[t, r, j] = c_new
                    h_all[t, r, j] = o_g * tanh(c_new)


def recurrence_backward(double[:, :, ::1] gates, double[:, :, ::1] cells,
                        double[:, ::1] wh, double[:, :, ::1] dh_all,
                        double[:, :, ::1] dz_all):
    """Fill dz_all by running the recurrence backwards."""
    cdef Py_ssize_t T = gates.shape[0]
    cdef Py_ssize_t B = gates.shape[1]
    cdef Py_ssize_t H = wh.shape[0]
    cdef Py_ssize_t G = 4 * H
    cdef Py_ssize_t t, r, j
    cdef double i_g, f_g, g_g, o_g, tc, c_prev, dht, dct, di, df, dg, do

    dh_buf = np.zeros((B, H))
    dc_buf = np.zeros((B, H))
    cdef double[:, ::1] dh = dh_buf
    cdef double[:, ::1] dc = dc_buf

    with nogil:
        for t in range(T - 1, -1, -1):
            for r in range(B):
                for j in range(H):
                    i_g = gates[t, r, j]
                    f_g = gates[t, r, H + j]
                    g_g = gates[t, r, 2 * H + j]
                    o_g = gates[t, r, 3 * H + j]
                    tc = tanh(cells[t, r, j])
                    c_prev = cells[t - 1, r, j] if t > 0 else 0.0

                    dht = dh[r, j] + dh_all[t, r, j]
                    do = dht * tc
                    dct = dc[r, j] + dht * o_g * (1.0 - tc * tc)
                    di = dct * g_g
                    df = dct * c_prev
                    dg = dct * i_g
                    dc[r, j] = dct * f_g

                    dz_all[t, r, j] = di * i_g * (1.0 - i_g)
                    dz_all[t, r, H + j] = df * f_g * (1.0 - f_g)
                    dz_all[t, r, 2 * H + j] = dg * (1.0 - g_g * g_g)
                    dz_all[t, r, 3 * H + j] = do * o_g * (1.0 - o_g)
            # dh = dz_t @ wh.T
            gemm_rowmajor(0, 1, <int>B, <int>H, <int>G, 1.0,
                          &dz_all[t, 0, 0], <int>G,
                          &wh[0, 0], <int>G, 0.0, &dh[0, 0], <int>H)
