# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sequential kernels. Same contract as ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

NAME = "cython"


cdef inline void _mm(bint ta, bint tb, int M, int N, int K,
                     double* A, int lda, double* B, int ldb,
                     double beta, double* C, int ldc) noexcept nogil:
    # row-major C = op(A) op(B) + beta C via column-major dgemm on the transposes
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef double one = 1.0
    dgemm(&cb, &ca, &N, &M, &K, &one, B, &ldb, A, &lda, &beta, C, &ldc)


# Transcendentals go through numpy's SIMD tanh, one call per time step on a
# contiguous block; scalar libm tanh is several times slower at batch sizes
# used in training.
cdef object _tanh = np.tanh


cdef inline void _halve_sigmoid_lanes(double* g, int B, int H) noexcept nogil:
    # sigmoid(x) = (tanh(x / 2) + 1) / 2 on the input, forget and output lanes
    cdef int b, k
    cdef double* row
    for b in range(B):
        row = g + b * 4 * H
        for k in range(2 * H):
            row[k] = 0.5 * row[k]
        for k in range(3 * H, 4 * H):
            row[k] = 0.5 * row[k]


cdef inline void _finish_sigmoid_lanes(double* g, int B, int H) noexcept nogil:
    cdef int b, k
    cdef double* row
    for b in range(B):
        row = g + b * 4 * H
        for k in range(2 * H):
            row[k] = 0.5 * (row[k] + 1.0)
        for k in range(3 * H, 4 * H):
            row[k] = 0.5 * (row[k] + 1.0)


def lstm_forward(double[:, :, ::1] xp, double[:, ::1] Wh, bint reverse, mask):
    cdef int N = xp.shape[0], B = xp.shape[1], G = xp.shape[2]
    cdef int H = G // 4
    h_arr = np.zeros((N, B, H))
    c_arr = np.zeros((N, B, H))
    tc_arr = np.zeros((N, B, H))
    gates_arr = np.zeros((N, B, G))
    cdef double[:, :, ::1] h = h_arr
    cdef double[:, :, ::1] c = c_arr
    cdef double[:, :, ::1] tc = tc_arr
    cdef double[:, :, ::1] gates = gates_arr
    cdef double[:, ::1] m
    cdef bint has_mask = mask is not None
    if has_mask:
        m = np.ascontiguousarray(mask, dtype=np.float64)
    cdef int step, t, tp, b, k
    cdef double ct, mt
    for step in range(N):
        t = N - 1 - step if reverse else step
        tp = t + 1 if reverse else t - 1
        with nogil:
            for b in range(B):
                for k in range(G):
                    gates[t, b, k] = xp[t, b, k]
            if step > 0:
                _mm(False, False, B, G, H, &h[tp, 0, 0], H, &Wh[0, 0], G,
                    1.0, &gates[t, 0, 0], G)
            _halve_sigmoid_lanes(&gates[t, 0, 0], B, H)
        _tanh(gates_arr[t], out=gates_arr[t])
        with nogil:
            _finish_sigmoid_lanes(&gates[t, 0, 0], B, H)
            for b in range(B):
                for k in range(H):
                    ct = gates[t, b, k] * gates[t, b, 2 * H + k]
                    if step > 0:
                        ct = ct + gates[t, b, H + k] * c[tp, b, k]
                    c[t, b, k] = ct
        _tanh(c_arr[t], out=tc_arr[t])
        with nogil:
            for b in range(B):
                mt = m[t, b] if has_mask else 1.0
                for k in range(H):
                    c[t, b, k] = c[t, b, k] * mt
                    h[t, b, k] = gates[t, b, 3 * H + k] * tc[t, b, k] * mt
    return h_arr, c_arr, gates_arr, tc_arr


def lstm_backward(double[:, :, ::1] dh, double[:, :, ::1] c,
                  double[:, :, ::1] gates, double[:, :, ::1] tc,
                  double[:, ::1] Wh, bint reverse, mask):
    cdef int N = gates.shape[0], B = gates.shape[1], G = gates.shape[2]
    cdef int H = G // 4
    da_arr = np.zeros((N, B, G))
    cdef double[:, :, ::1] da = da_arr
    dh_next_arr = np.zeros((B, H))
    dc_next_arr = np.zeros((B, H))
    cdef double[:, ::1] dh_next = dh_next_arr
    cdef double[:, ::1] dc_next = dc_next_arr
    cdef double[:, ::1] m
    cdef bint has_mask = mask is not None
    if has_mask:
        m = np.ascontiguousarray(mask, dtype=np.float64)
    cdef int step, t, tp, b, k
    cdef double dht, dct, i, f, gg, o, cp, mt
    with nogil:
        for step in range(N):
            t = step if reverse else N - 1 - step
            tp = t + 1 if reverse else t - 1
            for b in range(B):
                mt = m[t, b] if has_mask else 1.0
                for k in range(H):
                    i = gates[t, b, k]
                    f = gates[t, b, H + k]
                    gg = gates[t, b, 2 * H + k]
                    o = gates[t, b, 3 * H + k]
                    dht = (dh[t, b, k] + dh_next[b, k]) * mt
                    dct = dc_next[b, k] * mt + dht * o * (1.0 - tc[t, b, k] * tc[t, b, k])
                    cp = c[tp, b, k] if 0 <= tp < N else 0.0
                    da[t, b, k] = dct * gg * i * (1.0 - i)
                    da[t, b, H + k] = dct * cp * f * (1.0 - f)
                    da[t, b, 2 * H + k] = dct * i * (1.0 - gg * gg)
                    da[t, b, 3 * H + k] = dht * tc[t, b, k] * o * (1.0 - o)
                    dc_next[b, k] = dct * f
            # dh_next = da[t] @ Wh.T
            _mm(False, True, B, H, G, &da[t, 0, 0], G, &Wh[0, 0], G,
                0.0, &dh_next[0, 0], H)
    return da_arr


def posterior_forward(double[:, :, ::1] P, double[:, :, ::1] eps,
                      double[:, ::1] Wz, double[:, ::1] Wh, double[::1] bp,
                      double[:, ::1] Wuh, double[:, ::1] Wm, double[::1] bm,
                      double[:, ::1] Wv, double[::1] bv, double floor):
    cdef int N = P.shape[0], B = P.shape[1], U = P.shape[2]
    cdef int L = Wm.shape[1], H = Wh.shape[0]
    cdef int G = 4 * H
    z_arr = np.zeros((N, B, L))
    mu_arr = np.zeros((N, B, L))
    var_arr = np.zeros((N, B, L))
    hs_arr = np.zeros((N, B, H))
    cs_arr = np.zeros((N, B, H))
    tcs_arr = np.zeros((N, B, H))
    gates_arr = np.zeros((N, B, G))
    u_arr = np.zeros((N, B, U))
    live_arr = np.zeros((N, B, L))
    lv_arr = np.zeros((B, L))
    cdef double[:, :, ::1] z = z_arr
    cdef double[:, :, ::1] mu = mu_arr
    cdef double[:, :, ::1] var = var_arr
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] cs = cs_arr
    cdef double[:, :, ::1] tcs = tcs_arr
    cdef double[:, :, ::1] gates = gates_arr
    cdef double[:, :, ::1] u = u_arr
    cdef double[:, :, ::1] live = live_arr
    cdef double[:, ::1] lv = lv_arr
    cdef int n, b, k
    cdef double raw
    for n in range(N):
        if n > 0:
            with nogil:
                for b in range(B):
                    for k in range(G):
                        gates[n, b, k] = bp[k]
                _mm(False, False, B, G, L, &z[n - 1, 0, 0], L, &Wz[0, 0], G,
                    1.0, &gates[n, 0, 0], G)
                _mm(False, False, B, G, H, &hs[n - 1, 0, 0], H, &Wh[0, 0], G,
                    1.0, &gates[n, 0, 0], G)
                _halve_sigmoid_lanes(&gates[n, 0, 0], B, H)
            _tanh(gates_arr[n], out=gates_arr[n])
            with nogil:
                _finish_sigmoid_lanes(&gates[n, 0, 0], B, H)
                for b in range(B):
                    for k in range(H):
                        cs[n, b, k] = (gates[n, b, H + k] * cs[n - 1, b, k]
                                       + gates[n, b, k] * gates[n, b, 2 * H + k])
            _tanh(cs_arr[n], out=tcs_arr[n])
            with nogil:
                for b in range(B):
                    for k in range(H):
                        hs[n, b, k] = gates[n, b, 3 * H + k] * tcs[n, b, k]
        with nogil:
            for b in range(B):
                for k in range(U):
                    u[n, b, k] = P[n, b, k]
            if n > 0:
                _mm(False, False, B, U, H, &hs[n, 0, 0], H, &Wuh[0, 0], U,
                    1.0, &u[n, 0, 0], U)
        _tanh(u_arr[n], out=u_arr[n])
        with nogil:
            for b in range(B):
                for k in range(L):
                    mu[n, b, k] = bm[k]
                    lv[b, k] = bv[k]
            _mm(False, False, B, L, U, &u[n, 0, 0], U, &Wm[0, 0], L,
                1.0, &mu[n, 0, 0], L)
            _mm(False, False, B, L, U, &u[n, 0, 0], U, &Wv[0, 0], L,
                1.0, &lv[0, 0], L)
            for b in range(B):
                for k in range(L):
                    raw = exp(lv[b, k])
                    if raw > floor:
                        var[n, b, k] = raw
                        live[n, b, k] = 1.0
                    else:
                        var[n, b, k] = floor
                    z[n, b, k] = mu[n, b, k] + sqrt(var[n, b, k]) * eps[n, b, k]
    cache = (hs_arr, cs_arr, tcs_arr, gates_arr, u_arr, live_arr)
    return z_arr, mu_arr, var_arr, cache


def posterior_backward(double[:, :, ::1] dz, double[:, :, ::1] dmu,
                       double[:, :, ::1] dvar, double[:, :, ::1] z,
                       double[:, :, ::1] var, double[:, :, ::1] eps, cache,
                       double[:, ::1] Wz, double[:, ::1] Wh, double[:, ::1] Wuh,
                       double[:, ::1] Wm, double[:, ::1] Wv):
    cdef double[:, :, ::1] hs = cache[0]
    cdef double[:, :, ::1] cs = cache[1]
    cdef double[:, :, ::1] tcs = cache[2]
    cdef double[:, :, ::1] gates = cache[3]
    cdef double[:, :, ::1] u = cache[4]
    cdef double[:, :, ::1] live = cache[5]
    cdef int N = z.shape[0], B = z.shape[1], L = z.shape[2]
    cdef int H = Wh.shape[0], U = u.shape[2]
    cdef int G = 4 * H
    dpre_arr = np.zeros((N, B, U))
    dmu_arr = np.zeros((N, B, L))
    dlogv_arr = np.zeros((N, B, L))
    da_arr = np.zeros((N, B, G))
    dzc_arr = np.zeros((B, L))
    dhc_arr = np.zeros((B, H))
    dcc_arr = np.zeros((B, H))
    dh_arr = np.zeros((B, H))
    cdef double[:, :, ::1] dpre = dpre_arr
    cdef double[:, :, ::1] dmt = dmu_arr
    cdef double[:, :, ::1] dlogv = dlogv_arr
    cdef double[:, :, ::1] da = da_arr
    cdef double[:, ::1] dz_carry = dzc_arr
    cdef double[:, ::1] dh_carry = dhc_arr
    cdef double[:, ::1] dc_carry = dcc_arr
    cdef double[:, ::1] dh = dh_arr
    cdef int n, b, k
    cdef double dzn, dv, sd, i, f, gg, o, dc, t2
    with nogil:
        for n in range(N - 1, -1, -1):
            for b in range(B):
                for k in range(L):
                    dzn = dz[n, b, k] + dz_carry[b, k]
                    dmt[n, b, k] = dmu[n, b, k] + dzn
                    sd = sqrt(var[n, b, k])
                    dv = dvar[n, b, k] + dzn * eps[n, b, k] * 0.5 / sd
                    dlogv[n, b, k] = dv * var[n, b, k] * live[n, b, k]
            # du = dmu_tot @ Wm.T + dlogv @ Wv.T, accumulated into dpre[n]
            _mm(False, True, B, U, L, &dmt[n, 0, 0], L, &Wm[0, 0], L,
                0.0, &dpre[n, 0, 0], U)
            _mm(False, True, B, U, L, &dlogv[n, 0, 0], L, &Wv[0, 0], L,
                1.0, &dpre[n, 0, 0], U)
            for b in range(B):
                for k in range(U):
                    dpre[n, b, k] = dpre[n, b, k] * (1.0 - u[n, b, k] * u[n, b, k])
                for k in range(H):
                    dh[b, k] = dh_carry[b, k]
            _mm(False, True, B, H, U, &dpre[n, 0, 0], U, &Wuh[0, 0], U,
                1.0, &dh[0, 0], H)
            if n == 0:
                break
            for b in range(B):
                for k in range(H):
                    i = gates[n, b, k]
                    f = gates[n, b, H + k]
                    gg = gates[n, b, 2 * H + k]
                    o = gates[n, b, 3 * H + k]
                    t2 = tcs[n, b, k]
                    dc = dc_carry[b, k] + dh[b, k] * o * (1.0 - t2 * t2)
                    da[n, b, k] = dc * gg * i * (1.0 - i)
                    da[n, b, H + k] = dc * cs[n - 1, b, k] * f * (1.0 - f)
                    da[n, b, 2 * H + k] = dc * i * (1.0 - gg * gg)
                    da[n, b, 3 * H + k] = dh[b, k] * t2 * o * (1.0 - o)
                    dc_carry[b, k] = dc * f
            _mm(False, True, B, L, G, &da[n, 0, 0], G, &Wz[0, 0], G,
                0.0, &dz_carry[0, 0], L)
            _mm(False, True, B, H, G, &da[n, 0, 0], G, &Wh[0, 0], G,
                0.0, &dh_carry[0, 0], H)
    return dpre_arr, dmu_arr, dlogv_arr, da_arr
