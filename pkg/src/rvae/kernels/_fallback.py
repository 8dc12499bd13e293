"""Pure-numpy versions of the sequential kernels.

These are the reference implementations; the compiled module in ``_core.pyx``
must agree with them to rounding error. All arrays are time-major float64,
C-contiguous. Gate order inside the ``4H`` axis is (input, forget, cell, output).
"""

import numpy as np

NAME = "python"


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_forward(xp, Wh, reverse, mask):
    """Run the LSTM recursion over pre-projected inputs.

    Parameters
    ----------
    xp : ndarray, shape (N, B, 4H)
        ``x_t @ W_x + b`` for every step.
    Wh : ndarray, shape (H, 4H)
    reverse : bool
        Process steps N-1 -> 0. Outputs stay aligned with the input order.
    mask : ndarray, shape (N, B) or None
        Zero entries reset the state after the step (padding frames).

    Returns
    -------
    h, c, gates, tc
        Hidden states (masked), cell states (masked), activated gates and
        ``tanh`` of the unmasked cell state.
    """
    N, B, G = xp.shape
    H = G // 4
    h = np.zeros((N, B, H))
    c = np.zeros((N, B, H))
    tc = np.zeros((N, B, H))
    gates = np.zeros((N, B, G))
    h_prev = np.zeros((B, H))
    c_prev = np.zeros((B, H))
    steps = range(N - 1, -1, -1) if reverse else range(N)
    for t in steps:
        a = xp[t] + h_prev @ Wh
        g = gates[t]
        g[:, :2 * H] = _sigmoid(a[:, :2 * H])
        g[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        g[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
        ct = g[:, H:2 * H] * c_prev + g[:, :H] * g[:, 2 * H:3 * H]
        tc[t] = np.tanh(ct)
        ht = g[:, 3 * H:] * tc[t]
        if mask is not None:
            m = mask[t][:, None]
            ct = ct * m
            ht = ht * m
        c[t] = ct
        h[t] = ht
        h_prev = ht
        c_prev = ct
    return h, c, gates, tc


def lstm_backward(dh, c, gates, tc, Wh, reverse, mask):
    """Backpropagate through :func:`lstm_forward`.

    Returns the gradient w.r.t. the pre-activations ``xp`` (N, B, 4H). The
    caller turns it into weight gradients with one large matrix product.
    """
    N, B, G = gates.shape
    H = G // 4
    da = np.zeros((N, B, G))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    steps = range(N) if reverse else range(N - 1, -1, -1)
    for t in steps:
        g = gates[t]
        i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        dht = dh[t] + dh_next
        dct = dc_next
        if mask is not None:
            m = mask[t][:, None]
            dht = dht * m
            dct = dct * m
        dct = dct + dht * o * (1.0 - tc[t] ** 2)
        tprev = t + 1 if reverse else t - 1
        if 0 <= tprev < N:
            c_prev = c[tprev]
        else:
            c_prev = np.zeros((B, H))
        dat = da[t]
        dat[:, :H] = dct * gg * i * (1.0 - i)
        dat[:, H:2 * H] = dct * c_prev * f * (1.0 - f)
        dat[:, 2 * H:3 * H] = dct * i * (1.0 - gg ** 2)
        dat[:, 3 * H:] = dht * tc[t] * o * (1.0 - o)
        dh_next = dat @ Wh.T
        dc_next = dct * f
    return da


def posterior_forward(P, eps, Wz, Wh, bp, Wuh, Wm, bm, Wv, bv, floor):
    """Recursive ancestral sampling of the structured posterior.

    At step n the prediction LSTM has consumed ``z_0 .. z_{n-1}`` (zero state
    at n = 0), the update block computes ``u = tanh(P[n] + h_n @ Wuh)``, and
    ``z_n = mu_n + sqrt(var_n) * eps[n]``.

    Returns
    -------
    z, mu, var, cache
    """
    N, B, U = P.shape
    L = Wm.shape[1]
    H = Wh.shape[0]
    G = 4 * H
    z = np.zeros((N, B, L))
    mu = np.zeros((N, B, L))
    var = np.zeros((N, B, L))
    hs = np.zeros((N, B, H))
    cs = np.zeros((N, B, H))
    tcs = np.zeros((N, B, H))
    gates = np.zeros((N, B, G))
    u = np.zeros((N, B, U))
    live = np.zeros((N, B, L))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for n in range(N):
        if n > 0:
            a = z[n - 1] @ Wz + h @ Wh + bp
            g = gates[n]
            g[:, :2 * H] = _sigmoid(a[:, :2 * H])
            g[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
            g[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
            c = g[:, H:2 * H] * c + g[:, :H] * g[:, 2 * H:3 * H]
            tcs[n] = np.tanh(c)
            h = g[:, 3 * H:] * tcs[n]
            hs[n] = h
            cs[n] = c
        un = np.tanh(P[n] + h @ Wuh)
        u[n] = un
        mu[n] = un @ Wm + bm
        raw = np.exp(un @ Wv + bv)
        above = raw > floor
        var[n] = np.where(above, raw, floor)
        live[n] = above
        z[n] = mu[n] + np.sqrt(var[n]) * eps[n]
    cache = (hs, cs, tcs, gates, u, live)
    return z, mu, var, cache


def posterior_backward(dz, dmu, dvar, z, var, eps, cache, Wz, Wh, Wuh, Wm, Wv):
    """Backpropagate through :func:`posterior_forward`.

    Returns per-step local gradients ``(dpre, dmu_tot, dlogv, da)``: the
    update-block pre-activation gradient (also the gradient w.r.t. ``P``),
    the total gradient on ``mu`` and on the log-variance head, and the LSTM
    pre-activation gradient (``da[0]`` is zero). Weight gradients are formed
    by the caller.
    """
    hs, cs, tcs, gates, u, live = cache
    N, B, L = z.shape
    H = Wh.shape[0]
    U = u.shape[2]
    dpre = np.zeros((N, B, U))
    dmu_tot = np.zeros((N, B, L))
    dlogv = np.zeros((N, B, L))
    da = np.zeros((N, B, 4 * H))
    dz_carry = np.zeros((B, L))
    dh_carry = np.zeros((B, H))
    dc_carry = np.zeros((B, H))
    sd = np.sqrt(var)
    for n in range(N - 1, -1, -1):
        dzn = dz[n] + dz_carry
        dm = dmu[n] + dzn
        dv = dvar[n] + dzn * eps[n] * 0.5 / sd[n]
        dl = dv * var[n] * live[n]
        dmu_tot[n] = dm
        dlogv[n] = dl
        du = dm @ Wm.T + dl @ Wv.T
        dp = du * (1.0 - u[n] ** 2)
        dpre[n] = dp
        dh = dh_carry + dp @ Wuh.T
        if n == 0:
            break
        g = gates[n]
        i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        dc = dc_carry + dh * o * (1.0 - tcs[n] ** 2)
        c_prev = cs[n - 1]
        dat = da[n]
        dat[:, :H] = dc * gg * i * (1.0 - i)
        dat[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dat[:, 2 * H:3 * H] = dc * i * (1.0 - gg ** 2)
        dat[:, 3 * H:] = dh * tcs[n] * o * (1.0 - o)
        dz_carry = dat @ Wz.T
        dh_carry = dat @ Wh.T
        dc_carry = dc * f
    return dpre, dmu_tot, dlogv, da
