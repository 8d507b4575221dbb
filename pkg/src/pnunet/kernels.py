"""Jit-compiled loop kernels for the convolution hot path.

Each output element is written by exactly one thread, so results are
bit-reproducible for any thread count. Kernels specialize lazily per
dtype (float32 for training, float64 for gradient checks). The numpy
fallback in ops.py computes the same quantities with tap-wise matrix
products; the selection lives in ops.active_backend().
"""

import numpy as np

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is an install-time dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        return wrap

    prange = range


@njit(parallel=True, fastmath=True, cache=True)
def conv_valid_forward(xp, w, y):
    """y[b,i,j,co] = sum_{u,v,ci} xp[b,i+u,j+v,ci] * w[u,v,ci,co]."""
    B, H, W, Co = y.shape
    kh, kw, Ci, _ = w.shape
    for bi in prange(B * H):
        b = bi // H
        i = bi % H
        for j in range(W):
            for co in range(Co):
                y[b, i, j, co] = 0.0
            for u in range(kh):
                for v in range(kw):
                    for ci in range(Ci):
                        s = xp[b, i + u, j + v, ci]
                        for co in range(Co):
                            y[b, i, j, co] += s * w[u, v, ci, co]


@njit(parallel=True, fastmath=True, cache=True)
def conv_valid_backward_dx(dy, w, dxp):
    """Gradient w.r.t. the padded input, gather form.

    dxp[b,p,q,ci] = sum over taps (u,v) with p-u in [0,H) and q-v in [0,W)
    of dy[b,p-u,q-v,co] * w[u,v,ci,co].
    """
    B, H, W, Co = dy.shape
    kh, kw, Ci, _ = w.shape
    Hp = dxp.shape[1]
    Wp = dxp.shape[2]
    zero = np.zeros(1, dy.dtype)
    for bp in prange(B * Hp):
        b = bp // Hp
        p = bp % Hp
        u0 = p - H + 1
        if u0 < 0:
            u0 = 0
        u1 = kh - 1
        if p < u1:
            u1 = p
        for q in range(Wp):
            v0 = q - W + 1
            if v0 < 0:
                v0 = 0
            v1 = kw - 1
            if q < v1:
                v1 = q
            for ci in range(Ci):
                acc = zero[0]
                for u in range(u0, u1 + 1):
                    i = p - u
                    for v in range(v0, v1 + 1):
                        j = q - v
                        for co in range(Co):
                            acc += dy[b, i, j, co] * w[u, v, ci, co]
                dxp[b, p, q, ci] = acc


@njit(parallel=True, fastmath=True, cache=True)
def conv_valid_backward_dw(xp, dy, dw):
    """dw[u,v,ci,co] = sum_{b,i,j} xp[b,i+u,j+v,ci] * dy[b,i,j,co]."""
    kh, kw, Ci, Co = dw.shape
    B, H, W, _ = dy.shape
    for t in prange(kh * kw * Ci):
        u = t // (kw * Ci)
        rem = t % (kw * Ci)
        v = rem // Ci
        ci = rem % Ci
        for co in range(Co):
            dw[u, v, ci, co] = 0.0
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    s = xp[b, i + u, j + v, ci]
                    for co in range(Co):
                        dw[u, v, ci, co] += s * dy[b, i, j, co]
