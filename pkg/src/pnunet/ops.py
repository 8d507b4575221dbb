"""Array primitives shared by the reconstructor, the loss, and the detector.

Convolutions run on one of two interchangeable backends:

* ``numba``: loop kernels from kernels.py, jit-compiled, the default
  whenever numba imports cleanly.
* ``numpy``: tap-wise matrix products, no compilation step.

The ``PNUNET_BACKEND`` environment variable picks the backend at import
time; ``set_backend``/``use_backend`` override it programmatically.
Both paths produce the same values up to float summation order.

All image tensors are channels-last: (H, W, C) for single images and
(B, H, W, C) for batches. Padding everywhere is reflect padding, and
every padded operation has an exact adjoint so analytic gradients match
finite differences to roundoff.
"""

import os
from contextlib import contextmanager

import numpy as np

from . import kernels

BACKENDS = ("numba", "numpy")

_env = os.environ.get("PNUNET_BACKEND", "").strip().lower()
if _env and _env not in BACKENDS:
    raise RuntimeError(
        f"PNUNET_BACKEND={_env!r} not understood, expected one of {BACKENDS}"
    )
if _env == "numba" and not kernels.HAS_NUMBA:
    raise RuntimeError("PNUNET_BACKEND=numba but numba is not importable")

_active = _env or ("numba" if kernels.HAS_NUMBA else "numpy")


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}, expected one of {BACKENDS}")
    if name == "numba" and not kernels.HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _active = name


@contextmanager
def use_backend(name: str):
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


# ====================== reflect padding and its adjoint ======================


def reflect_pad2d(x: np.ndarray, r: int) -> np.ndarray:
    """Pad the two spatial axes of (..., H, W, C) by r, mirror style.

    Mirror padding repeats no edge pixel: pad of [a b c d] by 2 gives
    [c b | a b c d | c b]. Requires r <= H-1 and r <= W-1.
    """
    if r == 0:
        return x
    width = [(0, 0)] * x.ndim
    width[-3] = (r, r)
    width[-2] = (r, r)
    return np.pad(x, width, mode="reflect")


def _fold_axis(dxp: np.ndarray, r: int, axis: int) -> np.ndarray:
    """Adjoint of 1D reflect padding along one axis: crop plus border fold."""
    v = np.moveaxis(dxp, axis, 0)
    return np.moveaxis(_fold_axis_first(v, r), 0, axis)


def reflect_pad2d_adjoint(dxp: np.ndarray, r: int) -> np.ndarray:
    """Exact adjoint of reflect_pad2d (verified by dot-product tests)."""
    if r == 0:
        return dxp
    return _fold_axis(_fold_axis(dxp, r, dxp.ndim - 3), r, dxp.ndim - 2)


# ===================== separable windowed correlation ========================


def filter_separable(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Correlate (..., H, W, C) with outer(g, g), reflect padded, same size."""
    g = g.astype(x.dtype, copy=False)
    r = g.shape[0] // 2
    for axis in (x.ndim - 3, x.ndim - 2):
        width = [(0, 0)] * x.ndim
        width[axis] = (r, r)
        xp = np.pad(x, width, mode="reflect")
        vp = np.moveaxis(xp, axis, 0)
        n = vp.shape[0] - 2 * r
        acc = g[0] * vp[0:n]
        for k in range(1, g.shape[0]):
            acc += g[k] * vp[k : k + n]
        x = np.moveaxis(acc, 0, axis)
    return x


def filter_separable_adjoint(dy: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Adjoint of filter_separable under the same kernel g."""
    g = g.astype(dy.dtype, copy=False)
    r = g.shape[0] // 2
    for axis in (dy.ndim - 2, dy.ndim - 3):
        v = np.moveaxis(dy, axis, 0)
        n = v.shape[0]
        shape = (n + 2 * r,) + v.shape[1:]
        dxp = np.zeros(shape, dtype=dy.dtype)
        for k in range(g.shape[0]):
            dxp[k : k + n] += g[k] * v
        dy = np.moveaxis(_fold_axis_first(dxp, r), 0, axis)
    return dy


def _fold_axis_first(v: np.ndarray, r: int) -> np.ndarray:
    n = v.shape[0] - 2 * r
    core = v[r : r + n].copy()
    if r > 0:
        core[1 : r + 1] += v[:r][::-1]
        core[n - 1 - r : n - 1] += v[n + r :][::-1]
    return core


def gaussian_kernel1d(sigma: float, radius: int, dtype=np.float64) -> np.ndarray:
    """Normalized 1D Gaussian taps on [-radius, radius]."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    return g.astype(dtype)


# ============================== convolution ==================================


def conv_valid(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid correlation of padded (B,Hp,Wp,Ci) with (kh,kw,Ci,Co)."""
    kh, kw, Ci, Co = w.shape
    B, Hp, Wp, _ = xp.shape
    H, W = Hp - kh + 1, Wp - kw + 1
    if _active == "numba":
        xp = np.ascontiguousarray(xp)
        w = np.ascontiguousarray(w)
        y = np.empty((B, H, W, Co), dtype=xp.dtype)
        kernels.conv_valid_forward(xp, w, y)
        return y
    y = np.zeros((B * H * W, Co), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            win = xp[:, u : u + H, v : v + W, :].reshape(-1, Ci)
            y += win @ w[u, v]
    return y.reshape(B, H, W, Co)


def conv_valid_backward_dx(dy: np.ndarray, w: np.ndarray, hp: int, wp: int) -> np.ndarray:
    """Gradient w.r.t. the padded input of conv_valid."""
    kh, kw, Ci, Co = w.shape
    B, H, W, _ = dy.shape
    if _active == "numba":
        dy = np.ascontiguousarray(dy)
        w = np.ascontiguousarray(w)
        dxp = np.empty((B, hp, wp, Ci), dtype=dy.dtype)
        kernels.conv_valid_backward_dx(dy, w, dxp)
        return dxp
    dxp = np.zeros((B, hp, wp, Ci), dtype=dy.dtype)
    dy2 = dy.reshape(-1, Co)
    for u in range(kh):
        for v in range(kw):
            dxp[:, u : u + H, v : v + W, :] += (dy2 @ w[u, v].T).reshape(B, H, W, Ci)
    return dxp


def conv_valid_backward_dw(xp: np.ndarray, dy: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Gradient w.r.t. the kernel of conv_valid."""
    B, H, W, Co = dy.shape
    Ci = xp.shape[3]
    if _active == "numba":
        xp = np.ascontiguousarray(xp)
        dy = np.ascontiguousarray(dy)
        dw = np.empty((kh, kw, Ci, Co), dtype=dy.dtype)
        kernels.conv_valid_backward_dw(xp, dy, dw)
        return dw
    dw = np.empty((kh, kw, Ci, Co), dtype=dy.dtype)
    dy2 = dy.reshape(-1, Co)
    for u in range(kh):
        for v in range(kw):
            win = xp[:, u : u + H, v : v + W, :].reshape(-1, Ci)
            dw[u, v] = win.T @ dy2
    return dw


# ===================== pooling, upsampling, activations ======================


def avgpool2(x: np.ndarray) -> np.ndarray:
    B, H, W, C = x.shape
    return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def avgpool2_backward(dy: np.ndarray) -> np.ndarray:
    up = np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2)
    return up * np.asarray(0.25, dtype=dy.dtype)


def upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    B, H2, W2, C = dy.shape
    return dy.reshape(B, H2 // 2, 2, W2 // 2, 2, C).sum(axis=(2, 4))


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x > 0, x, np.asarray(slope, dtype=x.dtype) * x)


def leaky_relu_backward(x: np.ndarray, dy: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x > 0, dy, np.asarray(slope, dtype=dy.dtype) * dy)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # clip keeps exp() in range; the function saturates far earlier anyway
    z = np.clip(x, -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-z))


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)
