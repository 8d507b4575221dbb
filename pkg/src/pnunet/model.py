"""Skip-connected convolutional reconstructor with hand-written backprop.

The network is a compact encoder-decoder: per level one 3x3 convolution
with leaky ReLU followed by 2x2 average pooling, a bottleneck
convolution, then per level nearest-neighbor upsampling, concatenation
with the matching encoder activation, and another convolution. A final
convolution with a sigmoid maps back to the input channel count, so the
output always lies in (0, 1).

Parameters are a plain ordered dict from "<layer>/kernel" and
"<layer>/bias" to arrays; kernels are (kh, kw, c_in, c_out) and the
layer sequence is fully recoverable from the names, so every function
here takes the dict alone. All convolutions use reflect padding, which
keeps reconstructions free of frame-shaped border artifacts.
"""

from dataclasses import dataclass

import numpy as np

from . import ops

__all__ = [
    "ReconstructorConfig",
    "init_reconstructor",
    "forward",
    "forward_cached",
    "backward",
]


@dataclass(frozen=True)
class ReconstructorConfig:
    levels: int = 3  # pooling stages; input dims must divide by 2**levels
    base_channels: int = 16  # width of the first encoder stage
    in_channels: int = 1
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 2:
            raise ValueError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")


LEAKY_SLOPE = 0.01


def _layer_specs(cfg: ReconstructorConfig):
    """Layer name plus (c_in, c_out) in application order."""
    c = cfg.base_channels
    specs = []
    for lv in range(cfg.levels):
        ci = cfg.in_channels if lv == 0 else c * 2 ** (lv - 1)
        specs.append((f"enc{lv}", ci, c * 2**lv))
    top = c * 2 ** (cfg.levels - 1)
    specs.append(("bottleneck", top, top))
    prev = top
    for lv in range(cfg.levels - 1, -1, -1):
        skip = c * 2**lv
        co = c * 2 ** (lv - 1) if lv >= 1 else c
        specs.append((f"dec{lv}", prev + skip, co))
        prev = co
    specs.append(("head", prev, cfg.in_channels))
    return specs


def init_reconstructor(cfg: ReconstructorConfig, dtype=np.float32) -> dict:
    """Fan-in scaled uniform kernels, zero biases, seeded and ordered."""
    rng = np.random.default_rng(cfg.seed)
    k = cfg.kernel_size
    params: dict[str, np.ndarray] = {}
    for name, ci, co in _layer_specs(cfg):
        bound = 1.0 / np.sqrt(k * k * ci)
        params[f"{name}/kernel"] = rng.uniform(-bound, bound, size=(k, k, ci, co)).astype(dtype)
        params[f"{name}/bias"] = np.zeros(co, dtype=dtype)
    return params


def _levels_of(params: dict) -> int:
    n = sum(1 for k in params if k.startswith("enc") and k.endswith("/kernel"))
    if n == 0 or "head/kernel" not in params or "bottleneck/kernel" not in params:
        raise ValueError("parameter dict does not describe a reconstructor")
    return n


def _check_input(params: dict, x: np.ndarray, levels: int) -> np.ndarray:
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (B, H, W, C), got shape {x.shape}")
    h, w, c = x.shape[1], x.shape[2], x.shape[3]
    want_c = params["enc0/kernel"].shape[2]
    if c != want_c:
        raise ValueError(f"input has {c} channels, model expects {want_c}")
    div = 2**levels
    if h % div or w % div:
        raise ValueError(f"input {h}x{w} not divisible by 2**levels = {div}")
    if min(h, w) < 2 * div:
        raise ValueError(f"input {h}x{w} too small for {levels} pooling stages")
    return x


def _conv(h, params, name, r):
    xp = ops.reflect_pad2d(h, r)
    z = ops.conv_valid(xp, params[f"{name}/kernel"]) + params[f"{name}/bias"]
    return xp, z


def forward_cached(params: dict, x: np.ndarray):
    """Batched forward pass keeping what backward() needs.

    Returns (y, cache); y has the batch axis even for single-image input.
    """
    levels = _levels_of(params)
    xb = _check_input(params, x, levels)
    dt = params["head/kernel"].dtype
    h = xb.astype(dt, copy=False)
    r = params["enc0/kernel"].shape[0] // 2

    enc_xp, enc_z, skips = [], [], []
    for lv in range(levels):
        xp, z = _conv(h, params, f"enc{lv}", r)
        a = ops.leaky_relu(z, LEAKY_SLOPE)
        enc_xp.append(xp)
        enc_z.append(z)
        skips.append(a)
        h = ops.avgpool2(a)

    bott_xp, bott_z = _conv(h, params, "bottleneck", r)
    h = ops.leaky_relu(bott_z, LEAKY_SLOPE)

    dec_xp, dec_z, dec_up_ch = {}, {}, {}
    for lv in range(levels - 1, -1, -1):
        up = ops.upsample2(h)
        cat = np.concatenate([up, skips[lv]], axis=-1)
        xp, z = _conv(cat, params, f"dec{lv}", r)
        h = ops.leaky_relu(z, LEAKY_SLOPE)
        dec_xp[lv] = xp
        dec_z[lv] = z
        dec_up_ch[lv] = up.shape[-1]

    head_xp, head_z = _conv(h, params, "head", r)
    y = ops.sigmoid(head_z)

    cache = {
        "levels": levels,
        "r": r,
        "enc_xp": enc_xp,
        "enc_z": enc_z,
        "bott_xp": bott_xp,
        "bott_z": bott_z,
        "dec_xp": dec_xp,
        "dec_z": dec_z,
        "dec_up_ch": dec_up_ch,
        "head_xp": head_xp,
        "y": y,
    }
    return y, cache


def forward(params: dict, x: np.ndarray) -> np.ndarray:
    """Reconstruction of x, same shape, values in (0, 1)."""
    y, _ = forward_cached(params, x)
    return y[0] if x.ndim == 3 else y


def _conv_backward(params, name, xp, dz, r, grads):
    k = params[f"{name}/kernel"]
    grads[f"{name}/kernel"] = ops.conv_valid_backward_dw(xp, dz, k.shape[0], k.shape[1])
    grads[f"{name}/bias"] = dz.sum(axis=(0, 1, 2))
    dxp = ops.conv_valid_backward_dx(dz, k, xp.shape[1], xp.shape[2])
    return ops.reflect_pad2d_adjoint(dxp, r)


def backward(params: dict, cache: dict, dy: np.ndarray) -> dict:
    """Parameter gradients for upstream gradient dy on forward_cached output."""
    levels, r = cache["levels"], cache["r"]
    grads: dict[str, np.ndarray] = {}

    dz = ops.sigmoid_backward(cache["y"], dy)
    dh = _conv_backward(params, "head", cache["head_xp"], dz, r, grads)

    dskip = [None] * levels
    for lv in range(levels):  # dec0 was applied last, walk back up
        dz = ops.leaky_relu_backward(cache["dec_z"][lv], dh, LEAKY_SLOPE)
        dcat = _conv_backward(params, f"dec{lv}", cache["dec_xp"][lv], dz, r, grads)
        cu = cache["dec_up_ch"][lv]
        dskip[lv] = dcat[..., cu:]
        dh = ops.upsample2_backward(dcat[..., :cu])

    dz = ops.leaky_relu_backward(cache["bott_z"], dh, LEAKY_SLOPE)
    dpool = _conv_backward(params, "bottleneck", cache["bott_xp"], dz, r, grads)

    da = ops.avgpool2_backward(dpool) + dskip[levels - 1]
    for lv in range(levels - 1, -1, -1):
        dz = ops.leaky_relu_backward(cache["enc_z"][lv], da, LEAKY_SLOPE)
        dx = _conv_backward(params, f"enc{lv}", cache["enc_xp"][lv], dz, r, grads)
        if lv > 0:
            da = ops.avgpool2_backward(dx) + dskip[lv - 1]
    return grads
