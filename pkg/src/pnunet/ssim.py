"""Structural similarity with Gaussian weighting, plus exact gradients.

The map follows the standard windowed form: local means, variances and
covariance are taken under a normalized Gaussian window (reflect padded,
output size equals input size), combined per channel as

    S = ((2 mu_a mu_b + C1) (2 cov + C2)) / ((mu_a^2 + mu_b^2 + C1) (var_a + var_b + C2))

and averaged over channels. The training loss is 1 - mean(S), which
lives in [0, 2] and decreases as b approaches a. Gradients are derived
by hand through the windowing operator; the padding adjoint in ops.py
makes them match finite differences to roundoff.
"""

from dataclasses import dataclass

import numpy as np

from . import ops

__all__ = ["SsimConfig", "ssim_map", "ssim_loss", "ssim_loss_grad"]


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11  # odd Gaussian window width
    sigma: float = 1.5  # window standard deviation, pixels
    k1: float = 0.01  # luminance stabilizer scale
    k2: float = 0.03  # contrast stabilizer scale
    dynamic_range: float = 1.0  # value span L of the inputs

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.dynamic_range <= 0:
            raise ValueError(f"dynamic_range must be positive, got {self.dynamic_range}")


DEFAULT = SsimConfig()


def _check_pair(a: np.ndarray, b: np.ndarray, cfg: SsimConfig) -> None:
    if a.shape != b.shape:
        raise ValueError(f"operand shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 3:
        raise ValueError(f"expected (..., H, W, C) arrays, got shape {a.shape}")
    h, w = a.shape[-3], a.shape[-2]
    if cfg.window_size > min(h, w):
        raise ValueError(
            f"window_size {cfg.window_size} does not fit image of {h}x{w}"
        )


def _terms(a, b, cfg):
    g = ops.gaussian_kernel1d(cfg.sigma, cfg.window_size // 2, dtype=a.dtype)
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    mu_a = ops.filter_separable(a, g)
    mu_b = ops.filter_separable(b, g)
    fa2 = ops.filter_separable(a * a, g)
    fb2 = ops.filter_separable(b * b, g)
    fab = ops.filter_separable(a * b, g)
    n1 = 2.0 * mu_a * mu_b + c1
    d1 = mu_a * mu_a + mu_b * mu_b + c1
    n2 = 2.0 * (fab - mu_a * mu_b) + c2
    d2 = (fa2 - mu_a * mu_a) + (fb2 - mu_b * mu_b) + c2
    return g, mu_a, mu_b, n1, d1, n2, d2


def ssim_map(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = DEFAULT) -> np.ndarray:
    """Channel-averaged similarity map, shape (H, W, 1), values in [-1, 1]."""
    _check_pair(a, b, cfg)
    _, _, _, n1, d1, n2, d2 = _terms(a, b, cfg)
    # rounding can push the ratio past 1 by ~1e-7 in float32; trim it so
    # the advertised value range holds exactly
    s = np.clip((n1 * n2) / (d1 * d2), -1.0, 1.0)
    return s.mean(axis=-1, keepdims=True)


def ssim_loss(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = DEFAULT) -> float:
    """1 - mean similarity; 0 iff a == b, at most 2."""
    _check_pair(a, b, cfg)
    _, _, _, n1, d1, n2, d2 = _terms(a, b, cfg)
    s = np.clip((n1 * n2) / (d1 * d2), -1.0, 1.0)
    return float(1.0 - s.mean())


def ssim_loss_grad(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = DEFAULT):
    """Loss plus analytic gradients with respect to both operands.

    Returns (loss, grad_a, grad_b) for single images. Batched input
    (B, H, W, C) returns per-image losses of shape (B,) and gradients of
    the summed loss (each image's gradient is independent of the rest).
    """
    _check_pair(a, b, cfg)
    g, mu_a, mu_b, n1, d1, n2, d2 = _terms(a, b, cfg)
    s = (n1 * n2) / (d1 * d2)
    h, w, c = a.shape[-3], a.shape[-2], a.shape[-1]
    # the clamp only ever trims rounding excursions past the true range,
    # so the unclamped gradients below stay consistent with the loss
    loss = 1.0 - np.clip(s, -1.0, 1.0).mean(axis=(-3, -2, -1))

    # d loss / dS is uniform over the per-image mean
    q = -1.0 / float(h * w * c)
    inv_dd = q / (d1 * d2)
    # dS/d(mu), dS/d(filtered square), dS/d(filtered cross), scaled by q
    g_mu_b = 2.0 * mu_a * (n2 - n1) * inv_dd - 2.0 * mu_b * q * s * (1.0 / d1 - 1.0 / d2)
    g_mu_a = 2.0 * mu_b * (n2 - n1) * inv_dd - 2.0 * mu_a * q * s * (1.0 / d1 - 1.0 / d2)
    g_sq = -q * s / d2  # same for fa2 and fb2
    g_cross = 2.0 * n1 * inv_dd

    adj = ops.filter_separable_adjoint
    t_sq = adj(g_sq, g)
    t_cross = adj(g_cross, g)
    grad_b = adj(g_mu_b, g) + 2.0 * b * t_sq + a * t_cross
    grad_a = adj(g_mu_a, g) + 2.0 * a * t_sq + b * t_cross

    if a.ndim == 3:
        return float(loss), grad_a, grad_b
    return loss, grad_a, grad_b
