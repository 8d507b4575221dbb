"""Noise synthesis and the residual masks that reshape it during training.

Base noise is i.i.d. uniform on [-amplitude, amplitude]. Two residual
maps steer where it lands as training progresses:

* positive_residual R_p, from known-defective samples: the mean of
  channel-averaged reconstruction residuals |x - f(x)|, rescaled so its
  peak is 1. Multiplying noise by R_p concentrates it where defects
  actually show up.
* negative_residual R_n, from normal samples: the mean residual, kept
  in [0, 1] without rescaling. The gate 1 - |z| * R_n attenuates noise
  where even normal data reconstructs imperfectly, so the model is not
  trained to flag those regions.

Fresh masks are neutral (R_p all ones, R_n all zeros) and composition
with neutral masks returns the base noise object unchanged, bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from . import model as model_mod

__all__ = [
    "NoiseMaskPair",
    "neutral_masks",
    "sample_base_noise",
    "update_residual_maps",
    "make_positive_noise",
    "make_negative_gate",
    "compose_applied_noise",
    "apply_noise",
]

NEUTRAL_PEAK_EPS = 1e-6  # below this peak residual R_p stays neutral


@dataclass(frozen=True)
class NoiseMaskPair:
    positive_residual: np.ndarray  # (H, W, 1), values in [0, 1], peak 1 when active
    negative_residual: np.ndarray  # (H, W, 1), values in [0, 1]
    updated_at_iteration: int = 0

    def __post_init__(self):
        rp, rn = self.positive_residual, self.negative_residual
        if rp.shape != rn.shape or rp.ndim != 3 or rp.shape[-1] != 1:
            raise ValueError(
                f"masks must share shape (H, W, 1), got {rp.shape} and {rn.shape}"
            )

    @property
    def is_neutral(self) -> bool:
        return bool(
            np.all(self.positive_residual == 1.0)
            and np.all(self.negative_residual == 0.0)
        )


def neutral_masks(height: int, width: int, dtype=np.float32) -> NoiseMaskPair:
    return NoiseMaskPair(
        positive_residual=np.ones((height, width, 1), dtype=dtype),
        negative_residual=np.zeros((height, width, 1), dtype=dtype),
        updated_at_iteration=0,
    )


def sample_base_noise(shape, amplitude: float, rng) -> np.ndarray:
    """Uniform noise on [-amplitude, amplitude]; rng is a seed or Generator."""
    if amplitude <= 0:
        raise ValueError(f"amplitude must be positive, got {amplitude}")
    gen = np.random.default_rng(rng)
    return gen.uniform(-amplitude, amplitude, size=shape).astype(np.float32)


def _mean_residual(params: dict, images, forward_fn) -> np.ndarray:
    batch = np.stack(images, axis=0)
    recon = forward_fn(params, batch)
    res = np.abs(batch - recon).mean(axis=-1, keepdims=True)  # channel average
    return res.mean(axis=0)


def update_residual_maps(
    params: dict,
    normal_images,
    anomalous_images,
    iteration: int,
    forward_fn=None,
) -> NoiseMaskPair:
    """Recompute both masks from current reconstructions, no noise injected.

    normal_images and anomalous_images are sequences of (H, W, C) arrays
    of one common shape; the anomalous set may be empty, in which case
    the positive mask stays neutral. forward_fn(params, batch) defaults
    to the standard reconstructor forward pass; pass a substitute to
    compute residuals against a different model.
    """
    if forward_fn is None:
        forward_fn = model_mod.forward
    normal_images = list(normal_images)
    anomalous_images = list(anomalous_images)
    if not normal_images and not anomalous_images:
        raise ValueError("need at least one image to update residual maps")
    shapes = {im.shape for im in normal_images + anomalous_images}
    if len(shapes) != 1:
        raise ValueError(f"pool images must share one shape, got {sorted(shapes)}")
    h, w, _ = next(iter(shapes))

    if anomalous_images:
        rp = _mean_residual(params, anomalous_images, forward_fn)
        peak = float(rp.max())
        if peak > NEUTRAL_PEAK_EPS:
            rp = rp / peak
        else:
            rp = np.ones_like(rp)
    else:
        rp = np.ones((h, w, 1), dtype=np.float32)

    if normal_images:
        rn = np.clip(_mean_residual(params, normal_images, forward_fn), 0.0, 1.0)
    else:
        rn = np.zeros((h, w, 1), dtype=np.float32)

    return NoiseMaskPair(
        positive_residual=rp.astype(np.float32),
        negative_residual=rn.astype(np.float32),
        updated_at_iteration=int(iteration),
    )


def make_positive_noise(z: np.ndarray, masks: NoiseMaskPair) -> np.ndarray:
    """Noise scaled toward defect-prone regions; |result| <= |z| elementwise."""
    return z * masks.positive_residual


def make_negative_gate(z: np.ndarray, masks: NoiseMaskPair) -> np.ndarray:
    """Attenuation field in [0, 1]; 1 everywhere when R_n is zero."""
    gate = 1.0 - np.abs(z) * masks.negative_residual
    return np.clip(gate, 0.0, 1.0)


def compose_applied_noise(z: np.ndarray, masks: NoiseMaskPair, blend: float) -> np.ndarray:
    """Blend plain and positively-masked noise, then apply the negative gate.

    blend = 1 keeps the base noise untouched before gating; blend = 0
    uses only the masked noise. Neutral masks return z itself (the same
    array, bit-exact), so an untouched schedule degrades to plain
    uniform noise injection.
    """
    if not 0.0 <= blend <= 1.0:
        raise ValueError(f"blend must lie in [0, 1], got {blend}")
    if masks.is_neutral:
        return z
    zp = make_positive_noise(z, masks)
    mixed = blend * z + (1.0 - blend) * zp
    return mixed * make_negative_gate(z, masks)


def apply_noise(x: np.ndarray, z_hat: np.ndarray) -> np.ndarray:
    """Noisy training input, clipped back to the image range [0, 1]."""
    return np.clip(x + z_hat, 0.0, 1.0)
