"""Self-training loop: the reconstructor and its noise masks grow together.

Each step crops a batch of normal patches, injects mask-shaped noise,
and takes one adaptive-moment gradient step on the structural
reconstruction loss. Every mask_update_interval iterations the masks
are re-derived from the current model's residuals on small normal and
anomalous pools, so noise placement tracks what the model currently
fails to reconstruct.

Runs are deterministic for a given seed: batch sampling, noise, and
mask-pool sampling each draw from an independent stream spawned from
the config seed.
"""

import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .model import ReconstructorConfig, backward, forward_cached, init_reconstructor
from .noise import (
    NoiseMaskPair,
    apply_noise,
    compose_applied_noise,
    neutral_masks,
    sample_base_noise,
    update_residual_maps,
)
from .ssim import SsimConfig, ssim_loss_grad
from .weights import save_weights

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingDivergedError",
    "CheckpointError",
    "init_state",
    "adam_update",
    "assemble_batch",
    "train_step",
    "mask_update_due",
    "maybe_update_masks",
    "run_training",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# per mask update: this many fresh normal patches feed the negative mask
MASK_POOL_NORMALS = 16


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the iteration and batch statistics."""

    def __init__(self, iteration: int, loss: float, batch_stats: dict):
        self.iteration = iteration
        self.loss = loss
        self.batch_stats = batch_stats
        super().__init__(
            f"non-finite loss {loss} at iteration {iteration}; batch stats {batch_stats}"
        )


class CheckpointError(RuntimeError):
    """A checkpoint write failed; carries the last checkpoint that succeeded."""

    def __init__(self, failed_path, last_good_path):
        self.failed_path = str(failed_path)
        self.last_good_path = None if last_good_path is None else str(last_good_path)
        super().__init__(
            f"failed to write checkpoint {self.failed_path}; "
            f"last good checkpoint: {self.last_good_path}"
        )


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    iterations: int = 5000
    mask_update_interval: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-3
    noise_amplitude: float = 0.2
    blend: float = 0.25  # weight of the unmasked noise share in the positive mix
    patch_size: int = 64
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.mask_update_interval < 1:
            raise ValueError(
                f"mask_update_interval must be >= 1, got {self.mask_update_interval}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        # 0 is allowed as a dry-run value: moments advance, parameters do not
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.noise_amplitude <= 0:
            raise ValueError(f"noise_amplitude must be > 0, got {self.noise_amplitude}")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError(f"blend must lie in [0, 1], got {self.blend}")
        if self.patch_size < 8:
            raise ValueError(f"patch_size must be >= 8, got {self.patch_size}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


@dataclass
class TrainState:
    """Everything that evolves during a run. Mutated in place by the loop."""

    params: dict
    adam_m: dict
    adam_v: dict
    masks: NoiseMaskPair
    iteration: int = 0
    loss_history: list = field(default_factory=list)
    mask_update_iterations: list = field(default_factory=list)
    batch_rng: np.random.Generator = None
    noise_rng: np.random.Generator = None
    mask_rng: np.random.Generator = None


def init_state(model_cfg: ReconstructorConfig, cfg: TrainConfig) -> TrainState:
    params = init_reconstructor(model_cfg)
    streams = np.random.SeedSequence(cfg.seed).spawn(3)
    return TrainState(
        params=params,
        adam_m={k: np.zeros_like(v) for k, v in params.items()},
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
        masks=neutral_masks(cfg.patch_size, cfg.patch_size),
        batch_rng=np.random.default_rng(streams[0]),
        noise_rng=np.random.default_rng(streams[1]),
        mask_rng=np.random.default_rng(streams[2]),
    )


def adam_update(params: dict, grads: dict, m: dict, v: dict, t: int, lr: float) -> None:
    """One adaptive-moment step, in place. t is the 1-based step index."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for k, g in grads.items():
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g
        step = lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + ADAM_EPS)
        params[k] -= step.astype(params[k].dtype)


def assemble_batch(normals: list, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Stack batch_size random patch crops from random normal images."""
    ps = cfg.patch_size
    out = np.empty(
        (cfg.batch_size, ps, ps, normals[0].shape[2]), dtype=np.float32
    )
    for b in range(cfg.batch_size):
        img = normals[int(rng.integers(0, len(normals)))]
        i = int(rng.integers(0, img.shape[0] - ps + 1))
        j = int(rng.integers(0, img.shape[1] - ps + 1))
        out[b] = img[i : i + ps, j : j + ps]
    return out


def train_step(
    state: TrainState,
    batch: np.ndarray,
    cfg: TrainConfig,
    ssim_cfg: SsimConfig = SsimConfig(),
) -> TrainState:
    """One gradient step on mean ssim_loss(x, reconstruct(x + noise))."""
    x = np.ascontiguousarray(batch, dtype=np.float32)
    z = sample_base_noise(x.shape, cfg.noise_amplitude, state.noise_rng)
    z_hat = compose_applied_noise(z, state.masks, cfg.blend)
    noisy = apply_noise(x, z_hat)
    y, cache = forward_cached(state.params, noisy)
    losses, _, grad_y = ssim_loss_grad(x, y, ssim_cfg)
    loss = float(np.mean(losses))
    if not np.isfinite(loss):
        stats = {
            "batch_min": float(x.min()),
            "batch_max": float(x.max()),
            "recon_min": float(y.min()),
            "recon_max": float(y.max()),
        }
        raise TrainingDivergedError(state.iteration + 1, loss, stats)
    grads = backward(state.params, cache, grad_y / x.shape[0])
    state.iteration += 1
    adam_update(state.params, grads, state.adam_m, state.adam_v, state.iteration, cfg.learning_rate)
    state.loss_history.append(loss)
    return state


def mask_update_due(iteration: int, interval: int) -> bool:
    return iteration > 0 and iteration % interval == 0


def maybe_update_masks(
    state: TrainState, normal_pool: list, anomalous_pool: list, cfg: TrainConfig
) -> TrainState:
    """Replace the masks when the schedule says so; otherwise a no-op."""
    if not mask_update_due(state.iteration, cfg.mask_update_interval):
        return state
    state.masks = update_residual_maps(
        state.params, normal_pool, anomalous_pool, state.iteration
    )
    state.mask_update_iterations.append(state.iteration)
    return state


def _center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[0], img.shape[1]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than patch_size {size}")
    i = (h - size) // 2
    j = (w - size) // 2
    return np.ascontiguousarray(img[i : i + size, j : j + size])


def _dump_masks(out_dir: Path, masks: NoiseMaskPair, iteration: int) -> None:
    for tag, arr in (("mask_p", masks.positive_residual), ("mask_n", masks.negative_residual)):
        imaging.save_image_u16(out_dir / f"{tag}_{iteration:06d}.png", arr)
        imaging.save_raw_f32(out_dir / f"{tag}_{iteration:06d}.f32", arr)


def run_training(
    dataset: imaging.DatasetSpec,
    cfg: TrainConfig,
    model_cfg: ReconstructorConfig | None = None,
    ssim_cfg: SsimConfig = SsimConfig(),
    out_dir=None,
    dump_masks: bool = False,
):
    """Full run over a dataset directory pair.

    Loads normal images (training + negative-mask pool) and any
    anomalous images (positive-mask pool only; they never enter the
    loss). Returns (params, masks, report). With out_dir set, writes
    ckpt_<iter>.pnuw checkpoints plus mask dumps every checkpoint_every
    iterations, the final weights as model.pnuw, and report.json.
    """
    normals = imaging.load_normals(dataset)
    ps = cfg.patch_size
    channels = normals[0].shape[2]
    for n, img in enumerate(normals):
        if img.shape[0] < ps or img.shape[1] < ps:
            raise ValueError(
                f"normal image {n} is {img.shape[0]}x{img.shape[1]}, "
                f"smaller than patch_size {ps}"
            )
        if img.shape[2] != channels:
            raise ValueError("normal images disagree on channel count")
    anomalous_raw, _ = imaging.load_anomalous(dataset)
    anomalous = [_center_crop(a, ps) for a in anomalous_raw]

    if model_cfg is None:
        model_cfg = ReconstructorConfig(in_channels=channels, seed=cfg.seed)
    if ps % (2**model_cfg.levels) != 0:
        raise ValueError(
            f"patch_size {ps} is not divisible by 2^levels = {2**model_cfg.levels}"
        )
    if cfg.mask_update_interval > cfg.iterations:
        warnings.warn(
            "mask_update_interval exceeds iterations; masks will stay neutral",
            stacklevel=2,
        )

    out_path = None if out_dir is None else Path(out_dir)
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    state = init_state(model_cfg, cfg)
    checkpoints: list = []
    last_good_ckpt = None
    t_start = time.perf_counter()

    for it in range(1, cfg.iterations + 1):
        batch = assemble_batch(normals, cfg, state.batch_rng)
        train_step(state, batch, cfg, ssim_cfg)

        if mask_update_due(state.iteration, cfg.mask_update_interval):
            normal_pool = assemble_batch_pool(normals, ps, MASK_POOL_NORMALS, state.mask_rng)
            maybe_update_masks(state, normal_pool, anomalous, cfg)
            if dump_masks and out_path is not None:
                _dump_masks(out_path, state.masks, state.iteration)

        if out_path is not None and (it % cfg.checkpoint_every == 0 or it == cfg.iterations):
            ckpt = out_path / f"ckpt_{it:06d}.pnuw"
            try:
                save_weights(state.params, model_cfg, ckpt)
                _dump_masks(out_path, state.masks, it)
            except OSError as exc:
                raise CheckpointError(ckpt, last_good_ckpt) from exc
            checkpoints.append(str(ckpt))
            last_good_ckpt = ckpt

    elapsed = time.perf_counter() - t_start
    report = {
        "iterations": cfg.iterations,
        "final_loss": state.loss_history[-1],
        "loss_history": state.loss_history,
        "mask_update_iterations": state.mask_update_iterations,
        "mask_updates": len(state.mask_update_iterations),
        "seconds_total": elapsed,
        "seconds_per_iteration": elapsed / cfg.iterations,
        "checkpoints": checkpoints,
        "config": asdict(cfg),
        "model_config": asdict(model_cfg),
        "ssim_config": asdict(ssim_cfg),
        "num_normal_images": len(normals),
        "num_anomalous_images": len(anomalous),
    }
    if out_path is not None:
        try:
            save_weights(state.params, model_cfg, out_path / "model.pnuw")
        except OSError as exc:
            raise CheckpointError(out_path / "model.pnuw", last_good_ckpt) from exc
        report["weights"] = str(out_path / "model.pnuw")
        (out_path / "report.json").write_text(json.dumps(report, indent=2))
    return state.params, state.masks, report


def assemble_batch_pool(
    normals: list, patch_size: int, count: int, rng: np.random.Generator
) -> list:
    """count random patches for the negative-mask pool, as a list."""
    out = []
    for _ in range(count):
        img = normals[int(rng.integers(0, len(normals)))]
        i = int(rng.integers(0, img.shape[0] - patch_size + 1))
        j = int(rng.integers(0, img.shape[1] - patch_size + 1))
        out.append(np.ascontiguousarray(img[i : i + patch_size, j : j + patch_size]))
    return out
