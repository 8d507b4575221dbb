"""Latent-search inference baseline.

A plain convolutional autoencoder (no skip connections, dense latent
bottleneck) stands in for a trained generator. Inference by latent
search optimizes the code until the decode matches the query, which
costs hundreds of decoder passes per image; the benchmark measures
that cost against a single feed-forward pass of the reconstructor.
The latent starts from the encoder output, which flatters the
baseline, so the reported speed ratio is conservative.
"""

import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imaging, ops
from .model import forward
from .ssim import SsimConfig, ssim_loss, ssim_loss_grad
from .train import TrainConfig, adam_update, assemble_batch

__all__ = [
    "AutoencoderConfig",
    "AutoencoderParams",
    "SearchConfig",
    "SearchDivergedError",
    "init_autoencoder",
    "encode",
    "decode",
    "train_autoencoder",
    "latent_search_infer",
    "bench_inference",
]


class SearchDivergedError(RuntimeError):
    """Latent search hit a non-finite loss."""


@dataclass(frozen=True)
class AutoencoderConfig:
    levels: int = 3
    base_channels: int = 16
    in_channels: int = 1
    latent_dim: int = 64
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1 or self.in_channels < 1 or self.latent_dim < 1:
            raise ValueError("channel and latent sizes must be >= 1")
        if self.image_size % (2**self.levels) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^levels"
            )

    @property
    def bottleneck_hw(self) -> int:
        return self.image_size // (2**self.levels)

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** (self.levels - 1)


@dataclass
class AutoencoderParams:
    """Config plus tensors; the pair travels together everywhere."""

    config: AutoencoderConfig
    tensors: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SearchConfig:
    steps: int = 500
    step_size: float = 0.05
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")


def _layer_dims(cfg: AutoencoderConfig):
    enc = []
    ci = cfg.in_channels
    for lv in range(cfg.levels):
        co = cfg.base_channels * 2**lv
        enc.append((f"enc{lv}", ci, co))
        ci = co
    dec = []
    for lv in range(cfg.levels - 1, -1, -1):
        co = cfg.base_channels * 2 ** max(lv - 1, 0)
        dec.append((f"dec{lv}", ci, co))
        ci = co
    return enc, dec, ci


def init_autoencoder(cfg: AutoencoderConfig, dtype=np.float32) -> AutoencoderParams:
    """Uniform(-1/sqrt(fan_in), +) kernels, zero biases, in layer order."""
    rng = np.random.default_rng(cfg.seed)
    enc, dec, last = _layer_dims(cfg)
    flat = cfg.bottleneck_hw**2 * cfg.bottleneck_channels
    t = {}

    def conv_init(name, ci, co):
        bound = 1.0 / np.sqrt(9.0 * ci)
        t[f"{name}/kernel"] = rng.uniform(-bound, bound, (3, 3, ci, co)).astype(dtype)
        t[f"{name}/bias"] = np.zeros(co, dtype)

    def dense_init(name, ni, no):
        bound = 1.0 / np.sqrt(ni)
        t[f"{name}/weight"] = rng.uniform(-bound, bound, (ni, no)).astype(dtype)
        t[f"{name}/bias"] = np.zeros(no, dtype)

    for name, ci, co in enc:
        conv_init(name, ci, co)
    dense_init("enc_dense", flat, cfg.latent_dim)
    dense_init("dec_dense", cfg.latent_dim, flat)
    for name, ci, co in dec:
        conv_init(name, ci, co)
    conv_init("head", last, cfg.in_channels)
    return AutoencoderParams(config=cfg, tensors=t)


def _check_ae_input(cfg: AutoencoderConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.image_size or x.shape[2] != cfg.image_size:
        raise ValueError(
            f"expected {cfg.image_size}x{cfg.image_size} input, got shape {x.shape}"
        )
    if x.shape[3] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} channels, got {x.shape[3]}")
    return np.ascontiguousarray(x, dtype=np.float32) if single else x


def _encode_cached(ae: AutoencoderParams, x4: np.ndarray):
    cfg, t = ae.config, ae.tensors
    cache = {"enc_xp": [], "enc_z": []}
    h = x4
    for lv in range(cfg.levels):
        xp = ops.reflect_pad2d(h, 1)
        z = ops.conv_valid(xp, t[f"enc{lv}/kernel"]) + t[f"enc{lv}/bias"]
        cache["enc_xp"].append(xp)
        cache["enc_z"].append(z)
        h = ops.avgpool2(ops.leaky_relu(z))
    b = h.shape[0]
    flat = h.reshape(b, -1)
    cache["flat"] = flat
    lat = ops.dense(flat, t["enc_dense/weight"], t["enc_dense/bias"])
    cache["feat_shape"] = h.shape
    return lat, cache


def _decode_cached(ae: AutoencoderParams, lat: np.ndarray):
    cfg, t = ae.config, ae.tensors
    s, c = cfg.bottleneck_hw, cfg.bottleneck_channels
    cache = {"lat": lat}
    pre = ops.dense(lat, t["dec_dense/weight"], t["dec_dense/bias"])
    cache["dec_pre"] = pre
    h = ops.leaky_relu(pre).reshape(lat.shape[0], s, s, c)
    cache["dec_xp"] = []
    cache["dec_z"] = []
    for lv in range(cfg.levels - 1, -1, -1):
        up = ops.upsample2(h)
        xp = ops.reflect_pad2d(up, 1)
        z = ops.conv_valid(xp, t[f"dec{lv}/kernel"]) + t[f"dec{lv}/bias"]
        cache["dec_xp"].append(xp)
        cache["dec_z"].append(z)
        h = ops.leaky_relu(z)
    xp = ops.reflect_pad2d(h, 1)
    z = ops.conv_valid(xp, t["head/kernel"]) + t["head/bias"]
    y = ops.sigmoid(z)
    cache["head_xp"] = xp
    cache["y"] = y
    return y, cache


def encode(ae: AutoencoderParams, x: np.ndarray) -> np.ndarray:
    """Latent code(s) of x; (latent_dim,) for a single image."""
    single = np.asarray(x).ndim == 3
    lat, _ = _encode_cached(ae, _check_ae_input(ae.config, x))
    return lat[0] if single else lat


def decode(ae: AutoencoderParams, lat: np.ndarray) -> np.ndarray:
    """Image(s) from latent code(s); single code gives a single image."""
    lat = np.asarray(lat, dtype=np.float32)
    single = lat.ndim == 1
    if single:
        lat = lat[None]
    if lat.ndim != 2 or lat.shape[1] != ae.config.latent_dim:
        raise ValueError(f"expected latent_dim {ae.config.latent_dim}, got {lat.shape}")
    y, _ = _decode_cached(ae, lat)
    return y[0] if single else y


def _conv_back(t, name, xp, dz, grads=None):
    if grads is not None:
        grads[f"{name}/kernel"] = ops.conv_valid_backward_dw(xp, dz, 3, 3)
        grads[f"{name}/bias"] = dz.sum(axis=(0, 1, 2))
    dxp = ops.conv_valid_backward_dx(dz, t[f"{name}/kernel"], xp.shape[1], xp.shape[2])
    return ops.reflect_pad2d_adjoint(dxp, 1)


def _decode_backward(ae: AutoencoderParams, cache: dict, dy: np.ndarray, grads=None):
    """Gradient wrt the latent; fills parameter grads when asked to."""
    cfg, t = ae.config, ae.tensors
    dz = ops.sigmoid_backward(cache["y"], dy)
    dh = _conv_back(t, "head", cache["head_xp"], dz, grads)
    # decoder layers were applied levels-1 .. 0; walk back 0 .. levels-1
    for lv in range(cfg.levels):
        idx = cfg.levels - 1 - lv
        dz = ops.leaky_relu_backward(cache["dec_z"][idx], dh)
        dup = _conv_back(t, f"dec{lv}", cache["dec_xp"][idx], dz, grads)
        dh = ops.upsample2_backward(dup)
    b = dh.shape[0]
    dpre = ops.leaky_relu_backward(cache["dec_pre"], dh.reshape(b, -1))
    dlat, dw, db = ops.dense_backward(cache["lat"], t["dec_dense/weight"], dpre)
    if grads is not None:
        grads["dec_dense/weight"] = dw
        grads["dec_dense/bias"] = db
    return dlat


def _encode_backward(ae: AutoencoderParams, cache: dict, dlat: np.ndarray, grads: dict):
    cfg, t = ae.config, ae.tensors
    dflat, dw, db = ops.dense_backward(cache["flat"], t["enc_dense/weight"], dlat)
    grads["enc_dense/weight"] = dw
    grads["enc_dense/bias"] = db
    dh = dflat.reshape(cache["feat_shape"])
    for lv in range(cfg.levels - 1, -1, -1):
        dpool = ops.avgpool2_backward(dh)
        dz = ops.leaky_relu_backward(cache["enc_z"][lv], dpool)
        dh = _conv_back(t, f"enc{lv}", cache["enc_xp"][lv], dz, grads)
    return dh


def train_autoencoder(
    dataset: imaging.DatasetSpec,
    cfg: TrainConfig,
    ae_cfg: AutoencoderConfig | None = None,
    ssim_cfg: SsimConfig = SsimConfig(),
):
    """Plain reconstruction training, no noise and no masks.

    Minimizes ssim_loss(x, decode(encode(x))) over normal patches with
    the same optimizer and batch sampling as the main trainer. Returns
    (AutoencoderParams, report); deterministic per cfg.seed.
    """
    normals = imaging.load_normals(dataset)
    channels = normals[0].shape[2]
    if ae_cfg is None:
        ae_cfg = AutoencoderConfig(
            in_channels=channels, image_size=cfg.patch_size, seed=cfg.seed
        )
    if ae_cfg.image_size != cfg.patch_size:
        raise ValueError(
            f"autoencoder image_size {ae_cfg.image_size} != patch_size {cfg.patch_size}"
        )
    ae = init_autoencoder(ae_cfg)
    m = {k: np.zeros_like(v) for k, v in ae.tensors.items()}
    v = {k: np.zeros_like(t) for k, t in ae.tensors.items()}
    streams = np.random.SeedSequence(cfg.seed).spawn(2)
    batch_rng = np.random.default_rng(streams[0])
    history = []
    for it in range(1, cfg.iterations + 1):
        x = assemble_batch(normals, cfg, batch_rng)
        lat, enc_cache = _encode_cached(ae, x)
        y, dec_cache = _decode_cached(ae, lat)
        losses, _, grad_y = ssim_loss_grad(x, y, ssim_cfg)
        loss = float(np.mean(losses))
        if not np.isfinite(loss):
            raise SearchDivergedError(f"non-finite loss {loss} at iteration {it}")
        grads: dict = {}
        dlat = _decode_backward(ae, dec_cache, grad_y / x.shape[0], grads)
        _encode_backward(ae, enc_cache, dlat, grads)
        adam_update(ae.tensors, grads, m, v, it, cfg.learning_rate)
        history.append(loss)
    report = {
        "iterations": cfg.iterations,
        "final_loss": history[-1] if history else None,
        "loss_history": history,
        "config": asdict(cfg),
        "autoencoder_config": asdict(ae_cfg),
    }
    return ae, report


def latent_search_infer(ae: AutoencoderParams, x: np.ndarray, scfg: SearchConfig):
    """Reconstruct one image by gradient descent in latent space.

    Starts each restart from encode(x) (later restarts perturbed), runs
    scfg.steps of fixed-step descent on ssim_loss(x, decode(latent))
    with the decoder frozen, and keeps the best decode seen. Returns
    (reconstruction, residual_map, elapsed_seconds). steps=0 returns
    decode(encode(x)) unchanged.
    """
    x4 = _check_ae_input(ae.config, x)
    if x4.shape[0] != 1:
        raise ValueError("latent search takes one image at a time")
    ssim_cfg = SsimConfig()
    rng = np.random.default_rng(scfg.seed)
    t0 = time.perf_counter()
    lat0, _ = _encode_cached(ae, x4)
    best_loss = np.inf
    best_y = None
    for restart in range(scfg.restarts):
        lat = lat0.copy()
        if restart > 0:
            lat = lat + rng.standard_normal(lat.shape).astype(np.float32) * 0.1
        for _ in range(scfg.steps):
            y, cache = _decode_cached(ae, lat)
            loss, _, grad_y = ssim_loss_grad(x4[0], y[0], ssim_cfg)
            if not np.isfinite(loss):
                raise SearchDivergedError(f"non-finite search loss {loss}")
            if loss < best_loss:
                best_loss = loss
                best_y = y[0]
            dlat = _decode_backward(ae, cache, grad_y[None])
            lat = lat - scfg.step_size * dlat
        y, _ = _decode_cached(ae, lat)
        loss = ssim_loss(x4[0], y[0], ssim_cfg)
        if loss < best_loss:
            best_loss = loss
            best_y = y[0]
    elapsed = time.perf_counter() - t0
    residual = np.abs(x4[0] - best_y).mean(axis=-1, keepdims=True)
    return best_y, residual, elapsed


def bench_inference(
    recon_params: dict,
    ae: AutoencoderParams,
    images,
    scfg: SearchConfig,
    out_path=None,
) -> dict:
    """Per-image wall-clock of feed-forward vs latent-search inference.

    One warm-up pass of each kind runs first and is not timed. The
    ratio is search mean over forward mean, computed from the recorded
    values. Needs at least 10 images for stable means.
    """
    images = list(images)
    if len(images) < 10:
        raise ValueError(f"need at least 10 images for stable timing, got {len(images)}")
    forward(recon_params, images[0])
    latent_search_infer(ae, images[0], scfg)

    forward_times = []
    for img in images:
        t0 = time.perf_counter()
        forward(recon_params, img)
        forward_times.append(time.perf_counter() - t0)
    search_times = []
    for img in images:
        _, _, elapsed = latent_search_infer(ae, img, scfg)
        search_times.append(elapsed)

    fwd_mean = float(np.mean(forward_times))
    search_mean = float(np.mean(search_times))
    report = {
        "num_images": len(images),
        "image_shape": list(images[0].shape),
        "search_steps": scfg.steps,
        "search_restarts": scfg.restarts,
        "forward_seconds_per_image": forward_times,
        "search_seconds_per_image": search_times,
        "forward_mean_seconds": fwd_mean,
        "search_mean_seconds": search_mean,
        "ratio": search_mean / fwd_mean,
        "backend": ops.active_backend(),
        "host": {"platform": platform.platform(), "machine": platform.machine()},
    }
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(report, indent=2))
    return report
