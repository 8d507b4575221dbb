"""Anomaly maps, thresholds, and pixel-level ROC evaluation.

Inference is noise-free and deterministic: the map is the channel-mean
absolute difference between an input and its reconstruction, optionally
blurred with a normalized Gaussian. Scores rank pixels; the ROC sweep
pools every pixel of every evaluated image.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging, ops
from .model import forward
from .ssim import SsimConfig, ssim_map

__all__ = [
    "AnomalyResult",
    "MetricUndefinedError",
    "anomaly_map",
    "pixel_auroc",
    "choose_threshold",
    "apply_threshold",
    "write_result",
    "evaluate_dataset",
]


class MetricUndefinedError(ValueError):
    """Raised when a metric has no value, e.g. single-class ground truth."""


@dataclass(frozen=True)
class AnomalyResult:
    """Per-pixel anomaly map plus the derived image-level score.

    map is (H, W, 1), nonnegative and finite; image_score is its max.
    binary_mask and threshold_used are filled in by apply_threshold.
    """

    map: np.ndarray
    image_score: float
    binary_mask: np.ndarray | None = None
    threshold_used: float | None = None


def _smooth(m: np.ndarray, sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    g = ops.gaussian_kernel1d(sigma, radius, m.dtype)
    return ops.filter_separable(m, g)


def anomaly_map(
    params: dict,
    x: np.ndarray,
    smooth_sigma: float = 1.0,
    mode: str = "abs",
    ssim_cfg: SsimConfig = SsimConfig(),
) -> AnomalyResult:
    """Score one image against its own reconstruction.

    mode "abs" is the channel-mean |x - reconstruction|; mode "ssim"
    is 1 minus the similarity map, for structure-sensitive scoring.
    smooth_sigma > 0 blurs the map with a normalized reflect-padded
    Gaussian; 0 disables smoothing. No noise is injected here.
    """
    if smooth_sigma < 0:
        raise ValueError(f"smooth_sigma must be >= 0, got {smooth_sigma}")
    y = forward(params, x)
    if mode == "abs":
        m = np.abs(x - y).mean(axis=-1, keepdims=True)
    elif mode == "ssim":
        m = 1.0 - ssim_map(x, y, ssim_cfg)
    else:
        raise ValueError(f"mode must be 'abs' or 'ssim', got {mode!r}")
    if smooth_sigma > 0:
        m = _smooth(m, smooth_sigma)
    m = np.ascontiguousarray(m, dtype=np.float32)
    return AnomalyResult(map=m, image_score=float(m.max()))


def _map_of(x) -> np.ndarray:
    return x.map if isinstance(x, AnomalyResult) else np.asarray(x)


def pixel_auroc(maps, gts) -> float:
    """Area under the pixel-level ROC curve, all images pooled.

    Threshold sweep over the distinct score values with trapezoidal
    integration; tied scores move as one group, so a constant map
    scores exactly 0.5.
    """
    if len(maps) != len(gts):
        raise ValueError(f"got {len(maps)} maps but {len(gts)} ground-truth masks")
    if len(maps) == 0:
        raise ValueError("need at least one map")
    scores = []
    labels = []
    for m, g in zip(maps, gts):
        mm = _map_of(m)
        gg = np.asarray(g)
        if mm.shape != gg.shape:
            raise ValueError(f"map shape {mm.shape} != ground-truth shape {gg.shape}")
        scores.append(mm.ravel().astype(np.float64))
        labels.append(gg.ravel() > 0.5)
    s = np.concatenate(scores)
    y = np.concatenate(labels)
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise MetricUndefinedError(
            f"ROC needs both classes; got {pos} positive and {neg} negative pixels"
        )
    order = np.argsort(-s, kind="stable")
    ys = y[order]
    ss = s[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    # last index of each tied-score group
    last = np.nonzero(np.diff(ss))[0]
    idx = np.concatenate([last, [ss.size - 1]])
    tpr = np.concatenate([[0.0], tp[idx] / pos])
    fpr = np.concatenate([[0.0], fp[idx] / neg])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) * 0.5))


def choose_threshold(normal_maps, percentile: float = 99.5) -> float:
    """Linearly interpolated percentile of pooled normal-map pixels."""
    if not 0.0 < percentile < 100.0:
        raise ValueError(f"percentile must lie in (0, 100), got {percentile}")
    if len(normal_maps) == 0:
        raise ValueError("need at least one normal map")
    pool = np.concatenate([_map_of(m).ravel().astype(np.float64) for m in normal_maps])
    return float(np.percentile(pool, percentile))


def apply_threshold(result: AnomalyResult, threshold: float) -> AnomalyResult:
    mask = (result.map > threshold).astype(np.float32)
    return AnomalyResult(
        map=result.map,
        image_score=result.image_score,
        binary_mask=mask,
        threshold_used=float(threshold),
    )


def write_result(out_dir, stem: str, result: AnomalyResult) -> dict:
    """Dump one image's outputs; returns {kind: path}.

    <stem>_map.png is min-max normalized per image for display; the
    raw values live in <stem>_map.f32 (little-endian float32,
    row-major). A binary <stem>_mask.png appears when the result was
    thresholded.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = result.map
    lo, hi = float(m.min()), float(m.max())
    disp = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    paths = {}
    paths["map_png"] = str(out_dir / f"{stem}_map.png")
    imaging.save_image_u16(paths["map_png"], disp)
    paths["map_f32"] = str(out_dir / f"{stem}_map.f32")
    imaging.save_raw_f32(paths["map_f32"], m)
    if result.binary_mask is not None:
        paths["mask_png"] = str(out_dir / f"{stem}_mask.png")
        imaging.save_image(paths["mask_png"], result.binary_mask)
    return paths


def evaluate_dataset(
    params: dict,
    dataset: imaging.DatasetSpec,
    smooth_sigma: float = 1.0,
    percentile: float = 99.5,
    out_dir=None,
    mode: str = "abs",
) -> dict:
    """Score a test split and report pixel AUROC plus a threshold.

    Normal images contribute all-negative pixels; anomalous images pair
    with their ground-truth masks. The threshold is the percentile of
    the pooled normal maps. With out_dir set, per-image dumps and
    eval.json are written.
    """
    normals = imaging.load_normals(dataset)
    anomalous, stems = imaging.load_anomalous(dataset)
    gts = (
        imaging.load_ground_truth(dataset, stems, [a.shape for a in anomalous])
        if anomalous
        else []
    )

    normal_results = [anomaly_map(params, x, smooth_sigma, mode) for x in normals]
    anom_results = [anomaly_map(params, x, smooth_sigma, mode) for x in anomalous]
    threshold = choose_threshold(normal_results, percentile)

    all_results = normal_results + anom_results
    all_gts = [np.zeros_like(r.map) for r in normal_results] + gts
    auroc = pixel_auroc(all_results, all_gts) if anomalous else None

    per_image = []
    written = []
    for i, r in enumerate(normal_results):
        entry = {"stem": f"normal_{i:04d}", "score": r.image_score, "anomalous": False}
        per_image.append(entry)
    for stem, r in zip(stems, anom_results):
        per_image.append({"stem": stem, "score": r.image_score, "anomalous": True})
    if out_dir is not None:
        for stem, r in zip(stems, anom_results):
            written.append(write_result(out_dir, stem, apply_threshold(r, threshold)))

    report = {
        "pixel_auroc": auroc,
        "threshold": threshold,
        "threshold_percentile": percentile,
        "smooth_sigma": smooth_sigma,
        "mode": mode,
        "num_normal": len(normals),
        "num_anomalous": len(anomalous),
        "per_image": per_image,
    }
    if out_dir is not None:
        report["outputs"] = written
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "eval.json").write_text(json.dumps(report, indent=2))
    return report
