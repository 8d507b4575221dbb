"""Image IO, patch sampling, and synthetic surface-defect data.

Every image in this package is a float32 array of shape (H, W, C) with
values in [0, 1], C = 1 for grayscale and C = 3 for color. Files are
read through Pillow; 8-bit and 16-bit PNG plus 8-bit PGM, BMP and JPEG
are accepted. Dataset directories follow one convention:

    <root>/normal/*.png      defect-free images
    <root>/anomalous/*.png   defective images
    <root>/gt/*.png          binary masks, same file stem as anomalous

The synthetic generator produces procedural textures and three defect
kinds (scratch, blob, brightness_patch) with exact ground-truth masks:
for positive intensity the defective image differs from its base on
precisely the pixels the mask marks.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "DatasetSpec",
    "SyntheticDefectSpec",
    "GenDataConfig",
    "ImageFormatError",
    "load_image",
    "save_image",
    "save_image_u16",
    "save_raw_f32",
    "load_raw_f32",
    "list_images",
    "sample_patches",
    "make_texture",
    "gen_synthetic_pair",
    "load_normals",
    "load_anomalous",
    "load_ground_truth",
    "generate_corpus",
]

SUPPORTED_SUFFIXES = (".png", ".pgm", ".bmp", ".jpg", ".jpeg")

# profile values below this are treated as empty space, which keeps the
# ground-truth support identical to the set of actually changed pixels
PROFILE_FLOOR = 0.05

DEFECT_KINDS = ("scratch", "blob", "brightness_patch")


class ImageFormatError(ValueError):
    """File exists but is not a supported image format or bit depth."""


@dataclass(frozen=True)
class DatasetSpec:
    """Locations and sampling geometry of one image corpus."""

    normal_dir: str
    anomalous_dir: str | None = None
    ground_truth_dir: str | None = None
    patch_size: int = 64
    grayscale: bool = True

    def __post_init__(self):
        if self.patch_size < 8:
            raise ValueError(f"patch_size must be >= 8, got {self.patch_size}")


@dataclass(frozen=True)
class SyntheticDefectSpec:
    """One synthetic defect: what kind, how strong, how large, which rng."""

    kind: str
    intensity: float
    size_px: int
    seed: int

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ValueError(f"kind must be one of {DEFECT_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must lie in [0, 1], got {self.intensity}")
        if self.size_px < 1:
            raise ValueError(f"size_px must be >= 1, got {self.size_px}")


# ================================ file IO ====================================


def load_image(path, grayscale: bool = False) -> np.ndarray:
    """Read an image file as float32 (H, W, C) scaled to [0, 1].

    8-bit data is divided by 255, 16-bit by 65535. grayscale=True
    averages the channels down to C = 1.
    """
    path = Path(path)
    with Image.open(path) as img:
        mode = img.mode
        if mode in ("1", "P", "LA"):
            img = img.convert("L" if mode != "P" else "RGB")
            mode = img.mode
        if mode == "RGBA":
            img = img.convert("RGB")
            mode = "RGB"
        if mode in ("L", "RGB"):
            arr = np.asarray(img, dtype=np.float32) / 255.0
        elif mode in ("I", "I;16", "I;16L", "I;16B"):
            arr = np.asarray(img, dtype=np.float32) / 65535.0
        else:
            raise ImageFormatError(f"{path}: unsupported image mode {mode!r}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if grayscale and arr.shape[2] != 1:
        arr = arr.mean(axis=2, keepdims=True)
    return np.ascontiguousarray(arr, dtype=np.float32)


def save_image(path, image: np.ndarray) -> None:
    """Write an 8-bit PNG (grayscale or RGB depending on C)."""
    arr = np.round(np.clip(_as_image(image), 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
    pil.save(Path(path))


def save_image_u16(path, image: np.ndarray) -> None:
    """Write a 16-bit grayscale PNG; input must be single channel."""
    arr = _as_image(image)
    if arr.shape[2] != 1:
        raise ValueError(f"16-bit output is grayscale only, got C={arr.shape[2]}")
    q = np.round(np.clip(arr[:, :, 0], 0.0, 1.0) * 65535.0).astype("<u2")
    Image.fromarray(q).save(Path(path))


def save_raw_f32(path, image: np.ndarray) -> None:
    """Dump values as raw little-endian float32, C row-major order, no header."""
    Path(path).write_bytes(np.ascontiguousarray(image, dtype="<f4").tobytes())


def load_raw_f32(path, shape) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return data.reshape(shape).copy()


def list_images(directory) -> list:
    """Paths of supported image files directly inside directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)


def _as_image(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {a.shape}")
    return a


# ============================ patch sampling =================================


def sample_patches(image: np.ndarray, patch_size: int, count: int, rng) -> list:
    """count random patch_size x patch_size crops; rng is a seed or Generator.

    Corners are drawn uniformly; the first k patches for a given rng
    state do not depend on count.
    """
    img = _as_image(image)
    h, w = img.shape[0], img.shape[1]
    if patch_size > min(h, w):
        raise ValueError(f"patch_size {patch_size} exceeds image {h}x{w}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    gen = np.random.default_rng(rng)
    out = []
    for _ in range(count):
        i = int(gen.integers(0, h - patch_size + 1))
        j = int(gen.integers(0, w - patch_size + 1))
        out.append(img[i : i + patch_size, j : j + patch_size].copy())
    return out


# ========================= synthetic data generator ==========================


def make_texture(height: int, width: int, seed: int) -> np.ndarray:
    """Smooth procedural grayscale texture in [0.15, 0.85], shape (H, W, 1).

    A few random low-frequency gratings plus blurred noise; statistics
    are stationary, so random crops are representative of the whole.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    tex = np.zeros((height, width), dtype=np.float64)
    for _ in range(4):
        period = rng.uniform(14.0, 48.0)
        angle = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        k = 2.0 * np.pi / period
        tex += rng.uniform(0.4, 1.0) * np.sin(
            k * (np.cos(angle) * xx + np.sin(angle) * yy) + phase
        )
    grain = rng.normal(0.0, 1.0, size=(height, width))
    # cheap separable box blurs approximate a gaussian well enough here
    for _ in range(3):
        grain = (np.roll(grain, 1, 0) + grain + np.roll(grain, -1, 0)) / 3.0
        grain = (np.roll(grain, 1, 1) + grain + np.roll(grain, -1, 1)) / 3.0
    tex += 0.8 * grain
    lo, hi = tex.min(), tex.max()
    tex = (tex - lo) / max(hi - lo, 1e-9) * 0.7 + 0.15
    return tex.astype(np.float32)[:, :, None]


def _segment_distance(yy, xx, p0, p1):
    d = p1 - p0
    len2 = float(d @ d)
    if len2 < 1e-12:
        return np.hypot(yy - p0[0], xx - p0[1])
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / len2
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def _scratch_profile(h, w, size_px, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    half_w = rng.uniform(1.0, 3.0) / 2.0
    n_seg = int(rng.integers(2, 5))
    pos = np.array([rng.uniform(0.15 * h, 0.85 * h), rng.uniform(0.15 * w, 0.85 * w)])
    heading = rng.uniform(0.0, 2.0 * np.pi)
    prof = np.zeros((h, w), dtype=np.float64)
    for _ in range(n_seg):
        seg_len = rng.uniform(0.6, 1.2) * size_px
        nxt = pos + seg_len * np.array([np.sin(heading), np.cos(heading)])
        nxt = np.clip(nxt, 0.0, [h - 1.0, w - 1.0])
        dist = _segment_distance(yy, xx, pos, nxt)
        prof = np.maximum(prof, np.clip(half_w + 0.5 - dist, 0.0, 1.0))
        pos = nxt
        heading += rng.uniform(-0.7, 0.7)
    return prof


def _blob_profile(h, w, size_px, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    margin = min(size_px, h // 4, w // 4)
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    sigma = max(size_px / 2.5, 0.7)
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return np.exp(-0.5 * r2 / sigma**2)


def _rect_profile(h, w, size_px, rng):
    sh = min(size_px, h)
    sw = min(size_px, w)
    i = int(rng.integers(0, h - sh + 1))
    j = int(rng.integers(0, w - sw + 1))
    prof = np.zeros((h, w), dtype=np.float64)
    prof[i : i + sh, j : j + sw] = 1.0
    return prof


def gen_synthetic_pair(base: np.ndarray, spec: SyntheticDefectSpec):
    """Stamp one defect onto a copy of base.

    Returns (defective, gt_mask). The mask is (H, W, 1) with values in
    {0, 1} and marks the defect's support; for intensity > 0 the
    defective image differs from base exactly there, never elsewhere.
    The stamp direction (darken or brighten) is whichever has headroom
    for the region, decided from the mean base level under the support.
    """
    img = _as_image(base).astype(np.float32, copy=True)
    h, w, c = img.shape
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "scratch":
        prof = _scratch_profile(h, w, spec.size_px, rng)
    elif spec.kind == "blob":
        prof = _blob_profile(h, w, spec.size_px, rng)
    else:
        prof = _rect_profile(h, w, spec.size_px, rng)

    support = prof > PROFILE_FLOOR
    prof = np.where(support, prof, 0.0).astype(np.float32)
    gt = support.astype(np.float32)[:, :, None]
    if spec.intensity == 0.0:
        return img, gt

    direction = -1.0 if float(img[support].mean()) > 0.5 else 1.0
    delta = (spec.intensity * prof)[:, :, None] * direction
    out = np.clip(img + delta, 0.0, 1.0)
    # clipping can cancel the stamp where base sits at a range bound;
    # push those pixels the other way so the mask stays exact
    stuck = support[:, :, None] & (out == img)
    if stuck.any():
        flipped = np.clip(img - delta, 0.0, 1.0)
        out = np.where(stuck, flipped, out)
    return out.astype(np.float32), gt


# ============================= dataset loading ===============================


def load_normals(spec: DatasetSpec) -> list:
    paths = list_images(spec.normal_dir)
    if not paths:
        raise ValueError(f"no readable images in normal_dir {spec.normal_dir}")
    return [load_image(p, grayscale=spec.grayscale) for p in paths]


def load_anomalous(spec: DatasetSpec):
    """Anomalous images plus their stems; empty lists when no dir is set."""
    if spec.anomalous_dir is None:
        return [], []
    paths = list_images(spec.anomalous_dir)
    return [load_image(p, grayscale=spec.grayscale) for p in paths], [p.stem for p in paths]


def load_ground_truth(spec: DatasetSpec, stems, shapes) -> list:
    """Binary masks matching the given anomalous stems, checked for size."""
    if spec.ground_truth_dir is None:
        raise ValueError("dataset has no ground_truth_dir")
    gt_dir = Path(spec.ground_truth_dir)
    masks = []
    for stem, shape in zip(stems, shapes):
        candidates = [gt_dir / f"{stem}{s}" for s in SUPPORTED_SUFFIXES]
        hit = next((p for p in candidates if p.exists()), None)
        if hit is None:
            raise FileNotFoundError(f"no ground-truth mask for stem {stem!r} in {gt_dir}")
        m = load_image(hit, grayscale=True)
        if m.shape[:2] != shape[:2]:
            raise ValueError(
                f"mask {hit.name} is {m.shape[:2]}, image is {shape[:2]}"
            )
        masks.append((m > 0.5).astype(np.float32))
    return masks


# ============================ corpus generation ==============================


@dataclass(frozen=True)
class GenDataConfig:
    """Knobs of the synthetic corpus writer (the gen-data command)."""

    train_normals: int = 16
    train_anomalous: int = 6
    test_normals: int = 10
    test_anomalous: int = 20
    normal_size: int = 256  # training textures, patches get cropped from these
    sample_size: int = 64  # anomalous and test images are this square size
    defect_size: int = 8
    min_intensity: float = 0.3
    max_intensity: float = 0.6
    kinds: tuple = ("scratch", "blob")
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.min_intensity <= self.max_intensity <= 1.0:
            raise ValueError("need 0 <= min_intensity <= max_intensity <= 1")
        for k in self.kinds:
            if k not in DEFECT_KINDS:
                raise ValueError(f"unknown defect kind {k!r}")


def _write_defect_set(root, count, size, kinds, cfg, rng, records):
    (root / "anomalous").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    for i in range(count):
        base = make_texture(size, size, int(rng.integers(0, 2**31)))
        spec = SyntheticDefectSpec(
            kind=kinds[int(rng.integers(0, len(kinds)))],
            intensity=float(rng.uniform(cfg.min_intensity, cfg.max_intensity)),
            size_px=cfg.defect_size,
            seed=int(rng.integers(0, 2**31)),
        )
        img, gt = gen_synthetic_pair(base, spec)
        name = f"anomalous_{i:04d}.png"
        save_image(root / "anomalous" / name, img)
        save_image(root / "gt" / name, gt)
        records.append({"file": str(root / "anomalous" / name), **asdict(spec)})


def generate_corpus(out_root, cfg: GenDataConfig) -> dict:
    """Write a train/test corpus of textures and defects, return the manifest."""
    out_root = Path(out_root)
    rng = np.random.default_rng(cfg.seed)
    records: list = []

    train_n = out_root / "train" / "normal"
    train_n.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.train_normals):
        tex = make_texture(cfg.normal_size, cfg.normal_size, int(rng.integers(0, 2**31)))
        save_image(train_n / f"normal_{i:04d}.png", tex)

    _write_defect_set(
        out_root / "train", cfg.train_anomalous, cfg.sample_size, cfg.kinds, cfg, rng, records
    )

    test_n = out_root / "test" / "normal"
    test_n.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.test_normals):
        tex = make_texture(cfg.sample_size, cfg.sample_size, int(rng.integers(0, 2**31)))
        save_image(test_n / f"normal_{i:04d}.png", tex)

    _write_defect_set(
        out_root / "test", cfg.test_anomalous, cfg.sample_size, cfg.kinds, cfg, rng, records
    )

    manifest = {"config": asdict(cfg), "defects": records}
    (out_root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
