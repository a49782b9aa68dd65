"""Procedural two-domain segmentation scenes and the DMX1 dataset file format.

Every scene has a textured background (class 0), one horizontal stripe band
(class 4) and one to three non-overlapping shapes: circles (1), axis-aligned
rectangles (2) and triangles (3).  The layout depends only on the scene seed;
a :class:`DomainStyle` then changes appearance without touching labels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IGNORE = 255
NUM_CLASSES = 5
IMAGE_SIZE = 64
DOMAINS = ("source", "target")

BACKGROUND, CIRCLE, RECTANGLE, TRIANGLE, STRIPE = range(5)

# mean colours in [0, 1]; shape classes sit close together so colour alone
# does not separate them
_PALETTE = {
    BACKGROUND: (0.66, 0.68, 0.74),
    CIRCLE: (0.80, 0.35, 0.30),
    RECTANGLE: (0.70, 0.45, 0.25),
    TRIANGLE: (0.75, 0.30, 0.45),
    STRIPE: (0.30, 0.35, 0.70),
}


@dataclass(frozen=True)
class DomainStyle:
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    blur_enabled: bool = False
    noise_sigma: float = 0.0
    saturation_scale: float = 1.0

    def __post_init__(self):
        if any(g <= 0 for g in self.gain):
            raise ValueError("gains must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


SOURCE_STYLE = DomainStyle()
TARGET_STYLE = DomainStyle(gain=(0.75, 0.9, 1.15), offset=(0.05, 0.0, -0.05),
                           blur_enabled=True, noise_sigma=0.03, saturation_scale=0.8)


@dataclass
class ImageSample:
    rgb: np.ndarray  # H x W x 3 uint8
    labels: np.ndarray  # H x W uint8, 255 = ignore
    domain: str
    sample_id: int

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")

    def image_tensor(self) -> np.ndarray:
        """3 x H x W float32 in [0, 1]."""
        return np.ascontiguousarray(self.rgb.transpose(2, 0, 1), dtype=np.float32) / np.float32(255)

    def is_unlabeled(self) -> bool:
        return bool(np.all(self.labels == IGNORE))

    def equals(self, other: "ImageSample") -> bool:
        return (self.sample_id == other.sample_id and self.domain == other.domain
                and np.array_equal(self.rgb, other.rgb) and np.array_equal(self.labels, other.labels))


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image_tensor() for s in samples])


def stack_labels(samples) -> np.ndarray:
    return np.stack([s.labels for s in samples])


# --------------------------------------------------------------------------
# scene generation
# --------------------------------------------------------------------------

def _shape_mask(kind: int, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == CIRCLE:
        r = rng.uniform(6, 13)
        cy, cx = rng.uniform(r, size - r, size=2)
        return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    if kind == RECTANGLE:
        h, w = rng.integers(8, 25, size=2)
        top = rng.integers(0, size - h + 1)
        left = rng.integers(0, size - w + 1)
        return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    # isosceles triangle with a horizontal base, apex up or down
    base = rng.uniform(12, 28)
    height = rng.uniform(10, 24)
    cx = rng.uniform(base / 2, size - base / 2)
    top = rng.uniform(0, size - height)
    t = (yy + 0.5 - top) / height
    if rng.random() < 0.5:
        t = 1 - t
    half = t * base / 2
    return (t >= 0) & (t <= 1) & (np.abs(xx + 0.5 - cx) <= half)


def _layout(rng: np.random.Generator, size: int) -> np.ndarray:
    labels = np.zeros((size, size), dtype=np.uint8)
    band_h = int(rng.integers(5, 11))
    band_top = int(rng.integers(0, size - band_h + 1))
    labels[band_top:band_top + band_h] = STRIPE
    occupied = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        kind = int(rng.integers(CIRCLE, TRIANGLE + 1))
        for _attempt in range(20):
            mask = _shape_mask(kind, rng, size)
            if mask.sum() >= 20 and not np.any(mask & occupied):
                occupied |= mask
                labels[mask] = kind
                break
    return labels


def _render(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = labels.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    for cls, base in _PALETTE.items():
        color = np.asarray(base) + rng.uniform(-0.08, 0.08, size=3)
        img[labels == cls] = color
    # low-frequency shading plus a fine texture on the background
    phase = rng.uniform(0, 2 * np.pi, size=2)
    shade = 0.06 * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 2)) + phase[0]) \
        + 0.06 * np.cos(2 * np.pi * (yy * rng.uniform(0.5, 2)) + phase[1])
    img += shade[..., None]
    texture = rng.normal(0, 0.04, size=(size, size, 1))
    img += texture * (labels == BACKGROUND)[..., None]
    return np.clip(img, 0, 1)


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + h, dx:dx + w]
    return acc / 9


def apply_style(img: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """Float image in [0,1] -> styled uint8 image."""
    out = img * np.asarray(style.gain) + np.asarray(style.offset)
    if style.blur_enabled:
        out = _box_blur(out)
    if style.noise_sigma > 0:
        out = out + rng.normal(0, style.noise_sigma, size=out.shape)
    if style.saturation_scale != 1.0:
        gray = out.mean(axis=-1, keepdims=True)
        out = gray + style.saturation_scale * (out - gray)
    return np.rint(np.clip(out, 0, 1) * 255).astype(np.uint8)


def generate_scene(seed: int, style: DomainStyle = SOURCE_STYLE, size: int = IMAGE_SIZE,
                   num_classes: int = NUM_CLASSES, domain: str = "source",
                   sample_id: int = 0) -> ImageSample:
    if num_classes != NUM_CLASSES:
        raise ValueError(f"the scene generator produces exactly {NUM_CLASSES} classes")
    layout_rng = np.random.default_rng([seed, 0])
    labels = _layout(layout_rng, size)
    base = _render(labels, layout_rng)
    rgb = apply_style(base, style, np.random.default_rng([seed, 1]))
    return ImageSample(rgb=rgb, labels=labels, domain=domain, sample_id=sample_id)


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    n_source: int = 2000
    n_target: int = 20
    n_unlabeled: int = 500
    n_val: int = 200
    seed: int = 0
    source_id_start: int = 0
    target_id_start: int = 1_000_000
    source_style: DomainStyle = SOURCE_STYLE
    target_style: DomainStyle = TARGET_STYLE

    @property
    def n_target_pool(self) -> int:
        return self.n_target + self.n_unlabeled + self.n_val


@dataclass
class DatasetBundle:
    source_labeled: list[ImageSample]
    target_labeled: list[ImageSample]
    target_unlabeled: list[ImageSample]
    target_val: list[ImageSample]
    num_classes: int = NUM_CLASSES
    config: DatasetConfig = field(default_factory=DatasetConfig)


def scene_seed(master_seed: int, sample_id: int) -> int:
    """64-bit per-sample seed; independent of generation order."""
    state = np.random.SeedSequence([master_seed, sample_id]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def make_sample(config: DatasetConfig, sample_id: int, domain: str) -> ImageSample:
    style = config.source_style if domain == "source" else config.target_style
    return generate_scene(scene_seed(config.seed, sample_id), style, domain=domain, sample_id=sample_id)


def regenerate_ground_truth(config: DatasetConfig, sample_id: int) -> np.ndarray:
    """Label map of a target sample, rebuilt from its seed (for evaluation only)."""
    return make_sample(config, sample_id, "target").labels


def build_splits(config: DatasetConfig) -> DatasetBundle:
    sizes = (config.n_source, config.n_target, config.n_unlabeled, config.n_val)
    if any(s <= 0 for s in sizes):
        raise ValueError(f"split sizes must be positive, got {sizes}")
    src_ids = range(config.source_id_start, config.source_id_start + config.n_source)
    tgt_ids = range(config.target_id_start, config.target_id_start + config.n_target_pool)
    if src_ids.start < tgt_ids.stop and tgt_ids.start < src_ids.stop:
        raise ValueError(f"source ids {src_ids} overlap target ids {tgt_ids}")

    order = np.random.default_rng(config.seed).permutation(np.asarray(tgt_ids, dtype=np.int64))
    lab_ids = sorted(order[:config.n_target].tolist())
    unl_ids = sorted(order[config.n_target:config.n_target + config.n_unlabeled].tolist())
    val_ids = sorted(order[config.n_target + config.n_unlabeled:].tolist())

    source = [make_sample(config, i, "source") for i in src_ids]
    labeled = [make_sample(config, i, "target") for i in lab_ids]
    unlabeled = []
    for i in unl_ids:
        s = make_sample(config, i, "target")
        s.labels = np.full_like(s.labels, IGNORE)
        unlabeled.append(s)
    val = [make_sample(config, i, "target") for i in val_ids]
    return DatasetBundle(source, labeled, unlabeled, val, NUM_CLASSES, config)


def domain_gap(source: list[ImageSample], target: list[ImageSample]) -> float:
    """Mean over RGB channels of |mean_source - mean_target|, in [0, 1] units."""
    ms = np.mean([s.rgb.reshape(-1, 3).mean(axis=0) for s in source], axis=0)
    mt = np.mean([s.rgb.reshape(-1, 3).mean(axis=0) for s in target], axis=0)
    return float(np.mean(np.abs(ms - mt)) / 255)


# --------------------------------------------------------------------------
# DMX1 files
# --------------------------------------------------------------------------

DMX_MAGIC = b"DMX1"
DMX_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_MAX_SIDE = 1 << 14


class DatasetFormatError(ValueError):
    code = "format"


class BadMagicError(DatasetFormatError):
    code = "bad_magic"


class TruncatedFileError(DatasetFormatError):
    code = "truncated"


class DimensionOverflowError(DatasetFormatError):
    code = "dimension_overflow"


def write_dataset(samples: list[ImageSample], path, num_classes: int = NUM_CLASSES) -> None:
    if samples:
        h, w = samples[0].labels.shape
    else:
        h = w = IMAGE_SIZE
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DMX_MAGIC, DMX_VERSION, len(samples), h, w, num_classes))
        for s in samples:
            if s.rgb.shape != (h, w, 3) or s.labels.shape != (h, w):
                raise ValueError(f"sample {s.sample_id} does not have size {h}x{w}")
            f.write(struct.pack("<QB", s.sample_id, DOMAINS.index(s.domain)))
            f.write(np.ascontiguousarray(s.rgb, dtype=np.uint8).tobytes())
            f.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())


def read_dataset(path) -> list[ImageSample]:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != DMX_MAGIC:
        raise BadMagicError(f"{path}: not a DMX1 file")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, count, h, w, num_classes = _HEADER.unpack_from(blob)
    if version != DMX_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    if not (0 < h <= _MAX_SIDE and 0 < w <= _MAX_SIDE) or num_classes > IGNORE:
        raise DimensionOverflowError(f"{path}: implausible dimensions {h}x{w}, {num_classes} classes")
    rec = 9 + 4 * h * w
    if _HEADER.size + count * rec > len(blob):
        raise TruncatedFileError(f"{path}: header declares {count} samples, payload holds "
                                 f"{(len(blob) - _HEADER.size) // rec}")
    samples = []
    pos = _HEADER.size
    for _ in range(count):
        sid, tag = struct.unpack_from("<QB", blob, pos)
        pos += 9
        if tag >= len(DOMAINS):
            raise DatasetFormatError(f"{path}: bad domain tag {tag}")
        rgb = np.frombuffer(blob, np.uint8, 3 * h * w, pos).reshape(h, w, 3).copy()
        pos += 3 * h * w
        labels = np.frombuffer(blob, np.uint8, h * w, pos).reshape(h, w).copy()
        pos += h * w
        samples.append(ImageSample(rgb, labels, DOMAINS[tag], sid))
    return samples


SPLIT_FILES = {
    "source_labeled": "source_labeled.dmx",
    "target_labeled": "target_labeled.dmx",
    "target_unlabeled": "target_unlabeled.dmx",
    "target_val": "target_val.dmx",
}


def save_bundle(bundle: DatasetBundle, directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, name in SPLIT_FILES.items():
        paths[split] = directory / name
        write_dataset(getattr(bundle, split), paths[split], bundle.num_classes)
    return paths


def load_bundle(directory, config: DatasetConfig | None = None) -> DatasetBundle:
    directory = Path(directory)
    splits = {split: read_dataset(directory / name) for split, name in SPLIT_FILES.items()}
    ids = [{s.sample_id for s in splits[k]} for k in ("target_labeled", "target_unlabeled", "target_val")]
    if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
        raise DatasetFormatError(f"{directory}: target splits share sample ids")
    return DatasetBundle(num_classes=NUM_CLASSES, config=config or DatasetConfig(), **splits)
