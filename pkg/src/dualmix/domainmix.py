"""Cross-domain data mixing and LAB colour-statistics transfer.

Region-level mixing pastes a rectangle of a source image (and its labels)
onto the same location of a target image.  Sample-level mixing just draws one
image from each domain for the same optimisation step.  The LAB transfer
recolours a source image so its per-channel LAB mean/std match the target
domain's.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .synthdata import ImageSample

# --------------------------------------------------------------------------
# region-level mixing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BinaryMask:
    """1 where the target is kept, 0 inside the pasted source rectangle."""

    height: int
    width: int
    rect: tuple[int, int, int, int]  # top, left, rect height, rect width

    def __post_init__(self):
        top, left, h, w = self.rect
        if h < 0 or w < 0 or top < 0 or left < 0 or top + h > self.height or left + w > self.width:
            raise ValueError(f"rectangle {self.rect} does not fit in {self.height}x{self.width}")

    @property
    def values(self) -> np.ndarray:
        m = np.ones((self.height, self.width), dtype=np.uint8)
        top, left, h, w = self.rect
        m[top:top + h, left:left + w] = 0
        return m


def sample_mask(rng_seed, height: int, width: int,
                side_ratio_range: tuple[float, float] = (0.25, 0.75)) -> BinaryMask:
    if height < 4 or width < 4:
        raise ValueError("mask needs H, W >= 4")
    lo, hi = side_ratio_range
    rng = np.random.default_rng(rng_seed)

    def side(n):
        s = int(round(rng.uniform(lo, hi) * n))
        return min(max(s, max(1, math.ceil(lo * n))), max(1, math.floor(hi * n)))

    h, w = side(height), side(width)
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return BinaryMask(height, width, (top, left, h, w))


@dataclass
class MixedSample:
    rgb: np.ndarray
    labels: np.ndarray
    from_target: np.ndarray  # bool H x W provenance

    def as_sample(self, sample_id: int = -1) -> ImageSample:
        return ImageSample(self.rgb, self.labels, "target", sample_id)

    def image_tensor(self) -> np.ndarray:
        return np.ascontiguousarray(self.rgb.transpose(2, 0, 1), dtype=np.float32) / np.float32(255)


def region_mix(target: ImageSample, source: ImageSample, mask: BinaryMask) -> MixedSample:
    """x = M*x_t + (1-M)*x_s, labels composed with the same M."""
    if target.labels.shape != source.labels.shape:
        raise ValueError(f"size mismatch: {target.labels.shape} vs {source.labels.shape}")
    if target.labels.shape != (mask.height, mask.width):
        raise ValueError("mask size does not match the images")
    keep = mask.values.astype(bool)
    rgb = np.where(keep[..., None], target.rgb, source.rgb)
    labels = np.where(keep, target.labels, source.labels)
    return MixedSample(rgb, labels, keep)


def make_sample_level_pair(rng_seed, source_set: Sequence[ImageSample],
                           target_set: Sequence[ImageSample]) -> tuple[ImageSample, ImageSample]:
    if not source_set or not target_set:
        raise ValueError("both sets must be non-empty")
    rng = np.random.default_rng(rng_seed)
    i = int(rng.integers(len(source_set)))
    j = int(rng.integers(len(target_set)))
    return source_set[i], target_set[j]


# --------------------------------------------------------------------------
# CIELAB
# --------------------------------------------------------------------------

_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
D65_WHITE = _RGB_TO_XYZ.sum(axis=1)  # (0.95047, 1.0, 1.08883)
_EPS = 216 / 24389
_KAPPA = 24389 / 27


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def rgb_to_lab(rgb) -> np.ndarray:
    """RGB in [0, 255] (any leading shape, last axis 3) -> float64 L*a*b*."""
    lin = _srgb_to_linear(np.asarray(rgb, dtype=np.float64) / 255)
    xyz = lin @ _RGB_TO_XYZ.T / D65_WHITE
    f = np.where(xyz > _EPS, np.cbrt(xyz), (_KAPPA * xyz + 16) / 116)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_rgb(lab) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; float RGB clamped to [0, 255]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f ** 3 > _EPS, f ** 3, (116 * f - 16) / _KAPPA) * D65_WHITE
    rgb = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T) * 255
    return np.clip(rgb, 0, 255)


@dataclass(frozen=True)
class LabStats:
    mean: np.ndarray  # (L, a, b)
    std: np.ndarray
    count: int


def _stats_of(lab: np.ndarray) -> LabStats:
    flat = lab.reshape(-1, 3)
    return LabStats(flat.mean(axis=0), flat.std(axis=0), flat.shape[0])


def compute_lab_stats(images) -> LabStats:
    """Pooled per-channel mean and population std over every pixel given."""
    images = list(images)
    if not images or sum(np.asarray(im).size for im in images) == 0:
        raise ValueError("need at least one pixel")
    n = 0
    s1 = np.zeros(3)
    s2 = np.zeros(3)
    for im in images:
        flat = rgb_to_lab(im).reshape(-1, 3)
        n += flat.shape[0]
        s1 += flat.sum(axis=0)
    mean = s1 / n
    for im in images:
        flat = rgb_to_lab(im).reshape(-1, 3)
        s2 += ((flat - mean) ** 2).sum(axis=0)
    return LabStats(mean, np.sqrt(s2 / n), n)


def transfer_lab(lab: np.ndarray, target: LabStats, min_std: float = 1e-6) -> np.ndarray:
    """Match the per-channel LAB mean/std of ``lab`` to ``target``."""
    own = _stats_of(lab)
    scale = np.where(own.std < min_std, 1.0, target.std / np.where(own.std < min_std, 1.0, own.std))
    return (lab - own.mean) * scale + target.mean


def lab_style_transfer(image: np.ndarray, target_stats: LabStats) -> np.ndarray:
    """uint8 RGB image recoloured towards ``target_stats``."""
    lab = transfer_lab(rgb_to_lab(image), target_stats)
    return np.rint(lab_to_rgb(lab)).astype(np.uint8)


def style_transfer_samples(samples: Sequence[ImageSample], target_stats: LabStats) -> list[ImageSample]:
    return [ImageSample(lab_style_transfer(s.rgb, target_stats), s.labels, s.domain, s.sample_id)
            for s in samples]
