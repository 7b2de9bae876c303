"""Spatial augmentations (random resized crop + horizontal flip)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .exceptions import UsageError
from .rng import keyed_rng
from .tensor import as_tensor


@dataclass(frozen=True)
class AugmentationConfig:
    n_views: int = 1
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_aspect: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 1:
            raise UsageError(f"n_views must be >= 1, got {self.n_views}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise UsageError(f"crop_scale must be a nonempty interval in (0, 1], got {self.crop_scale}")
        lo, hi = self.crop_aspect
        if not 0.0 < lo <= hi:
            raise UsageError(f"crop_aspect must be a nonempty positive interval, got {self.crop_aspect}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise UsageError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")


def _crop_box(H: int, W: int, cfg: AugmentationConfig, rng: np.random.Generator):
    area = H * W
    log_lo, log_hi = math.log(cfg.crop_aspect[0]), math.log(cfg.crop_aspect[1])
    for _ in range(10):
        target = area * rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 1 <= w <= W and 1 <= h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    return 0, 0, H, W


def resize_crop(img: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    """Bilinearly resample the box ``[top:top+h, left:left+w]`` back to full size."""
    C, H, W = img.shape
    ys = top + (np.arange(H) + 0.5) * (h / H) - 0.5
    xs = left + (np.arange(W) + 0.5) * (w / W) - 0.5
    ys = np.clip(ys, top, top + h - 1)
    xs = np.clip(xs, left, left + w - 1)
    grid = np.stack(np.meshgrid(ys, xs, indexing="ij"))
    return np.stack([map_coordinates(img[c], grid, order=1, mode="nearest") for c in range(C)])


def random_resized_crop(img, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    img = as_tensor(img, ndim=3, name="image")
    _, H, W = img.shape
    if H < 2 or W < 2:
        raise UsageError(f"image must be at least 2x2, got {H}x{W}")
    top, left, h, w = _crop_box(H, W, cfg, rng)
    if (top, left, h, w) == (0, 0, H, W):
        return img.copy()
    return resize_crop(img, top, left, h, w)


def random_flip(img, flip_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Reverse the last (width) axis with probability ``flip_prob``."""
    img = np.asarray(img, dtype=np.float64)
    # always draw so the stream position does not depend on flip_prob
    u = rng.random()
    if u < flip_prob:
        return img[..., ::-1].copy()
    return img.copy()


def make_views(img, cfg: AugmentationConfig, sample_index: int = 0) -> np.ndarray:
    """``n_views`` crop+flip views of ``img`` (the original is not included).

    View ``v`` of sample ``i`` always uses the generator keyed by
    ``(cfg.seed, i, v)``.
    """
    img = as_tensor(img, ndim=3, name="image")
    views = np.empty((cfg.n_views,) + img.shape)
    for v in range(cfg.n_views):
        rng = keyed_rng(cfg.seed, "augment", sample_index, v)
        views[v] = random_flip(random_resized_crop(img, cfg, rng), cfg.flip_prob, rng)
    return views
