"""Synthetic corruption benchmark.

Ten procedurally rendered texture classes on ``3 x 16 x 16`` images, six
corruption kinds with five severities each, and stream builders for the
single-corruption and mixed-corruption protocols.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .exceptions import UsageError
from .model import decode_array, encode_array
from .rng import keyed_rng

IMAGE_SIZE = 16
N_CLASSES = 10
DATA_FORMAT = "mixnorm-dataset"
DATA_FORMAT_VERSION = 1

# severity 1..5 -> corruption parameter
SEVERITY_SCHEDULE = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),   # noise std
    "impulse_noise": (0.01, 0.02, 0.03, 0.045, 0.06),   # fraction of salt/pepper pixels
    "blur": (0.4, 0.55, 0.7, 0.85, 1.0),                # gaussian sigma (pixels)
    "contrast": (0.9, 0.8, 0.7, 0.6, 0.5),              # contrast factor
    "brightness": (0.03, 0.06, 0.09, 0.12, 0.15),       # additive offset
    "pixelate": (14, 12, 11, 10, 8),                    # intermediate resolution
}
CORRUPTIONS = tuple(sorted(SEVERITY_SCHEDULE))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # N x 3 x 16 x 16, values in [0, 1]
    labels: np.ndarray  # N ints in [0, K)

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise UsageError("dataset needs N x C x H x W images and N labels")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)


def _grid():
    c = np.arange(IMAGE_SIZE, dtype=np.float64)
    return np.meshgrid(c, c, indexing="ij")


def _stripes(u, period, phase, sharp=3.0):
    return 1.0 / (1.0 + np.exp(-sharp * np.sin(2 * np.pi * u / period + phase)))


def _render_pattern(k: int, rng: np.random.Generator) -> np.ndarray:
    """Grayscale pattern in [0, 1] for class ``k``."""
    yy, xx = _grid()
    phase = rng.uniform(0, 2 * np.pi)
    cy, cx = rng.uniform(5, 11, size=2)
    period = rng.uniform(5.5, 6.5)
    if k == 0:
        return _stripes(yy, period, phase)
    if k == 1:
        return _stripes(xx, period, phase)
    if k == 2:
        return _stripes((xx + yy) / np.sqrt(2), period, phase)
    if k == 3:
        return _stripes((xx - yy) / np.sqrt(2), period, phase)
    if k == 4:
        cell = period / 2 + 0.5
        a = np.sin(np.pi * (yy + rng.uniform(0, 4)) / cell)
        b = np.sin(np.pi * (xx + rng.uniform(0, 4)) / cell)
        return 1.0 / (1.0 + np.exp(-4.0 * a * b))
    if k == 5:
        # lattice of soft dots
        oy, ox = rng.uniform(0, period, size=2)
        dy = (yy + oy) % period - period / 2
        dx = (xx + ox) % period - period / 2
        return np.exp(-(dy ** 2 + dx ** 2) / 2.0)
    if k == 6:
        # thin grid lines along both axes
        gy = np.cos(2 * np.pi * yy / period + phase)
        gx = np.cos(2 * np.pi * xx / period + rng.uniform(0, 2 * np.pi))
        return np.clip(np.exp(3.0 * (gy - 1)) + np.exp(3.0 * (gx - 1)), 0.0, 1.0)
    if k == 7:
        return _stripes(np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2), period, phase)
    if k == 8:
        # smooth random cloud
        field = gaussian_filter(rng.normal(size=(IMAGE_SIZE, IMAGE_SIZE)), 1.5, mode="wrap")
        return 1.0 / (1.0 + np.exp(-3.0 * field / field.std()))
    if k == 9:
        # zigzag stripes running horizontally
        tooth = period * 1.3
        tri = np.abs((xx + rng.uniform(0, tooth)) % tooth - tooth / 2)
        return _stripes(yy + 1.2 * tri, period, phase)
    raise UsageError(f"class index {k} out of range")


def _hue_to_rgb(h: float) -> np.ndarray:
    h6 = (h % 1.0) * 6.0
    r = np.clip(abs(h6 - 3.0) - 1.0, 0, 1)
    g = np.clip(2.0 - abs(h6 - 2.0), 0, 1)
    b = np.clip(2.0 - abs(h6 - 4.0), 0, 1)
    return np.array([r, g, b])


def render_image(k: int, rng: np.random.Generator) -> np.ndarray:
    """Class-``k`` pattern in a random hue over a gray background.

    Background level and pattern amplitude are jittered per sample so the
    class is carried by the pattern rather than absolute intensity.
    """
    pattern = _render_pattern(k, rng)
    bg = np.full(3, rng.uniform(0.05, 0.2))
    amp = rng.uniform(0.45, 0.8)
    fg = bg + amp * (0.35 + 0.65 * _hue_to_rgb(rng.uniform(0, 1)))
    img = bg[:, None, None] + (fg - bg)[:, None, None] * pattern[None]
    return np.clip(img, 0.0, 1.0)


def generate_source_dataset(seed: int, n_per_class: int, n_classes: int = N_CLASSES,
                            split: str = "train") -> LabeledDataset:
    """Balanced, shuffled dataset of ``n_per_class`` images per class.

    ``split`` selects an independent random stream so train and held-out
    splits rendered from the same seed never share images.
    """
    if n_per_class < 1:
        raise UsageError(f"n_per_class must be >= 1, got {n_per_class}")
    if not 1 <= n_classes <= N_CLASSES:
        raise UsageError(f"n_classes must lie in 1..{N_CLASSES}")
    images, labels = [], []
    for k in range(n_classes):
        for j in range(n_per_class):
            images.append(render_image(k, keyed_rng(seed, f"render/{split}", k, j)))
            labels.append(k)
    order = keyed_rng(seed, f"order/{split}").permutation(len(labels))
    return LabeledDataset(np.stack(images)[order], np.asarray(labels)[order])


def save_dataset(ds: LabeledDataset, path) -> None:
    doc = {"format": DATA_FORMAT, "format_version": DATA_FORMAT_VERSION,
           "images": encode_array(ds.images), "labels": ds.labels.tolist()}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_dataset(path) -> LabeledDataset:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read dataset file {path}: {exc}") from exc
    if doc.get("format") != DATA_FORMAT or doc.get("format_version") != DATA_FORMAT_VERSION:
        raise UsageError(f"{path} is not a version {DATA_FORMAT_VERSION} dataset file")
    return LabeledDataset(decode_array(doc["images"]), np.asarray(doc["labels"]))


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_SCHEDULE:
            raise UsageError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTIONS}")
        if not 1 <= self.severity <= 5:
            raise UsageError(f"severity must lie in 1..5, got {self.severity}")

    @property
    def parameter(self):
        return SEVERITY_SCHEDULE[self.kind][self.severity - 1]


def _resample(img: np.ndarray, out: int, order: int) -> np.ndarray:
    C, H, W = img.shape
    ys = (np.arange(out) + 0.5) * (H / out) - 0.5
    xs = (np.arange(out) + 0.5) * (W / out) - 0.5
    grid = np.stack(np.meshgrid(ys, xs, indexing="ij"))
    return np.stack([map_coordinates(img[c], grid, order=order, mode="nearest") for c in range(C)])


def gaussian_noise(img, std, rng):
    return img + rng.normal(0.0, std, img.shape)


def impulse_noise(img, fraction, rng):
    out = img.copy()
    hit = rng.random(img.shape) < fraction
    salt = rng.random(img.shape) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def blur(img, sigma, rng=None):
    return gaussian_filter(img, sigma=(0, sigma, sigma), mode="reflect")


def contrast(img, factor, rng=None):
    mean = img.mean(axis=(0, 1, 2), keepdims=True)
    return (img - mean) * factor + mean


def brightness(img, delta, rng=None):
    return img + delta


def pixelate(img, size, rng=None):
    size = int(size)
    if size >= img.shape[-1]:
        return img.copy()
    small = _resample(img, size, order=1)
    return _resample(small, img.shape[-1], order=0)


_CORRUPTION_FNS = {
    "gaussian_noise": gaussian_noise,
    "impulse_noise": impulse_noise,
    "blur": blur,
    "contrast": contrast,
    "brightness": brightness,
    "pixelate": pixelate,
}


def apply_corruption(img, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Corrupt one image and clamp the result to ``[0, 1]``."""
    img = np.asarray(img, dtype=np.float64)
    return np.clip(_CORRUPTION_FNS[spec.kind](img, spec.parameter, rng), 0.0, 1.0)


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamMode:
    """``single:<kind>:<severity>``, ``mixed:<severity>`` or ``clean``."""

    kind: str
    corruption: Optional[str] = None
    severity: int = 5

    def __post_init__(self):
        if self.kind == "single":
            CorruptionSpec(self.corruption, self.severity)
        elif self.kind == "mixed":
            CorruptionSpec(CORRUPTIONS[0], self.severity)
        elif self.kind != "clean":
            raise UsageError(f"unknown stream mode {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "StreamMode":
        parts = text.strip().split(":")
        try:
            if parts[0] == "single" and len(parts) == 3:
                return cls("single", parts[1], int(parts[2]))
            if parts[0] == "mixed" and len(parts) == 2:
                return cls("mixed", None, int(parts[1]))
            if parts == ["clean"]:
                return cls("clean")
        except ValueError as exc:
            raise UsageError(f"bad stream descriptor {text!r}: {exc}") from exc
        raise UsageError(
            f"bad stream descriptor {text!r}; expected single:<kind>:<sev>, mixed:<sev> or clean"
        )

    def __str__(self):
        if self.kind == "single":
            return f"single:{self.corruption}:{self.severity}"
        if self.kind == "mixed":
            return f"mixed:{self.severity}"
        return "clean"


class StreamSample:
    """One test item. The label stays hidden until a prediction is handed in."""

    __slots__ = ("image", "kind", "severity", "index", "source_index", "_label")

    def __init__(self, image, kind, severity, index, source_index, label):
        self.image = image
        self.kind = kind
        self.severity = severity
        self.index = index
        self.source_index = source_index
        self._label = int(label)

    def reveal_label(self, prediction: int) -> int:
        """Return the true label in exchange for a committed prediction."""
        if prediction is None:
            raise UsageError("a prediction must be committed before the label is revealed")
        return self._label


class SampleStream:
    """Ordered, immutable sequence of corrupted test samples."""

    def __init__(self, samples, mode: StreamMode, seed: int):
        self._samples = tuple(samples)
        self.mode = mode
        self.seed = seed

    def __iter__(self) -> Iterator[StreamSample]:
        return iter(self._samples)

    def __len__(self):
        return len(self._samples)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(sorted({s.kind for s in self._samples}))


def build_stream(dataset: LabeledDataset, mode: StreamMode | str, seed: int) -> SampleStream:
    """Corrupt ``dataset`` for one protocol.

    ``single`` keeps dataset order; ``mixed`` creates one corrupted copy of
    every sample for every corruption kind and shuffles the result.
    """
    if isinstance(mode, str):
        mode = StreamMode.parse(mode)
    if len(dataset) == 0:
        raise UsageError("cannot build a stream from an empty dataset")
    if mode.kind == "clean":
        pairs = [(i, "clean") for i in range(len(dataset))]
    elif mode.kind == "single":
        pairs = [(i, mode.corruption) for i in range(len(dataset))]
    else:
        pairs = [(i, k) for i in range(len(dataset)) for k in CORRUPTIONS]
        order = keyed_rng(seed, "shuffle").permutation(len(pairs))
        pairs = [pairs[j] for j in order]
    samples = []
    for pos, (i, kind) in enumerate(pairs):
        img = dataset.images[i]
        if kind == "clean":
            out, sev = img.copy(), 0
        else:
            spec = CorruptionSpec(kind, mode.severity)
            out = apply_corruption(img, spec, keyed_rng(seed, "corrupt", i, CORRUPTIONS.index(kind)))
            sev = mode.severity
        out.setflags(write=False)
        samples.append(StreamSample(out, kind, sev, pos, i, dataset.labels[i]))
    return SampleStream(samples, mode, seed)
