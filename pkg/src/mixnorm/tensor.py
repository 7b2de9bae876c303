"""Dense array helpers used by the normalization math.

Tensors are plain ``float64`` numpy arrays. The helpers here only add the
validation and axis bookkeeping the normalization layers rely on.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .exceptions import UsageError


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a finite float64 array, optionally checking its rank."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise UsageError(f"{name} must have rank {ndim}, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise UsageError(f"{name} has an empty extent: shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise UsageError(f"{name} contains NaN or Inf")
    return arr


def _normalize_axes(axes: Iterable[int], ndim: int) -> tuple[int, ...]:
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise UsageError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise UsageError(f"duplicate axes in {tuple(axes)}")
    return tuple(sorted(out))


def reduce_mean(t: np.ndarray, axes: Iterable[int]) -> np.ndarray:
    """Arithmetic mean over ``axes``; reduced axes are removed."""
    t = np.asarray(t, dtype=np.float64)
    ax = _normalize_axes(axes, t.ndim)
    return t.mean(axis=ax)


def reduce_var(t: np.ndarray, mean: np.ndarray, axes: Iterable[int]) -> np.ndarray:
    """Population variance over ``axes`` given the matching ``reduce_mean``."""
    t = np.asarray(t, dtype=np.float64)
    ax = _normalize_axes(axes, t.ndim)
    kept = tuple(d for i, d in enumerate(t.shape) if i not in ax)
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != kept:
        raise UsageError(f"mean shape {mean.shape} does not match reduced shape {kept}")
    centered = t - np.expand_dims(mean, ax)
    return np.mean(centered * centered, axis=ax)


def affine_map(t: np.ndarray, scale, shift, channel_axis: int) -> np.ndarray:
    """Per-channel ``scale * t + shift`` broadcast along ``channel_axis``."""
    t = np.asarray(t, dtype=np.float64)
    (axis,) = _normalize_axes([channel_axis], t.ndim)
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    n = t.shape[axis]
    if scale.shape != (n,) or shift.shape != (n,):
        raise UsageError(
            f"scale/shift must have length {n}, got {scale.shape} and {shift.shape}"
        )
    bshape = [1] * t.ndim
    bshape[axis] = n
    return scale.reshape(bshape) * t + shift.reshape(bshape)
