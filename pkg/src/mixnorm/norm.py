"""Test-time normalization layers.

Every layer here normalizes a feature map ``F`` (``... x D x H x W``) as

    alpha * (F - mu) / (eps + sqrt(var)) + beta

and differs only in where ``(mu, var)`` come from:

* ``fixed_global``       -- statistics recorded during source training
* ``moving_global``      -- an EMA of per-sample statistics, started from the
  training statistics
* ``instance``           -- the sample's own spatial statistics
* ``augmentation_local`` -- statistics pooled over the sample and its views
* ``online_batch``       -- statistics of the current batch
* ``mixnorm``            -- convex mix of the moving global and local statistics,
  updated one sample at a time
* ``mixnormbn``          -- like ``mixnorm`` but the EMA is driven by batch
  statistics with a batch-size dependent rate

Note that ``eps`` sits outside the square root.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .exceptions import UsageError
from .tensor import as_tensor, reduce_mean, reduce_var

VARIANTS = ("instance", "augmentation_local", "fixed_global", "moving_global", "online_batch")
PER_SAMPLE_KINDS = ("instance", "augmentation_local", "fixed_global", "moving_global", "mixnorm")
KINDS = VARIANTS + ("mixnorm", "mixnormbn")


@dataclass
class ChannelStats:
    """Per-channel mean and (population) variance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.ndim != 1 or self.mean.shape != self.var.shape:
            raise UsageError(
                f"mean and var must be vectors of equal length, got {self.mean.shape} "
                f"and {self.var.shape}"
            )
        if np.any(self.var < 0):
            raise UsageError("variance must be nonnegative")

    def __len__(self):
        return self.mean.shape[0]

    def copy(self) -> "ChannelStats":
        return ChannelStats(self.mean.copy(), self.var.copy())


@dataclass
class AffineParams:
    """Per-channel scale ``alpha`` and shift ``beta`` plus the stabilizer ``eps``."""

    alpha: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.alpha.ndim != 1 or self.alpha.shape != self.beta.shape:
            raise UsageError("alpha and beta must be vectors of equal length")
        if not self.eps > 0:
            raise UsageError(f"eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class MixNormConfig:
    tau: float = 1e-3
    m: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise UsageError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 <= self.m <= 1.0:
            raise UsageError(f"m must lie in [0, 1], got {self.m}")


@dataclass(frozen=True)
class MixNormBNConfig:
    tau_max: float = 0.9
    m: float = 0.05
    tau_override: Optional[float] = None

    def __post_init__(self):
        if not self.tau_max > 0:
            raise UsageError(f"tau_max must be positive, got {self.tau_max}")
        if not 0.0 <= self.m <= 1.0:
            raise UsageError(f"m must lie in [0, 1], got {self.m}")
        if self.tau_override is not None and not 0.0 <= self.tau_override <= 1.0:
            raise UsageError(f"tau_override must lie in [0, 1], got {self.tau_override}")


Config = Union[MixNormConfig, MixNormBNConfig]


@dataclass
class MixNormState:
    """Mutable bookkeeping of one normalization layer during adaptation."""

    global_stats: ChannelStats
    affine: AffineParams
    config: Config = field(default_factory=MixNormConfig)
    step: int = 0
    affine_frozen: bool = False


def init_from_pretrained(bn_mean, bn_var, alpha, beta, eps, config: Config | None = None,
                         affine_frozen: bool = False) -> MixNormState:
    """Build a layer state from a pretrained batch-norm layer.

    The affine arrays are used as given (not copied) so an optimizer that
    updates them in place is seen by the layer.
    """
    stats = ChannelStats(np.array(bn_mean, dtype=np.float64), np.array(bn_var, dtype=np.float64))
    affine = AffineParams(alpha, beta, eps)
    if len(affine.alpha) != len(stats):
        raise UsageError(
            f"affine length {len(affine.alpha)} does not match statistics length {len(stats)}"
        )
    return MixNormState(stats, affine, config if config is not None else MixNormConfig(),
                        step=0, affine_frozen=affine_frozen)


def sample_stats(F) -> ChannelStats:
    """Spatial mean/variance of one ``D x H x W`` feature map."""
    F = as_tensor(F, ndim=3, name="feature map")
    mu = reduce_mean(F, (1, 2))
    return ChannelStats(mu, reduce_var(F, mu, (1, 2)))


def local_stats(views) -> ChannelStats:
    """Statistics pooled over every view and spatial position of ``Nv x D x H x W``."""
    views = as_tensor(views, ndim=4, name="views")
    mu = reduce_mean(views, (0, 2, 3))
    return ChannelStats(mu, reduce_var(views, mu, (0, 2, 3)))


def batch_stats(F) -> ChannelStats:
    """Statistics pooled over batch and space of ``B x D x H x W``."""
    F = as_tensor(F, ndim=4, name="batch")
    mu = reduce_mean(F, (0, 2, 3))
    return ChannelStats(mu, reduce_var(F, mu, (0, 2, 3)))


def ema_update(state: MixNormState, s: ChannelStats, tau: float) -> MixNormState:
    if not 0.0 <= tau <= 1.0:
        raise UsageError(f"tau must lie in [0, 1], got {tau}")
    g = state.global_stats
    if len(g) != len(s):
        raise UsageError(f"statistics length mismatch: {len(g)} vs {len(s)}")
    new = ChannelStats((1.0 - tau) * g.mean + tau * s.mean, (1.0 - tau) * g.var + tau * s.var)
    return replace(state, global_stats=new, step=state.step + 1)


def mix_stats(global_: ChannelStats, local: ChannelStats, m: float) -> ChannelStats:
    if not 0.0 <= m <= 1.0:
        raise UsageError(f"m must lie in [0, 1], got {m}")
    if len(global_) != len(local):
        raise UsageError(f"statistics length mismatch: {len(global_)} vs {len(local)}")
    return ChannelStats((1.0 - m) * global_.mean + m * local.mean,
                        (1.0 - m) * global_.var + m * local.var)


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    # vector of length D -> broadcastable against (..., D, H, W)
    return v.reshape((v.shape[0],) + (1, 1)) if ndim >= 3 else v


def normalize(F, mixed: ChannelStats, affine: AffineParams) -> np.ndarray:
    """``alpha * (F - mu) / (eps + sqrt(var)) + beta`` with channels on axis -3."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim < 3 or F.shape[-3] != len(mixed) or len(mixed) != len(affine.alpha):
        raise UsageError(
            f"channel mismatch: input {F.shape}, stats {len(mixed)}, affine {len(affine.alpha)}"
        )
    mu = _channel_view(mixed.mean, 3)
    denom = _channel_view(affine.eps + np.sqrt(mixed.var), 3)
    return _channel_view(affine.alpha, 3) * ((F - mu) / denom) + _channel_view(affine.beta, 3)


def adaptive_tau(batch_size: int, tau_max: float) -> float:
    """EMA rate ``tau_max * 10**(-3/B)`` clamped to ``[0, 1]``."""
    if batch_size < 1:
        raise UsageError(f"batch size must be >= 1, got {batch_size}")
    if not tau_max > 0:
        raise UsageError(f"tau_max must be positive, got {tau_max}")
    # dividing keeps the exact decimal anchors (0.9 / 10 == 0.09)
    tau = tau_max / 10.0 ** (3.0 / batch_size)
    return min(max(tau, 0.0), 1.0)


# ---------------------------------------------------------------------------
# per-sample and batch forwards
# ---------------------------------------------------------------------------

def _with_views(F: np.ndarray, views: Optional[np.ndarray]) -> np.ndarray:
    if views is None:
        return F[None]
    return np.concatenate([F[None], views], axis=0)


def _check_views(F: np.ndarray, views, batched: bool):
    if views is None:
        return None
    views = np.asarray(views, dtype=np.float64)
    if batched:
        ok = views.ndim == 5 and views.shape[0] == F.shape[0] and views.shape[2:] == F.shape[1:]
    else:
        ok = views.ndim == 4 and views.shape[1:] == F.shape
    if not ok or views.shape[-4] < 1:
        raise UsageError(f"views of shape {views.shape} do not match input {F.shape}")
    return views


def _sample_mixed(kind: str, state: MixNormState, F: np.ndarray,
                  views: Optional[np.ndarray]) -> tuple[ChannelStats, MixNormState]:
    """Normalization statistics for one ``D x H x W`` sample under a per-sample kind."""
    if kind == "fixed_global":
        return state.global_stats, state
    if kind == "instance":
        return sample_stats(F), state
    if kind == "augmentation_local":
        if views is None:
            raise UsageError("augmentation_local requires augmented views")
        return local_stats(_with_views(F, views)), state
    if kind == "moving_global":
        state = ema_update(state, sample_stats(F), state.config.tau)
        return state.global_stats, state
    if kind == "mixnorm":
        if views is None:
            raise UsageError("mixnorm requires augmented views")
        state = ema_update(state, sample_stats(F), state.config.tau)
        local = local_stats(_with_views(F, views))
        return mix_stats(state.global_stats, local, state.config.m), state
    raise UsageError(f"unknown per-sample normalization kind {kind!r}")


def mixnorm_forward(state: MixNormState, F, F_views):
    """One MixNorm step on a single sample.

    Updates the global EMA with the sample's statistics, mixes the updated
    global statistics with statistics pooled over the sample and its views,
    and normalizes the sample and every view with the mixed statistics.

    Returns ``(F_out, views_out, new_state)``.
    """
    F = as_tensor(F, ndim=3, name="feature map")
    views = _check_views(F, as_tensor(F_views, ndim=4, name="views"), batched=False)
    mixed, state = _sample_mixed("mixnorm", state, F, views)
    return normalize(F, mixed, state.affine), normalize(views, mixed, state.affine), state


def _mixnormbn_mixed(state: MixNormState, F: np.ndarray, views: Optional[np.ndarray]):
    cfg = state.config
    if not isinstance(cfg, MixNormBNConfig):
        raise UsageError("mixnormbn requires a MixNormBNConfig")
    B = F.shape[0]
    tau = cfg.tau_override if cfg.tau_override is not None else adaptive_tau(B, cfg.tau_max)
    state = ema_update(state, batch_stats(F), tau)
    pooled = F[:, None] if views is None else np.concatenate([F[:, None], views], axis=1)
    mu = reduce_mean(pooled, (0, 1, 3, 4))
    local = ChannelStats(mu, reduce_var(pooled, mu, (0, 1, 3, 4)))
    return mix_stats(state.global_stats, local, cfg.m), state


def mixnormbn_forward(state: MixNormState, F, F_views):
    """One MixNormBN step on a ``B x D x H x W`` batch with ``B x N x D x H x W`` views.

    Returns ``(F_out, views_out, new_state)``.
    """
    F = as_tensor(F, ndim=4, name="batch")
    views = _check_views(F, as_tensor(F_views, ndim=5, name="views"), batched=True)
    mixed, state = _mixnormbn_mixed(state, F, views)
    return normalize(F, mixed, state.affine), normalize(views, mixed, state.affine), state


def _batch_forward(kind: str, state: MixNormState, F: np.ndarray, views: Optional[np.ndarray]):
    """Shared batch path returning outputs plus the pieces needed for backprop.

    Returns ``(out, views_out, state, xhat, mu, denom)`` where ``xhat`` is the
    standardized input and ``mu``/``denom`` (``B x D``) are the mean and
    ``eps + sqrt(var)`` used for each sample.
    """
    B, D = F.shape[:2]
    if kind in PER_SAMPLE_KINDS:
        mus = np.empty((B, D))
        variances = np.empty((B, D))
        for b in range(B):
            mixed, state = _sample_mixed(kind, state, F[b], None if views is None else views[b])
            mus[b] = mixed.mean
            variances[b] = mixed.var
    elif kind in ("online_batch", "mixnormbn"):
        if kind == "online_batch":
            mixed = batch_stats(F)
        else:
            mixed, state = _mixnormbn_mixed(state, F, views)
        mus = np.broadcast_to(mixed.mean, (B, D))
        variances = np.broadcast_to(mixed.var, (B, D))
    else:
        raise UsageError(f"unknown normalization kind {kind!r}")

    aff = state.affine
    if len(aff.alpha) != D:
        raise UsageError(f"affine length {len(aff.alpha)} does not match {D} channels")
    denom = aff.eps + np.sqrt(variances)
    mu4, den4 = mus[:, :, None, None], denom[:, :, None, None]
    a4, b4 = aff.alpha[None, :, None, None], aff.beta[None, :, None, None]
    xhat = (F - mu4) / den4
    out = a4 * xhat + b4
    views_out = None
    if views is not None:
        views_out = a4[:, None] * ((views - mu4[:, None]) / den4[:, None]) + b4[:, None]
    return out, views_out, state, xhat, mus, denom


def normalize_variant(kind: str, state: MixNormState, F, views=None):
    """Normalize a ``B x D x H x W`` batch with one of the ablation variants.

    Per-sample kinds walk the batch in order (so ``moving_global`` performs
    ``B`` EMA steps); ``online_batch`` uses the statistics of the whole batch.
    Views only contribute to the ``augmentation_local`` statistics.
    Returns ``(F_out, new_state)``.
    """
    if kind not in VARIANTS:
        raise UsageError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
    F = as_tensor(F, ndim=4, name="batch")
    views = _check_views(F, views, batched=True)
    if kind == "augmentation_local" and views is None:
        raise UsageError("augmentation_local requires augmented views")
    out, _, state, *_ = _batch_forward(kind, state, F, views)
    return out, state


# ---------------------------------------------------------------------------
# stateful slot layers used by the network
# ---------------------------------------------------------------------------

class TestTimeNorm:
    """A network normalization slot running one normalization kind.

    ``forward`` caches the standardized originals so ``backward`` can return
    affine gradients. Statistics are treated as constants in the backward
    pass.
    """

    __test__ = False  # not a pytest class

    def __init__(self, kind: str, state: MixNormState):
        if kind not in KINDS:
            raise UsageError(f"unknown normalization kind {kind!r}")
        self.kind = kind
        self.state = state
        self._cache = None

    @property
    def needs_views(self) -> bool:
        return self.kind in ("augmentation_local", "mixnorm")

    def forward(self, F, views=None):
        F = np.asarray(F, dtype=np.float64)
        if self.needs_views and views is None:
            raise UsageError(f"{self.kind} requires augmented views")
        out, views_out, self.state, xhat, mu, denom = _batch_forward(self.kind, self.state, F, views)
        self._cache = (xhat, mu, denom)
        return out, views_out

    @property
    def last_statistics(self):
        """Per-sample ``(mu, eps + sqrt(var))`` used by the last forward, each ``B x D``."""
        _, mu, denom = self._cache
        return mu, denom

    def backward(self, grad_out):
        xhat, _, denom = self._cache
        alpha = self.state.affine.alpha
        dalpha = np.einsum("bdhw,bdhw->d", grad_out, xhat)
        dbeta = grad_out.sum(axis=(0, 2, 3))
        dx = grad_out * (alpha[None, :] / denom)[:, :, None, None]
        return dx, dalpha, dbeta


class TrainBatchNorm:
    """Train-mode batch norm for source training (stats are differentiated).

    Keeps running statistics with the given momentum. Uses the same
    ``eps + sqrt(var)`` denominator as the test-time layers so evaluation with
    the running statistics matches ``fixed_global`` exactly.
    """

    def __init__(self, affine: AffineParams, running: ChannelStats, momentum: float = 0.1):
        self.affine = affine
        self.running = running
        self.momentum = momentum
        self._cache = None

    def forward(self, F, views=None):
        F = np.asarray(F, dtype=np.float64)
        # no finiteness check here: a diverging run must reach the loss check
        mu = F.mean(axis=(0, 2, 3))
        stats = ChannelStats(mu, np.mean((F - mu[None, :, None, None]) ** 2, axis=(0, 2, 3)))
        s = np.sqrt(stats.var)
        denom = self.affine.eps + s
        xhat = (F - stats.mean[None, :, None, None]) / denom[None, :, None, None]
        out = self.affine.alpha[None, :, None, None] * xhat + self.affine.beta[None, :, None, None]
        mom = self.momentum
        self.running = ChannelStats((1 - mom) * self.running.mean + mom * stats.mean,
                                    (1 - mom) * self.running.var + mom * stats.var)
        self._cache = (xhat, s, denom)
        return out, None

    def backward(self, grad_out):
        xhat, s, denom = self._cache
        dalpha = np.einsum("bdhw,bdhw->d", grad_out, xhat)
        dbeta = grad_out.sum(axis=(0, 2, 3))
        g = grad_out * self.affine.alpha[None, :, None, None]
        g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
        gx_mean = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
        ratio = (denom / np.maximum(s, 1e-300))[None, :, None, None]
        dx = (g - g_mean - xhat * ratio * gx_mean) / denom[None, :, None, None]
        return dx, dalpha, dbeta
