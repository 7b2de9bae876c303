"""Central finite-difference gradients for checking the hand-written backprop."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .model import NetSpec, Network, entropy_loss, grad_affine, init_network
from .norm import ChannelStats
from .rng import keyed_rng


def numerical_gradient(f: Callable[[], float], param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        fp = f()
        flat[j] = old - h
        fm = f()
        flat[j] = old
        gflat[j] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


class FrozenStatsNorm:
    """Normalization that replays fixed per-sample statistics.

    With the statistics pinned, the loss depends on the affine parameters
    exactly as the analytic gradient assumes, so it serves as the
    finite-difference reference.
    """

    def __init__(self, mu, denom, alpha, beta):
        self.mu, self.denom = mu, denom
        self.alpha, self.beta = alpha, beta

    def forward(self, F, views=None):
        xhat = (F - self.mu[:, :, None, None]) / self.denom[:, :, None, None]
        return self.alpha[None, :, None, None] * xhat + self.beta[None, :, None, None], None


def check_affine_gradients(net: Network, batch, norms, views=None, h: float = 1e-5) -> float:
    """Max relative error between analytic and finite-difference affine gradients."""
    batch = np.asarray(batch, dtype=np.float64)
    analytic = grad_affine(net, batch, norms, views)
    pinned = []
    for slot, norm in enumerate(norms):
        mu, denom = norm.last_statistics
        aff = net.affine(slot)
        pinned.append(FrozenStatsNorm(mu, denom, aff.alpha, aff.beta))
    worst = 0.0
    for name in net.affine_names():
        num = numerical_gradient(lambda: entropy_loss(net.forward(batch, pinned)), net.params[name], h)
        worst = max(worst, max_relative_error(analytic[name], num))
    return worst


def random_small_net(seed: int, widths=(3, 4), n_classes: int = 3, image_size: int = 6) -> Network:
    """Small random network with random training statistics and affine parameters."""
    net = init_network(NetSpec(widths=tuple(widths), n_classes=n_classes, image_size=image_size),
                       seed)
    rng = keyed_rng(seed, "gradcheck-net")
    stats = []
    for slot, st in enumerate(net.training_stats):
        stats.append(ChannelStats(rng.normal(0.0, 0.3, st.mean.shape),
                                  rng.uniform(0.5, 2.0, st.var.shape)))
        aff = net.affine(slot)
        aff.alpha[...] = rng.uniform(0.5, 1.5, aff.alpha.shape)
        aff.beta[...] = rng.normal(0.0, 0.3, aff.beta.shape)
    net.training_stats = stats
    net.stats_valid = True
    return net
