"""Small convolutional classifier with pluggable normalization slots.

Backprop is written by hand. During adaptation only the normalization
affine parameters receive gradients and statistics are treated as constants;
during source training every parameter is trained through a train-mode
batch norm.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NumericError, UsageError
from .norm import (AffineParams, ChannelStats, Config, MixNormConfig, TestTimeNorm,
                   TrainBatchNorm, init_from_pretrained)
from .rng import keyed_rng

logger = logging.getLogger(__name__)

FORMAT_NAME = "mixnorm-model"
FORMAT_VERSION = 1
LAYER_KINDS = ("conv3x3", "dense", "relu", "avg_pool2", "global_avg_pool", "norm_slot")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise UsageError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class NetSpec:
    """Backbone ``conv-norm-relu`` blocks, global average pooling and a dense head.

    With ``pool`` a 2x2 average pool follows every block but the last.
    """

    widths: tuple[int, ...] = (16, 32)
    n_classes: int = 10
    in_channels: int = 3
    image_size: int = 16
    eps: float = 1e-5
    pool: bool = True

    def __post_init__(self):
        if not self.widths or min(self.widths) < 1:
            raise UsageError("widths must be a nonempty sequence of positive ints")
        n_pools = len(self.widths) - 1 if self.pool else 0
        if self.image_size % (2 ** n_pools):
            raise UsageError(f"image size {self.image_size} is not divisible by 2**{n_pools}")

    def layers(self) -> list[LayerSpec]:
        out = []
        c = self.in_channels
        for j, w in enumerate(self.widths):
            out += [LayerSpec("conv3x3", c, w), LayerSpec("norm_slot", w, w), LayerSpec("relu")]
            if self.pool and j < len(self.widths) - 1:
                out.append(LayerSpec("avg_pool2"))
            c = w
        out += [LayerSpec("global_avg_pool"), LayerSpec("dense", c, self.n_classes)]
        return out


@dataclass
class Network:
    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    training_stats: list[ChannelStats]
    input_shape: tuple[int, int, int]
    n_classes: int
    eps: float = 1e-5
    stats_valid: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._cache = None

    # -- structure ---------------------------------------------------------
    @property
    def norm_slots(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "norm_slot"]

    def affine(self, slot: int) -> AffineParams:
        """Affine parameters of the ``slot``-th norm layer, sharing the network arrays."""
        i = self.norm_slots[slot]
        return AffineParams(self.params[f"{i}.alpha"], self.params[f"{i}.beta"], self.eps)

    def affine_names(self) -> list[str]:
        return [f"{i}.{p}" for i in self.norm_slots for p in ("alpha", "beta")]

    def make_norms(self, kind: str, config: Config | None = None,
                   affine_frozen: bool = False) -> list[TestTimeNorm]:
        """Fresh test-time norm layers, one per slot, started from the training statistics."""
        norms = []
        for s, stats in enumerate(self.training_stats):
            aff = self.affine(s)
            state = init_from_pretrained(stats.mean, stats.var, aff.alpha, aff.beta, aff.eps,
                                         config if config is not None else MixNormConfig(),
                                         affine_frozen=affine_frozen)
            norms.append(TestTimeNorm(kind, state))
        return norms

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def apply_update(self, new_params: dict[str, np.ndarray]):
        """Write ``new_params`` into the existing arrays (keeps shared references alive)."""
        for name, value in new_params.items():
            self.params[name][...] = value

    # -- forward / backward ------------------------------------------------
    def forward(self, x, norms: Optional[Sequence] = None, views=None, keep_cache: bool = False):
        """Logits for the originals ``x`` (``B x C x H x W``).

        ``views`` (``B x N x C x H x W``) flow through the same layers and
        normalization statistics up to the last norm slot; predictions are
        made on the originals only.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != tuple(self.input_shape):
            raise UsageError(f"input shape {x.shape} does not match network input {self.input_shape}")
        B = x.shape[0]
        if norms is None:
            norms = self.make_norms("fixed_global")
        if len(norms) != len(self.norm_slots):
            raise UsageError(f"expected {len(self.norm_slots)} norm layers, got {len(norms)}")
        N = 0
        if views is not None:
            views = np.asarray(views, dtype=np.float64)
            if views.ndim != 5 or views.shape[0] != B or views.shape[2:] != x.shape[1:]:
                raise UsageError(f"views of shape {views.shape} do not match input {x.shape}")
            N = views.shape[1]
            z = np.concatenate([x, views.reshape((B * N,) + x.shape[1:])])
        else:
            z = x
        last_slot = self.norm_slots[-1] if self.norm_slots else -1
        caches = []
        slot = 0
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv3x3":
                cols = _im2col(z)
                w = self.params[f"{i}.weight"]
                z = _conv_from_cols(cols, w, self.params[f"{i}.bias"], z.shape)
                caches.append(cols)
            elif layer.kind == "norm_slot":
                orig = z[:B]
                v = z[B:].reshape((B, N) + z.shape[1:]) if N else None
                out, vout = norms[slot].forward(orig, v)
                slot += 1
                if N and i != last_slot:
                    z = np.concatenate([out, vout.reshape((B * N,) + out.shape[1:])])
                else:
                    z = out
                    N = 0
                caches.append(norms[slot - 1])
            elif layer.kind == "relu":
                caches.append(z[:B] > 0)
                z = np.maximum(z, 0.0)
            elif layer.kind == "avg_pool2":
                caches.append(None)
                n, C, H, W = z.shape
                z = z.reshape(n, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
            elif layer.kind == "global_avg_pool":
                caches.append(z.shape)
                z = z.mean(axis=(2, 3))
            elif layer.kind == "dense":
                caches.append(z[:B])
                z = z @ self.params[f"{i}.weight"].T + self.params[f"{i}.bias"]
        self._cache = (B, caches) if keep_cache else None
        return z[:B]

    def backward(self, dlogits, weight_grads: bool = False) -> dict[str, np.ndarray]:
        """Gradients of a loss given ``dloss/dlogits`` for the last cached forward.

        With ``weight_grads=False`` only the normalization affine gradients are
        returned (the only quantities adapted at test time).
        """
        if self._cache is None:
            raise UsageError("backward requires a forward pass with keep_cache=True")
        B, caches = self._cache
        g = np.asarray(dlogits, dtype=np.float64)
        grads = {}
        first_needed = self.norm_slots[0] if (self.norm_slots and not weight_grads) else 0
        for i in range(len(self.layers) - 1, -1, -1):
            layer, cache = self.layers[i], caches[i]
            if layer.kind == "dense":
                w = self.params[f"{i}.weight"]
                if weight_grads:
                    grads[f"{i}.weight"] = g.T @ cache
                    grads[f"{i}.bias"] = g.sum(axis=0)
                g = g @ w
            elif layer.kind == "global_avg_pool":
                _, C, H, W = cache
                g = np.broadcast_to(g[:, :, None, None] / (H * W), (B, C, H, W))
            elif layer.kind == "relu":
                g = g * cache
            elif layer.kind == "avg_pool2":
                g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
            elif layer.kind == "norm_slot":
                g, dalpha, dbeta = cache.backward(g)
                grads[f"{i}.alpha"] = dalpha
                grads[f"{i}.beta"] = dbeta
            elif layer.kind == "conv3x3":
                w = self.params[f"{i}.weight"]
                cols = cache[: B * g.shape[2] * g.shape[3]]
                gflat = g.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
                if weight_grads:
                    grads[f"{i}.weight"] = (gflat.T @ cols).reshape(w.shape)
                    grads[f"{i}.bias"] = gflat.sum(axis=0)
                if i > first_needed:
                    g = _col2im(gflat @ w.reshape(w.shape[0], -1), g.shape[0], w.shape[1],
                                g.shape[2], g.shape[3])
            if i <= first_needed and not weight_grads:
                break
        return grads


def _im2col(x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)


def _conv_from_cols(cols, w, b, in_shape):
    B, _, H, W = in_shape
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(B, H, W, w.shape[0]).transpose(0, 3, 1, 2)


def _col2im(dcols, B, C, H, W):
    d = dcols.reshape(B, H, W, C, 3, 3)
    dxp = np.zeros((B, C, H + 2, W + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + H, dj:dj + W] += d[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def init_network(spec: NetSpec, seed: int) -> Network:
    """He-initialized network with unit/zero affine parameters and zeroed running stats."""
    layers = spec.layers()
    params = {}
    stats = []
    for i, layer in enumerate(layers):
        rng = keyed_rng(seed, "init", i)
        if layer.kind == "conv3x3":
            fan_in = layer.n_in * 9
            params[f"{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                               (layer.n_out, layer.n_in, 3, 3))
            params[f"{i}.bias"] = np.zeros(layer.n_out)
        elif layer.kind == "dense":
            params[f"{i}.weight"] = rng.normal(0.0, np.sqrt(1.0 / layer.n_in),
                                               (layer.n_out, layer.n_in))
            params[f"{i}.bias"] = np.zeros(layer.n_out)
        elif layer.kind == "norm_slot":
            params[f"{i}.alpha"] = np.ones(layer.n_out)
            params[f"{i}.beta"] = np.zeros(layer.n_out)
            stats.append(ChannelStats(np.zeros(layer.n_out), np.zeros(layer.n_out)))
    return Network(layers, params, stats, (spec.in_channels, spec.image_size, spec.image_size),
                   spec.n_classes, eps=spec.eps, stats_valid=False)


def forward(net: Network, batch, norms=None, views=None) -> np.ndarray:
    return net.forward(batch, norms, views)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def entropy_loss(logits) -> float:
    """Mean over the batch of the softmax entropy (nats)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    logp = log_softmax(logits)
    return float(np.mean(-(np.exp(logp) * logp).sum(axis=1)))


def entropy_grad(logits) -> np.ndarray:
    """d(entropy_loss)/d(logits)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    logp = log_softmax(logits)
    p = np.exp(logp)
    H = -(p * logp).sum(axis=1, keepdims=True)
    return -p * (logp + H) / logits.shape[0]


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    B = logp.shape[0]
    idx = np.arange(B)
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    return float(-logp[idx, labels].mean()), grad / B


def grad_affine(net: Network, batch, norms, views=None) -> dict[str, np.ndarray]:
    """Entropy-loss gradients w.r.t. every norm-slot ``alpha``/``beta``."""
    logits = net.forward(batch, norms, views, keep_cache=True)
    return net.backward(entropy_grad(logits))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise UsageError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise UsageError(f"learning rate must be positive, got {self.learning_rate}")


@dataclass
class OptimizerState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, opt_state: OptimizerState | None,
                   cfg: OptimizerConfig, frozen: Sequence[str] = ()):
    """One SGD or Adam step on the parameters named in ``grads``.

    Returns ``(new_params, new_state)``; inputs are not modified. Parameters
    listed in ``frozen`` are left untouched.
    """
    state = copy.deepcopy(opt_state) if opt_state is not None else OptimizerState()
    state.t += 1
    new = {}
    lr = cfg.learning_rate
    for name, g in grads.items():
        if name in frozen:
            continue
        p = params[name]
        if p.shape != g.shape:
            raise UsageError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if cfg.kind == "sgd":
            new[name] = p - lr * g
            continue
        b1, b2 = cfg.betas
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1 ** state.t)
        vhat = v / (1 - b2 ** state.t)
        new[name] = p - lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return new, state


# ---------------------------------------------------------------------------
# source training
# ---------------------------------------------------------------------------

def accuracy(net: Network, images, labels, batch_size: int = 256) -> float:
    preds = predict(net, images, batch_size)
    return float(np.mean(preds == np.asarray(labels)))


def predict(net: Network, images, batch_size: int = 256) -> np.ndarray:
    """Eval-mode predictions using the recorded training statistics."""
    images = np.asarray(images, dtype=np.float64)
    norms = net.make_norms("fixed_global")
    out = [net.forward(images[s:s + batch_size], norms).argmax(axis=1)
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.empty(0, dtype=int)


def train_source(spec: NetSpec, images, labels, epochs: int, seed: int, batch_size: int = 64,
                 learning_rate: float = 3e-3, momentum: float = 0.1,
                 val_images=None, val_labels=None) -> Network:
    """Supervised training with cross-entropy and train-mode batch norm.

    Adam with a cosine learning-rate decay down to 1% of ``learning_rate``;
    the decay lets the running statistics, tracked with ``momentum``, settle
    on the final weights. They become the network's training statistics.
    With ``epochs == 0`` the statistics stay zero and the network is flagged
    as not usable for adaptation.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or len(images) != len(labels) or len(images) == 0:
        raise UsageError("need a nonempty B x C x H x W image array with one label per image")
    if epochs < 0:
        raise UsageError(f"epochs must be >= 0, got {epochs}")
    if not np.all(np.isfinite(images)):
        raise UsageError("training images contain NaN or Inf")
    net = init_network(spec, seed)
    if epochs == 0:
        return net
    bns = [TrainBatchNorm(net.affine(s), net.training_stats[s], momentum)
           for s in range(len(net.norm_slots))]
    cfg = OptimizerConfig("adam", learning_rate)
    opt = OptimizerState()
    n = len(images)
    total_steps = epochs * sum(1 for s in range(0, n, batch_size) if n - s >= 2)
    step = 0
    for epoch in range(epochs):
        order = keyed_rng(seed, "epoch", epoch).permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two samples
            logits = net.forward(images[idx], bns, keep_cache=True)
            loss, dlogits = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch} (loss={loss})")
            grads = net.backward(dlogits, weight_grads=True)
            decay = 0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            step += 1
            new, opt = optimizer_step(net.params, grads, opt,
                                      replace(cfg, learning_rate=learning_rate * decay))
            net.apply_update(new)
            total += loss * len(idx)
        logger.info("epoch %d: train loss %.4f", epoch, total / n)
    net.training_stats = [bn.running for bn in bns]
    net.stats_valid = True
    net.meta["train_accuracy"] = accuracy(net, images, labels)
    if val_images is not None:
        wrong = int(np.sum(predict(net, val_images) != np.asarray(val_labels)))
        net.meta["clean_error"] = wrong / len(val_labels)
    return net


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------

def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    return {"shape": list(a.shape), "values": a.ravel().tolist()}


def decode_array(d: dict, dtype=np.float64) -> np.ndarray:
    return np.asarray(d["values"], dtype=dtype).reshape(d["shape"])


def network_to_dict(net: Network) -> dict:
    return {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "n_classes": net.n_classes,
        "eps": net.eps,
        "stats_valid": net.stats_valid,
        "layers": [{"kind": l.kind, "n_in": l.n_in, "n_out": l.n_out} for l in net.layers],
        "params": {k: encode_array(v) for k, v in net.params.items()},
        "training_stats": [{"mean": s.mean.tolist(), "var": s.var.tolist()}
                           for s in net.training_stats],
        "meta": net.meta,
    }


def network_from_dict(d: dict) -> Network:
    if d.get("format") != FORMAT_NAME:
        raise UsageError(f"not a model file (format={d.get('format')!r})")
    if d.get("format_version") != FORMAT_VERSION:
        raise UsageError(f"unsupported model format version {d.get('format_version')!r}")
    layers = [LayerSpec(l["kind"], l["n_in"], l["n_out"]) for l in d["layers"]]
    params = {k: decode_array(v) for k, v in d["params"].items()}
    stats = [ChannelStats(np.asarray(s["mean"], dtype=np.float64),
                          np.asarray(s["var"], dtype=np.float64)) for s in d["training_stats"]]
    return Network(layers, params, stats, tuple(d["input_shape"]), d["n_classes"],
                   eps=d["eps"], stats_valid=d["stats_valid"], meta=dict(d.get("meta", {})))


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), sort_keys=True, indent=1) + "\n")


def load_network(path) -> Network:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read model file {path}: {exc}") from exc
    return network_from_dict(d)
