"""Online adaptation loop and protocol sweeps."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from itertools import islice, product
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentationConfig, make_views
from .bench import LabeledDataset, SampleStream, StreamMode, build_stream
from .exceptions import UsageError
from .model import Network, OptimizerConfig, OptimizerState, entropy_grad, optimizer_step
from .norm import MixNormBNConfig, MixNormConfig

logger = logging.getLogger(__name__)

# method name -> (normalization kind, learns affine parameters)
METHODS = {
    "source_only": ("fixed_global", False),
    "online_bn": ("online_batch", False),
    "tent": ("online_batch", True),
    "mixnorm": ("mixnorm", True),
    "mixnorm_fixed_affine": ("mixnorm", False),
    "mixnormbn": ("mixnormbn", True),
    "instance": ("instance", False),
    "augmentation_local": ("augmentation_local", False),
    "fixed_global": ("fixed_global", False),
    "moving_global": ("moving_global", False),
}
DEFAULT_BATCH_SIZES = (1, 5, 8, 16, 32, 64, 100, 200)
DEFAULT_TAU = 1e-3
DEFAULT_M = {"single": 0.05, "clean": 0.05, "mixed": 0.2}
DEFAULT_TAU_MAX = 0.9
DEFAULT_M_BN = 0.05
# Learning rates are quoted for an update on REFERENCE_BATCH_SIZE samples and
# scaled linearly with the number of samples actually in each update.
DEFAULT_LEARNING_RATE = 1e-3
REFERENCE_BATCH_SIZE = 200


@dataclass(frozen=True)
class Method:
    """A test-time method and its hyperparameters.

    Unset hyperparameters (``None``) resolve to the shipped defaults for the
    stream being evaluated; see :meth:`resolved`.
    """

    name: str
    tau: Optional[float] = None
    m: Optional[float] = None
    tau_max: Optional[float] = None
    tau_override: Optional[float] = None
    learning_rate: Optional[float] = None
    optimizer: str = "adam"
    n_views: int = 1

    def __post_init__(self):
        if self.name not in METHODS:
            raise UsageError(f"unknown method {self.name!r}; expected one of {sorted(METHODS)}")
        OptimizerConfig(self.optimizer, self.learning_rate or DEFAULT_LEARNING_RATE)
        if self.n_views < 1:
            raise UsageError(f"n_views must be >= 1, got {self.n_views}")

    @property
    def norm_kind(self) -> str:
        return METHODS[self.name][0]

    @property
    def learns_affine(self) -> bool:
        return METHODS[self.name][1]

    @property
    def needs_views(self) -> bool:
        return self.norm_kind in ("mixnorm", "mixnormbn", "augmentation_local")

    @property
    def per_sample(self) -> bool:
        """Statistics have no cross-sample term, so samples are processed one at a time."""
        return self.norm_kind not in ("online_batch", "mixnormbn")

    def resolved(self, protocol: StreamMode | str) -> "Method":
        """Fill unset hyperparameters with the defaults for ``protocol``
        (a stream mode or one of ``single``, ``mixed``, ``clean``)."""
        kind = protocol.kind if isinstance(protocol, StreamMode) else protocol
        if kind not in DEFAULT_M:
            raise UsageError(f"unknown protocol {kind!r}; expected one of {sorted(DEFAULT_M)}")
        tau = self.tau if self.tau is not None else DEFAULT_TAU
        lr = self.learning_rate if self.learning_rate is not None else DEFAULT_LEARNING_RATE
        if self.norm_kind == "mixnormbn":
            return replace(self, tau=tau, learning_rate=lr,
                           m=self.m if self.m is not None else DEFAULT_M_BN,
                           tau_max=self.tau_max if self.tau_max is not None else DEFAULT_TAU_MAX)
        m = self.m if self.m is not None else DEFAULT_M[kind]
        return replace(self, tau=tau, m=m, learning_rate=lr)

    def norm_config(self):
        if self.norm_kind == "mixnormbn":
            return MixNormBNConfig(self.tau_max, self.m, self.tau_override)
        return MixNormConfig(self.tau, self.m)

    @classmethod
    def parse(cls, text: str, **overrides) -> "Method":
        return cls(text.strip(), **overrides)


@dataclass
class RunResult:
    method: str
    stream: str
    batch_size: int
    seed: int
    n_samples: int
    error_rate: float
    per_corruption: dict[str, tuple[int, int]]  # kind -> (wrong, total)
    trace_digest: str
    predictions: np.ndarray = field(repr=False, default=None)

    @property
    def key(self):
        return (self.method, self.stream, self.batch_size, self.seed)

    def corruption_error(self, kind: str) -> float:
        wrong, total = self.per_corruption[kind]
        return wrong / total


def _batches(it, size):
    it = iter(it)
    while True:
        chunk = list(islice(it, size))
        if not chunk:
            return
        yield chunk


class OnlineAdapter:
    """Test-time adaptation state for one method on a private copy of a network.

    Feed consecutive groups of test images to :meth:`step`; each call returns
    the predictions for the group, made before any learning on it. Methods
    whose statistics have no cross-sample term (MixNorm and the per-sample
    ablation variants) walk a group one sample at a time, so their
    predictions do not depend on how the stream is grouped.

    Learning methods take one entropy-minimization step per update unit (a
    sample or a group) with rate ``learning_rate * unit_size /
    REFERENCE_BATCH_SIZE``.
    """

    def __init__(self, net: Network, method: Method, protocol: StreamMode | str = "mixed",
                 seed: int = 0):
        if not net.stats_valid:
            raise UsageError("network has no valid training statistics; train it first")
        self.method = method.resolved(protocol)
        self.net = net.copy()
        self.norms = self.net.make_norms(self.method.norm_kind, self.method.norm_config(),
                                         affine_frozen=not self.method.learns_affine)
        self.aug = AugmentationConfig(n_views=self.method.n_views, seed=seed)
        self._opt_state = OptimizerState()
        self._affine_names = self.net.affine_names()
        self.n_seen = 0

    def step(self, images, indices=None) -> np.ndarray:
        """Predict a group of images (``B x C x H x W``), then learn from it.

        ``indices`` are stream positions keying the augmentation draws; they
        default to a running count.
        """
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or len(images) == 0:
            raise UsageError("step expects a nonempty B x C x H x W image group")
        if indices is None:
            indices = range(self.n_seen, self.n_seen + len(images))
        indices = list(indices)
        if len(indices) != len(images):
            raise UsageError("need one stream index per image")
        if self.method.per_sample:
            units = [slice(j, j + 1) for j in range(len(images))]
        else:
            units = [slice(0, len(images))]
        preds = [self._unit(images[u], indices[u]) for u in units]
        self.n_seen += len(images)
        return np.concatenate(preds)

    def _unit(self, x, indices):
        method = self.method
        views = None
        if method.needs_views:
            views = np.stack([make_views(img, self.aug, i) for img, i in zip(x, indices)])
        logits = self.net.forward(x, self.norms, views, keep_cache=method.learns_affine)
        preds = logits.argmax(axis=1)
        if method.learns_affine:
            grads = self.net.backward(entropy_grad(logits))
            cfg = OptimizerConfig(method.optimizer,
                                  method.learning_rate * len(x) / REFERENCE_BATCH_SIZE)
            new, self._opt_state = optimizer_step(
                self.net.params, {k: grads[k] for k in self._affine_names}, self._opt_state, cfg)
            self.net.apply_update(new)
        return preds


def run_adaptation(net: Network, method: Method, stream: SampleStream, batch_size: int,
                   seed: int) -> RunResult:
    """Adapt a copy of ``net`` online over ``stream`` and score its predictions.

    The stream is consumed once, in order, in consecutive groups of
    ``batch_size`` (the last group may be smaller). For each group the
    prediction on every original is committed before its label is revealed.
    """
    if batch_size < 1:
        raise UsageError(f"batch size must be >= 1, got {batch_size}")
    if len(stream) == 0:
        raise UsageError("empty stream")
    adapter = OnlineAdapter(net, method, stream.mode, seed)
    predictions = []
    counts: dict[str, list[int]] = {}
    for group in _batches(stream, batch_size):
        preds = adapter.step(np.stack([s.image for s in group]), [s.index for s in group])
        for s, p in zip(group, preds):
            predictions.append(int(p))
            label = s.reveal_label(int(p))
            c = counts.setdefault(s.kind, [0, 0])
            c[0] += int(p != label)
            c[1] += 1

    preds = np.asarray(predictions, dtype=np.int64)
    wrong = sum(c[0] for c in counts.values())
    return RunResult(
        method=method.name,
        stream=str(stream.mode),
        batch_size=batch_size,
        seed=seed,
        n_samples=len(preds),
        error_rate=wrong / len(preds),
        per_corruption={k: (c[0], c[1]) for k, c in sorted(counts.items())},
        trace_digest=hashlib.sha256(preds.tobytes()).hexdigest(),
        predictions=preds,
    )


@dataclass(frozen=True)
class ProtocolConfig:
    batch_sizes: tuple[int, ...] = DEFAULT_BATCH_SIZES
    streams: tuple[str, ...] = ("mixed:5",)
    seeds: tuple[int, ...] = (0,)
    tuning_split: Optional[str] = "single:gaussian_noise:5"

    def __post_init__(self):
        if not self.batch_sizes or any(b < 1 for b in self.batch_sizes):
            raise UsageError("batch sizes must be >= 1 and nonempty")
        if not self.seeds:
            raise UsageError("at least one seed is required")
        if not self.streams:
            raise UsageError("at least one stream is required")
        for s in self.streams:
            StreamMode.parse(s)


def _run_cell(net, method, dataset, stream_text, batch_size, seed, streams):
    stream = streams.get((stream_text, seed))
    if stream is None:
        stream = build_stream(dataset, StreamMode.parse(stream_text), seed)
    return run_adaptation(net, method, stream, batch_size, seed)


def sweep(net: Network, methods: Sequence[Method], protocol: ProtocolConfig,
          dataset: LabeledDataset, n_jobs: int = 1) -> list[RunResult]:
    """Every (method, batch size, stream, seed) cell, each from a pristine network.

    Results are returned sorted by ``(method, stream, batch_size, seed)``
    regardless of execution order.
    """
    cells = list(product(methods, protocol.streams, protocol.batch_sizes, protocol.seeds))
    if n_jobs == 1:
        streams = {(s, seed): build_stream(dataset, StreamMode.parse(s), seed)
                   for s in protocol.streams for seed in protocol.seeds}
        results = [_run_cell(net, m, dataset, s, b, seed, streams) for m, s, b, seed in cells]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_cell)(net, m, dataset, s, b, seed, {}) for m, s, b, seed in cells)
    return sorted(results, key=lambda r: r.key)
