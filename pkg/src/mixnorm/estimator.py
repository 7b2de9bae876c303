"""scikit-learn style wrappers around source training and test-time adaptation.

``SourceClassifier`` trains the reference backbone with ``fit(X, y)``.
``TestTimeAdapter`` binds a trained network in ``fit`` (it never sees source
data or labels) and adapts online inside ``predict``: the rows of ``X`` are
the test stream, in order.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .exceptions import UsageError
from .harness import METHODS, Method, OnlineAdapter, _batches
from .model import NetSpec, Network, log_softmax, train_source


def check_images(X, n_channels: Optional[int] = None, size: Optional[int] = None) -> np.ndarray:
    """Validate an ``N x C x H x W`` float image array with square, finite images."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise UsageError(f"expected N x C x H x W images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise UsageError("need at least one image")
    if X.shape[2] != X.shape[3]:
        raise UsageError(f"images must be square, got {X.shape[2]} x {X.shape[3]}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise UsageError(f"expected {n_channels} channels, got {X.shape[1]}")
    if size is not None and X.shape[2] != size:
        raise UsageError(f"expected {size} x {size} images, got {X.shape[2]} x {X.shape[3]}")
    if not np.all(np.isfinite(X)):
        raise UsageError("images contain NaN or Inf")
    return X


class SourceClassifier(ClassifierMixin, BaseEstimator):
    """Supervised source training of the conv backbone with batch norm."""

    def __init__(self, widths=(16, 32), epochs: int = 20, batch_size: int = 64,
                 learning_rate: float = 3e-3, momentum: float = 0.1, seed: int = 0):
        self.widths = widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise UsageError(f"expected {len(X)} labels, got shape {y.shape}")
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        spec = NetSpec(widths=tuple(self.widths), n_classes=len(self.classes_),
                       in_channels=X.shape[1], image_size=X.shape[2])
        self.network_ = train_source(spec, X, y_enc, self.epochs, self.seed,
                                     batch_size=self.batch_size,
                                     learning_rate=self.learning_rate, momentum=self.momentum)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, *self.network_.input_shape[:2])
        logits = np.concatenate([self.network_.forward(X[s:s + 256])
                                 for s in range(0, len(X), 256)])
        return np.exp(log_softmax(logits))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class TestTimeAdapter(ClassifierMixin, BaseEstimator):
    """Online test-time adaptation of a trained network.

    ``predict`` starts from the pristine network every call, walks ``X`` in
    row order in groups of ``batch_size`` and returns the prediction committed
    for each row before any learning on it.
    """

    __test__ = False

    def __init__(self, network=None, method: str = "mixnorm", tau=None, m=None, tau_max=None,
                 learning_rate=None, optimizer: str = "adam", n_views: int = 1,
                 batch_size: int = 1, protocol: str = "mixed", seed: int = 0):
        self.network = network
        self.method = method
        self.tau = tau
        self.m = m
        self.tau_max = tau_max
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.n_views = n_views
        self.batch_size = batch_size
        self.protocol = protocol
        self.seed = seed

    def _method(self) -> Method:
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}")
        return Method(self.method, tau=self.tau, m=self.m, tau_max=self.tau_max,
                      learning_rate=self.learning_rate, optimizer=self.optimizer,
                      n_views=self.n_views)

    def fit(self, X=None, y=None):
        """Bind the trained network. ``X`` and ``y`` are ignored (source-free)."""
        net = self.network
        classes = None
        if isinstance(net, SourceClassifier):
            check_is_fitted(net, "network_")
            net, classes = net.network_, net.classes_
        if not isinstance(net, Network):
            raise UsageError("network must be a trained Network or a fitted SourceClassifier")
        if not net.stats_valid:
            raise UsageError("network has no valid training statistics")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        self._method().resolved(self.protocol)
        self.network_ = net
        self.classes_ = classes if classes is not None else np.arange(net.n_classes)
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, *self.network_.input_shape[:2])
        adapter = OnlineAdapter(self.network_, self._method(), self.protocol, self.seed)
        preds = [adapter.step(X[idx]) for idx in _batches(range(len(X)), self.batch_size)]
        return self.classes_[np.concatenate(preds)]
