"""Shared fixtures: the reference model is trained once per test session."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from mixnorm.bench import LabeledDataset, generate_source_dataset
from mixnorm.config import TrainConfig
from mixnorm.model import NetSpec, Network, train_source

REFERENCE_SEED = 0


@dataclass
class Reference:
    net: Network
    train: LabeledDataset
    test: LabeledDataset
    config: TrainConfig


@pytest.fixture(scope="session")
def reference() -> Reference:
    cfg = TrainConfig()
    train = generate_source_dataset(REFERENCE_SEED, cfg.n_per_class, split="train")
    test = generate_source_dataset(REFERENCE_SEED, cfg.test_per_class, split="test")
    net = train_source(NetSpec(widths=cfg.widths, eps=cfg.eps), train.images, train.labels,
                       cfg.epochs, REFERENCE_SEED, batch_size=cfg.batch_size,
                       learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                       val_images=test.images, val_labels=test.labels)
    net.meta.update(data_seed=REFERENCE_SEED, n_per_class=cfg.n_per_class,
                    test_per_class=cfg.test_per_class, tune_per_class=cfg.tune_per_class)
    return Reference(net, train, test, cfg)


@pytest.fixture(scope="session")
def small_test(reference) -> LabeledDataset:
    """Four held-out images per class; enough for contract tests."""
    d = reference.test
    keep = np.concatenate([np.flatnonzero(d.labels == k)[:4] for k in range(10)])
    keep.sort()
    return LabeledDataset(d.images[keep], d.labels[keep])


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(n, ok, detail)``."""
    lines = request.config.stash[_VERDICTS]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
