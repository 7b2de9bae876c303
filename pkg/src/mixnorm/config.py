"""Training configuration files.

Plain text, one ``key = value`` per line. ``#`` starts a comment. The first
non-comment line must be the version header ``mixnorm-config 1``::

    mixnorm-config 1
    n_per_class = 200
    widths = 16, 32

Unknown or repeated keys are errors; omitted keys take the defaults below.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .exceptions import UsageError

CONFIG_HEADER = "mixnorm-config"
CONFIG_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    n_per_class: int = 200      # training images per class
    test_per_class: int = 20    # held-out images per class (the test streams)
    tune_per_class: int = 20    # reserved images per class for hyperparameter tuning
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 3e-3
    momentum: float = 0.1       # running-statistics momentum
    widths: tuple[int, ...] = (16, 32)
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_per_class", "test_per_class", "tune_per_class", "batch_size"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if not self.learning_rate > 0 or not self.eps > 0:
            raise UsageError("learning_rate and eps must be positive")
        if not 0 < self.momentum <= 1:
            raise UsageError("momentum must lie in (0, 1]")
        if not self.widths or min(self.widths) < 1:
            raise UsageError("widths must be positive")


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return tuple(int(p) for p in raw.replace(",", " ").split())
    except ValueError as exc:
        raise UsageError(f"bad value for {key!r}: {raw!r}") from exc


def parse_config(text: str) -> TrainConfig:
    values = {}
    header_seen = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if not header_seen:
            parts = line.split()
            if len(parts) != 2 or parts[0] != CONFIG_HEADER:
                raise UsageError(f"line {lineno}: expected header '{CONFIG_HEADER} {CONFIG_VERSION}'")
            if parts[1] != str(CONFIG_VERSION):
                raise UsageError(f"unsupported config version {parts[1]!r}")
            header_seen = True
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"line {lineno}: expected 'key = value'")
        if key not in _TYPES:
            raise UsageError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise UsageError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw.strip())
    if not header_seen:
        raise UsageError("empty config: missing version header")
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{CONFIG_HEADER} {CONFIG_VERSION}"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"
