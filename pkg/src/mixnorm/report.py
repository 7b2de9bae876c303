"""Result files: CSV rows, text tables and error-vs-batch-size plots."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bench import CORRUPTIONS
from .exceptions import UsageError
from .harness import RunResult

BASE_COLUMNS = ("method", "stream", "batch_size", "seed", "n_samples", "error_rate")
KINDS = tuple(sorted(CORRUPTIONS + ("clean",)))
KIND_COLUMNS = tuple(f"error_{k}" for k in KINDS)
# the prediction-trace digest trails the per-kind columns
COLUMNS = BASE_COLUMNS + KIND_COLUMNS + ("trace_digest",)


def result_row(r: RunResult) -> dict:
    row = {
        "method": r.method,
        "stream": r.stream,
        "batch_size": r.batch_size,
        "seed": r.seed,
        "n_samples": r.n_samples,
        "error_rate": f"{r.error_rate:.6f}",
        "trace_digest": r.trace_digest,
    }
    for k in KINDS:
        row[f"error_{k}"] = f"{r.corruption_error(k):.6f}" if k in r.per_corruption else ""
    return row


def _sort_key(row):
    return (row["method"], row["stream"], int(row["batch_size"]), int(row["seed"]))


def format_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in sorted(rows, key=_sort_key):
        w.writerow({c: row.get(c, "") for c in COLUMNS})
    return buf.getvalue()


def write_results(results: Sequence[RunResult], path) -> None:
    Path(path).write_text(format_csv(result_row(r) for r in results))


def read_rows(path) -> list[dict]:
    """Rows of one results file; its header must be exactly :data:`COLUMNS`."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            header = tuple(reader.fieldnames or ())
    except OSError as exc:
        raise UsageError(f"cannot read results {path}: {exc}") from exc
    if header != COLUMNS:
        raise UsageError(f"{path}: incompatible result columns {list(header)}")
    return rows


def collect_rows(source) -> list[dict]:
    """Rows from one CSV file or every ``*.csv`` in a directory, deduplicated."""
    source = Path(source)
    files = sorted(source.glob("*.csv")) if source.is_dir() else [source]
    if not files:
        raise UsageError(f"no result files in {source}")
    seen = {}
    for f in files:
        for row in read_rows(f):
            seen[_sort_key(row)] = row
    return sorted(seen.values(), key=_sort_key)


def summarize(rows: Sequence[dict]) -> dict:
    """``{stream: {method: {batch_size: median error over seeds}}}``."""
    acc = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for row in rows:
        acc[row["stream"]][row["method"]][int(row["batch_size"])].append(float(row["error_rate"]))
    return {s: {m: {b: float(np.median(v)) for b, v in sorted(by_b.items())}
                for m, by_b in sorted(by_m.items())}
            for s, by_m in sorted(acc.items())}


def format_table(rows: Sequence[dict]) -> str:
    """Median error (%) over seeds, one block per stream, methods by batch size."""
    out = []
    for stream, by_method in summarize(rows).items():
        sizes = sorted({b for by_b in by_method.values() for b in by_b})
        width = max(len("method"), *(len(m) for m in by_method))
        out.append(f"stream {stream}")
        out.append(" ".join(["method".ljust(width)] + [f"{'B=' + str(b):>8}" for b in sizes]))
        for method, by_b in by_method.items():
            cells = [f"{100 * by_b[b]:7.2f}%" if b in by_b else f"{'-':>8}" for b in sizes]
            out.append(" ".join([method.ljust(width)] + cells))
        out.append("")
    return "\n".join(out)


def render_svg(rows: Sequence[dict], path) -> None:
    """Error-rate curves against batch size, one panel per stream."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = summarize(rows)
    if not summary:
        raise UsageError("nothing to plot")
    with matplotlib.rc_context({"svg.hashsalt": "mixnorm", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(1, len(summary), figsize=(4.5 * len(summary), 3.5), squeeze=False)
        for ax, (stream, by_method) in zip(axes[0], summary.items()):
            for method, by_b in by_method.items():
                xs = list(by_b)
                ax.plot(xs, [100 * by_b[b] for b in xs], marker="o", label=method)
            ax.set_xscale("log")
            ax.set_xlabel("batch size")
            ax.set_ylabel("error (%)")
            ax.set_title(stream)
            ax.grid(alpha=0.3)
        axes[0][0].legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
