import csv
import hashlib
import io

import matplotlib
import pytest

from mixnorm.exceptions import UsageError
from mixnorm.harness import RunResult
from mixnorm.report import (COLUMNS, collect_rows, format_csv, format_table, read_rows,
                            render_svg, result_row, summarize, write_results)

# sha256 of render_svg(_pinned_rows()) under matplotlib 3.10.x
GOLDEN_SVG = "67d1bbbed3e99e8f5f54523f623710a635b23d8606c063527cc14035e1bc5c2f"


def _pinned_rows():
    rows = []
    for m, base in [("tent", 0.4), ("mixnorm", 0.3)]:
        for s in ["mixed:5", "single:blur:5"]:
            for b in [1, 8, 64]:
                for seed in [0, 1]:
                    err = base + 0.01 * seed + (0.5 if m == "tent" and b == 1 else 0)
                    rows.append(dict(method=m, stream=s, batch_size=str(b), seed=str(seed),
                                     n_samples="100", error_rate=f"{err:.6f}", trace_digest="x"))
    return rows


def _result(method="tent", batch_size=8, seed=0, wrong=(3, 1)):
    pc = {"blur": (wrong[0], 10), "contrast": (wrong[1], 10)}
    return RunResult(method, "mixed:5", batch_size, seed, 20, sum(wrong) / 20, pc, "ab" * 32)


def test_column_order():
    assert COLUMNS[:6] == ("method", "stream", "batch_size", "seed", "n_samples", "error_rate")
    kinds = [c[len("error_"):] for c in COLUMNS[6:-1]]
    assert kinds == sorted(kinds) and "clean" in kinds
    assert COLUMNS[-1] == "trace_digest"


def test_single_result_csv():
    text = format_csv([result_row(_result())])
    lines = text.splitlines()
    assert len(lines) == 2 and lines[0] == ",".join(COLUMNS)
    row = next(csv.DictReader(io.StringIO(text)))
    assert row["error_rate"] == "0.200000"
    assert row["error_blur"] == "0.300000" and row["error_pixelate"] == ""


def test_csv_rows_sorted():
    results = [_result("tent", 64, 1), _result("mixnorm", 8, 0), _result("tent", 8, 1),
               _result("tent", 8, 0)]
    rows = list(csv.DictReader(io.StringIO(format_csv(map(result_row, results)))))
    keys = [(r["method"], int(r["batch_size"]), int(r["seed"])) for r in rows]
    assert keys == [("mixnorm", 8, 0), ("tent", 8, 0), ("tent", 8, 1), ("tent", 64, 1)]


def test_write_read_collect(tmp_path):
    write_results([_result("tent", 8, 0)], tmp_path / "a.csv")
    write_results([_result("mixnorm", 8, 0), _result("tent", 8, 0)], tmp_path / "b.csv")
    rows = collect_rows(tmp_path)
    assert [(r["method"], r["seed"]) for r in rows] == [("mixnorm", "0"), ("tent", "0")]
    assert read_rows(tmp_path / "a.csv")[0]["trace_digest"] == "ab" * 32


def test_incompatible_schemas_rejected(tmp_path):
    write_results([_result()], tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("method,stream,error\ntent,mixed:5,0.1\n")
    with pytest.raises(UsageError):
        collect_rows(tmp_path)
    with pytest.raises(UsageError):
        collect_rows(tmp_path / "empty_dir_missing")
    (tmp_path / "e").mkdir()
    with pytest.raises(UsageError):
        collect_rows(tmp_path / "e")


def test_summary_and_table():
    s = summarize(_pinned_rows())
    assert s["mixed:5"]["tent"][1] == pytest.approx(0.905)
    assert s["mixed:5"]["mixnorm"][64] == pytest.approx(0.305)
    table = format_table(_pinned_rows())
    assert "stream mixed:5" in table and "90.50%" in table


def test_svg_is_deterministic(tmp_path):
    render_svg(_pinned_rows(), tmp_path / "a.svg")
    render_svg(_pinned_rows(), tmp_path / "b.svg")
    data = (tmp_path / "a.svg").read_bytes()
    assert data == (tmp_path / "b.svg").read_bytes()
    assert data.count(b"<svg") == 1 and b"mixed:5" in data and b"single:blur:5" in data


def test_golden_svg(tmp_path):
    if not matplotlib.__version__.startswith("3.10."):
        pytest.skip("golden recorded with matplotlib 3.10")
    render_svg(_pinned_rows(), tmp_path / "a.svg")
    assert hashlib.sha256((tmp_path / "a.svg").read_bytes()).hexdigest() == GOLDEN_SVG


def test_svg_needs_rows(tmp_path):
    with pytest.raises(UsageError):
        render_svg([], tmp_path / "x.svg")
