import csv
import subprocess
import sys

import pytest

from mixnorm.cli import main
from mixnorm.model import load_network

QUICK = """mixnorm-config 1
n_per_class = 8
test_per_class = 2
tune_per_class = 2
epochs = 2
batch_size = 16
widths = 4, 8
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "quick.cfg").write_text(QUICK)
    assert main(["train", "--config", str(d / "quick.cfg"), "--seed", "3",
                 "--out", str(d / "model.json")]) == 0
    return d


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_writes_model(workdir):
    net = load_network(workdir / "model.json")
    assert net.stats_valid and net.meta["data_seed"] == 3 and net.meta["test_per_class"] == 2
    assert "clean_error" in net.meta and net.meta["config"].startswith("mixnorm-config 1")


def test_train_is_reproducible(workdir, tmp_path):
    assert main(["train", "--config", str(workdir / "quick.cfg"), "--seed", "3",
                 "--out", str(tmp_path / "again.json")]) == 0
    assert (tmp_path / "again.json").read_bytes() == (workdir / "model.json").read_bytes()


def test_adapt(workdir, tmp_path):
    out = tmp_path / "r.csv"
    assert main(["adapt", "--model", str(workdir / "model.json"), "--method", "mixnorm",
                 "--stream", "mixed:5", "--batch-size", "4", "--seed", "1", "--out", str(out)]) == 0
    (row,) = _rows(out)
    assert row["method"] == "mixnorm" and row["n_samples"] == "120" and row["batch_size"] == "4"


def test_adapt_with_exported_dataset(workdir, tmp_path):
    data = tmp_path / "d.json"
    assert main(["dataset", "--seed", "3", "--n-per-class", "2", "--split", "test",
                 "--out", str(data)]) == 0
    for name, extra in [("a", []), ("b", ["--dataset", str(data)])]:
        assert main(["adapt", "--model", str(workdir / "model.json"), "--method", "tent",
                     "--stream", "single:blur:2", "--batch-size", "5", "--seed", "0",
                     "--out", str(tmp_path / f"{name}.csv")] + extra) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_sweep_and_report(workdir, tmp_path):
    args = ["sweep", "--model", str(workdir / "model.json"), "--methods", "tent,mixnorm",
            "--batch-sizes", "1,8", "--streams", "mixed:5,single:contrast:5", "--seeds", "0,1"]
    assert main(args + ["--out-dir", str(tmp_path / "s1")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "s2"), "--n-jobs", "2"]) == 0
    a = (tmp_path / "s1" / "results.csv").read_bytes()
    assert a == (tmp_path / "s2" / "results.csv").read_bytes()
    assert len(_rows(tmp_path / "s1" / "results.csv")) == 16
    for fmt, name in [("csv", "m.csv"), ("table", "t.txt"), ("svg", "p.svg")]:
        assert main(["report", "--in", str(tmp_path / "s1"), "--format", fmt,
                     "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "m.csv").read_bytes() == a
    assert "stream mixed:5" in (tmp_path / "t.txt").read_text()
    assert (tmp_path / "p.svg").read_text().lstrip().startswith("<?xml")


@pytest.mark.parametrize("method,second,n", [("mixnorm", "tau", 8), ("mixnormbn", "tau_max", 16)])
def test_tune(workdir, tmp_path, method, second, n):
    out = tmp_path / "tune.csv"
    assert main(["tune", "--model", str(workdir / "model.json"), "--method", method,
                 "--out", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) == n and rows[0]["stream"] == "single:gaussian_noise:5"
    assert sum(int(r["selected"]) for r in rows) == 1
    best = min(float(r["error_rate"]) for r in rows)
    (chosen,) = [r for r in rows if r["selected"] == "1"]
    assert float(chosen["error_rate"]) == best and second in chosen


@pytest.mark.parametrize("argv", [
    ["adapt", "--model", "{m}", "--method", "bogus", "--stream", "mixed:5", "--batch-size", "1",
     "--seed", "0", "--out", "{t}/x.csv"],
    ["adapt", "--model", "{m}", "--method", "tent", "--stream", "mixed:9", "--batch-size", "1",
     "--seed", "0", "--out", "{t}/x.csv"],
    ["adapt", "--model", "{m}", "--method", "tent", "--stream", "mixed:5", "--batch-size", "0",
     "--seed", "0", "--out", "{t}/x.csv"],
    ["adapt", "--model", "{t}/missing.json", "--method", "tent", "--stream", "mixed:5",
     "--batch-size", "1", "--seed", "0", "--out", "{t}/x.csv"],
    ["sweep", "--model", "{m}", "--methods", "tent", "--batch-sizes", "1,-2", "--streams",
     "mixed:5", "--seeds", "0", "--out-dir", "{t}/s"],
    ["tune", "--model", "{m}", "--method", "tent", "--out", "{t}/x.csv"],
    ["report", "--in", "{t}/nothing", "--format", "csv", "--out", "{t}/x.csv"],
    ["train", "--config", "{t}/missing.cfg", "--seed", "0", "--out", "{t}/x.json"],
    ["train", "--config", "{m}", "--seed", "-1", "--out", "{t}/x.json"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(workdir, tmp_path, argv):
    argv = [a.format(m=workdir / "model.json", t=tmp_path) for a in argv]
    assert main(argv) == 2


def test_unknown_config_key_exit_2(tmp_path):
    (tmp_path / "c.cfg").write_text("mixnorm-config 1\nepoch = 3\n")
    assert main(["train", "--config", str(tmp_path / "c.cfg"), "--seed", "0",
                 "--out", str(tmp_path / "m.json")]) == 2


def test_numeric_failure_exit_3(tmp_path):
    (tmp_path / "c.cfg").write_text(QUICK + "learning_rate = 1e100\n")
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--config", str(tmp_path / "c.cfg"), "--seed", "0",
                     "--out", str(tmp_path / "m.json")])
    assert code == 3 and not (tmp_path / "m.json").exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mixnorm", "--help"], capture_output=True,
                         text=True, check=True)
    for cmd in ("train", "adapt", "sweep", "report", "tune", "dataset"):
        assert cmd in out.stdout
