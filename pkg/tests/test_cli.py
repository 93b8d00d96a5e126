import subprocess
import sys

import numpy as np
import pytest

from layerwise.cli import EXIT_CODES, load_config, main
from layerwise.data import write_idx
from layerwise.errors import ConfigInvalid


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


TRAIN = """
seed = 11
model.sizes = [3, 8, 1]
data.kind = "synthetic_regression"
data.n = 40
data.input_dim = 3
optimizer.learning_rate = 0.2
optimizer.max_steps = 30
"""

STABILITY = """
seed = 2
model.sizes = [12, 4, 1]
optimizer.masses = 0.1
optimizer.loss = "mse"
stability.n = 4
stability.eta_factor = 0.05
stability.t_end = 1.0
stability.horizon = 0.5
"""


def data_rows(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


def test_train_is_deterministic_and_learns(tmp_path):
    cfg = write(tmp_path, "t.toml", TRAIN)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "training.csv").read_bytes()
    assert a == (tmp_path / "b" / "training.csv").read_bytes()
    rows = data_rows(tmp_path / "a" / "training.csv")
    assert rows[0] == "step,loss,update_norm_0,update_norm_1,update_norm_2"
    losses = [float(r.split(",")[1]) for r in rows[1:]]
    assert len(losses) == 30 and losses[-1] < losses[0]
    assert b"# seed = 11\n" in a and b"\r" not in a
    timing = data_rows(tmp_path / "a" / "timing.csv")
    assert timing[0] == "step,step_ms" and len(timing) == 31
    blocks = np.load(tmp_path / "a" / "final_params.npz")
    assert sorted(blocks.files) == ["block_0", "block_1", "block_2"]


def test_seed_override_changes_run(tmp_path):
    cfg = write(tmp_path, "t.toml", TRAIN)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "0x10"]) == 0
    text = (tmp_path / "a" / "training.csv").read_text()
    assert "# seed = 16\n" in text


def test_missing_dataset_writes_nothing(tmp_path):
    cfg = write(tmp_path, "t.toml", 'data.kind = "csv"\ndata.path = "nope.csv"\n')
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_config_errors(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "absent.toml")]) == 2
    bad = write(tmp_path, "b.toml", "optimizer.learnin_rate = 0.1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "learnin_rate" in capsys.readouterr().err
    broken = write(tmp_path, "c.toml", "seed = = 1\n")
    assert main(["train", "--config", str(broken), "--out", str(tmp_path / "o")]) == 2
    neg = write(tmp_path, "d.toml", "optimizer.learning_rate = -1.0\n")
    assert main(["train", "--config", str(neg), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(ConfigInvalid):
        load_config(None, "train", seed=-1)


def test_non_finite_training_exits_4(tmp_path):
    cfg = write(tmp_path, "t.toml", TRAIN.replace("learning_rate = 0.2", "learning_rate = 1e6")
                .replace('data.kind', 'optimizer.method = "sgd"\ndata.kind'))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
    assert (tmp_path / "o" / "training.csv").exists()


def test_unwritable_output_exits_3(tmp_path):
    cfg = write(tmp_path, "t.toml", TRAIN)
    blocker = write(tmp_path, "file", "x")
    assert main(["train", "--config", str(cfg), "--out", str(blocker)]) == 3


def test_bad_log_level(tmp_path, monkeypatch):
    monkeypatch.setenv("RIEMANN_LOG_LEVEL", "loud")
    assert main(["verify", "--out", str(tmp_path)]) == 2


def test_csv_and_layer_list_training(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 2))
    labels = (X[:, 0] > 0).astype(int)
    lines = ["x1,x2,label"] + [f"{float(a)!r},{float(b)!r},{c}" for (a, b), c in zip(X, labels)]
    write(tmp_path, "d.csv", "\n".join(lines) + "\n")
    cfg = write(tmp_path, "t.toml", """
model.layers = ["linear 2 6", "bias", "relu", "linear 6 2"]
data.kind = "csv"
data.path = "d.csv"
data.classification = true
optimizer.output_metric = "gauss_newton"
optimizer.learning_rate = 0.3
optimizer.max_steps = 20
""")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = data_rows(tmp_path / "o" / "training.csv")
    assert float(rows[-1].split(",")[1]) < float(rows[1].split(",")[1])


def test_idx_training(tmp_path):
    rng = np.random.default_rng(1)
    write_idx(tmp_path / "img.idx", rng.integers(0, 256, size=(12, 2, 2)).astype(np.uint8))
    write_idx(tmp_path / "lab.idx", rng.integers(0, 3, size=12).astype(np.uint8))
    cfg = write(tmp_path, "t.toml", """
model.sizes = [4, 5, 3]
data.kind = "idx"
data.images = "img.idx"
data.labels = "lab.idx"
data.limit = 10
optimizer.max_steps = 5
""")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert len(data_rows(tmp_path / "o" / "training.csv")) == 6


def test_verify_outcomes(tmp_path):
    cfg = write(tmp_path, "v.toml", 'verify.suites = ["woodbury", "cholesky_pullback"]\nverify.instances = {woodbury = 20}\n')
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    text = (tmp_path / "a" / "verify.txt").read_text().splitlines()
    assert text[-1] == "summary passed=2 failed=0"
    assert sum(ln.startswith("PASS ") for ln in text) == 2
    strict = write(tmp_path, "s.toml", 'verify.suites = ["woodbury"]\nverify.tolerances = {woodbury = 0.0}\n')
    assert main(["verify", "--config", str(strict), "--out", str(tmp_path / "b")]) == 5
    assert (tmp_path / "b" / "verify.txt").read_text().splitlines()[-1].endswith("failing=woodbury")
    empty = write(tmp_path, "e.toml", "verify.suites = []\n")
    assert main(["verify", "--config", str(empty), "--out", str(tmp_path / "c")]) == 2
    unknown = write(tmp_path, "u.toml", 'verify.suites = ["nope"]\n')
    assert main(["verify", "--config", str(unknown), "--out", str(tmp_path / "c")]) == 2


def test_bench(tmp_path):
    cfg = write(tmp_path, "b.toml", "bench.n_alpha = [20, 40]\nbench.d = [2]\nbench.repeats = 1\n")
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = data_rows(tmp_path / "bench.csv")
    assert rows[0] == "n_alpha,d,woodbury_ms,dense_ms" and len(rows) == 3
    bad = write(tmp_path, "c.toml", "bench.n_alpha = [0]\n")
    assert main(["bench", "--config", str(bad), "--out", str(tmp_path)]) == 2


def report(path):
    return dict(ln.split(" = ", 1) for ln in path.read_text().splitlines() if not ln.startswith("#"))


def test_stability_null_and_fresh(tmp_path):
    cfg = write(tmp_path, "s.toml", STABILITY)
    assert main(["stability", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    rep = report(tmp_path / "a" / "stability_report.txt")
    assert rep["bound_holds"] == "True" and float(rep["observed_divergence"]) > 0
    null = write(tmp_path, "n.toml", STABILITY + 'stability.replacement = "null"\n')
    assert main(["stability", "--config", str(null), "--out", str(tmp_path / "b")]) == 0
    assert float(report(tmp_path / "b" / "stability_report.txt")["observed_divergence"]) == 0.0
    rows = data_rows(tmp_path / "b" / "divergence.csv")
    assert rows[0] == "t,divergence,disturbance_max,disturbance_stacked"


def test_stability_sweep_reference_scaling(tmp_path):
    cfg = write(tmp_path, "s.toml", STABILITY.replace("stability.n = 4", "stability.n_sweep = [2, 8]"))
    assert main(["stability", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    r2 = report(tmp_path / "stability_report_n2.txt")
    r8 = report(tmp_path / "stability_report_n8.txt")
    ref2 = float(r2["bound_at_reference_constants"])
    assert ref2 == pytest.approx(float(r2["bound"]))
    assert float(r8["bound_at_reference_constants"]) == pytest.approx(ref2 / 2)


def test_stability_rejects_oversized_n(tmp_path):
    cfg = write(tmp_path, "s.toml", STABILITY.replace("stability.n = 4", "stability.n = 100"))
    assert main(["stability", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    cfg = write(tmp_path, "l.toml", STABILITY.replace('"mse"', '"softmax_ce"'))
    assert main(["stability", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_exit_code_table_is_distinct():
    assert set(EXIT_CODES.values()) == {2, 3, 4, 5, 6}


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "layerwise", "verify", "--out", str(tmp_path)],
                          capture_output=True, text=True, input="",
                          env={"RIEMANN_LOG_LEVEL": "bogus", "PATH": ""})
    assert proc.returncode == 2 and "RIEMANN_LOG_LEVEL" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "layerwise", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "stability" in proc.stdout
