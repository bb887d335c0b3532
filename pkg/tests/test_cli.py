import csv
import subprocess
import sys

import pytest

from lambtouch import cli, store
from lambtouch.neural import Head


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "small.lwtd"
    assert cli.main(["gen", "--count", "160", "--seed", "3", "--out", str(path)]) == 0
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_gen_prints_and_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.lwtd", tmp_path / "b.lwtd"
    code, out, err = run(capsys, "gen", "--count", 25, "--seed", 1, "--out", a)
    assert code == 0
    assert out.strip() == f"records=25 bytes={store.dataset_size(25)}"
    assert "seed=1" in err and "config=defaults" in err
    run(capsys, "gen", "--count", 25, "--seed", 1, "--out", b)
    assert a.read_bytes() == b.read_bytes()


def test_gen_zero_count(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--count", 0, "--out", tmp_path / "e.lwtd")
    assert code == 0 and (tmp_path / "e.lwtd").stat().st_size == 13


def test_gen_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen", "--count", "3"])
    assert exc.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen", "--count", "3", "--out", "x", "--colour", "red"])
    assert exc.value.code != 0


def test_config_from_environment(tmp_path, capsys, monkeypatch):
    conf = tmp_path / "plate.conf"
    conf.write_text("plate.snr_db = 20\n", encoding="utf-8")
    monkeypatch.setenv("LAMBTOUCH_CONFIG", str(conf))
    run(capsys, "gen", "--count", 2, "--out", tmp_path / "env.lwtd")
    monkeypatch.delenv("LAMBTOUCH_CONFIG")
    run(capsys, "gen", "--count", 2, "--out", tmp_path / "plain.lwtd")
    code, _, err = run(capsys, "gen", "--count", 2, "--config", conf, "--out", tmp_path / "flag.lwtd")
    assert code == 0 and "config=defaults" not in err
    assert (tmp_path / "env.lwtd").read_bytes() == (tmp_path / "flag.lwtd").read_bytes()
    assert (tmp_path / "env.lwtd").read_bytes() != (tmp_path / "plain.lwtd").read_bytes()


def test_bad_config_reports_line(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("\nplate.nonsense = 1\n", encoding="utf-8")
    code, _, err = run(capsys, "gen", "--count", 1, "--config", conf, "--out", tmp_path / "x.lwtd")
    assert code == 1 and "line 2" in err


def test_train_grid_descriptor_and_history(small_data, tmp_path, capsys):
    ck = tmp_path / "c10.lwtm"
    code, out, _ = run(capsys, "train", "--data", small_data, "--task", "grid:10", "--domain", "freq",
                       "--seed", 2, "--max-epochs", 2, "--out", ck)
    assert code == 0
    assert "architecture 392→400→300→200→100→100" in out
    assert [line.split()[0] for line in out.splitlines()[:3]] == ["train", "val", "test"]
    model = store.read_checkpoint(ck)
    assert model.spec.widths == (392, 400, 300, 200, 100, 100)
    assert model.train_meta["task"] == "grid:10" and model.train_meta["seed"] == 2
    hist = read_csv(str(ck) + ".history.csv")
    assert [r["epoch"] for r in hist] == ["1", "2"]


def test_train_keypad_descriptor(small_data, tmp_path, capsys):
    ck = tmp_path / "kp.lwtm"
    code, out, _ = run(capsys, "train", "--data", small_data, "--task", "keypad", "--max-epochs", 2, "--out", ck)
    assert code == 0 and "392→100→50→13" in out
    assert store.read_checkpoint(ck).spec.head is Head.SOFTMAX_CLASSIFIER
    code, _, err = run(capsys, "train", "--data", small_data, "--task", "keypad", "--domain", "time",
                       "--out", tmp_path / "bad.lwtm")
    assert code == 1 and "frequency" in err


def test_bad_task_is_usage_error(small_data, tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["train", "--data", str(small_data), "--task", "grid:11", "--out", str(tmp_path / "m")])


def test_train_eval_predict_flow(small_data, tmp_path, capsys):
    ck = tmp_path / "r.lwtm"
    run(capsys, "train", "--data", small_data, "--task", "regression", "--max-epochs", 3, "--out", ck)
    code, out, _ = run(capsys, "eval", "--data", small_data, "--model", ck, "--out-dir", tmp_path)
    assert code == 0
    metrics = dict(kv.split("=") for kv in out.split()[1:])
    assert float(metrics["rmse_cm"]) >= 0
    rows = read_csv(tmp_path / "predictions.csv")
    assert len(rows) == 16  # 10% of 160

    code, out, _ = run(capsys, "predict", "--data", small_data, "--model", ck, "--index", 5)
    assert code == 0 and len(out.split()) == 2
    code, _, err = run(capsys, "predict", "--data", small_data, "--model", ck, "--index", 160)
    assert code == 1 and "out of range" in err


def test_keypad_eval_writes_confusion(small_data, tmp_path, capsys):
    ck = tmp_path / "kp.lwtm"
    run(capsys, "train", "--data", small_data, "--task", "keypad", "--max-epochs", 2, "--out", ck)
    code, _, _ = run(capsys, "eval", "--data", small_data, "--model", ck, "--all", "--out-dir", tmp_path)
    rows = read_csv(tmp_path / "confusion.csv")
    assert code == 0 and len(rows) == 13 and rows[-1]["predicted"] == "L"
    assert sum(int(v) for r in rows for k, v in r.items() if k != "predicted") == 160
    code, out, _ = run(capsys, "predict", "--data", small_data, "--model", ck, "--index", 0)
    assert out.strip() in list("123456789*0#L")


def test_bench_writes_latency(small_data, tmp_path, capsys):
    ck = tmp_path / "kp.lwtm"
    run(capsys, "train", "--data", small_data, "--task", "keypad", "--max-epochs", 1, "--out", ck)
    code, out, _ = run(capsys, "bench", "--data", small_data, "--model", ck, "--knn", "--reps", 50,
                       "--warmup", 5, "--out-dir", tmp_path)
    assert code == 0 and "DNN median_ms=" in out and "kNN median_ms=" in out
    assert [r["method"] for r in read_csv(tmp_path / "latency.csv")] == ["DNN", "kNN"]


def test_sweep_rejects_starved_fraction(small_data, tmp_path, capsys):
    code, _, err = run(capsys, "sweep", "--data", small_data, "--max-epochs", 1, "--out-dir", tmp_path)
    assert code == 1 and "without training samples" in err


def test_sweep_emits_ten_rows(tmp_path, capsys):
    big = tmp_path / "big.lwtd"
    run(capsys, "gen", "--count", 2000, "--seed", 4, "--out", big)
    code, out, _ = run(capsys, "sweep", "--data", big, "--max-epochs", 1, "--reps", 20, "--warmup", 2,
                       "--out-dir", tmp_path)
    assert code == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 10
    assert [(r["method"], r["fraction"]) for r in rows[:2]] == [("DNN", "1.0"), ("kNN", "1.0")]


def test_circle_outputs(small_data, tmp_path, capsys):
    code, out, _ = run(capsys, "circle", "--data", small_data, "--max-epochs", 1, "--count", 12,
                       "--out-dir", tmp_path)
    assert code == 0
    pairs = read_csv(tmp_path / "circle_pairs.csv")
    assert len(pairs) == 36 and {p["model"] for p in pairs} == {"C-5", "C-10", "R"}
    assert [r["model"] for r in read_csv(tmp_path / "circle.csv")] == ["C-5", "C-10", "R"]


def test_eval_compare_structure(small_data, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--data", small_data, "--compare", "--max-epochs", 1, "--out-dir", tmp_path)
    assert code == 0
    rows = read_csv(tmp_path / "grid_comparison.csv")
    assert len(rows) == 20
    assert {r["domain"] for r in rows} == {"time", "freq"}


def test_missing_files_exit_nonzero(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--data", tmp_path / "nope.lwtd", "--model", tmp_path / "nope.lwtm")
    assert code == 1 and "error" in err
    (tmp_path / "junk.lwtd").write_bytes(b"JUNKJUNKJUNKJUNK")
    code, _, err = run(capsys, "train", "--data", tmp_path / "junk.lwtd", "--task", "regression",
                       "--out", tmp_path / "m")
    assert code == 1 and "magic" in err


def test_console_entry_point(tmp_path):
    out = tmp_path / "s.lwtd"
    proc = subprocess.run([sys.executable, "-m", "lambtouch", "gen", "--count", "3", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("records=3")
    proc = subprocess.run([sys.executable, "-m", "lambtouch", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2
