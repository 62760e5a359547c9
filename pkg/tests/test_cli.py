import json

import pytest

from tgode import cli
from tgode.recommender import TrainingError
from tgode.synthetic import planted_interactions, write_interactions

TINY_FLAGS = ["--iters", "1", "--d", "8", "--d-z", "4", "--gen-hidden", "8", "--time-dim", "4", "--m", "4",
              "--K", "3", "--steps", "2", "--layers", "1", "--max-len", "8", "--cs-grid", "8", "--batch-size", "16"]


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "log.csv"
    write_interactions(planted_interactions(n_users=20, n_clusters=2, items_per_cluster=6, bursts=(2, 3),
                                            burst_len=(2, 3), seed=1), path)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_file):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--data", str(data_file), "--out", str(out), *TINY_FLAGS]) == 0
    return out


def test_train_outputs(trained):
    assert (trained / "model.ckpt").read_bytes().startswith(b"TGODE1")
    records = [json.loads(line) for line in (trained / "report.jsonl").read_text().splitlines()]
    assert {r["phase"] for r in records} == {"diffusion", "recommender"}


def test_train_rerun_is_byte_identical(tmp_path, data_file, trained):
    assert cli.main(["train", "--data", str(data_file), "--out", str(tmp_path), *TINY_FLAGS]) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()
    assert (tmp_path / "report.jsonl").read_bytes() == (trained / "report.jsonl").read_bytes()


def test_checkpoint_namespaces(trained):
    from tgode.autodiff import load_checkpoint

    names = load_checkpoint(trained / "model.ckpt")
    prefixes = {n.split("/")[0] for n in names}
    assert prefixes == {"codec", "diffusion", "ode", "rec", "meta"}
    assert {"codec/c_t.omega", "codec/phi.omega", "codec/g.omega"} <= set(names)


def test_evaluate_is_repeatable(tmp_path, trained, data_file, capsys):
    args = ["evaluate", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data_file)]
    assert cli.main(args + ["--out", str(tmp_path / "m.json")]) == 0
    first = capsys.readouterr().out
    assert cli.main(args) == 0
    assert capsys.readouterr().out == first
    report = json.loads((tmp_path / "m.json").read_text())
    assert report["recall"]["5"] <= report["recall"]["10"] <= report["recall"]["20"]


def test_recommend(trained, data_file, capsys):
    assert cli.main(["recommend", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data_file),
                     "--user", "u0", "--time", str(10 ** 9), "-k", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3
    probs = [float(line.split("\t")[1]) for line in lines]
    assert probs == sorted(probs, reverse=True)


def test_recommend_errors(trained, data_file):
    base = ["recommend", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data_file)]
    assert cli.main(base + ["--user", "nobody", "--time", "100"]) == 3
    assert cli.main(base + ["--user", "u0", "--time", "0"]) == 3


def test_vocabulary_mismatch(tmp_path, trained):
    other = tmp_path / "other.csv"
    other.write_text("a,x,1\nb,y,2\n")
    assert cli.main(["evaluate", "--checkpoint", str(trained / "model.ckpt"), "--data", str(other)]) == 3


def test_missing_files(tmp_path, data_file):
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(data_file)]) == 2
    assert cli.main(["analyze", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "none.cfg")]) == 2


def test_malformed_data(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,x,1\nb,y\n")
    assert cli.main(["analyze", "--data", str(bad), "--out", str(tmp_path / "o")]) == 3


def test_config_file(tmp_path, data_file):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data = {data_file}\nout = {tmp_path / 'o'}\n# comment\niters = 0\nd = 8\nheads = 2  # trailing\n")
    settings = cli.read_config(cfg)
    assert settings["iters"] == 0 and settings["d"] == 8
    assert cli.main(["train", "--config", str(cfg), "--no-diff"]) == 0
    cfg.write_text("bogus = 1\n")
    assert cli.main(["train", "--config", str(cfg)]) == 2
    cfg.write_text("iters = many\n")
    assert cli.main(["train", "--config", str(cfg)]) == 2


def test_usage_errors(tmp_path, data_file):
    assert cli.main([]) == 2
    assert cli.main(["train", "--data", str(data_file), "--out", str(tmp_path), "--base", "--no-ode"]) == 2
    assert cli.main(["train", "--data", str(data_file), "--out", str(tmp_path), "--lr", "-1"]) == 2


def test_numeric_failure_exit_code(tmp_path, data_file, monkeypatch):
    def boom(*a, **kw):
        raise TrainingError("recommender", 0, 0, FloatingPointError("nan"))

    monkeypatch.setattr(cli, "train_tgode", boom)
    assert cli.main(["train", "--data", str(data_file), "--out", str(tmp_path)]) == 4


def test_analyze(tmp_path, data_file, capsys):
    out = tmp_path / "a"
    assert cli.main(["analyze", "--data", str(data_file), "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["gap_count"] > 0
    assert (out / "intervals.csv").read_text().startswith("bucket,proportion\n0,")
    assert (out / "emergence.csv").exists() and (out / "analysis.json").exists()
