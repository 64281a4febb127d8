import csv
import json

import pytest

from fedface.cli import main
from fedface.config import dump_config


@pytest.fixture
def cfg_file(tmp_path, small_cfg):
    p = tmp_path / "exp.yaml"
    p.write_text(dump_config(small_cfg.replace(method="fedavg", checkpoint_every=3)))
    return p


def _run_dir(root):
    (d,) = [p for p in root.iterdir() if p.is_dir()]
    return d


def test_run_writes_outputs_and_is_reproducible(tmp_path, cfg_file, capsys):
    assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "b")]) == 0
    a, b = _run_dir(tmp_path / "a"), _run_dir(tmp_path / "b")
    rows = list(csv.DictReader(open(a / "metrics.csv")))
    assert len(rows) == 6 * 3
    assert {r["party"] for r in rows} == {"0", "1", "2"}
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert "metrics.csv" in json.loads((a / "csv_schema.json").read_text())
    assert "final aggregate loss" in capsys.readouterr().out


def test_out_root_from_environment(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("FEDFACE_OUT", str(tmp_path / "env"))
    assert main(["run", "--config", str(cfg_file)]) == 0
    assert (_run_dir(tmp_path / "env") / "metrics.csv").is_file()


def test_seed_override_changes_run(tmp_path, cfg_file):
    main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "b"), "--seed-override", "5"])
    assert _run_dir(tmp_path / "a").name != _run_dir(tmp_path / "b").name


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("fv: {phi: 0}\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "fv.phi" in capsys.readouterr().err


def test_gradcheck_passes_and_detects_perturbation(cfg_file, capsys):
    assert main(["gradcheck", "--config", str(cfg_file), "--instances", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--config", str(cfg_file), "--instances", "2",
                 "--perturb", "1e-3"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gridsearch_on_checkpoint(tmp_path, cfg_file, capsys):
    main(["run", "--config", str(cfg_file), "--out", str(tmp_path)])
    ckpt = _run_dir(tmp_path) / "checkpoints" / "round_00003.ckpt"
    out = tmp_path / "grid.csv"
    assert main(["gridsearch", "--checkpoint", str(ckpt), "--resolution", "2",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 6
    assert set(rows[0]) == {"w0", "w1", "w2", "score_v0", "score_v1", "score_v2", "total"}
    assert "argmax weighting" in capsys.readouterr().out


def test_gridsearch_missing_checkpoint(tmp_path):
    assert main(["gridsearch", "--checkpoint", str(tmp_path / "none.ckpt")]) == 2


def test_reference_config_and_schema(tmp_path, capsys):
    assert main(["reference-config", "--out", str(tmp_path / "ref.yaml")]) == 0
    assert "pairs_per_fold" in (tmp_path / "ref.yaml").read_text()
    assert main(["schema"]) == 0
    assert "fv_trace.csv" in json.loads(capsys.readouterr().out)


@pytest.mark.slow
def test_compare_default_config(tmp_path, capsys):
    import time
    from fedface.config import ExperimentConfig
    cfg_path = tmp_path / "default.yaml"
    cfg_path.write_text(dump_config(ExperimentConfig()))
    t0 = time.perf_counter()
    assert main(["compare", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 600
    out = _run_dir(tmp_path)
    rows = list(csv.DictReader(open(out / "compare.csv")))
    assert len(rows) == 5 * 3
    assert all(float(r["delta"]) == 0.0 for r in rows if r["method"] == "centralized")
    delta = {(r["method"], r["shard"]): float(r["delta"]) for r in rows}
    wins = sum(delta["pfm", s] >= delta["fedavg", s] for s in ("0", "1", "2"))
    printed = capsys.readouterr().out
    with capsys.disabled():
        print(f"\n{printed}\npfm >= fedavg on {wins}/3 shards, {elapsed:.0f}s")
    assert wins >= 2
