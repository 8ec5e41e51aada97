import json

import pytest

from scalecl.buffer import ReplayBuffer
from scalecl.cli import main
from scalecl.harness.config import dump_config
from scalecl.harness.metrics import SUMMARY_SCHEMA, read_csv
from scalecl.harness.runner import load_model
from scalecl.params import read_checkpoint

from test_harness import tiny


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(dump_config(tiny(rr=0.5, csr=0.5)))
    return path


def test_pretrain_writes_checkpoint_buffer_and_json(tmp_path, cfg_file):
    out = tmp_path / "pre"
    assert main(["pretrain", "-c", str(cfg_file), "--out-dir", str(out)]) == 0
    net, meta, config = load_model(out / "theta0.ckpt")
    assert meta["phase"] == "pretrain" and len(net.classes) == 8
    buf = ReplayBuffer.restore(out / "pt_buffer.sclbuf")
    assert len(buf) == 8 * 20
    assert json.loads((out / "pretrain.json").read_text())["val_accuracy"] >= 0.8


def test_run_outputs_and_determinism(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["run", "-c", str(cfg_file), "--seed", "0,1", "--out-dir", str(d)]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    rows = read_csv(a / "metrics.csv")
    assert {r["seed"] for r in rows} == {"0", "1", "mean"}
    summary = json.loads((a / "summary.json").read_text())
    assert summary["schema"] == SUMMARY_SCHEMA and summary["seeds"] == [0, 1]
    assert (a / "config.yaml").exists() and (a / "model_seed1.ckpt").exists()


def test_run_requires_seed_and_out_dir(cfg_file):
    with pytest.raises(SystemExit):
        main(["run", "-c", str(cfg_file), "--seed", "0"])
    with pytest.raises(SystemExit):
        main(["run", "-c", str(cfg_file), "--out-dir", "x"])


def test_bad_override_exits_nonzero(tmp_path, cfg_file):
    assert main(["run", "-c", str(cfg_file), "--seed", "0", "--out-dir", str(tmp_path), "--set", "rr=-1"]) == 1
    assert main(["run", "-c", str(cfg_file), "--seed", "0", "--out-dir", str(tmp_path), "--set", "bogus=1"]) == 1


def test_aborted_phase_exits_2(tmp_path, cfg_file):
    code = main(["run", "-c", str(cfg_file), "--seed", "0", "--out-dir", str(tmp_path),
                 "--set", "pretrain.accuracy_floor=1.01"])
    assert code == 2


def test_sweep_merge_probe_report(tmp_path, cfg_file):
    sw = tmp_path / "sweep"
    assert main(["sweep", "-c", str(cfg_file), "--grid", "merge.alpha=[0.5,1.0]",
                 "--set", "merge.strategy=sequential", "--out-dir", str(sw)]) == 0
    grid = json.loads((sw / "grid.json").read_text())
    assert len(grid["points"]) == 2 and (sw / "best_config.yaml").exists()
    assert (sw / "tiny-g000" / "summary.json").exists()

    pre = tmp_path / "pre"
    main(["pretrain", "-c", str(cfg_file), "--out-dir", str(pre)])
    run = tmp_path / "run"
    main(["run", "-c", str(cfg_file), "--seed", "0", "--out-dir", str(run)])
    merged = tmp_path / "merged.ckpt"
    assert main(["merge", "--base", str(run / "model_seed0.ckpt"), "--inputs", str(run / "model_seed0.ckpt"),
                 "--strategy", "sequential", "--alpha", "0.5", "--out", str(merged)]) == 0
    a, _, _ = read_checkpoint(merged)
    b, _, _ = read_checkpoint(run / "model_seed0.ckpt")
    assert a.equals(b)
    par = tmp_path / "par.ckpt"
    assert main(["merge", "--base", str(pre / "theta0.ckpt"), "--inputs", str(run / "model_seed0.ckpt"),
                 "--strategy", "parallel", "--alpha", "1.0", "--dare-p", "0", "--ties-k", "1",
                 "--out", str(par)]) == 0
    probed = tmp_path / "probed.ckpt"
    assert main(["probe", "-c", str(cfg_file), "--checkpoint", str(par), "--out", str(probed)]) == 0
    assert len(load_model(probed)[0].classes) == 9

    rep = tmp_path / "report"
    assert main(["report", str(tmp_path), "--out-dir", str(rep), "--n-tasks", "3"]) == 0
    for name in ("trp_table.csv", "accuracy_vs_rr.csv", "accuracy_vs_tasks.csv", "per_task.csv"):
        assert (rep / name).exists()
    trp = read_csv(rep / "trp_table.csv")
    assert any(float(r["rr"]) == 0.5 and r["trp_measured"] for r in trp)


def test_merge_missing_file_exits_1(tmp_path):
    assert main(["merge", "--base", str(tmp_path / "nope.ckpt"), "--inputs", str(tmp_path / "x.ckpt"),
                 "--out", str(tmp_path / "o.ckpt")]) == 1
