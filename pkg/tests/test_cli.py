from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from cirfuse.bundle import synth_bundle, write_bundle
from cirfuse.cli import main


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("bundles") / "planted"
    write_bundle(synth_bundle(100, 10, 32, seed=1), path)
    return path


def _dir_bytes(path: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_validate_ok(bundle_dir, capsys):
    assert main(["validate", str(bundle_dir)]) == 0
    assert capsys.readouterr().err == ""


def test_validate_reports_planted_nan(tmp_path, capsys):
    src = tmp_path / "bad"
    write_bundle(synth_bundle(20, 3, 8, seed=2), src)
    raw = np.fromfile(src / "gallery.img.bin", dtype="<f4").reshape(20, 8)
    raw[7, 3] = np.nan
    raw.tofile(src / "gallery.img.bin")
    assert main(["validate", str(src)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert "t_v[7, 3]" in err[0]


def test_validate_missing_manifest(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "nothing")]) == 2
    assert "error:" in capsys.readouterr().err


def test_eval_writes_report_with_perfect_recall(bundle_dir, tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["eval", str(bundle_dir), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["metrics"]["recall"]["1"] == 1.0
    assert doc["config"]["weights"] == {"qm": 0.6, "qf": 0.4, "qv": 0.0,
                                        "tc": 0.2, "tv": 0.8}
    summary = capsys.readouterr().out
    assert "recall@1 1.000000" in summary


def test_eval_fashion_weights_echo(bundle_dir, tmp_path):
    out = tmp_path / "fiq.json"
    assert main(["eval", str(bundle_dir), "--alpha", "0.2", "--beta", "0.6",
                 "--gamma", "0.1", "--out", str(out)]) == 0
    w = json.loads(out.read_text())["config"]["weights"]
    assert w["qm"] == 0.2 and w["qf"] == 0.6 and w["tc"] == 0.1
    assert w["qv"] == pytest.approx(0.2)


def test_eval_rejects_alpha_beta_above_one(bundle_dir, capsys):
    assert main(["eval", str(bundle_dir), "--alpha", "0.7", "--beta", "0.5"]) == 1
    assert "alpha + beta" in capsys.readouterr().err


def test_eval_unreadable_bundle_exits_two(tmp_path):
    assert main(["eval", str(tmp_path / "missing")]) == 2


def test_eval_rerun_is_byte_identical(bundle_dir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["eval", str(bundle_dir), "--out", str(a)]) == 0
    assert main(["eval", str(bundle_dir), "--out", str(b), "--threads", "8"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_sweep_step_half_six_cells(bundle_dir, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", str(bundle_dir), "--step", "0.5",
                 "--gamma-values", "0.2", "--metric", "recall", "--topk", "1",
                 "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "alpha,beta,gamma,metric,k,value"
    assert len(lines) == 1 + 6
    assert all(line.endswith("1.000000") for line in lines[1:])


def test_ablate_preset_has_baseline_plus_seven_rows(bundle_dir, tmp_path):
    out = tmp_path / "ablate.csv"
    assert main(["ablate", str(bundle_dir), "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    labels = {line.split(",")[0] for line in lines[1:]}
    assert labels == {"none", "QF+QV+TV", "QM+TC", "QV", "QF", "QM", "TV", "TC"}
    assert len(labels) == 8


def test_ncap_row_count(bundle_dir, tmp_path):
    out = tmp_path / "ncap.csv"
    assert main(["ncap", str(bundle_dir), "--side", "target", "--n", "1,2,3",
                 "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "side,n,metric,k,value"
    n_col = {line.split(",")[1] for line in lines[1:]}
    assert n_col == {"1", "2", "3"}


def test_retrieve_top1_is_planted_target(bundle_dir, capsys):
    assert main(["retrieve", str(bundle_dir), "--query-id", "0", "--topk", "5"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5
    ann = json.loads((bundle_dir / "annotations.json").read_text())[0]
    assert int(lines[0].split("\t")[0]) == ann["gt_ids"][0]
    scores = [float(line.split("\t")[1]) for line in lines]
    assert scores == sorted(scores, reverse=True)


def test_retrieve_full_gallery(bundle_dir, capsys):
    # reference exclusion is on by default, so one row is withheld
    assert main(["retrieve", str(bundle_dir), "--query-id", "1", "--topk", "99",
                 ]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 99


def test_retrieve_bad_query_id(bundle_dir, capsys):
    assert main(["retrieve", str(bundle_dir), "--query-id", "10"]) == 1
    assert "out of range" in capsys.readouterr().err


def test_synth_defaults_pass_validate(tmp_path, capsys):
    out = tmp_path / "synth"
    assert main(["synth", "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["validate", str(out)]) == 0


def test_synth_same_seed_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--seed", "7", "--out", str(a)]) == 0
    assert main(["synth", "--seed", "7", "--out", str(b)]) == 0
    assert _dir_bytes(a) == _dir_bytes(b)


def test_synth_rejects_small_dim(tmp_path, capsys):
    assert main(["synth", "--dim", "4", "--out", str(tmp_path / "x")]) == 1
    assert "dim" in capsys.readouterr().err


def test_eval_drop_channel_flag(bundle_dir, tmp_path):
    out = tmp_path / "drop.json"
    assert main(["eval", str(bundle_dir), "--drop", "TC", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["config"]["weights"]["tc"] == 0.0
    assert doc["config"]["weights"]["tv"] == 1.0


def test_eval_custom_metrics_and_k(bundle_dir, tmp_path):
    out = tmp_path / "custom.json"
    assert main(["eval", str(bundle_dir), "--metrics", "recall", "--k", "1,3",
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert set(doc["metrics"]) == {"recall"}
    assert set(doc["metrics"]["recall"]) == {"1", "3"}
