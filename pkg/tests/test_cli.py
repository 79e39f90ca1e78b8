import json
import subprocess
import sys

import pytest

from hwquant.cli import main

from conftest import FIXTURE_DIR

F = FIXTURE_DIR


def _run(*argv):
    return main([str(a) for a in argv])


def _calibrate(tmp_path, name="tiny_mlp", spec="int8_int32", *extra):
    out = tmp_path / f"{name}_stats.json"
    rc = _run("calibrate", "-m", F / f"{name}.json", "-s", F / f"spec_{spec}.json",
              "-d", F / f"{name}_calib.json", "-o", out, *extra)
    assert rc == 0
    return out


def _search(tmp_path, stats, tag, *extra, name="tiny_mlp", spec="int8_int32"):
    out = tmp_path / f"strategy_{tag}.json"
    rc = _run("search", "-m", F / f"{name}.json", "-s", F / f"spec_{spec}.json", "--stats", stats,
              "-d", F / f"{name}_calib.json", "-o", out, *extra)
    assert rc == 0
    return out


def test_pipeline_end_to_end(tmp_path, capsys):
    stats = _calibrate(tmp_path, "tiny_mlp", "int8_int32", "--method", "max")
    strat = _search(tmp_path, stats, "g", "--trace", tmp_path / "trace.jsonl")
    out = capsys.readouterr().out
    assert "final loss" in out and "evaluations" in out and "space size 125" in out
    doc = json.loads(strat.read_text())
    assert doc["meta"]["method"] == "greedy" and len(doc["edges"]) == 3
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert "header" in json.loads(lines[0]) and len(lines) - 1 == doc["meta"]["evaluations"]

    realized = tmp_path / "realized.json"
    assert _run("realize", "-m", F / "tiny_mlp.json", "-s", F / "spec_int8_int32.json",
                "--strategy", strat, "-o", realized) == 0
    out = capsys.readouterr().out
    assert "nodes" in out and "dtypes:" in out

    report = tmp_path / "report.json"
    assert _run("eval", F / "tiny_mlp.json", realized, "-d", F / "tiny_mlp_eval.json",
                "--overflow-mode", "trap", "-o", report) == 0
    assert json.loads(report.read_text())["top1_agreement"] >= 0.99


def test_eval_self_and_labeled(tmp_path, capsys):
    assert _run("eval", F / "small_cnn.json", F / "small_cnn.json", "-d", F / "small_cnn_eval.json") == 0
    assert "top1_agreement: 1.000000" in capsys.readouterr().out
    assert _run("eval", F / "overflow_probe.json", F / "overflow_probe.json",
                "-d", F / "overflow_probe_eval.json") == 0
    out = capsys.readouterr().out
    assert "accuracy_a" in out and "accuracy_b" in out and "accuracy_drop" in out


@pytest.mark.parametrize("method,extra", [("anneal", ["--steps", "60", "--seed", "3"]),
                                          ("random", ["--samples", "20", "--seed", "5"]),
                                          ("greedy", ["--rounds", "2"])])
def test_identical_seeds_give_identical_strategy_bytes(tmp_path, monkeypatch, method, extra):
    stats = _calibrate(tmp_path)
    a = _search(tmp_path, stats, "a", "--method", method, *extra, "--workers", "1")
    monkeypatch.setenv("HWQUANT_WORKERS", "4")
    b = _search(tmp_path, stats, "b", "--method", method, *extra)
    assert a.read_bytes() == b.read_bytes()


def test_exhaustive_reports_space(tmp_path, capsys):
    stats = _calibrate(tmp_path)
    _search(tmp_path, stats, "x", "--method", "exhaustive", "--workers", "3")
    assert "evaluations 125, space size 125" in capsys.readouterr().out


def test_calibrate_kl_pow2(tmp_path):
    stats = _calibrate(tmp_path, "fig4_chain", "fig3", "--method", "kl", "--pow2")
    doc = json.loads(stats.read_text())
    import math
    for v in doc["meta"]["thresholds"].values():
        assert math.log2(v) == int(math.log2(v))


def test_exit_codes(tmp_path, capsys):
    assert _run("frobnicate") == 1
    assert _run("calibrate", "-m", tmp_path / "nope.json", "-s", F / "spec_fig3.json",
                "-d", F / "fig4_chain_calib.json") == 2
    stats = _calibrate(tmp_path, "fig4_chain", "fig3")
    # stats collected on another graph
    assert _run("search", "-m", F / "tiny_mlp.json", "-s", F / "spec_int8_int32.json", "--stats", stats,
                "-d", F / "tiny_mlp_calib.json", "-o", tmp_path / "s.json") == 2
    assert "fingerprint" in capsys.readouterr().err
    bad = tmp_path / "bad_strategy.json"
    bad.write_text('{"edges": {"0": {}}}')
    assert _run("realize", "-m", F / "tiny_mlp.json", "-s", F / "spec_int8_int32.json",
                "--strategy", bad) == 2
    assert _run("eval", F / "tiny_mlp.json", F / "small_cnn.json", "-d", F / "tiny_mlp_eval.json") == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "hwquant", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "calibrate" in r.stdout
