import json
import subprocess
import sys

import numpy as np
import pytest

from tightpack import WeightMatrix, load_matrix, quantize8, save_matrix
from tightpack.cli import main
from tightpack.tensorio import encode_tcm, read_pgm

from conftest import lognormal_weights, random_weights

SMALL = ["--rows", "8", "--cols", "8", "--group-max", "8", "--subarray-cols", "4"]
FAST = ["--t-init", "20", "--t-end", "0.5", "--cooling", "0.1"]


@pytest.fixture
def dense_file(tmp_path):
    v = np.random.default_rng(0).integers(1, 128, (30, 30)).astype(np.int8)
    p = tmp_path / "dense.tcm"
    save_matrix(WeightMatrix(v, 0.01), p)
    return p


@pytest.fixture
def sparse_file(tmp_path):
    m = quantize8(lognormal_weights(np.random.default_rng(1), 24, 40, 0.12), name="fc")
    p = tmp_path / "fc.tcm"
    save_matrix(m, p)
    return p


def test_prune_rate(dense_file, tmp_path):
    out = tmp_path / "p.tcm"
    assert main(["prune", str(dense_file), str(out), "--rate", "0.933"]) == 0
    m = load_matrix(out)
    assert abs(m.stats().density - 0.067) <= 1 / m.values.size


def test_prune_rate_zero_is_identity(dense_file, tmp_path):
    out = tmp_path / "same.tcm"
    assert main(["prune", str(dense_file), str(out), "--rate", "0"]) == 0
    assert out.read_bytes() == dense_file.read_bytes()


def test_prune_schedule(dense_file, tmp_path):
    out = tmp_path / "s.tcm"
    assert main(["prune", str(dense_file), str(out), "--schedule", "20", "0.5"]) == 0
    assert load_matrix(out).stats().density == pytest.approx(0.5)


@pytest.mark.parametrize("flags", [["--rate", "1.5"], ["--schedule", "20", "1.2"],
                                   ["--rate", "abc"], []])
def test_prune_validation_errors(dense_file, tmp_path, flags, capsys):
    assert main(["prune", str(dense_file), str(tmp_path / "x.tcm"), *flags]) == 2
    assert capsys.readouterr().err


def test_missing_input_exit_two(tmp_path):
    assert main(["prune", str(tmp_path / "nope.tcm"), str(tmp_path / "o.tcm"),
                 "--rate", "0.5"]) == 2
    assert main(["render", str(tmp_path / "nope.tcm"), str(tmp_path / "o.pgm")]) == 2


def test_bad_matrix_file_exit_two(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1,2\n3\n")
    assert main(["render", str(p), str(tmp_path / "o.pgm")]) == 2


def _compress(src, tmp_path, *extra, name="out"):
    out = tmp_path / f"{name}.packed.json"
    rc = main(["compress", str(src), "-o", str(out), *SMALL, *FAST, *extra])
    return rc, out, tmp_path / f"{name}.report.json"


def test_compress_deterministic(sparse_file, tmp_path):
    _, a, ra = _compress(sparse_file, tmp_path, "--seed", "4", name="a")
    _, b, rb = _compress(sparse_file, tmp_path, "--seed", "4", name="b")
    assert a.read_bytes() == b.read_bytes()
    assert ra.read_bytes() == rb.read_bytes()


def test_compress_report_contents(sparse_file, tmp_path):
    rc, out, rep = _compress(sparse_file, tmp_path)
    assert rc == 0
    doc = json.loads(rep.read_text())
    assert doc["schema"] == "tightpack-report/1"
    assert doc["compression"]["compression_rate"] >= doc["baseline_compression_rate"]
    assert doc["anneal"]["best_energy"] <= doc["anneal"]["initial_energy"]
    assert json.loads(out.read_text())["schema"] == "tightpack-packed/1"


def test_compress_subword_density_above_one(tmp_path):
    # column c holds an L value at row c and an H value at row c-1
    v = np.zeros((8, 8), np.int8)
    for c in range(8):
        v[c, c] = 5
        v[(c - 1) % 8, c] = 96
    p = tmp_path / "sw.tcm"
    save_matrix(WeightMatrix(v), p)
    rc, _, rep = _compress(p, tmp_path, "--mode", "subword", "--subword-format", "4,4",
                           "--delta-max", "0.3", "--no-anneal")
    assert rc == 0
    doc = json.loads(rep.read_text())
    assert doc["compression"]["density"] > 1.0
    assert doc["subword"]["format"] == "4,4"


def test_compress_auto_format_table(sparse_file, tmp_path):
    rc, _, rep = _compress(sparse_file, tmp_path, "--mode", "subword", "--delta-max", "0.3")
    assert rc == 0
    table = json.loads(rep.read_text())["subword"]["table"]
    assert set(table) == {"3,5", "4,4", "5,3"}
    assert set(table["4,4"]) == {"l_pct", "h_pct", "full_pct"}


@pytest.mark.parametrize("flags", [["--group-max", "17"], ["--cooling", "2"],
                                   ["--mode", "subword", "--delta-max", "1.5"],
                                   ["--subword-format", "6,2"]])
def test_compress_validation(sparse_file, tmp_path, flags):
    assert main(["compress", str(sparse_file), "-o", str(tmp_path / "o.json"), *flags]) == 2


def test_compress_many_inputs_parallel(sparse_file, tmp_path):
    other = tmp_path / "b.tcm"
    save_matrix(random_weights(np.random.default_rng(2), 16, 16, 0.2), other)
    outdir = tmp_path / "many"
    rc = main(["compress", str(sparse_file), str(other), "-o", str(outdir), "--jobs", "2",
               *SMALL, *FAST])
    assert rc == 0
    assert sorted(p.name for p in outdir.iterdir()) == [
        "b.packed.json", "b.report.json", "fc.packed.json", "fc.report.json"]


def test_trace_and_render(sparse_file, tmp_path):
    trace, pgm = tmp_path / "t.jsonl", tmp_path / "r.pgm"
    rc, out, _ = _compress(sparse_file, tmp_path, "--trace", str(trace), "--render", str(pgm))
    assert rc == 0
    first = json.loads(trace.read_text().splitlines()[0])
    assert set(first) >= {"step", "temp", "delta", "accepted", "best_width"}
    assert read_pgm(pgm).shape[0] == 3 * 8 + 2


def test_config_file_and_flag_precedence(sparse_file, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("rows = 8\ncols = 8\ngroup-max = 4\nsubarray-cols = 4\n"
                   "t_init = 20\nt_end = 0.5\ncooling = 0.1\nseed = 7\n")
    out = tmp_path / "c.json"
    assert main(["--config", str(cfg), "compress", str(sparse_file), "-o", str(out),
                 "--group-max", "8"]) == 0
    doc = json.loads(out.read_text())
    assert doc["geometry"]["array_rows"] == 8 and doc["geometry"]["group_max"] == 8
    rep = json.loads((tmp_path / "c.report.json").read_text())
    assert rep["anneal"]["seed"] == 7


def test_bad_config_file(sparse_file, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("just words\n")
    assert main(["--config", str(cfg), "render", str(sparse_file), "x.pgm"]) == 2


def _activations(tmp_path, cols, batch=4):
    x = np.random.default_rng(3).integers(-128, 128, (cols, batch)).astype(np.int8)
    p = tmp_path / "x.tcm"
    save_matrix(WeightMatrix(x), p)
    return p, x


def test_simulate_check_and_reports(sparse_file, tmp_path):
    _, packed, comp = _compress(sparse_file, tmp_path)
    xp, x = _activations(tmp_path, 40)
    out = tmp_path / "y.csv"
    layer = tmp_path / "layers.csv"
    assert main(["simulate", str(packed), str(xp), "-o", str(out), "--check",
                 "--layer-csv", str(layer)]) == 0
    y = np.loadtxt(out, delimiter=",", dtype=np.int64, ndmin=2)
    w = load_matrix(sparse_file).values.astype(np.int64)
    assert (y == w @ x.astype(np.int64)).all()
    cyc = json.loads((tmp_path / "y.cycles.json").read_text())
    assert cyc["tile_count"] == json.loads(comp.read_text())["compression"]["tile_count"]
    assert cyc["check"]["mismatches"] == 0
    assert "proxies" in cyc["note"]
    assert layer.read_text().splitlines()[0] == "layer,cycles"


def test_simulate_folded_matches(sparse_file, tmp_path):
    _, packed, _ = _compress(sparse_file, tmp_path)
    xp, _ = _activations(tmp_path, 40)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", str(packed), str(xp), "-o", str(a)]) == 0
    assert main(["simulate", str(packed), str(xp), "-o", str(b), "--fold"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_mismatch_exit_three(sparse_file, tmp_path, monkeypatch):
    import tightpack.cli as cli
    _, packed, _ = _compress(sparse_file, tmp_path)
    xp, _ = _activations(tmp_path, 40)
    real = cli.simulate_matmul
    monkeypatch.setattr(cli, "simulate_matmul", lambda *a, **k: real(*a, **k) + 1)
    assert main(["simulate", str(packed), str(xp), "-o", str(tmp_path / "y.csv"),
                 "--check"]) == 3


def test_simulate_missing_and_mismatched_inputs(sparse_file, tmp_path):
    _, packed, _ = _compress(sparse_file, tmp_path)
    assert main(["simulate", str(packed), str(tmp_path / "nope.tcm"),
                 "-o", str(tmp_path / "y.csv")]) == 2
    xp, _ = _activations(tmp_path, 39)
    assert main(["simulate", str(packed), str(xp), "-o", str(tmp_path / "y.csv")]) == 2


def test_render_matrix_and_packed(sparse_file, tmp_path):
    _, packed, _ = _compress(sparse_file, tmp_path)
    assert main(["render", str(sparse_file), str(tmp_path / "m.pgm")]) == 0
    assert read_pgm(tmp_path / "m.pgm").shape == (24, 40)
    assert main(["render", str(packed), str(tmp_path / "p.pgm")]) == 0
    assert read_pgm(tmp_path / "p.pgm").shape[0] == 3 * 8 + 2


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "compress" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    p = tmp_path / "e.tcm"
    p.write_bytes(encode_tcm(WeightMatrix(np.eye(2, dtype=np.int8))))
    proc = subprocess.run([sys.executable, "-m", "tightpack", "render", str(p),
                           str(tmp_path / "e.pgm")], capture_output=True)
    assert proc.returncode == 0
    assert read_pgm(tmp_path / "e.pgm").ravel().tolist() == [255, 0, 0, 255]
