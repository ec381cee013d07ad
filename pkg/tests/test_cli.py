import re

import numpy as np
import pytest

from moe_sparsekit.calibrate import load_table
from moe_sparsekit.cli import main
from moe_sparsekit.model import load_weights
from moe_sparsekit.profiler import parse_report


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def wfile(tmp_path, capsys):
    p = tmp_path / "w.bin"
    assert run(capsys, "gen", "--experts", 8, "--topk", 2, "--dmodel", 32, "--dffn", 64,
               "--shared-dim", 32, "--seed", 3, "--out", p)[0] == 0
    return p


def test_gen(tmp_path, capsys, wfile):
    p2 = tmp_path / "w2.bin"
    code, out, _ = run(capsys, "gen", "--experts", 8, "--topk", 2, "--dmodel", 32, "--dffn", 64,
                       "--shared-dim", 32, "--seed", 3, "--out", p2)
    assert code == 0 and "experts=8" in out and "d_ffn=64" in out
    assert wfile.read_bytes() == p2.read_bytes()
    assert load_weights(p2).config.d_shared == 32
    code, _, err = run(capsys, "gen", "--experts", 2, "--topk", 3, "--dmodel", 4, "--dffn", 4, "--out", p2)
    assert code == 2 and "top_k" in err
    assert run(capsys, "gen", "--experts", 2, "--topk", 1, "--dmodel", 0, "--dffn", 4, "--out", p2)[0] == 2


def test_calibrate(tmp_path, capsys, wfile):
    t1, t2 = tmp_path / "t1.tsv", tmp_path / "t2.tsv"
    code, out, _ = run(capsys, "calibrate", "--weights", wfile, "--tokens", 512, "--seed", 1, "--out", t1)
    assert code == 0 and out.count("\n") >= 7
    table = load_table(t1)
    assert table.targets.tolist() == [0.6, 0.7, 0.8, 0.85, 0.87]
    assert np.all(np.diff(table.thresholds) >= 0)
    run(capsys, "calibrate", "--weights", wfile, "--tokens", 512, "--seed", 1, "--out", t2)
    assert t1.read_bytes() == t2.read_bytes()
    assert run(capsys, "calibrate", "--weights", wfile, "--targets", "0.6,0.6", "--out", t2)[0] == 2
    assert run(capsys, "calibrate", "--weights", tmp_path / "none.bin", "--out", t2)[0] == 3


def _diff(out, key):
    return [float(v) for v in re.findall(rf"{key}: ([0-9.e+-]+)", out)]


def test_run_sparsity_zero_matches_dense(tmp_path, capsys, wfile):
    a, b = tmp_path / "a.npy", tmp_path / "b.npy"
    code, out, _ = run(capsys, "run", "--weights", wfile, "--batch", 16, "--sparsity", 0, "--dump-output", a)
    assert code == 0 and max(_diff(out, "max_rel_diff_vs_dense")) <= 1e-5
    assert run(capsys, "run", "--weights", wfile, "--batch", 16, "--dense", "--dump-output", b)[0] == 0
    ya, yb = np.load(a), np.load(b)
    assert np.abs(ya - yb).max() / max(1, np.abs(yb).max()) <= 1e-5


def test_run_modes(tmp_path, capsys, wfile):
    with pytest.raises(SystemExit) as ei:
        main(["run", "--weights", str(wfile), "--dense", "--sparsity", "0.5"])
    assert ei.value.code == 2
    capsys.readouterr()
    code, out, _ = run(capsys, "run", "--weights", wfile, "--batch", "4,8", "--sparsity", 0.3)
    assert code == 0 and max(_diff(out, "oracle_max_rel_diff")) <= 1e-5
    assert out.count("path_used=sparse") == 2
    code, out, _ = run(capsys, "run", "--weights", wfile, "--batch", 4, "--sparsity", 0.5, "--budget", "3:2:1")
    assert code == 0 and re.search(r"g0=\d+ g1=\d+ g2=\d+", out) and "masked_dense" in out
    code, out, _ = run(capsys, "run", "--weights", wfile, "--batch", 4, "--sparsity", 0.5, "--mode", "R+S")
    assert code == 0 and "masked_dense" in out
    code, out, _ = run(capsys, "run", "--weights", wfile, "--batch", "2,32", "--sparsity", 0.5, "--switch",
                       "--switch-grid", "1,16", "--repeats", 1)
    assert code == 0 and "tipping_batch" in out and out.count("path_used=") == 2
    assert run(capsys, "run", "--weights", wfile, "--tau", -1)[0] == 2
    assert run(capsys, "run", "--weights", wfile, "--dense", "--budget", "1:1:1")[0] == 2
    bad = tmp_path / "bad.tsv"
    bad.write_text("nonsense\n")
    assert run(capsys, "run", "--weights", wfile, "--sparsity", 0.5, "--table", bad)[0] == 3


def test_run_deterministic(capsys, wfile):
    a = run(capsys, "run", "--weights", wfile, "--batch", 8, "--sparsity", 0.4, "--seed", 5)[1]
    b = run(capsys, "run", "--weights", wfile, "--batch", 8, "--sparsity", 0.4, "--seed", 5)[1]
    assert a == b


def test_run_threads_env(monkeypatch, capsys, wfile):
    base = run(capsys, "run", "--weights", wfile, "--batch", 33, "--tau", 0.05)[1]
    monkeypatch.setenv("MOE_SPARSEKIT_THREADS", "3")
    assert run(capsys, "run", "--weights", wfile, "--batch", 33, "--tau", 0.05)[1] == base
    assert run(capsys, "--threads", 2, "run", "--weights", wfile, "--batch", 33, "--tau", 0.05)[1] == base
    monkeypatch.setenv("MOE_SPARSEKIT_THREADS", "many")
    assert run(capsys, "run", "--weights", wfile, "--tau", 0.05)[0] == 2


def test_sweep(tmp_path, capsys, wfile):
    out_csv = tmp_path / "s.csv"
    code, out, _ = run(capsys, "sweep", "--weights", wfile, "--targets", "0,0.3,0.6,0.9", "--out", out_csv)
    assert code == 0
    lines = out_csv.read_text().splitlines()
    assert len(lines) == 6 and lines[-1].startswith("# cutoff=")
    assert len(parse_report(out_csv).points) == 4
    assert run(capsys, "sweep", "--weights", tmp_path / "no.bin", "--out", out_csv)[0] == 3
    assert run(capsys, "sweep", "--weights", wfile, "--out", tmp_path / "nodir" / "s.csv")[0] == 3
    code, _, _ = run(capsys, "sweep", "--weights", wfile, "--path", "threshold", "--targets", "0.1,0.3",
                     "--out", out_csv)
    assert code == 0 and "sparse" in out_csv.read_text()


def test_profile(tmp_path, capsys, wfile):
    h, c, k = tmp_path / "h.tsv", tmp_path / "c.tsv", tmp_path / "k.tsv"
    code, out, _ = run(capsys, "profile", "--weights", wfile, "--expert", 0, "--tokens", 256,
                       "--out", h, "--counts-out", c, "--kept-out", k)
    assert code == 0
    events = int(re.search(r"events: (\d+)", out).group(1))
    assert events == 256 * 64
    assert sum(int(ln.split("\t")[1]) for ln in h.read_text().splitlines()) == events
    assert len(c.read_text().splitlines()) == 64
    assert run(capsys, "profile", "--weights", wfile, "--expert", 8, "--out", h)[0] == 2


def test_bench_reduction_from_counters(tmp_path, capsys):
    w = tmp_path / "b.bin"
    run(capsys, "gen", "--experts", 8, "--topk", 2, "--dmodel", 64, "--dffn", 256, "--seed", 1, "--out", w)
    code, out, _ = run(capsys, "bench", "--weights", w, "--routed-sparsity", 0.94, "--batch", 64, "--repeats", 1)
    assert code == 0 and "informational" in out
    vals = dict(re.findall(r"^(\S+): (\S+)", out, re.M))
    s = float(vals["achieved_routed_sparsity"])
    assert float(vals["updown_reduction_unpadded"]) == pytest.approx(1 / (1 - s), rel=1e-6)
    assert abs(float(vals["updown_reduction_unpadded"]) - 16.7) < 1.0
    assert float(vals["routed_mac_ratio"]) == pytest.approx(float(vals["theoretical_ratio_(1+2(1-s))/3"]),
                                                            abs=1e-8)


def test_run_exit_4_on_oracle_mismatch(monkeypatch, capsys, wfile):
    import moe_sparsekit.cli as cli

    real = cli.forward_sparse

    def corrupted(*a, **kw):
        rep = real(*a, **kw)
        rep.outputs = rep.outputs + np.float32(1.0)
        return rep

    monkeypatch.setattr(cli, "forward_sparse", corrupted)
    code, _, err = run(capsys, "run", "--weights", wfile, "--batch", 4, "--tau", 0.05)
    assert code == 4 and "oracle" in err
