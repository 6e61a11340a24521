import shutil
from pathlib import Path

import numpy as np
import pytest

from depthgraph import io
from depthgraph.cli import EXIT_IO, EXIT_OK, EXIT_PARSE, main
from depthgraph.forward import DEFAULT_NOISE, DEFAULT_QUANTIZER, noise_std, quantize_clamped
from depthgraph.metrics import PointCloud

BUNDLED = Path(__file__).resolve().parents[1] / "configs" / "two_planes.cfg"


@pytest.fixture
def cfg(tmp_path):
    text = BUNDLED.read_text().replace("out_dir = ../out/two_planes", "out_dir = out")
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return p


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.is_file()}


def test_corrupt_is_byte_identical(cfg, tmp_path):
    assert main(["corrupt", "--config", str(cfg)]) == EXIT_OK
    first = _files(tmp_path / "out")
    shutil.rmtree(tmp_path / "out")
    assert main(["corrupt", "--config", str(cfg)]) == EXIT_OK
    assert _files(tmp_path / "out") == first
    assert {"left_observed.pgm", "right_observed.pgm", "left_observed.pgm.json"} <= first.keys()


def test_corrupt_metadata_and_seed_override(cfg, tmp_path):
    assert main(["corrupt", "--config", str(cfg), "--seed", "7", "--format", "pfm"]) == EXIT_OK
    meta = io.read_depth(tmp_path / "out" / "left_observed.pfm").meta
    assert meta["seed"] == 7
    assert meta["quantizer"]["theta"] == 500
    assert meta["noise"]["kappa"] == 1.4


def test_missing_input_exit_code(tmp_path, capsys):
    p = tmp_path / "c.cfg"
    p.write_text("left = nope_left.pgm\nright = nope_right.pgm\n")
    assert main(["corrupt", "--config", str(p)]) == EXIT_IO
    assert "nope_left.pgm" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path, capsys):
    assert main(["corrupt", "--config", str(tmp_path / "absent.cfg")]) == EXIT_IO
    assert "absent.cfg" in capsys.readouterr().err


def test_bad_config_value_exit_code(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("scene = two_planes\ng1 = lots\n")
    assert main(["corrupt", "--config", str(p)]) == EXIT_PARSE


def _clusters_csv(path, rng):
    lines = ["cluster_id,x_star_mm,y_mm"]
    for k, x in enumerate((615.0, 815.0, 1015.0, 1215.0, 1525.0)):
        ys = quantize_clamped(x + rng.normal(0, noise_std(x, DEFAULT_NOISE), 100), DEFAULT_QUANTIZER)
        for y in ys:
            lines.append(f"c{k},{x},{float(y)!r}")
    path.write_text("\n".join(lines) + "\n")


def test_estimate_report(cfg, tmp_path, capsys, rng):
    _clusters_csv(tmp_path / "cl.csv", rng)
    assert main(["estimate", "--config", str(cfg), "--clusters", str(tmp_path / "cl.csv")]) == EXIT_OK
    out = capsys.readouterr().out
    rows = [line.split() for line in out.splitlines() if line.startswith("c")]
    assert len(rows) == 5
    for r in rows:
        sigma, lo, hi = map(float, r[2:5])
        assert lo <= sigma <= hi
    assert "alpha =" in out and "mu =" in out and "kappa =" in out
    assert (tmp_path / "out" / "noise_report.txt").read_text() == out


def test_malformed_csv_names_line(cfg, tmp_path, capsys):
    (tmp_path / "cl.csv").write_text("cluster_id,x_star_mm,y_mm\nc0,615,615.2\nc0,615,abc\n")
    assert main(["estimate", "--config", str(cfg), "--clusters", str(tmp_path / "cl.csv")]) == EXIT_PARSE
    assert "line 3" in capsys.readouterr().err


def test_metrics_identical_clouds(tmp_path, capsys, rng):
    io.write_ply(tmp_path / "a.ply", PointCloud(rng.normal(size=(100, 3))))
    assert main(["metrics", "--ref", str(tmp_path / "a.ply"), "--cand", str(tmp_path / "a.ply")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "C2C(x1e-3)" in out and "C2P(x1e-5)" in out
    name, a, b = out.splitlines()[-1].split()
    assert float(a) == 0.0 and float(b) == 0.0


def test_metrics_missing_cloud(tmp_path):
    assert main(["metrics", "--ref", str(tmp_path / "x.ply"), "--cand", str(tmp_path / "y.ply")]) == EXIT_IO


def test_pipeline_on_bundled_scene(cfg, tmp_path, capsys):
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_OK
    out = tmp_path / "out"
    table = (out / "metrics.txt").read_text()
    assert table == capsys.readouterr().out
    vals = {line.split()[0]: float(line.split()[1]) for line in table.splitlines()[3:]}
    assert vals["cloud_enhanced"] < vals["cloud_observed"]
    log = (out / "enhance_log.txt").read_text().splitlines()
    assert len(log) == 1 + 2 * 64
    # rows before K use the identity metric
    assert [int(line.split()[4]) for line in log[1:65]] == [0] * 30 + [1] * 34
    np.loadtxt(out / "metric_last_row.txt")
