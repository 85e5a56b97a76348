import subprocess
import sys

import numpy as np
import pytest

from mixturenet.cube import read_cube
from mixturenet.losses import estimate_sigma
from mixturenet.recovery import RecoveryConfig, load_config_file, simulate_measurement
from mixturenet.synthetic import make_synthetic

FAST = [
    "--iterations", "3", "--rank", "2", "--blocks", "2", "--num-layers", "2",
    "--features", "4", "--nonlinear-weight", "0.0",
    "--height", "12", "--width", "12", "--bands", "4", "--scene-rank", "2",
]


def run_cli(*args, **kwargs):
    cmd = [sys.executable, "-m", "mixturenet", *[str(a) for a in args]]
    return subprocess.run(cmd, capture_output=True, text=True, timeout=300, **kwargs)


def test_help_exits_zero():
    assert run_cli("--help").returncode == 0


def test_unknown_subcommand_is_usage_error():
    proc = run_cli("enhance")
    assert proc.returncode == 1


def test_unknown_flag_named_in_error():
    proc = run_cli("denoise", "--out-dir", "x", "--fizzbuzz", "3")
    assert proc.returncode == 1
    assert "--fizzbuzz" in proc.stderr


def test_unknown_config_key_named_in_error(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("learning_rate=0.1\n")
    proc = run_cli("denoise", "--out-dir", tmp_path / "out", "--config", cfg)
    assert proc.returncode == 1
    assert "learning_rate" in proc.stderr


def test_bad_value_is_usage_error(tmp_path):
    proc = run_cli("denoise", "--out-dir", tmp_path / "out", "--rank", "many")
    assert proc.returncode == 1
    assert "rank" in proc.stderr


def test_synth_is_deterministic(tmp_path):
    args = ["synth", "--h", "16", "--w", "16", "--l", "8", "--r", "3", "--seed", "7"]
    assert run_cli(*args, "--out-dir", tmp_path / "a").returncode == 0
    assert run_cli(*args, "--out-dir", tmp_path / "b").returncode == 0
    for name in ("scene.spc", "scene_rgb.png", "true_endmembers.csv", "true_abundance_comp0.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert read_cube(tmp_path / "a" / "scene.spc").data.shape == (16, 16, 8)


def test_metrics_on_identical_cubes(tmp_path):
    run_cli("synth", "--out-dir", tmp_path, "--h", "16", "--w", "16")
    scene = tmp_path / "scene.spc"
    proc = run_cli("metrics", "--ref", scene, "--est", scene, "--out", tmp_path / "m.txt")
    assert proc.returncode == 0
    fields = dict(line.split("=") for line in proc.stdout.strip().splitlines())
    assert fields["psnr"] == "infinite"
    assert float(fields["sam"]) == pytest.approx(0.0, abs=1e-5)
    assert (tmp_path / "m.txt").read_text() == proc.stdout


def test_metrics_missing_file_is_runtime_error(tmp_path):
    proc = run_cli("metrics", "--ref", tmp_path / "no.spc", "--est", tmp_path / "no.spc")
    assert proc.returncode == 2


def test_denoise_end_to_end(tmp_path):
    out = tmp_path / "run"
    proc = run_cli("denoise", "--out-dir", out, "--seed", "3", "--fidelity", "l2", *FAST)
    assert proc.returncode == 0, proc.stderr
    assert (out / "recovered.spc").exists()
    assert (out / "metrics.txt").exists()
    assert len((out / "log.csv").read_text().splitlines()) == 4
    assert "psnr=" in proc.stdout


def test_denoise_reports_estimated_noise_level(tmp_path):
    out = tmp_path / "run"
    proc = run_cli("denoise", "--out-dir", out, "--seed", "7", "--iterations", "1",
                   "--rank", "2", "--blocks", "1", "--num-layers", "2", "--features", "4",
                   "--nonlinear-weight", "0.0", "--height", "12", "--width", "12",
                   "--bands", "4", "--scene-rank", "2")
    assert proc.returncode == 0, proc.stderr
    line = next(l for l in proc.stdout.splitlines() if "(estimated)" in l)
    printed = float(line.split(":")[1].split("(")[0])

    clean, _, _ = make_synthetic(12, 12, 4, 2, seed=7)
    cfg = RecoveryConfig(task="denoise", seed=7)
    y, _ = simulate_measurement(cfg, clean, sigma=25.0 / 255.0)
    assert printed == pytest.approx(estimate_sigma(y), rel=1e-12)


def test_sigma_flag_suppresses_estimation(tmp_path):
    out = tmp_path / "run"
    proc = run_cli("denoise", "--out-dir", out, "--sigma", "0.1", "--iterations", "1",
                   "--rank", "2", "--blocks", "1", "--num-layers", "2", "--features", "4",
                   "--nonlinear-weight", "0.0", "--height", "12", "--width", "12",
                   "--bands", "4", "--scene-rank", "2")
    assert proc.returncode == 0, proc.stderr
    assert "(estimated)" not in proc.stdout
    mapping = load_config_file(out / "config.txt")
    assert mapping["noise_sigma"] == "0.1"


def test_sr_end_to_end(tmp_path):
    out = tmp_path / "run"
    proc = run_cli("sr", "--out-dir", out, "--downsample-factor", "2", *FAST)
    assert proc.returncode == 0, proc.stderr
    assert read_cube(out / "recovered.spc").data.shape == (12, 12, 4)


def test_unmix_writes_material_maps(tmp_path):
    out = tmp_path / "run"
    proc = run_cli("unmix", "--out-dir", out, *FAST)
    assert proc.returncode == 0, proc.stderr
    mapping = load_config_file(out / "config.txt")
    assert float(mapping["nonlinear_weight"]) == 0.0
    mask = np.loadtxt(out / "material_block0_comp0.csv", delimiter=",", ndmin=2)
    assert mask.shape == (12, 12)
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_csi_with_input_needs_code(tmp_path):
    run_cli("synth", "--out-dir", tmp_path, "--h", "12", "--w", "12", "--l", "4", "--r", "2")
    proc = run_cli("csi", "--out-dir", tmp_path / "out", "--input", tmp_path / "scene.spc")
    assert proc.returncode == 1
    assert "--code" in proc.stderr


def test_denoise_with_input_runs_blind(tmp_path):
    run_cli("synth", "--out-dir", tmp_path, "--h", "12", "--w", "12", "--l", "4", "--r", "2")
    out = tmp_path / "run"
    proc = run_cli("denoise", "--out-dir", out, "--input", tmp_path / "scene.spc",
                   "--fidelity", "l2", *FAST)
    assert proc.returncode == 0, proc.stderr
    assert not (out / "metrics.txt").exists()
    assert (out / "recovered.spc").exists()


def test_sweep_cli_writes_csv_and_keeps_failures(tmp_path):
    out = tmp_path / "sweep"
    proc = run_cli("sweep", "--kind", "rank", "--grid", "2,0", "--out-dir", out,
                   "--fidelity", "l2", *FAST)
    assert proc.returncode == 0, proc.stderr
    assert "1 failed" in proc.stdout
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3


def test_sweep_bad_grid_is_usage_error(tmp_path):
    proc = run_cli("sweep", "--kind", "blocks", "--grid", "1;single",
                   "--out-dir", tmp_path / "x", *FAST)
    assert proc.returncode == 1
