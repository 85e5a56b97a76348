import dataclasses

import numpy as np
import pytest

from mixturenet.cube import read_cube
from mixturenet.operators import make_forward_model
from mixturenet.recovery import (
    ConfigError,
    RecoveryConfig,
    RecoveryDivergedError,
    adjoint_baseline,
    load_config_file,
    run_recovery,
    simulate_measurement,
    sweep,
    threshold_abundance,
)
from mixturenet.synthetic import make_synthetic


def tiny_config(**overrides) -> RecoveryConfig:
    base = dict(
        task="denoise",
        rank=2,
        blocks=2,
        num_layers=2,
        features=4,
        nonlinear_weight=0.0,
        input_strategy="random",
        fidelity="l2",
        iterations=3,
        seed=0,
    )
    base.update(overrides)
    return RecoveryConfig(**base)


def tiny_scene():
    # 12x12 keeps runs fast while staying big enough for the ssim window
    cube, abund, endm = make_synthetic(12, 12, 4, 2, seed=0)
    return cube


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_default_config_is_valid():
    RecoveryConfig().validate()


@pytest.mark.parametrize(
    "overrides",
    [
        {"task": "paint"},
        {"rank": 0},
        {"blocks": 0},
        {"arch": "transformer"},
        {"nonlinear_weight": 1.5},
        {"input_strategy": "telepathy"},
        {"input_rank_ratio": 0.0},
        {"perturb_level": -0.1},
        {"fidelity": "l1"},
        {"sure_form": "other"},
        {"probes": 0},
        {"probe_step": 0.0},
        {"output_rule": "first"},
        {"lr": 0.0},
        {"iterations": 0},
        {"downsample_factor": 0},
        {"cassi_variant": "xx"},
        {"abundance_threshold": 0.0},
        {"abundance_threshold": 1.0},
        {"blocks": 1, "output_rule": "average_last_two"},
        {"block_weights": (1.0,)},
        {"block_weights": (0.0, 0.0)},
        {"simplex_weights": (0.5, -1.0)},
        {"arch": "autoencoder", "num_layers": 4},
    ],
)
def test_bad_config_rejected(overrides):
    cfg = RecoveryConfig(blocks=2, **{k: v for k, v in overrides.items() if k != "blocks"})
    if "blocks" in overrides:
        cfg = dataclasses.replace(cfg, blocks=overrides["blocks"])
    with pytest.raises(ConfigError):
        cfg.validate()


def test_fidelity_resolution_per_task():
    assert RecoveryConfig(task="denoise").resolved_fidelity() == "sure"
    assert RecoveryConfig(task="sr").resolved_fidelity() == "l2"
    assert RecoveryConfig(task="csi").resolved_fidelity() == "l2"
    assert RecoveryConfig(task="denoise", fidelity="l2").resolved_fidelity() == "l2"


def test_from_mapping_rejects_unknown_key_by_name():
    with pytest.raises(ConfigError, match="learning_rate"):
        RecoveryConfig.from_mapping({"learning_rate": "0.01"})


def test_from_mapping_coerces_strings():
    cfg = RecoveryConfig.from_mapping(
        {
            "task": "sr",
            "rank": "5",
            "lr": "0.01",
            "block_weights": "0.0,1.0",
            "noise_sigma": "auto",
            "blocks": "2",
        }
    )
    assert cfg.task == "sr"
    assert cfg.rank == 5
    assert cfg.lr == pytest.approx(0.01)
    assert cfg.block_weights == (0.0, 1.0)
    assert cfg.noise_sigma is None


def test_from_mapping_reports_bad_value():
    with pytest.raises(ConfigError, match="rank"):
        RecoveryConfig.from_mapping({"rank": "many"})


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# a comment\ntask=csi\n\nrank = 3  # inline note\nblock_weights=1.0,1.0\n")
    mapping = load_config_file(path)
    cfg = RecoveryConfig.from_mapping(mapping)
    assert cfg.task == "csi"
    assert cfg.rank == 3
    assert cfg.block_weights == (1.0, 1.0)


def test_config_file_rejects_garbage_line(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("rank\n")
    with pytest.raises(ConfigError, match="key=value"):
        load_config_file(path)


# ---------------------------------------------------------------------------
# measurement simulation and baselines
# ---------------------------------------------------------------------------


def test_simulate_measurement_shapes():
    clean = tiny_scene()
    y, model = simulate_measurement(tiny_config(), clean)
    assert y.shape == clean.shape
    y, model = simulate_measurement(tiny_config(task="sr", downsample_factor=2), clean)
    assert y.shape == (6, 6, 4)
    y, model = simulate_measurement(tiny_config(task="csi"), clean)
    assert y.shape == (12, 12)
    assert model.kind == "cassi_dd"
    y, model = simulate_measurement(tiny_config(task="csi", cassi_variant="sd"), clean)
    assert y.shape == (12, 12 + 4 - 1)


def test_simulate_measurement_noise_is_seeded():
    clean = tiny_scene()
    y1, _ = simulate_measurement(tiny_config(), clean, sigma=0.1)
    y2, _ = simulate_measurement(tiny_config(), clean, sigma=0.1)
    y3, _ = simulate_measurement(tiny_config(seed=1), clean, sigma=0.1)
    assert np.array_equal(y1, y2)
    assert not np.array_equal(y1, y3)
    assert not np.array_equal(y1, clean)


def test_adjoint_baseline_identity_returns_measurement():
    clean = tiny_scene()
    model = make_forward_model("identity", clean.shape)
    assert np.allclose(adjoint_baseline(model, clean), clean)


def test_adjoint_baseline_shape_for_downsampling():
    clean = tiny_scene()
    model = make_forward_model("blur_downsample", clean.shape, factor=2)
    base = adjoint_baseline(model, model.apply_array(clean))
    assert base.shape == clean.shape
    assert np.all(np.isfinite(base))


def test_threshold_is_inclusive_and_binary():
    maps = np.array([[0.2, 0.5], [0.7, 0.49]])
    out = threshold_abundance(maps, 0.5)
    assert out.dtype == np.uint8
    assert out.tolist() == [[0, 1], [1, 0]]
    assert threshold_abundance(np.full((3, 3), 0.5), 0.5).tolist() == np.ones((3, 3)).tolist()
    assert threshold_abundance(np.full((3, 3), 0.99), 0.999).sum() == 0


def test_estimated_input_reproduces_measurement_under_identity():
    from mixturenet.inputs import fixed_input

    clean = tiny_scene()
    model = make_forward_model("identity", clean.shape)
    z = fixed_input("estimated", clean.shape, model=model, measurement=clean)
    assert np.array_equal(z.data, clean)


# ---------------------------------------------------------------------------
# the fitting loop
# ---------------------------------------------------------------------------


def test_run_recovery_smoke_and_artifact_shapes():
    clean = tiny_scene()
    cfg = tiny_config()
    y, model = simulate_measurement(cfg, clean, sigma=0.05)
    result = run_recovery(cfg, y, model, ref=clean)
    assert result.recovered.shape == clean.shape
    assert result.recovered.min() >= 0.0 and result.recovered.max() <= 1.0
    assert len(result.abundances) == cfg.blocks
    assert len(result.endmembers) == cfg.blocks
    for abund in result.abundances:
        assert abund.shape == (12, 12, cfg.rank)
    for endm in result.endmembers:
        assert endm.shape == (4, cfg.rank)
        assert np.all(endm >= 0)
    assert len(result.log) == cfg.iterations
    assert result.report is not None


def test_run_recovery_loss_decreases_on_average():
    clean = tiny_scene()
    cfg = tiny_config(iterations=60, lr=0.01)
    y, model = simulate_measurement(cfg, clean)
    result = run_recovery(cfg, y, model)
    losses = [row[1] for row in result.log]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_run_recovery_is_bitwise_deterministic():
    clean = tiny_scene()
    cfg = tiny_config(input_strategy="learned")
    y, model = simulate_measurement(cfg, clean)
    a = run_recovery(cfg, y, model)
    b = run_recovery(cfg, y, model)
    assert np.array_equal(a.recovered, b.recovered)
    assert a.log == b.log
    c = run_recovery(dataclasses.replace(cfg, seed=5), y, model)
    assert not np.array_equal(a.recovered, c.recovered)


def test_run_recovery_sure_path_smoke():
    clean = tiny_scene()
    cfg = tiny_config(fidelity="sure", noise_sigma=0.1, iterations=2)
    y, model = simulate_measurement(cfg, clean, sigma=0.1)
    result = run_recovery(cfg, y, model)
    assert len(result.log) == 2
    assert all(np.isfinite(row[1]) for row in result.log)


def test_run_recovery_estimates_sigma_when_missing():
    clean = tiny_scene()
    cfg = tiny_config(fidelity="sure", iterations=1)
    assert cfg.noise_sigma is None
    y, model = simulate_measurement(cfg, clean, sigma=0.1)
    result = run_recovery(cfg, y, model)
    assert len(result.log) == 1


def test_run_recovery_rejects_shape_mismatch():
    clean = tiny_scene()
    cfg = tiny_config()
    y, model = simulate_measurement(cfg, clean)
    with pytest.raises(ConfigError, match="shape"):
        run_recovery(cfg, y[:4], model)
    with pytest.raises(ConfigError, match="reference"):
        run_recovery(cfg, y, model, ref=clean[:4])


def test_run_recovery_rejects_non_finite_measurement():
    clean = tiny_scene()
    cfg = tiny_config()
    y, model = simulate_measurement(cfg, clean)
    y[0, 0, 0] = np.nan
    with pytest.raises(ConfigError, match="finite"):
        run_recovery(cfg, y, model)


def test_run_recovery_raises_on_divergence():
    clean = tiny_scene()
    cfg = tiny_config(iterations=5)
    y, model = simulate_measurement(cfg, clean)
    with pytest.raises(RecoveryDivergedError) as info, np.errstate(over="ignore"):
        run_recovery(cfg, np.full_like(y, 1e200), model)
    assert info.value.iteration == 0


def test_on_iteration_callback_sees_every_step():
    clean = tiny_scene()
    cfg = tiny_config()
    y, model = simulate_measurement(cfg, clean)
    seen = []
    run_recovery(cfg, y, model, ref=clean, on_iteration=seen.append)
    assert [s["iteration"] for s in seen] == [0, 1, 2]
    for s in seen:
        assert set(s) == {
            "iteration", "loss", "psnr", "output", "block_outputs", "abundances", "endmembers",
        }
        assert s["output"].shape == clean.shape
        assert len(s["block_outputs"]) == cfg.blocks


def test_written_artifacts(tmp_path):
    clean = tiny_scene()
    cfg = tiny_config()
    y, model = simulate_measurement(cfg, clean, sigma=0.05)
    out = tmp_path / "run"
    result = run_recovery(cfg, y, model, ref=clean, out_dir=out)

    assert np.array_equal(read_cube(out / "recovered.spc").data, result.recovered)
    assert (out / "recovered_rgb.png").exists()
    for k in range(cfg.blocks):
        assert (out / f"endmembers_block{k}.csv").exists()
        for c in range(cfg.rank):
            assert (out / f"abundance_block{k}_comp{c}.png").exists()
            assert (out / f"abundance_block{k}_comp{c}.csv").exists()

    log_lines = (out / "log.csv").read_text().splitlines()
    assert log_lines[0] == "iter,loss,psnr"
    assert len(log_lines) == 1 + cfg.iterations

    metrics_text = (out / "metrics.txt").read_text()
    assert metrics_text.startswith("psnr=")
    assert (out / "metrics.csv").read_text().splitlines()[0] == "psnr,sam,rmse,ergas,ssim"

    mapping = load_config_file(out / "config.txt")
    assert RecoveryConfig.from_mapping(mapping) == cfg


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def test_sweep_records_failures_without_raising(tmp_path):
    clean = tiny_scene()
    cfg = tiny_config()
    y, model = simulate_measurement(cfg, clean)
    out_csv = tmp_path / "sweep.csv"
    rows = sweep("rank", cfg, (2, 0), y, model, ref=clean, out_csv=out_csv)
    assert rows[0]["status"] == "ok"
    assert "psnr" in rows[0]
    assert rows[1]["status"] == "failed"
    assert "rank" in rows[1]["error"]

    lines = out_csv.read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].split(",")[:3] == ["cell", "rank", "status"]


def test_sweep_rejects_unknown_kind():
    clean = tiny_scene()
    cfg = tiny_config()
    y, model = simulate_measurement(cfg, clean)
    with pytest.raises(ConfigError):
        sweep("colors", cfg, (1,), y, model)


def test_sweep_blocks_grid_runs_both_schemes():
    clean = tiny_scene()
    cfg = tiny_config()
    y, model = simulate_measurement(cfg, clean)
    rows = sweep("blocks", cfg, ((1, "single"), (2, "multiple")), y, model, ref=clean)
    assert all(r["status"] == "ok" for r in rows)
    assert rows[0]["loss_scheme"] == "single"
    assert rows[1]["blocks"] == 2


def test_sweep_is_deterministic():
    clean = tiny_scene()
    cfg = tiny_config()
    y, model = simulate_measurement(cfg, clean)
    rows1 = sweep("input_strategies", cfg, ("constant", "random"), y, model, ref=clean)
    rows2 = sweep("input_strategies", cfg, ("constant", "random"), y, model, ref=clean)
    assert [r["psnr"] for r in rows1] == [r["psnr"] for r in rows2]
