import warnings
from dataclasses import asdict

import numpy as np
import pytest

from rkdl.cli import main
from rkdl.dataset import TimeSeriesDataset, read_csv, write_csv
from rkdl.evaluate import read_report
from rkdl.experiment import (
    ExperimentConfig,
    config_to_ini,
    dedupe_levels,
    max_workers,
    preset,
    read_config,
)
from rkdl.networks import NetworkSpec, ParameterSet, save_checkpoint
from rkdl.trainer import read_history_csv


def small_fhn(tmp_path, *extra):
    out = tmp_path / "run"
    assert main(["generate", "--example", "fhn", "--points", "60", "--t-end", "6",
                 "--out", str(out), *extra]) == 0
    return out


def test_presets_match_tables():
    fhn, cubic = preset("fhn"), preset("cubic")
    assert (fhn.points, fhn.t_end, fhn.x0) == (4000, 400.0, (2.0, 0.0))
    assert (cubic.points, cubic.t_end) == (2500, 10.0)
    assert (fhn.lambda_rk, fhn.lambda_grad) == (1.0, 1.0)
    assert (cubic.lambda_rk, cubic.lambda_grad) == (1.0, 0.05)
    for cfg in (fhn, cubic):
        assert (cfg.implicit_width, cfg.implicit_depth, cfg.dynamics_width, cfg.dynamics_depth) == (20, 4, 20, 4)
        assert (cfg.lr_implicit, cfg.lr_dynamics) == (5e-4, 1e-3)
        assert (cfg.epochs, cfg.weight_decay) == (15000, 1e-4)
    burgers, ks = preset("burgers"), preset("ks")
    assert (burgers.implicit_width, burgers.dynamics_width, burgers.dynamics_depth) == (10, 8, 4)
    assert (burgers.grid, burgers.dt, burgers.domain_lo, burgers.domain_hi) == (256, 0.1, -8.0, 8.0)
    assert (ks.implicit_width, ks.dynamics_width, ks.grid, ks.steps) == (50, 16, 1024, 251)
    assert burgers.dynamics_spec().kind == "residual_conv1d"
    assert burgers.implicit_spec().input_dim == 2
    with pytest.raises(ValueError):
        ExperimentConfig(example="lorenz")


@pytest.mark.parametrize("example", ["fhn", "cubic", "burgers", "ks"])
def test_preset_ini_round_trip(tmp_path, example):
    cfg = preset(example)
    (tmp_path / "c.ini").write_text(config_to_ini(cfg))
    assert asdict(read_config(tmp_path / "c.ini")) == asdict(cfg)


def test_config_file_with_flag_override(tmp_path, capsys):
    assert main(["preset", "--example", "cubic"]) == 0
    (tmp_path / "c.ini").write_text(capsys.readouterr().out)
    cfg = read_config(tmp_path / "c.ini")
    assert cfg.lambda_grad == 0.05
    (tmp_path / "bad.ini").write_text("[training]\nbogus = 1\n")
    with pytest.raises(ValueError, match="bogus"):
        read_config(tmp_path / "bad.ini")
    assert main(["preset", "--config", str(tmp_path / "c.ini"), "--epochs", "7"]) == 0
    assert "epochs = 7" in capsys.readouterr().out


def test_generate_shapes(tmp_path):
    assert main(["generate", "--example", "fhn", "--out", str(tmp_path / "f")]) == 0
    ds = read_csv(tmp_path / "f" / "data.csv")
    assert ds.n_samples == 4000 and ds.times[0] == 0.0 and ds.times[-1] == 400.0
    assert main(["generate", "--example", "cubic", "--out", str(tmp_path / "c")]) == 0
    ds = read_csv(tmp_path / "c" / "data.csv")
    assert ds.n_samples == 2500 and ds.times[-1] == 10.0
    assert main(["generate", "--example", "burgers", "--grid", "64", "--steps", "101",
                 "--out", str(tmp_path / "b")]) == 0
    ds = read_csv(tmp_path / "b" / "data.csv")
    assert ds.noisy.shape == (101, 64)


def test_train_epochs_and_run_directory(tmp_path):
    out = small_fhn(tmp_path)
    assert main(["train", "--example", "fhn", "--noise", "0.05", "--epochs", "10",
                 "--out", str(out)]) == 0
    hist = read_history_csv(out / "loss_history.csv")
    assert [r["epoch"] for r in hist] == list(range(1, 11))
    info = (out / "run_info.txt").read_text()
    for key in ("seed = 0", "numpy =", "dataset_sha256 ="):
        assert key in info
    cfg = read_config(out / "config.ini")
    assert (cfg.lr_implicit, cfg.lr_dynamics, cfg.noise) == (5e-4, 1e-3, 0.05)


def test_train_missing_dataset(tmp_path, capsys):
    assert main(["train", "--example", "fhn", "--out", str(tmp_path / "none")]) != 0
    assert "not found" in capsys.readouterr().err


def test_train_is_deterministic(tmp_path):
    out = small_fhn(tmp_path)
    for name in ("a", "b"):
        assert main(["train", "--example", "fhn", "--noise", "0.1", "--epochs", "15",
                     "--data", str(out / "data.csv"), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "loss_history.csv").read_bytes() == \
        (tmp_path / "b" / "loss_history.csv").read_bytes()


def test_evaluate_exit_codes(tmp_path):
    out = tmp_path / "exact"
    out.mkdir()
    t = np.linspace(0, 1, 30)
    clean = np.tile([0.5, -1.0], (30, 1))
    write_csv(TimeSeriesDataset(t, clean, clean), out / "train_data.csv")
    spec = NetworkSpec("implicit_sine", 1, 2, 1, 1)
    implicit = ParameterSet(spec, {"sine0.weight": np.zeros((1, 1)), "sine0.bias": np.zeros(1),
                                   "out.weight": np.zeros((2, 1)), "out.bias": np.array([0.5, -1.0])})
    from rkdl.networks import init

    dynamics = init(NetworkSpec("residual_mlp", 2, 2, 4, 1), 0)
    save_checkpoint(out / "checkpoint.rkdl", {"implicit": implicit, "dynamics": dynamics},
                    {"transform_lo": [0.0], "transform_hi": [1.0], "transform_names": ["t"]})
    assert main(["evaluate", "--example", "custom", "--out", str(out),
                 "--max-denoise-rel-l2", "1e-12"]) == 0
    report = read_report(out / "report.txt")
    assert float(report["denoise_rmse.0"]) == 0.0 and report["passed"] == "true"
    rows = (out / "field_grid.csv").read_text().splitlines()
    assert len(rows) == 1 + 21 * 21

    (out / "report.txt").unlink()
    assert main(["evaluate", "--example", "custom", "--out", str(out),
                 "--max-denoise-rel-l2", "-1"]) == 1
    assert read_report(out / "report.txt")["passed"] == "false"


def test_evaluate_after_training_pde(tmp_path):
    out = tmp_path / "pde"
    assert main(["generate", "--example", "burgers", "--grid", "16", "--steps", "6",
                 "--out", str(out)]) == 0
    assert main(["train", "--example", "burgers", "--grid", "16", "--steps", "6", "--noise",
                 "0.05", "--epochs", "3", "--out", str(out)]) == 0
    assert main(["evaluate", "--example", "burgers", "--noise", "0.05", "--out", str(out)]) == 0
    for name in ("noisy", "denoised", "clean", "field_pred", "field_fd"):
        assert (out / f"heatmap_{name}.ppm").exists()
        assert (out / f"heatmap_{name}.ppm.txt").exists()


def test_sweep_dedupes_and_summarises(tmp_path):
    out = small_fhn(tmp_path)
    with pytest.warns(UserWarning, match="duplicate"):
        code = main(["sweep", "--example", "fhn", "--epochs", "3", "--levels", "0.05", "0.1",
                     "0.05", "--data", str(out / "data.csv"), "--out", str(tmp_path / "sw")])
    assert code == 0
    lines = (tmp_path / "sw" / "summary.csv").read_text().splitlines()
    assert lines[0] == "noise_level,denoise_rmse,field_rel_l2,field_cosine,status"
    assert [l.split(",")[0] for l in lines[1:]] == ["0.05", "0.1"]
    assert all(l.endswith(",ok") for l in lines[1:])


def test_sweep_records_failures(tmp_path):
    out = small_fhn(tmp_path)
    # a stride that leaves fewer than two samples fails every run; the sweep still finishes
    code = main(["sweep", "--example", "fhn", "--epochs", "2", "--stride", "100", "--levels", "0.1",
                 "--data", str(out / "data.csv"), "--out", str(tmp_path / "sw")])
    assert code == 1
    line = (tmp_path / "sw" / "summary.csv").read_text().splitlines()[1]
    assert "failed" in line


def test_parallel_limits(monkeypatch):
    monkeypatch.setenv("RKDL_THREADS", "2")
    assert max_workers(8) == 2
    monkeypatch.delenv("RKDL_THREADS")
    assert max_workers(3) == 3
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert dedupe_levels([0.1, 0.1, 0.2]) == [0.1, 0.2]
    with pytest.raises(ValueError):
        dedupe_levels([])


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--example", "fhn"]) == 0
    assert "max relative error" in capsys.readouterr().out
