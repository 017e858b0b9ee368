import json

import numpy as np
import pytest

from ganlab.cli import bilinear_grid, bilinear_weights, main, mode_report, paired_rows, vary_inputs
from ganlab.data import ToySpec, gen_toy, read_pnm, ring_centers, write_idx
from ganlab.errors import ConfigError, ParameterError
from ganlab.models import LatentSpec
from ganlab.rng import RngStream


def write_cfg(path, **kw):
    cfg = {"objective": "nonsaturating", "discriminator": "conv",
           "dataset": {"kind": "mini_digits", "n": 128, "holdout": 32}, "latent": {"z_dim": 8},
           "optim": {"batch": 16}, "model": {"depth": 2}, "scale_factor": 0.125,
           "max_steps": 2, "epochs": 100, "wall_clock": False}
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


# -- pure helpers ---------------------------------------------------------

def test_mode_report_true_mixture():
    ds = gen_toy(ToySpec("gaussian_ring", 20_000, 1))
    rep = mode_report(ds.images, ring_centers(8, 2.0), 0.02)
    assert rep["covered_modes"] == 8
    assert rep["high_quality_fraction"] > 0.99
    assert abs(sum(rep["mode_fractions"]) - 1) < 1e-12


def test_mode_report_collapse():
    pts = np.tile(ring_centers(8, 2.0)[3], (500, 1))
    rep = mode_report(pts, ring_centers(8, 2.0), 0.02)
    assert rep["covered_modes"] == 1 and rep["mode_fractions"][3] == 1.0


def test_mode_report_rejects_images():
    with pytest.raises(ConfigError):
        mode_report(np.zeros((3, 4)), ring_centers(8, 2.0), 0.02)


def test_bilinear_corners_and_center():
    w = bilinear_weights(3)
    assert w[0, 0].tolist() == [1, 0, 0, 0]
    assert w[2, 2].tolist() == [0, 0, 0, 1]
    corners = RngStream(0).normal((4, 5))
    grid = bilinear_grid(corners, 3)
    assert np.allclose(grid[4], corners.mean(axis=0), atol=1e-15)
    assert np.array_equal(bilinear_grid(corners, 2), corners)
    with pytest.raises(ParameterError):
        bilinear_grid(corners[:3], 3)


def test_paired_rows_layout():
    x = np.full((5, 1, 2, 2), -0.5)
    r = np.full((5, 1, 2, 2), 0.5)
    out = paired_rows(x, r, 4)
    # rows: 4 originals, 4 recons, then 1 original + 3 blanks, 1 recon + 3 blanks
    assert out.shape[0] == 16
    assert np.all(out[:4] == -0.5) and np.all(out[4:8] == 0.5)
    assert np.all(out[8] == -0.5) and np.all(out[9:12] == -1.0) and np.all(out[12] == 0.5)


def test_vary_inputs_layouts():
    lat = LatentSpec(z_dim=3, categorical=(4,), continuous=2, label_dim=0)
    g_in, cond, cols = vary_inputs(lat, "categorical_c", 2, 5, RngStream(0), RngStream(1))
    assert cols == 4 and g_in.shape == (8, 9) and cond is None
    assert np.array_equal(g_in[:4, 3:7], np.eye(4))
    assert np.array_equal(g_in[0, :3], g_in[3, :3])          # same z along a row
    g_in, _, cols = vary_inputs(lat, "continuous_c", 2, 5, RngStream(0), RngStream(1), index=1)
    assert cols == 5 and g_in[0, 8] == -1.0 and g_in[4, 8] == 1.0
    with pytest.raises(ConfigError):
        vary_inputs(lat, "conditional_y", 2, 5, RngStream(0), RngStream(1))


def test_vary_conditional_on_encoded_rows_keeps_z():
    lat = LatentSpec(z_dim=2, label_dim=3)
    base = np.array([[0.1, 0.2, 1.0, 0.0, 0.0]])
    g_in, cond, cols = vary_inputs(lat, "conditional_y", 1, 0, None, None, base=base)
    assert cols == 3
    assert np.all(g_in == [0.1, 0.2])
    assert np.array_equal(cond, np.eye(3))


# -- commands -------------------------------------------------------------

def test_train_and_downstream_commands(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", objective="infogan", latent={"z_dim": 8, "categorical": [10]})
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["config"]["seed"] == 3
    ck = str(out / "checkpoint.bin")
    before = (out / "checkpoint.bin").read_bytes()

    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "s.pgm"), "--seed", "1"]) == 0
    assert read_pnm(tmp_path / "s.pgm").shape == (64, 64, 1)
    main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "s2.pgm"), "--seed", "1"])
    assert (tmp_path / "s.pgm").read_bytes() == (tmp_path / "s2.pgm").read_bytes()
    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "b.pgm"), "--r", "0.2", "0.5", "0.8",
                 "--n", "48"]) == 0
    assert main(["sample", "--checkpoint", ck, "--r", "1.5", "--out", str(tmp_path / "x.pgm")]) == 2

    assert main(["vary", "--checkpoint", ck, "--mode", "categorical_c", "--out", str(tmp_path / "v.pgm")]) == 0
    assert read_pnm(tmp_path / "v.pgm").shape == (64, 80, 1)
    assert main(["vary", "--checkpoint", ck, "--mode", "conditional_y", "--out", str(tmp_path / "w.pgm")]) == 2
    assert main(["interpolate", "--checkpoint", ck, "--random", "--steps", "4",
                 "--out", str(tmp_path / "i.pgm")]) == 0
    assert read_pnm(tmp_path / "i.pgm").shape == (32, 32, 1)
    assert main(["encode", "--checkpoint", ck, "--out", str(tmp_path / "e.pgm")]) == 2   # no encoder yet
    assert main(["eval-modes", "--checkpoint", ck]) == 2                                  # not a 2-D model
    assert (out / "checkpoint.bin").read_bytes() == before

    enc_cfg = write_cfg(tmp_path / "e.json", objective="infogan", latent={"z_dim": 8, "categorical": [10]},
                        stage="encoder", paths={"generator": ck})
    assert main(["train", "--config", str(enc_cfg), "--out", str(tmp_path / "enc")]) == 0
    eck = str(tmp_path / "enc" / "checkpoint.bin")
    capsys.readouterr()
    assert main(["encode", "--checkpoint", eck, "--n", "16", "--out", str(tmp_path / "e.pgm")]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("mean L1 ") and len(line.split()[-1].split(".")[1]) == 6
    assert read_pnm(tmp_path / "e.pgm").shape == (32, 64, 1)
    assert main(["interpolate", "--checkpoint", eck, "--indices", "0", "1", "2", "3", "--steps", "2",
                 "--out", str(tmp_path / "ie.pgm")]) == 0
    assert main(["interpolate", "--checkpoint", eck, "--indices", "0", "1", "2",
                 "--out", str(tmp_path / "bad.pgm")]) == 2


def test_eval_modes_json(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "r.json", objective="wgan_gp", discriminator="mlp",
                    dataset={"kind": "ring", "n": 256}, latent={"z_dim": 2}, model={"hidden": 8, "n_hidden": 1})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    assert main(["eval-modes", "--checkpoint", str(tmp_path / "r" / "checkpoint.bin"), "--n", "500"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["num_modes"] == 8 and len(rep["mode_fractions"]) == 8
    assert (tmp_path / "r" / "metrics.csv").read_text().splitlines()[1].split(",")[5] != ""


def test_capsule_wgan_rejected_before_compute(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", objective="wgan_gp", discriminator="capsule")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_missing_dataset_exit_2_no_outputs(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", dataset={"kind": "mnist", "images": str(tmp_path / "none.idx")})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_bad_idx_exit_3(tmp_path):
    bad = tmp_path / "bad.idx"
    write_idx(tmp_path / "lab.idx", np.zeros(3, dtype=np.uint8))
    bad.write_bytes((tmp_path / "lab.idx").read_bytes())
    cfg = write_cfg(tmp_path / "c.json", dataset={"kind": "mnist", "images": str(bad)})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_unknown_config_key_exit_2(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", learning_rate=0.1)
    assert main(["train", "--config", str(cfg)]) == 2


def test_nan_exit_4(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", objective="wgan_gp", discriminator="mlp",
                    dataset={"kind": "ring", "n": 256}, latent={"z_dim": 2},
                    model={"hidden": 8, "n_hidden": 1}, optim={"batch": 16, "lr": 1e300}, max_steps=50)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
    assert (tmp_path / "o" / "nan_dump.json").exists()
