import numpy as np
import pytest

from ganlab.config import config_from_dict
from ganlab.data import load_dataset
from ganlab.errors import ConfigError, CorruptCheckpointError, NumericError, StateError
from ganlab.tensor import Tensor
from ganlab.training import (Adam, EncoderTrainer, GANTrainer, load_checkpoint, read_metrics, save_checkpoint,
                             train_encoder, train_standard, train_wgan_gp)


def make_cfg(**kw):
    base = {"objective": "nonsaturating", "discriminator": "conv",
            "dataset": {"kind": "mini_digits", "n": 256}, "latent": {"z_dim": 8},
            "optim": {"batch": 16}, "model": {"depth": 2}, "scale_factor": 0.125,
            "max_steps": 3, "epochs": 1000, "wall_clock": False}
    for k, v in kw.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k] = {**base[k], **v}
        else:
            base[k] = v
    return config_from_dict(base)


def ring_cfg(**kw):
    return make_cfg(objective="wgan_gp", discriminator="mlp", dataset={"kind": "ring", "n": 512},
                    latent={"z_dim": 2}, model={"hidden": 16, "n_hidden": 2}, **kw)


@pytest.fixture(scope="module")
def digits():
    return load_dataset(make_cfg().dataset)[0]


@pytest.fixture(scope="module")
def ring():
    return load_dataset(ring_cfg().dataset)[0]


# -- Adam -----------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-4, beta1=0.5, beta2=0.9)
    p.grad = np.array([1.0, 3.0])
    opt.step()
    assert np.allclose(p.data, [1.0 - 1e-4, -2.0 - 1e-4], rtol=0, atol=1e-12)


def test_adam_zero_gradient_is_no_op():
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam({"p": p})
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 0.5


def test_adam_missing_gradient():
    opt = Adam({"p": Tensor(np.zeros(2), requires_grad=True)})
    with pytest.raises(StateError):
        opt.step()


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 3))
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01, beta1=0.5, beta2=0.99)
    ref, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, 1):
        p.grad = g
        opt.step()
        m = 0.5 * m + 0.5 * g
        v = 0.99 * v + 0.01 * g * g
        ref = ref - 0.01 * (m / (1 - 0.5 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
    assert np.allclose(p.data, ref, rtol=1e-13, atol=0)


# -- loops --------------------------------------------------------------------

def test_wgan_counts_critic_and_generator_updates(ring, tmp_path):
    t = train_wgan_gp(ring_cfg(max_steps=4), ring, metrics_path=tmp_path / "m.csv")
    assert t.d_updates == 20 and t.g_updates == 4
    rows = read_metrics(tmp_path / "m.csv")
    assert list(rows[0]) == ["step", "epoch", "loss_d", "loss_g", "loss_li", "grad_norm_mean", "wall_ms"]
    assert all(r["grad_norm_mean"] != "" for r in rows)
    assert len(rows) == 4


def test_wgan_critic_has_no_norm(ring):
    t = GANTrainer(ring_cfg(), ring)
    assert not t.d.spec.has_norm


def test_standard_loop_one_to_one(digits):
    t = train_standard(make_cfg(), digits)
    assert t.d_updates == t.g_updates == 3


def test_train_functions_reject_wrong_objective(digits, ring):
    with pytest.raises(ConfigError):
        train_wgan_gp(make_cfg(), digits)
    with pytest.raises(ConfigError):
        train_standard(ring_cfg(), ring)


def test_conditional_and_infogan_loops_run(digits):
    t = train_standard(make_cfg(objective="conditional", latent={"label_dim": 10}), digits)
    assert t.g_updates == 3
    t = train_standard(make_cfg(objective="infogan", latent={"categorical": [10], "continuous": 1}), digits)
    assert all(r["loss_li"] is not None for r in t.history)


def test_conditional_needs_matching_classes(digits):
    with pytest.raises(ConfigError):
        GANTrainer(make_cfg(objective="conditional", latent={"label_dim": 3}), digits)


def test_epoch_budget_stops_training(digits):
    t = GANTrainer(make_cfg(max_steps=None, epochs=1), digits)
    t.run()
    assert t.epochs_done == 1
    assert t.step_count == 256 // 16


def test_fixed_seed_runs_are_byte_identical(digits, tmp_path):
    cfg = make_cfg(objective="infogan", latent={"categorical": [10]})
    for name in ("a", "b"):
        GANTrainer(cfg, digits).run(tmp_path / f"{name}.csv", tmp_path / f"{name}.bin")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_different_seeds_differ(digits):
    a = GANTrainer(make_cfg(seed=1), digits).run()
    b = GANTrainer(make_cfg(seed=2), digits).run()
    assert not np.array_equal(a.g.params["0.weight"].data, b.g.params["0.weight"].data)


def test_zero_lambda_infogan_equals_nonsaturating(digits):
    lat = {"categorical": [10], "continuous": 1}
    a = GANTrainer(make_cfg(objective="infogan", latent=lat, optim={"lambda_i": 0.0}, max_steps=4), digits).run()
    b = GANTrainer(make_cfg(objective="nonsaturating", latent=lat, max_steps=4), digits).run()
    for k in a.g.params:
        assert np.array_equal(a.g.params[k].data, b.g.params[k].data)
    for k in a.d.params:
        assert np.array_equal(a.d.params[k].data, b.d.params[k].data)
    assert [r["loss_d"] for r in a.history] == [r["loss_d"] for r in b.history]


def test_restore_resumes_bit_exactly(digits, tmp_path):
    cfg = make_cfg(objective="infogan", latent={"categorical": [10]}, max_steps=6)
    straight = GANTrainer(cfg, digits).run()
    first = GANTrainer(cfg, digits)
    for _ in range(3):
        first.step()
    first.save(tmp_path / "mid.bin")
    resumed = GANTrainer.restore(tmp_path / "mid.bin", digits).run()
    for name in straight.nets:
        for k, p in straight.nets[name].params.items():
            assert np.array_equal(p.data, resumed.nets[name].params[k].data)
    assert resumed.step_count == 6


def test_restore_into_rejects_other_architecture(digits, ring, tmp_path):
    GANTrainer(make_cfg(), digits).save(tmp_path / "c.bin")
    other = GANTrainer(make_cfg(scale_factor=0.25), digits)
    with pytest.raises(CorruptCheckpointError):
        other.restore_into(tmp_path / "c.bin")


def test_truncated_checkpoint(digits, tmp_path):
    path = tmp_path / "c.bin"
    GANTrainer(make_cfg(), digits).save(path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_nan_aborts_with_state(ring, tmp_path):
    t = GANTrainer(ring_cfg(optim={"lr": 1e300}), ring)
    with pytest.raises(NumericError) as info:
        t.run(nan_dump=tmp_path / "dump.json")
    assert "param_norms" in info.value.state
    assert (tmp_path / "dump.json").exists()


def test_capsule_loop_runs(digits):
    t = train_standard(make_cfg(objective="standard", discriminator="capsule", max_steps=2), digits)
    assert t.g_updates == 2
    assert t.d.last_routing is not None


def test_encoder_training_freezes_generator(digits, tmp_path):
    g_trainer = GANTrainer(make_cfg(), digits).run(checkpoint_path=tmp_path / "g.bin")
    before = {k: p.data.copy() for k, p in g_trainer.g.params.items()}
    cfg = make_cfg(stage="encoder", paths={"generator": str(tmp_path / "g.bin")}, max_steps=4)
    e = train_encoder(cfg, digits, metrics_path=tmp_path / "e.csv", checkpoint_path=tmp_path / "e.bin")
    assert e.step_count == 4
    loaded, _, _ = load_checkpoint(tmp_path / "e.bin")
    for k, v in before.items():
        assert np.array_equal(loaded["g"].params[k].data, v)
    assert list(read_metrics(tmp_path / "e.csv")[0]) == ["step", "epoch", "loss_e", "wall_ms"]
    assert np.isfinite(e.evaluate(digits))


def test_encoder_loss_decreases(digits, tmp_path):
    g_trainer = GANTrainer(make_cfg(), digits).run()
    cfg = make_cfg(stage="encoder", paths={"generator": "unused"}, max_steps=30, optim={"lr": 1e-3})
    e = EncoderTrainer(cfg, digits, g_trainer.g).run()
    first = np.mean([r["loss_e"] for r in e.history[:5]])
    last = np.mean([r["loss_e"] for r in e.history[-5:]])
    assert last < first


def test_save_checkpoint_metadata(digits, tmp_path):
    t = GANTrainer(make_cfg(), digits)
    save_checkpoint(tmp_path / "x.bin", t.nets, {"note": 1})
    _, meta, _ = load_checkpoint(tmp_path / "x.bin")
    assert meta["note"] == 1 and set(meta["nets"]) == {"g", "d"}


def test_unknown_init_scheme_rejected():
    with pytest.raises(ConfigError):
        make_cfg(model={"init": "orthogonal"})
