import math
import os

import numpy as np
import pytest

from maevi import sim
from maevi.model import MAEVINet, ModelConfig, prepare
from maevi.train import (AdaMax, TrainConfig, TrainingError, adamax_step, evaluate, load_checkpoint,
                         read_tensors, save_checkpoint, train, write_tensors)

TINY = ModelConfig(n_time_bins=4, embed_dim=4, widths=(2, 2, 3), head_hidden=4)


def adamax_reference(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar, element-by-element AdaMax written out longhand."""
    p = [float(v) for v in p0]
    m = [0.0] * len(p)
    u = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            gi = float(g[i])
            m[i] = b1 * m[i] + (1 - b1) * gi
            u[i] = max(b2 * u[i], abs(gi))
            p[i] = p[i] - lr * m[i] / ((1 - b1 ** t) * (u[i] + eps))
    return np.array(p)


@pytest.fixture(scope="module")
def tiny_samples():
    spec = sim.SceneSpec(height=16, width=16, n_random_shapes=2, max_speed=2.0)
    return [prepare(sim.make_sample(spec, sim.sample_shapes(spec, 0, k)), TINY) for k in range(2)]


def run(samples, **kw):
    cfg = TrainConfig(**{"batch_size": 1, "epochs": 2, "max_steps": 3, **kw})
    return train(samples, cfg, TINY)


# ---------------------------------------------------------------- optimiser

def test_adamax_zero_grad_keeps_param():
    p = np.array([1.0, -2.0])
    adamax_step(p, np.zeros(2), {}, 0.1, 0.9, 0.999, 1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adamax_first_step_moves_by_lr():
    p = np.array([0.5, 0.5])
    adamax_step(p, np.array([3.0, -0.2]), {}, 0.01, 0.9, 0.999, 1)
    np.testing.assert_allclose(p, [0.49, 0.51], rtol=0, atol=1e-9)


def test_adamax_rejects_step_zero():
    with pytest.raises(ValueError):
        adamax_step(np.zeros(1), np.zeros(1), {}, 0.1, 0.9, 0.999, 0)


def test_adamax_matches_longhand_bitwise():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=7)
    grads = rng.normal(size=(100, 7)) * rng.choice([0.0, 1e-3, 1.0, 50.0], size=(100, 7))
    p, state = p0.copy(), {}
    for t, g in enumerate(grads, start=1):
        adamax_step(p, g, state, 0.0016, 0.9, 0.999, t)
    assert np.array_equal(p, adamax_reference(p0, grads, 0.0016))


def test_adamax_class_counts_steps():
    from maevi.tensor import Tensor
    w = Tensor(np.ones(3), requires_grad=True)
    opt = AdaMax([("w", w)])
    w.grad = np.array([1.0, 0.0, -1.0])
    opt.step(0.1)
    opt.step(0.1)
    assert opt.t == 2 and w.data[1] == 1.0 and w.data[0] < 1.0 < w.data[2]


# ---------------------------------------------------------------- training loop

def test_training_is_deterministic(tiny_samples):
    a, b = run(tiny_samples, seed=5), run(tiny_samples, seed=5)
    assert a.losses == b.losses
    for (na, pa), (nb, pb) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    assert run(tiny_samples, seed=6).losses != a.losses


def test_zero_learning_rate_keeps_parameters(tiny_samples):
    before = MAEVINet(TINY, seed=0).state_dict()
    res = run(tiny_samples, lr0=0.0, seed=0)
    for k, v in res.model.state_dict().items():
        assert np.array_equal(v, before[k])


def test_alpha_zero_is_plain_l1(tiny_samples):
    res = run(tiny_samples, alpha=0.0)
    assert all(r.loss == r.l_full for r in res.history)


def test_loss_decreases_on_short_run(tiny_samples):
    res = train(tiny_samples[:1], TrainConfig(batch_size=1, epochs=40, lr0=0.005), TINY)
    assert np.mean(res.losses[-5:]) < np.mean(res.losses[:5])


def test_split_mode_runs(tiny_samples):
    res = run(tiny_samples, loss_mode="split")
    assert all(math.isfinite(r.loss) for r in res.history)


def test_lr_decays_per_epoch(tiny_samples):
    res = train(tiny_samples, TrainConfig(batch_size=1, epochs=3, lr0=0.001, lr_decay=0.5), TINY)
    assert [r.lr for r in res.history] == [0.001, 0.001, 0.0005, 0.0005, 0.00025, 0.00025]


def test_callback_can_stop(tiny_samples):
    res = train(tiny_samples, TrainConfig(batch_size=1, epochs=5), TINY, callback=lambda rec, m: rec.step < 2)
    assert len(res.history) == 2


def test_nan_parameter_aborts_with_name(tiny_samples):
    model = MAEVINet(TINY, seed=0)
    model.standard.blocks[1].hidden.bias.data[0] = np.nan
    with pytest.raises(TrainingError, match=r"standard\.blocks\.1\.hidden\.bias"):
        train(tiny_samples, TrainConfig(batch_size=1, max_steps=1), model=model)


def test_training_input_validation(tiny_samples):
    with pytest.raises(ValueError):
        train([], TrainConfig(), TINY)
    blind = prepare(sim.make_sample(sim.SceneSpec(height=16, width=16), ()), TINY)
    blind.ground_truth = None
    with pytest.raises(ValueError):
        train([blind], TrainConfig(), TINY)
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="other").validate()
    with pytest.raises(ValueError):
        TrainConfig(beta2=1.0).validate()


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_bit_identical(tiny_samples, tmp_path):
    cfg = TrainConfig(batch_size=1, epochs=1, max_steps=2, seed=3)
    res = train(tiny_samples, cfg, TINY, out_dir=str(tmp_path))
    ck = load_checkpoint(str(tmp_path / "final.ckpt"))
    assert ck.step == 2 and ck.train_config == cfg and ck.model.cfg == TINY
    for x in tiny_samples:
        assert np.array_equal(ck.model(x).final.data, res.model(x).final.data)
    for name, st in res.optimizer.state.items():
        assert np.array_equal(ck.optimizer_state[name]["m"], st["m"])
        assert np.array_equal(ck.optimizer_state[name]["u"], st["u"])
    lines = (tmp_path / "loss.tsv").read_text().splitlines()
    assert lines[0].split("\t")[0] == "step" and len(lines) == 3


def test_periodic_checkpoints(tiny_samples, tmp_path):
    res = train(tiny_samples, TrainConfig(batch_size=2, epochs=2, checkpoint_every=1), TINY,
                out_dir=str(tmp_path))
    assert [os.path.basename(p) for p in res.checkpoints] == [
        "checkpoint_epoch0001.ckpt", "checkpoint_epoch0002.ckpt", "final.ckpt"]


def test_tensor_container_layout(tmp_path):
    path = tmp_path / "t.ckpt"
    write_tensors(str(path), {"ab": np.arange(6.0).reshape(2, 3), "s": np.array(2.5)})
    raw = path.read_bytes()
    assert raw[:8] == b"MAEVICKP"
    assert int.from_bytes(raw[8:12], "little") == 1 and int.from_bytes(raw[12:16], "little") == 2
    assert raw[16:20] == (2).to_bytes(4, "little") and raw[20:22] == b"ab"
    back = read_tensors(str(path))
    assert np.array_equal(back["ab"], np.arange(6.0).reshape(2, 3)) and back["s"] == 2.5
    path.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError, match="magic"):
        read_tensors(str(path))


def test_checkpoint_without_optimizer(tmp_path):
    model = MAEVINet(ModelConfig(n_time_bins=4, combine="mean"), seed=1)
    save_checkpoint(str(tmp_path / "m.ckpt"), model)
    ck = load_checkpoint(str(tmp_path / "m.ckpt"))
    assert ck.model.cfg == model.cfg and ck.train_config is None and ck.optimizer_state == {}
    for k, v in model.state_dict().items():
        assert np.array_equal(ck.model.state_dict()[k], v)


def test_evaluate_rows(tiny_samples):
    rows = evaluate(MAEVINet(TINY, seed=0), tiny_samples)
    assert len(rows) == 2
    for r in rows:
        assert math.isfinite(r.psnr) and -1 <= r.ssim <= 1
