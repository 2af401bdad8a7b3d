import json

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from counting import brute_force_counts
from mlp_oracle import MlpLossOracle
from stablespike import autograd as ag
from stablespike.data import Dataset
from stablespike.model import build_architecture, forward, load_checkpoint
from stablespike.neuron import LifParams
from stablespike.trainer import (SGD, TrainConfig, assemble_loss, evaluate, firing_and_energy,
                                 fit, lr_at, make_model, seed_streams, timestep_variance, to_input,
                                 train_step)


def mlp_cfg(**kw):
    base = dict(arch="MLP_SNN", hidden=(8, 8), timesteps=3, classes=3)
    base.update(kw)
    return TrainConfig(**base)


def tiny_mlp(seed=3):
    return build_architecture("MLP_SNN", (6,), 3, seed=seed, hidden=(8, 8), init_gain=3.0)


def tiny_batch(seed=11):
    r = np.random.default_rng(seed)
    return r.uniform(0.0, 1.0, (3, 5, 6)), np.array([0, 1, 2, 1, 0])


def tiny_dataset(n=16, steps=4, size=6, seed=0, classes=4):
    r = np.random.default_rng(seed)
    frames = (r.random((n, steps, 2, size, size)) < 0.3).astype(np.float64)
    labels = np.arange(n) % classes
    # make the class visible: light a class-specific row
    for i, c in enumerate(labels):
        frames[i, :, 0, c, :] = 2.0
    return Dataset(frames, labels, [])


# ---------------------------------------------------------------------------
# total-loss gradient against the linearized numpy oracle


# KL is checked at op level: its +1e-8 floor makes FD through silent neurons ill-posed
@pytest.mark.parametrize("fn", ["MSE", "COSINE"])
@pytest.mark.parametrize("detach_anchor,detach_clean", [(True, True), (False, False)])
def test_total_loss_gradient_matches_oracle(fn, detach_anchor, detach_clean):
    model = tiny_mlp()
    x, labels = tiny_batch()
    cfg = mlp_cfg(consistency_fn=fn, detach_anchor=detach_anchor, detach_clean=detach_clean,
                  beta=0.7, gamma=1.3)
    total, parts, rec = assemble_loss(model, x, labels, cfg, np.random.default_rng(42))
    ag.backward(total)

    oracle = MlpLossOracle(x, labels, 2, beta=0.7, gamma=1.3, fn=fn,
                           detach_anchor=detach_anchor, detach_clean=detach_clean, noise_seed=42)
    arrays = {k: t.data.copy() for k, t in model.params.items()}
    base = oracle.parts(arrays)
    # the frozen point must be the library's own forward
    assert np.array_equal(oracle.frozen["S"][1], rec.spikes.data)
    for k in ("ce", "spike", "noise"):
        assert base[k] == pytest.approx(float(parts[k].data), rel=1e-12, abs=1e-15)
    assert base["total"] == pytest.approx(float(total.data), rel=1e-12)
    # non-vacuous: some neurons fire and some sit inside the surrogate window
    h0 = np.concatenate([h.ravel() for h in oracle.frozen["H"]])
    assert 0 < rec.spikes.data.mean() < 1
    assert np.any(np.abs(h0 - 1.0) < 0.5)

    names = list(arrays)
    numeric = numeric_grad(lambda: oracle.loss(arrays), [arrays[k] for k in names])
    for k, g in zip(names, numeric):
        assert rel_error(model.params[k].grad, g) < 1e-4, k


def test_each_loss_term_gradient_separately():
    x, labels = tiny_batch(5)
    for beta, gamma in ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0)):
        model = tiny_mlp(8)
        cfg = mlp_cfg(beta=beta, gamma=gamma)
        total, _, _ = assemble_loss(model, x, labels, cfg, np.random.default_rng(1))
        ag.backward(total)
        oracle = MlpLossOracle(x, labels, 2, beta=beta, gamma=gamma, noise_seed=1)
        arrays = {k: t.data.copy() for k, t in model.params.items()}
        oracle.parts(arrays)
        names = list(arrays)
        numeric = numeric_grad(lambda: oracle.loss(arrays), [arrays[k] for k in names])
        for k, g in zip(names, numeric):
            analytic = model.params[k].grad
            analytic = np.zeros_like(g) if analytic is None else analytic
            assert rel_error(analytic, g) < 1e-4, (beta, gamma, k)


# ---------------------------------------------------------------------------
# loss assembly


def test_loss_components_add_up():
    model = tiny_mlp()
    x, labels = tiny_batch()
    cfg = mlp_cfg(beta=0.3, gamma=2.5)
    total, parts, _ = assemble_loss(model, x, labels, cfg, np.random.default_rng(0))
    expect = float(parts["ce"].data) + 0.3 * float(parts["spike"].data) + 2.5 * float(parts["noise"].data)
    assert float(total.data) == pytest.approx(expect, rel=1e-13)


def test_gamma_zero_consumes_no_noise():
    model = tiny_mlp()
    x, labels = tiny_batch()
    rng = np.random.default_rng(0)
    before = rng.bit_generator.state
    _, parts, _ = assemble_loss(model, x, labels, mlp_cfg(gamma=0.0), rng)
    assert rng.bit_generator.state == before
    assert parts["noise"] is None


def test_constant_spikes_have_zero_spike_loss():
    # huge positive bias: every neuron fires at every step
    model = tiny_mlp()
    for k in ("fc1.bias", "fc2.bias"):
        model.params[k].data = np.full_like(model.params[k].data, 50.0)
    x, labels = tiny_batch()
    _, parts, rec = assemble_loss(model, x, labels, mlp_cfg(), np.random.default_rng(0))
    assert rec.spikes.data.min() == 1.0
    assert float(parts["spike"].data) == 0.0


def test_baseline_equals_vanilla_training():
    """beta=gamma=0 reproduces a hand-written CE-only loop bit for bit."""
    ds = tiny_dataset()
    cfg = TrainConfig(arch="MLP_SNN", hidden=(8,), input_size=6, beta=0.0, gamma=0.0, epochs=2,
                      batch_size=5, seed=4)
    result = fit(ds, ds, cfg)

    model = make_model(cfg)
    shuffle = np.random.default_rng(seed_streams(cfg.seed)[1])
    velocity = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)
        order = shuffle.permutation(len(ds))
        for start in range(0, len(ds), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            rec = forward(model, to_input(ds.frames[idx]))
            ag.backward(ag.cross_entropy(rec.logits, ds.labels[idx]))
            for k, t in model.params.items():
                g = t.grad + cfg.weight_decay * t.data
                velocity[k] = cfg.momentum * velocity[k] + g
                t.data = t.data - lr * velocity[k]
    for k, t in model.params.items():
        assert np.array_equal(t.data, result.model.params[k].data), k


def test_dense_with_one_stage_equals_default():
    model = build_architecture("MLP_SNN", (6,), 3, seed=2, hidden=(8,), init_gain=3.0)
    x, labels = tiny_batch()
    cfg = TrainConfig(arch="MLP_SNN", hidden=(8,), timesteps=3, classes=3)
    a, _, _ = assemble_loss(model, x, labels, cfg, np.random.default_rng(0))
    b, _, _ = assemble_loss(model, x, labels, cfg.replace(dense=True), np.random.default_rng(0))
    assert float(a.data) == float(b.data)


def test_dense_averages_stage_losses():
    model = tiny_mlp()
    x, labels = tiny_batch()
    cfg = mlp_cfg(dense=True, gamma=0.0)
    _, parts, rec = assemble_loss(model, x, labels, cfg, None)
    expect = []
    for s in rec.stage_spikes:
        d = s.data
        expect.append(np.mean(((d[:-1] * d[1:]).mean(0) - d.mean(0)) ** 2))
    assert float(parts["spike"].data) == pytest.approx(np.mean(expect), rel=1e-12)


def test_non_finite_loss_raises():
    model = tiny_mlp()
    model.params["classifier.bias"].data = np.array([np.nan, 0.0, 0.0])
    x, labels = tiny_batch()
    opt = SGD(model.params, 0.1, 0.9, 0.0)
    frames = np.swapaxes(x, 0, 1)
    with pytest.raises(FloatingPointError, match="ce"):
        train_step(model, frames, labels, mlp_cfg(), opt, np.random.default_rng(0))


def test_noise_branch_requires_rng():
    with pytest.raises(ValueError):
        assemble_loss(tiny_mlp(), *tiny_batch(), mlp_cfg(), None)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(timesteps=1)
    TrainConfig(timesteps=1, beta=0.0, gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(noise="bogus")
    with pytest.raises(ValueError):
        TrainConfig(bitop="NAND")


# ---------------------------------------------------------------------------
# schedule, optimizer, fit


def test_lr_schedule():
    cfg = TrainConfig()
    assert [lr_at(cfg, e) for e in (0, 9, 10, 19, 20)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])


def test_sgd_single_step_by_hand():
    t = ag.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    t.grad = np.array([0.5, 0.5])
    opt = SGD({"w": t}, lr=0.1, momentum=0.9, weight_decay=0.01)
    opt.step()
    g1 = np.array([0.5, 0.5]) + 0.01 * np.array([1.0, -2.0])
    np.testing.assert_allclose(t.data, [1.0, -2.0] - 0.1 * g1)
    w1 = t.data.copy()
    opt.step()
    v2 = 0.9 * g1 + (np.array([0.5, 0.5]) + 0.01 * w1)
    np.testing.assert_allclose(t.data, w1 - 0.1 * v2)


def test_fit_is_deterministic(tmp_path):
    ds = tiny_dataset()
    cfg = TrainConfig(arch="MLP_SNN", hidden=(8, 8), input_size=6, epochs=2, batch_size=8, seed=3)
    a = fit(ds, ds, cfg, run_dir=tmp_path / "a")
    b = fit(ds, ds, cfg, run_dir=tmp_path / "b")
    assert a.history == b.history
    for name in ("metrics.jsonl", "report.json", "best.ckpt", "last.ckpt", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    c = fit(ds, ds, cfg.replace(seed=4))
    assert c.history != a.history


def test_zero_epoch_fit_is_evaluation_only(tmp_path):
    ds = tiny_dataset()
    cfg = TrainConfig(arch="MLP_SNN", hidden=(8,), input_size=6, epochs=0)
    result = fit(ds, ds, cfg, run_dir=tmp_path)
    init = make_model(cfg)
    assert result.history == []
    for k, t in init.params.items():
        assert np.array_equal(t.data, result.model.params[k].data)
    assert result.final["test_acc"] == evaluate(init, ds).accuracy
    assert (tmp_path / "metrics.jsonl").read_text() == ""
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["final"]["test_acc"] == result.final["test_acc"]


def test_memorizes_a_single_sample():
    ds = tiny_dataset(n=1)
    cfg = TrainConfig(arch="MLP_SNN", hidden=(16,), input_size=6, epochs=15, batch_size=1,
                      beta=0.0, gamma=0.0, seed=1)
    result = fit(ds, ds, cfg)
    assert result.final["test_acc"] == 100.0
    assert result.history[-1]["train_acc"] == 100.0
    assert all(0.0 <= h["train_acc"] <= 100.0 for h in result.history)


def test_checkpoint_roundtrip_evaluates_identically(tmp_path):
    ds = tiny_dataset()
    cfg = TrainConfig(arch="CONV_SNN_MINI", hidden=(4, 4, 4), input_size=6, epochs=1, batch_size=8)
    result = fit(ds, ds, cfg, run_dir=tmp_path)
    model, optim, meta = load_checkpoint(tmp_path / "last.ckpt")
    a, b = evaluate(result.model, ds), evaluate(model, ds)
    assert np.array_equal(a.logits, b.logits) and a.variance == b.variance
    assert set(optim) == {f"velocity/{k}" for k in model.params}
    assert meta["config"]["arch"] == "CONV_SNN_MINI"


# ---------------------------------------------------------------------------
# evaluation metrics


def test_uniform_logits_give_first_class_share():
    ds = tiny_dataset(n=10)
    model = make_model(TrainConfig(arch="MLP_SNN", hidden=(4,), input_size=6))
    model.params["classifier.weight"].data[:] = 0.0
    model.params["classifier.bias"].data[:] = 0.0
    ev = evaluate(model, ds)
    # argmax of a tie is class 0
    assert ev.accuracy == pytest.approx(100.0 * np.mean(ds.labels == 0))
    assert np.all(ev.predictions == 0)


def test_timestep_variance_values(rng):
    assert timestep_variance(np.ones((4, 3, 5))) == 0.0
    alt = np.zeros((4, 3, 5))
    alt[1::2] = 1.0
    assert timestep_variance(alt) == 1.0
    s = (rng.random((5, 2, 3, 4)) < 0.4).astype(float)
    flips = total = 0
    for t in range(4):
        for idx in np.ndindex(s.shape[1:]):
            flips += s[t][idx] != s[t + 1][idx]
            total += 1
    assert timestep_variance(s) == pytest.approx(flips / total)
    with pytest.raises(ValueError):
        timestep_variance(np.ones((1, 3)))


@pytest.mark.parametrize("size", [6, 7])
def test_firing_and_energy_match_brute_force(size):
    r = np.random.default_rng(size)
    frames = (r.random((10, 3, 2, size, size)) < 0.5) * 2.0
    ds = Dataset(frames, np.zeros(10, dtype=np.int64), [])
    model = build_architecture("CONV_SNN_MINI", (2, size, size), 4, seed=1, hidden=(3, 4, 5),
                               init_gain=3.0)
    rep = firing_and_energy(model, ds, 0.9, 4.6, batch_size=4)
    rates, synops, macs, energy = brute_force_counts(model, ds, 0.9, 4.6)
    assert all(0 < v < 100 for v in rates)
    assert rep.rates == pytest.approx(rates, rel=1e-12)
    assert rep.synops == synops
    assert rep.mac_ops == macs
    assert rep.energy_pj == pytest.approx(energy, rel=1e-12)


def test_silent_network_costs_only_first_layer_macs():
    ds = tiny_dataset(n=4)
    model = build_architecture("CONV_SNN_MINI", (2, 6, 6), 4, seed=1, hidden=(3, 3, 3),
                               lif=LifParams(theta=1e9))
    rep = firing_and_energy(model, ds, 0.9, 4.6)
    assert rep.synops == [0.0, 0.0, 0.0] and rep.rates == [0.0, 0.0, 0.0]
    assert rep.energy_pj == pytest.approx(rep.mac_ops * 4.6)


def test_doubling_steps_doubles_synops():
    # constant input and a tiny threshold: each neuron either fires every step or never
    r = np.random.default_rng(0)
    frame = r.random((4, 1, 2, 6, 6))
    model = build_architecture("CONV_SNN_MINI", (2, 6, 6), 4, seed=1, hidden=(3, 3, 3),
                               lif=LifParams(theta=1e-9))
    short = firing_and_energy(model, Dataset(np.repeat(frame, 2, axis=1), np.zeros(4, int), []))
    long = firing_and_energy(model, Dataset(np.repeat(frame, 4, axis=1), np.zeros(4, int), []))
    assert sum(short.synops) > 0
    assert long.synops == [2 * v for v in short.synops]
    assert long.rates == short.rates
