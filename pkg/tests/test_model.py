import numpy as np
import pytest

from stablespike import autograd as ag
from stablespike.autograd import ShapeError, Tensor
from stablespike.model import (backbone_output_shape, build_architecture, classifier_forward,
                               dense_stage_maps, forward, load_checkpoint, parameter_count,
                               save_checkpoint)


@pytest.fixture
def conv():
    return build_architecture("CONV_SNN_MINI", (2, 24, 24), 4, seed=5, init_gain=3.0)


def test_conv_parameter_count(conv):
    by_hand = (16 * 2 * 9 + 16) + (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32) + (32 * 4 + 4)
    assert by_hand == 14324
    assert conv.num_parameters() == by_hand == parameter_count("CONV_SNN_MINI", (2, 24, 24), 4)


def test_mlp_parameter_count():
    m = build_architecture("MLP_SNN", (2, 24, 24), 4)
    assert m.num_parameters() == (1152 * 128 + 128) + (128 * 64 + 64) + (64 * 4 + 4)


def test_same_seed_identical_weights():
    a = build_architecture("CONV_SNN_MINI", (2, 24, 24), 4, seed=9)
    b = build_architecture("CONV_SNN_MINI", (2, 24, 24), 4, seed=9)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_unknown_architecture():
    with pytest.raises(ValueError):
        build_architecture("RESNET", (2, 24, 24), 4)


def test_mlp_forward_shape(rng):
    m = build_architecture("MLP_SNN", (2, 24, 24), 4, seed=1)
    rec = forward(m, rng.random((4, 2, 2, 24, 24)))
    assert rec.logits.shape == (2, 4)
    assert rec.step_logits.shape == (4, 2, 4)
    assert rec.spikes.shape == (4, 2, 64)


def test_zero_input_gives_bias(conv):
    bias = conv.params["classifier.bias"].data
    # a silent backbone is not guaranteed with random biases, so clamp biases first
    for k, t in conv.params.items():
        if k.endswith(".bias") and not k.startswith("classifier"):
            t.data = -np.abs(t.data)
    rec = forward(conv, np.zeros((3, 2, 2, 24, 24)))
    assert not rec.spikes.data.any()
    np.testing.assert_allclose(rec.logits.data, np.broadcast_to(bias, (2, 4)))


def test_single_timestep_forward(conv, rng):
    rec = forward(conv, rng.random((1, 2, 2, 24, 24)))
    assert rec.logits.shape == (2, 4)


def test_logits_are_mean_of_steps(conv, rng):
    rec = forward(conv, rng.random((4, 3, 2, 24, 24)) * 2)
    assert np.array_equal(rec.logits.data, rec.step_logits.data.mean(axis=0))
    assert rec.spikes.data.any()


def test_bad_input_shape(conv):
    with pytest.raises(ShapeError):
        forward(conv, np.zeros((2, 1, 2, 20, 24)))


def test_classifier_replay_and_linearity(conv, rng):
    rec = forward(conv, rng.random((4, 2, 2, 24, 24)) * 2)
    bias = conv.params["classifier.bias"].data
    zero = classifier_forward(conv, Tensor(np.zeros((2,) + backbone_output_shape(conv))))
    np.testing.assert_allclose(zero.data, np.broadcast_to(bias, (2, 4)))
    for t in range(4):
        replay = classifier_forward(conv, Tensor(rec.spikes.data[t]))
        np.testing.assert_allclose(replay.data, rec.step_logits.data[t], atol=1e-12)
    rate = Tensor(rec.spikes.data.mean(axis=0))
    once = classifier_forward(conv, rate).data - bias
    twice = classifier_forward(conv, Tensor(2 * rate.data)).data - bias
    np.testing.assert_allclose(twice, 2 * once, atol=1e-12)
    # a linear classifier over GAP commutes with time averaging
    np.testing.assert_allclose(classifier_forward(conv, rate).data, rec.logits.data, atol=1e-12)
    with pytest.raises(ShapeError):
        classifier_forward(conv, Tensor(np.zeros((2, 32, 5, 5))))


def test_dense_stages(conv, rng):
    x = rng.random((4, 2, 2, 24, 24)) * 2
    rec = forward(conv, x, dense=True)
    stages = dense_stage_maps(rec)
    assert len(stages) == 3 == conv.stage_count
    for s in stages:
        assert set(np.unique(s.data)) <= {0.0, 1.0}
    plain = forward(conv, x)
    assert np.array_equal(stages[-1].data, plain.spikes.data)
    with pytest.raises(ValueError):
        dense_stage_maps(plain)


def test_weight_sharing_across_time(conv, rng):
    x = rng.random((4, 2, 2, 24, 24)) * 2
    before = forward(conv, x).step_logits.data
    conv.params["classifier.weight"].data[0, 0] += 0.5
    after = forward(conv, x).step_logits.data
    changed = np.abs(after - before).max(axis=(1, 2)) > 0
    assert changed.all()


def test_gradients_reach_every_parameter(conv, rng):
    rec = forward(conv, rng.random((3, 2, 2, 24, 24)) * 2)
    ag.backward(ag.cross_entropy(rec.logits, np.array([0, 1])))
    for k, t in conv.params.items():
        assert t.grad is not None and t.grad.shape == t.shape, k


def test_checkpoint_round_trip(conv, tmp_path, rng):
    path = tmp_path / "m.ckpt"
    optim = {"velocity/conv1.weight": rng.normal(size=(16, 2, 3, 3))}
    save_checkpoint(path, conv, optim, meta={"epoch": 3})
    loaded, opt_state, meta = load_checkpoint(path)
    assert meta == {"epoch": 3} and loaded.arch == conv.arch and loaded.init_gain == 3.0
    for k in conv.params:
        assert np.array_equal(loaded.params[k].data, conv.params[k].data)
    assert np.array_equal(opt_state["velocity/conv1.weight"], optim["velocity/conv1.weight"])
    x = rng.random((2, 2, 2, 24, 24))
    assert np.array_equal(forward(loaded, x).logits.data, forward(conv, x).logits.data)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(bad)
