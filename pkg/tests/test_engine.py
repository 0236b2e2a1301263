import numpy as np
import pytest

from zglab import engine
from zglab.engine import ArchSpec, init_params, forward, loss_and_grads

from conftest import finite_difference, grad_matches_fd


def test_init_deterministic(archs):
    for arch in archs.values():
        a = init_params(arch, 123)
        b = init_params(arch, 123)
        assert a.equal(b)
        assert not a.equal(init_params(arch, 124))


def test_init_biases_zero(archs):
    for arch in archs.values():
        p = init_params(arch, 0)
        for name, arr in p.groups.items():
            if name.endswith(".bias"):
                assert np.all(arr == 0.0)


def test_init_weight_std_matches_fan_in():
    # dense(256) fed by a 784-dim flatten: std should be near sqrt(2/784)
    arch = ArchSpec("mlp-small", (1, 28, 28), 10)
    p = init_params(arch, 5)
    std = p.groups["fc1.weight"].std()
    expected = np.sqrt(2.0 / 784)  # ~0.0505
    assert abs(std - expected) / expected < 0.10


def test_forward_zero_params_zero_logits(archs, blobs):
    x = blobs.inputs[:4]
    for arch in archs.values():
        zeros = init_params(arch, 0).zeros_like()
        logits = forward(arch, zeros, x)
        assert logits.shape == (4, arch.num_classes)
        assert np.all(logits == 0.0)


def test_forward_identical_rows(archs):
    rng = np.random.default_rng(2)
    one = rng.uniform(0, 1, (1, 1, 8, 8))
    x = np.repeat(one, 3, axis=0)
    for arch in archs.values():
        params = init_params(arch, 9)
        logits = forward(arch, params, x)
        assert np.array_equal(logits[0], logits[1])
        assert np.array_equal(logits[0], logits[2])


def test_cnn_flatten_dimension():
    arch = ArchSpec("cnn-small", (1, 8, 8), 7)
    p = init_params(arch, 0)
    # stride-2 pad-1 conv halves 8x8 to 4x4 with 32 filters
    assert p.groups["fc.weight"].shape == (32 * 4 * 4, 7)
    x = np.random.default_rng(0).uniform(0, 1, (3, 1, 8, 8))
    assert forward(arch, p, x).shape == (3, 7)


def test_forward_shape_mismatch_rejected(archs):
    arch = archs["mlp-small"]
    params = init_params(arch, 0)
    with pytest.raises(ValueError, match="input shape"):
        forward(arch, params, np.zeros((2, 1, 9, 8)))


def test_loss_zero_params_is_log_num_classes(blobs):
    arch = ArchSpec("mlp-small", (1, 8, 8), 10)
    zeros = init_params(arch, 0).zeros_like()
    x, y = blobs.inputs[:8], blobs.labels[:8] % 10
    lg = loss_and_grads(arch, zeros, x, y)
    assert lg.loss == pytest.approx(np.log(10.0), abs=1e-12)


def test_label_out_of_range_rejected(archs):
    arch = archs["mlp-small"]
    params = init_params(arch, 0)
    x = np.zeros((2, 1, 8, 8))
    with pytest.raises(ValueError, match="labels"):
        loss_and_grads(arch, params, x, np.array([0, 5]))


def test_unrequested_gradients_omitted(archs, blobs):
    arch = archs["cnn-small"]
    params = init_params(arch, 0)
    lg = loss_and_grads(arch, params, blobs.inputs[:2], blobs.labels[:2] % 5)
    assert lg.input_grad is None and lg.param_grad is None
    lg = loss_and_grads(arch, params, blobs.inputs[:2], blobs.labels[:2] % 5,
                        want_input_grad=True)
    assert lg.input_grad is not None and lg.param_grad is None


def test_purity_bit_identical(archs, blobs):
    x, y = blobs.inputs[:4], blobs.labels[:4] % 5
    for arch in archs.values():
        params = init_params(arch, 3)
        a = loss_and_grads(arch, params, x, y, want_param_grad=True,
                           want_input_grad=True)
        b = loss_and_grads(arch, params, x, y, want_param_grad=True,
                           want_input_grad=True)
        assert a.loss == b.loss
        assert np.array_equal(a.input_grad, b.input_grad)
        assert a.param_grad.equal(b.param_grad)


@pytest.mark.parametrize("kind", ["mlp-small", "cnn-small"])
def test_input_grad_matches_finite_differences(kind, archs):
    arch = archs[kind]
    rng = np.random.default_rng(11)
    params = init_params(arch, 17)
    x = rng.uniform(0, 1, (3, 1, 8, 8))
    y = rng.integers(0, 5, 3)
    lg = loss_and_grads(arch, params, x, y, want_input_grad=True)
    idx = rng.choice(x.size, 20, replace=False)
    fd = finite_difference(lambda: loss_and_grads(arch, params, x, y).loss, x, idx)
    grad_matches_fd(lg.input_grad.reshape(-1), fd)


@pytest.mark.parametrize("kind", ["mlp-small", "cnn-small"])
def test_param_grad_matches_finite_differences(kind, archs):
    arch = archs[kind]
    rng = np.random.default_rng(13)
    params = init_params(arch, 19)
    x = rng.uniform(0, 1, (3, 1, 8, 8))
    y = rng.integers(0, 5, 3)
    lg = loss_and_grads(arch, params, x, y, want_param_grad=True)
    for name in params.names:
        arr = params.groups[name]
        k = min(4, arr.size)
        idx = rng.choice(arr.size, k, replace=False)
        fd = finite_difference(lambda: loss_and_grads(arch, params, x, y).loss,
                               arr, idx)
        grad_matches_fd(lg.param_grad.groups[name].reshape(-1), fd)


def test_mlp_linear_probe_constant_input_grad():
    # with identity activations the network is affine, so the gradient of
    # a fixed linear functional of the logits cannot depend on x
    arch = ArchSpec("mlp-small", (1, 8, 8), 5)
    params = init_params(arch, 23)
    rng = np.random.default_rng(29)
    xa = rng.uniform(0, 1, (2, 1, 8, 8))
    xb = rng.uniform(0, 1, (2, 1, 8, 8))
    ga = engine.logit_sum_input_grad(arch, params, xa, activation="identity")
    gb = engine.logit_sum_input_grad(arch, params, xb, activation="identity")
    assert np.array_equal(ga, gb)
    # sanity: with relu the same gradient does vary with x
    ra = engine.logit_sum_input_grad(arch, params, xa)
    rb = engine.logit_sum_input_grad(arch, params, xb)
    assert not np.array_equal(ra, rb)


def test_engine_outputs_finite(archs, blobs):
    x, y = blobs.inputs[:16], blobs.labels[:16] % 5
    for arch in archs.values():
        params = init_params(arch, 31)
        lg = loss_and_grads(arch, params, x, y, want_param_grad=True,
                            want_input_grad=True)
        assert np.isfinite(lg.loss)
        assert np.all(np.isfinite(lg.logits))
        assert np.all(np.isfinite(lg.input_grad))
        for arr in lg.param_grad.groups.values():
            assert np.all(np.isfinite(arr))
