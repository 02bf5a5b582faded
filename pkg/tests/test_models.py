import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xtkd import models
from xtkd.exceptions import ContractError, FrozenError, ShapeError
from xtkd.models import InitSpec, MlpNet, mlp_new


def test_same_seed_same_weights():
    a = mlp_new([4, 8, 8, 2], 2, InitSpec(seed=7))
    b = mlp_new([4, 8, 8, 2], 2, InitSpec(seed=7))
    for x, y in zip(a.params(), b.params()):
        np.testing.assert_array_equal(x, y)


def test_different_seed_differs():
    a = mlp_new([4, 8, 8, 2], 2, InitSpec(seed=7))
    b = mlp_new([4, 8, 8, 2], 2, InitSpec(seed=8))
    assert any(np.any(x != y) for x, y in zip(a.params(), b.params()))


def test_uniform_fan_in_bounds():
    net = mlp_new([50, 20, 3], 1, InitSpec("uniform-fan-in", 0))
    for w, fan_in in zip(net.weights, (50, 20)):
        assert np.abs(w).max() <= 1 / np.sqrt(fan_in)


def test_zero_init_gives_zero_output(rng):
    net = mlp_new([4, 8, 8, 2], 2, InitSpec("zeros", 0))
    np.testing.assert_array_equal(models.forward(net, rng.standard_normal((5, 4))), 0.0)


def test_layer_shapes_compose():
    net = mlp_new([4, 8, 6, 2], 1)
    for l, w in enumerate(net.weights):
        assert w.shape == (net.widths[l + 1], net.widths[l])
        assert net.biases[l].shape == (1, net.widths[l + 1])


@pytest.mark.parametrize("cut", [0, 3, -1])
def test_invalid_cut(cut):
    with pytest.raises(ContractError):
        mlp_new([4, 8, 8, 2], cut)


def test_invalid_widths_and_scheme():
    with pytest.raises(ContractError):
        mlp_new([4], 1)
    with pytest.raises(ContractError):
        mlp_new([4, 0, 2], 1)
    with pytest.raises(ContractError):
        InitSpec("gaussian", 0)
    with pytest.raises(ContractError):
        mlp_new([4, 3, 2], 1, activation="gelu")


def test_identity_net_encode_is_identity(rng):
    net = MlpNet([3, 3, 3], [np.eye(3), np.eye(3)], [np.zeros((1, 3))] * 2, 1, linear_layers=frozenset({0}))
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(models.encode(net, x), x)


def test_encode_shape(rng):
    net = mlp_new([4, 16, 8, 1], 1)
    assert models.encode(net, rng.standard_normal((8, 4))).shape == (8, 16)


def test_frozen_teacher_features_are_pure(rng):
    net = mlp_new([4, 16, 8, 1], 2).freeze()
    x = rng.standard_normal((6, 4))
    np.testing.assert_array_equal(models.encode(net, x), models.encode(net, x))


def test_encode_shape_mismatch(rng):
    net = mlp_new([4, 16, 8, 1], 1)
    with pytest.raises(ShapeError):
        models.encode(net, rng.standard_normal((8, 5)))
    with pytest.raises(ShapeError):
        models.decode(net, rng.standard_normal((8, 4)))


@given(st.integers(0, 1000), st.integers(1, 3))
def test_decode_of_encode_is_forward(seed, cut):
    rng = np.random.default_rng(seed)
    net = mlp_new([5, 7, 6, 4, 2], cut, InitSpec(seed=seed))
    x = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(models.decode(net, models.encode(net, x)), models.forward(net, x))


def test_zero_features_through_zero_bias_net():
    net = mlp_new([4, 16, 8, 1], 1, InitSpec("orthogonal-columns", 3))
    np.testing.assert_array_equal(models.decode(net, np.zeros((8, 16))), np.zeros((8, 1)))


def test_decode_shape(rng):
    net = mlp_new([4, 16, 8, 1], 1)
    assert models.decode(net, rng.standard_normal((8, 16))).shape == (8, 1)


def test_orthogonal_square_layer_preserves_norm(rng):
    net = mlp_new([6, 6, 2], 1, InitSpec("orthogonal-columns", 11))
    x = rng.standard_normal((5, 6))
    lin = x @ net.weights[0].T
    assert abs(np.linalg.norm(lin) - np.linalg.norm(x)) < 1e-8


def test_orthogonal_columns_are_orthonormal():
    net = mlp_new([6, 9, 4], 1, InitSpec("orthogonal-columns", 1))
    w0, w1 = net.weights
    np.testing.assert_allclose(w0.T @ w0, np.eye(6), atol=1e-12)
    np.testing.assert_allclose(w1 @ w1.T, np.eye(4), atol=1e-12)


def test_tape_layers_match_numpy(rng):
    from xtkd import autodiff as ad

    for act in ("tanh", "relu"):
        net = mlp_new([3, 5, 4, 2], 2, activation=act)
        x = rng.standard_normal((6, 3))
        t = ad.Tape()
        params = [t.leaf(p) for p in net.params()]
        out = models.apply_tape(net, params, t.const(x), 0, net.n_layers)
        np.testing.assert_allclose(out.value, models.forward(net, x), atol=1e-15)


# -- sgd -----------------------------------------------------------------------

def test_sgd_zero_lr_is_noop(rng):
    net = mlp_new([3, 4, 2], 1)
    before = [p.copy() for p in net.params()]
    models.sgd_step(net, [rng.standard_normal(p.shape) for p in net.params()], 0.0)
    for a, b in zip(before, net.params()):
        np.testing.assert_array_equal(a, b)


def test_sgd_scalar_arithmetic():
    net = MlpNet([1, 1, 1], [np.ones((1, 1)), np.ones((1, 1))], [np.zeros((1, 1)), np.zeros((1, 1))], 1)
    models.sgd_step(net, [np.full((1, 1), 2.0)] + [np.zeros((1, 1))] * 3, 0.1)
    assert net.weights[0][0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_refuses_frozen_net(rng):
    net = mlp_new([3, 4, 2], 1).freeze()
    fp = net.fingerprint()
    with pytest.raises(FrozenError):
        models.sgd_step(net, [np.ones(p.shape) for p in net.params()], 0.1)
    assert net.fingerprint() == fp


def test_sgd_gradient_shape_checks():
    net = mlp_new([3, 4, 2], 1)
    with pytest.raises(ShapeError):
        models.sgd_step(net, [np.ones((1, 1))], 0.1)
    with pytest.raises(ShapeError):
        models.sgd_step(net, [np.ones((1, 1))] * 4, 0.1)


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip_is_exact():
    net = mlp_new([4, 7, 3, 2], 2, InitSpec(seed=5))
    buf = io.StringIO()
    models.save_checkpoint(buf, net)
    buf.seek(0)
    back = models.load_checkpoint(buf)
    assert back.widths == net.widths and back.encoder_cut == 2
    assert back.fingerprint() == net.fingerprint()


def test_checkpoint_layout():
    buf = io.StringIO()
    models.save_checkpoint(buf, mlp_new([2, 3, 1], 1, InitSpec("zeros", 0)))
    lines = buf.getvalue().splitlines()
    assert lines[:4] == ["MLP v1", "2 3 1", "1", "3 2"]


def test_checkpoint_bad_header():
    with pytest.raises(ContractError):
        models.load_checkpoint(io.StringIO("MLP v2\n"))
