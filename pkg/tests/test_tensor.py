import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liquidbeam import tensor as T
from liquidbeam.tensor import (DimensionError, GraphStateError, NonFiniteError, RunningStats,
                               Tensor, check_gradients, parameter, precision)


def naive_conv2d(x, k, b, stride, pad):
    """Quadruple-loop reference kept as the oracle for the im2col path."""
    B, C, H, W = x.shape
    Co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * k[o]) + (b[o] if b is not None else 0.0)
    return out


# -- linear ---------------------------------------------------------------

def test_linear_identity_weight():
    y = T.linear(Tensor([[1, 2]]), Tensor([[1, 0], [0, 1]]), Tensor([0, 0]))
    np.testing.assert_array_equal(y.data, [[1, 2]])


def test_linear_sum_plus_bias():
    y = T.linear(Tensor([[1, 1]]), Tensor([[1, 1]]), Tensor([3]))
    np.testing.assert_array_equal(y.data, [[5]])


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        T.linear(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))))


def test_linear_gradcheck():
    rng = np.random.default_rng(1)
    with precision("float64"):
        x = parameter(rng.normal(size=(4, 5)))
        W = parameter(rng.normal(size=(3, 5)))
        b = parameter(rng.normal(size=3))
        errs = check_gradients(lambda: T.linear(x, W, b).sum(), {"x": x, "W": W, "b": b})
    assert max(errs.values()) < 1e-4, errs


# -- conv2d ---------------------------------------------------------------

def test_conv_full_overlap_sum():
    y = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), stride=1, pad=0)
    np.testing.assert_array_equal(y.data, [[[[9]]]])


def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    y = T.conv2d(Tensor(x), Tensor(k), stride=1, pad=1)
    np.testing.assert_allclose(y.data, x.astype(np.float32))


def test_conv_non_positive_output_is_configuration_error():
    with pytest.raises(T.ConfigurationError):
        T.conv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 3, 3))), stride=1, pad=0)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


@pytest.mark.parametrize("shape,cout,stride,pad", [
    ((2, 2, 8, 8), 4, 3, 1),     # extractor geometry, 8x8 grid
    ((3, 2, 4, 4), 5, 3, 1),     # desk grid
    ((2, 3, 2, 2), 4, 3, 1),     # second conv on a 2x2 map
    ((1, 4, 1, 1), 3, 3, 1),     # third conv on a 1x1 map
    ((2, 2, 6, 5), 3, 1, 1),
    ((2, 1, 7, 7), 2, 2, 0),
])
def test_conv_matches_naive_loops(shape, cout, stride, pad):
    rng = np.random.default_rng(sum(shape) + cout)
    x = rng.normal(size=shape)
    k = rng.normal(size=(cout, shape[1], 3, 3))
    b = rng.normal(size=cout)
    with precision("float64"):
        y = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad)
    np.testing.assert_allclose(y.data, naive_conv2d(x, k, b, stride, pad), atol=1e-5)


@pytest.mark.parametrize("shape,cout,stride,pad", [
    ((2, 2, 4, 4), 3, 3, 1), ((2, 3, 2, 2), 4, 3, 1), ((2, 2, 5, 5), 2, 1, 1), ((1, 3, 1, 1), 2, 3, 1),
])
def test_conv_gradcheck(shape, cout, stride, pad):
    rng = np.random.default_rng(7)
    with precision("float64"):
        x = parameter(rng.normal(size=shape))
        k = parameter(rng.normal(size=(cout, shape[1], 3, 3)))
        b = parameter(rng.normal(size=cout))
        w = rng.normal(size=T.conv2d(x, k, b, stride=stride, pad=pad).shape)
        errs = check_gradients(lambda: T.mul(T.conv2d(x, k, b, stride=stride, pad=pad), w).sum(),
                               {"x": x, "k": k, "b": b})
    assert max(errs.values()) < 1e-4, errs


def test_conv_gradcheck_table_ii_dims():
    # 64 -> 256 channels at the real layer size, sampled coordinates
    rng = np.random.default_rng(3)
    with precision("float64"):
        x = parameter(rng.normal(size=(2, 64, 2, 2)))
        k = parameter(rng.normal(size=(256, 64, 3, 3)) * 0.05)
        b = parameter(rng.normal(size=256))
        w = rng.normal(size=(2, 256, 1, 1))
        errs = check_gradients(lambda: T.mul(T.conv2d(x, k, b, stride=3, pad=1), w).sum(),
                               {"x": x, "k": k, "b": b}, max_entries=40)
    assert max(errs.values()) < 1e-4, errs


# -- batchnorm ------------------------------------------------------------

def test_batchnorm_train_normalizes():
    x = np.random.default_rng(0).normal(3, 2, size=(8, 3, 4, 4))
    y = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats.init(3))
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_batchnorm_scale_collapse():
    x = np.random.default_rng(0).normal(size=(4, 2, 3, 3))
    for train in (True, False):
        y = T.batchnorm2d(Tensor(x), Tensor(np.zeros(2)), Tensor(np.full(2, 5.0)), RunningStats.init(2), train)
        np.testing.assert_array_equal(y.data, 5.0)


def test_batchnorm_eval_before_training_uses_unit_stats():
    x = np.random.default_rng(0).normal(size=(2, 2, 2, 2))
    st_ = RunningStats.init(2)
    y = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, train=False)
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_batchnorm_running_stats_momentum():
    x = np.random.default_rng(0).normal(2.0, 1.0, size=(4, 1, 2, 2))
    st_ = RunningStats.init(1)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), st_)
    m = x.size
    np.testing.assert_allclose(st_.mean, 0.1 * x.mean(), rtol=1e-5)
    np.testing.assert_allclose(st_.var, 0.9 + 0.1 * x.var() * m / (m - 1), rtol=1e-5)


def test_batchnorm_needs_two_values_in_train():
    with pytest.raises(DimensionError):
        T.batchnorm2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                      RunningStats.init(1))


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradcheck(train):
    rng = np.random.default_rng(11)
    with precision("float64"):
        x = parameter(rng.normal(size=(3, 4, 2, 2)))
        g = parameter(rng.normal(size=4))
        b = parameter(rng.normal(size=4))
        w = rng.normal(size=x.shape)
        stats = RunningStats(rng.normal(size=4), rng.uniform(0.5, 2, size=4))
        errs = check_gradients(lambda: T.mul(T.batchnorm2d(x, g, b, stats, train), w).sum(),
                               {"x": x, "gamma": g, "beta": b})
    assert max(errs.values()) < 1e-3, errs


# -- activations, pooling, concat -----------------------------------------

def test_activations_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert T.tanh(Tensor([0.0])).data[0] == 0.0
    with pytest.raises(ValueError):
        T.activation("gelu", Tensor([0.0]))


def test_sigmoid_derivative_at_zero():
    with precision("float64"):
        x = parameter([0.0])
        T.sigmoid(x).sum().backward()
        assert x.grad[0] == pytest.approx(0.25)
        errs = check_gradients(lambda: T.sigmoid(x).sum(), {"x": x})
    assert errs["x"] < 1e-6


@pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid"])
def test_activation_gradcheck(kind):
    rng = np.random.default_rng(5)
    with precision("float64"):
        x = parameter(rng.normal(size=(4, 7)) + 0.05)
        w = rng.normal(size=(4, 7))
        errs = check_gradients(lambda: T.mul(T.activation(kind, x), w).sum(), {"x": x})
    assert errs["x"] < 1e-4


def test_sigmoid_extreme_inputs_finite():
    y = T.sigmoid(Tensor([-1e4, 1e4])).data
    assert np.all(np.isfinite(y)) and y[0] == 0 and y[1] == 1


def test_avgpool_values_and_grad():
    x = parameter(np.full((1, 2, 3, 3), 3.0))
    np.testing.assert_array_equal(T.avgpool_global(x).data, [[3, 3]])
    y = T.avgpool_global(Tensor(np.array([1, 2, 3, 4.0]).reshape(1, 1, 2, 2)))
    assert y.data[0, 0] == 2.5
    g = np.array([[2.0, -4.0]])
    T.mul(T.avgpool_global(x), g).sum().backward()
    np.testing.assert_allclose(x.grad[0, 0], 2.0 / 9)
    np.testing.assert_allclose(x.grad[0, 1], -4.0 / 9)


def test_concat_values_and_shapes():
    np.testing.assert_array_equal(T.concat([Tensor([1, 2]), Tensor([3])], 0).data, [1, 2, 3])
    y = T.concat([Tensor(np.zeros((5, 256))), Tensor(np.zeros((5, 64)))], axis=1)
    assert y.shape == (5, 320)
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.zeros((5, 2))), Tensor(np.zeros((4, 2)))], axis=1)


def test_concat_backward_splits():
    a, b = parameter(np.ones((2, 3))), parameter(np.ones((2, 4)))
    w = np.arange(14.0).reshape(2, 7)
    T.mul(T.concat([a, b], 1), w).sum().backward()
    assert a.grad.shape == (2, 3) and b.grad.shape == (2, 4)
    np.testing.assert_array_equal(a.grad, w[:, :3])
    np.testing.assert_array_equal(b.grad, w[:, 3:])


def test_repeat_rows_and_getitem_gradcheck():
    rng = np.random.default_rng(2)
    with precision("float64"):
        x = parameter(rng.normal(size=(3, 4)))
        w = rng.normal(size=(6, 2))
        errs = check_gradients(lambda: T.mul(T.repeat_rows(x, 3)[1:7, 1:3], w).sum(), {"x": x})
    assert errs["x"] < 1e-6


# -- softmax cross-entropy ------------------------------------------------

def test_uniform_logits_give_log_q():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 64))), [0, 5, 63])
    assert float(loss.data) == pytest.approx(math.log(64), abs=1e-6)
    assert math.log(64) == pytest.approx(4.1589, abs=1e-4)


def test_softmax_shift_invariance():
    z = np.random.default_rng(0).normal(size=(4, 10))
    with precision("float64"):
        l1, p1 = T.softmax_cross_entropy(Tensor(z), [1, 2, 3, 4], return_probs=True)
        l2, p2 = T.softmax_cross_entropy(Tensor(z + 123.0), [1, 2, 3, 4], return_probs=True)
    np.testing.assert_allclose(p1, p2, atol=1e-12)
    assert float(l1.data) == pytest.approx(float(l2.data), abs=1e-10)


def test_cross_entropy_gradient_formula_and_fd():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 8))
    t = rng.integers(0, 8, size=5)
    with precision("float64"):
        x = parameter(z)
        loss, p = T.softmax_cross_entropy(x, t, return_probs=True)
        loss.backward()
        onehot = np.eye(8)[t]
        np.testing.assert_allclose(x.grad, (p - onehot) / 5, atol=1e-12)
        errs = check_gradients(lambda: T.softmax_cross_entropy(x, t), {"x": x})
    assert errs["x"] < 1e-4


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 4))), [4])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 70), st.floats(-50, 50), st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_are_distributions(b, q, shift, seed):
    z = np.random.default_rng(seed).normal(scale=5, size=(b, q)) + shift
    p = T.softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    assert np.all(p > 0) and np.all(p < 1)


# -- backward / graph -----------------------------------------------------

def test_backward_sum_and_quadratic():
    x = parameter([0.0, 0.0, 0.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = parameter([1.0, 2.0])
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, [2, 4])


def test_backward_twice_is_state_error():
    x = parameter([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphStateError):
        loss.backward()


def test_backward_clears_graph_and_ids_increase():
    g = T.current_graph()
    x = parameter([1.0])
    a = x * 2.0
    b = a + 1.0
    assert b.node.id > a.node.id
    b.sum().backward()
    assert len(g) == 0


def test_backward_needs_scalar():
    x = parameter([1.0, 2.0])
    with pytest.raises(DimensionError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = parameter([1.0])
    with T.no_grad():
        y = x * 3.0
    assert y.node is None


def test_debug_mode_flags_non_finite():
    with T.debug_mode():
        with pytest.raises(NonFiniteError):
            T.mul(Tensor([1.0]), np.inf)


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(9)
        x = parameter(rng.normal(size=(6, 5)))
        W = parameter(rng.normal(size=(4, 5)))
        loss = T.softmax_cross_entropy(T.tanh(T.linear(x, W)), [0, 1, 2, 3, 0, 1])
        loss.backward()
        return float(loss.data), W.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)


# -- adam -----------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = parameter([1.0, -2.0])
    st_ = T.AdamState.for_params([p], learning_rate=0.1)
    T.adam_step([p], [np.zeros(2)], st_)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st_.step == 1


def test_adam_first_step_is_signed_lr():
    p = parameter(np.zeros(3))
    st_ = T.AdamState.for_params([p], learning_rate=0.01)
    T.adam_step([p], [np.array([0.5, -3.0, 1e-3])], st_)
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_converges_on_quadratic():
    w = parameter([0.0])
    st_ = T.AdamState.for_params([w], learning_rate=0.1)
    for _ in range(200):
        w.grad = None
        d = w - 3.0
        (d * d).sum().backward()
        T.adam_step([w], [w.grad], st_)
    assert abs(float(w.data[0]) - 3.0) < 0.1


def test_adam_shape_mismatch():
    p = parameter(np.zeros(3))
    with pytest.raises(DimensionError):
        T.adam_step([p], [np.zeros(2)], T.AdamState.for_params([p]))


# -- checkpoint -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    blocks = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], np.float32),
              "scalar": np.array(2.0, np.float32)}
    T.save_blocks(tmp_path / "m.lbmt", blocks)
    raw = (tmp_path / "m.lbmt").read_bytes()
    assert raw[:4] == b"LBMT" and int.from_bytes(raw[4:8], "little") == 1
    back = T.load_blocks(tmp_path / "m.lbmt")
    assert list(back) == list(blocks)
    for k in blocks:
        assert np.array_equal(back[k], blocks[k]) and back[k].shape == blocks[k].shape


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(T.CheckpointFormatError):
        T.load_blocks(tmp_path / "x")
