import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcases import build_cases
from kdoct.autodiff import Graph, Tensor, backward, gradcheck, no_grad
from kdoct.autodiff import functional as F
from kdoct.errors import GraphError, ShapeError

import oracles

RTOL = 1e-3


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t32(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=grad)


# -- conv2d ------------------------------------------------------------------

def test_conv2d_constant_field():
    out = F.conv2d(t32(np.ones((1, 1, 3, 3))), t32(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 6)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    out = F.conv2d(t32(x), t32(k), padding=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_oracle(rng, stride, pad):
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = F.conv2d(t32(x), t32(k), t32(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, oracles.conv2d_loops(x, k, b, stride, pad), rtol=1e-5, atol=1e-5)


def test_conv2d_output_size_formula(rng):
    x = t32(rng.standard_normal((1, 2, 9, 7)))
    out = F.conv2d(x, t32(rng.standard_normal((3, 2, 4, 2))), stride=3, padding=1)
    assert out.shape == (1, 3, (9 + 2 - 4) // 3 + 1, (7 + 2 - 2) // 3 + 1)


def test_conv2d_channel_mismatch_names_axis():
    with pytest.raises(ShapeError) as err:
        F.conv2d(t32(np.ones((1, 2, 4, 4))), t32(np.ones((1, 3, 2, 2))))
    assert err.value.axis == 1
    assert "axis 1" in str(err.value)


def test_conv2d_kernel_too_large_names_axis():
    with pytest.raises(ShapeError) as err:
        F.conv2d(t32(np.ones((1, 1, 2, 5))), t32(np.ones((1, 1, 3, 3))))
    assert err.value.axis == 2


# -- depthwise ---------------------------------------------------------------

def test_depthwise_identity(rng):
    x = rng.standard_normal((2, 2, 4, 4)).astype(np.float32)
    k = np.zeros((2, 1, 3, 3), np.float32)
    k[:, 0, 1, 1] = 1
    np.testing.assert_array_equal(F.depthwise_conv2d(t32(x), t32(k), padding=1).data, x)


def test_depthwise_channel_isolation(rng):
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    k = np.zeros((2, 1, 3, 3), np.float32)
    k[1, 0, 1, 1] = 1
    out = F.depthwise_conv2d(t32(x), t32(k), padding=1).data
    assert np.all(out[:, 0] == 0)
    np.testing.assert_array_equal(out[:, 1], x[:, 1])


@pytest.mark.parametrize("stride,pad,ksize", [(1, 1, 3), (2, 1, 3), (1, 3, 7)])
def test_depthwise_matches_loop_oracle(rng, stride, pad, ksize):
    x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    k = rng.standard_normal((3, 1, ksize, ksize)).astype(np.float32)
    out = F.depthwise_conv2d(t32(x), t32(k), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, oracles.depthwise_loops(x, k, stride, pad), rtol=1e-5, atol=1e-5)


# -- linear ------------------------------------------------------------------

def test_linear_identity_and_bias(rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(F.linear(t32(x), t32(np.eye(4)), t32(np.zeros(4))).data, x)
    b = np.array([1.0, -2.0, 3.0], np.float32)
    out = F.linear(t32(x), t32(np.zeros((3, 4))), t32(b)).data
    np.testing.assert_array_equal(out, np.broadcast_to(b, (3, 3)))


def test_linear_matches_dot_oracle(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(5)
    out = F.linear(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, oracles.linear_dots(x, w, b), rtol=1e-6, atol=1e-12)


def test_linear_trailing_mismatch():
    with pytest.raises(ShapeError):
        F.linear(t32(np.ones((2, 3))), t32(np.ones((4, 5))), t32(np.ones(4)))


# -- gelu --------------------------------------------------------------------

def test_gelu_values():
    assert F.gelu(t32([0.0])).data[0] == 0.0
    expected = oracles.gelu_erf(5.0)
    assert expected == pytest.approx(4.9999986, abs=1e-7)
    out = F.gelu(Tensor(np.array([5.0]))).data[0]
    assert out == pytest.approx(expected, rel=1e-12)


def test_gelu_is_exact_not_tanh(rng):
    x = rng.standard_normal(64)
    ref = np.array([oracles.gelu_erf(v) for v in x])
    np.testing.assert_allclose(F.gelu(Tensor(x)).data, ref, rtol=1e-12, atol=1e-15)


def test_gelu_gradient_at_16_points(rng):
    x = rng.uniform(-3, 3, 16)
    (err,) = gradcheck(F.gelu, [x])
    assert err < 1e-4


# -- layer norm --------------------------------------------------------------

def test_layer_norm_constant_input():
    x = t32(np.full((2, 5), 3.25))
    out = F.layer_norm(x, (5,), t32(np.ones(5)), t32(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_layer_norm_standardises(rng):
    x = rng.standard_normal((6, 16)).astype(np.float32) * 3 + 2
    out = F.layer_norm(t32(x), (16,), t32(np.ones(16)), t32(np.zeros(16)), eps=1e-6).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-6)
    assert np.all(np.abs(out.var(axis=1) - 1) < 1e-4)


def test_layer_norm_matches_formula(rng):
    x = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
    gamma = rng.standard_normal((3, 3)).astype(np.float32)
    beta = rng.standard_normal((3, 3)).astype(np.float32)
    out = F.layer_norm(t32(x), (3, 3), t32(gamma), t32(beta), eps=1e-6)
    np.testing.assert_allclose(out.data, oracles.layer_norm_formula(x, 2, gamma, beta, 1e-6), rtol=1e-5, atol=1e-5)


def test_layer_norm_empty_group():
    with pytest.raises(ShapeError):
        F.layer_norm(t32(np.ones((2, 3))), (), t32(np.ones(())), t32(np.zeros(())))


# -- GRN ---------------------------------------------------------------------

def test_grn_zero_params_is_passthrough(rng):
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    out = F.global_response_norm(t32(x), t32(np.zeros(3)), t32(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_grn_zero_input():
    out = F.global_response_norm(t32(np.zeros((1, 3, 2, 2))), t32(np.ones(3)), t32(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 3, 2, 2)))


def test_grn_matches_formula(rng):
    x = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
    gamma = rng.standard_normal(3).astype(np.float32)
    beta = rng.standard_normal(3).astype(np.float32)
    out = F.global_response_norm(t32(x), t32(gamma), t32(beta), eps=1e-6)
    np.testing.assert_allclose(out.data, oracles.grn_formula(x, gamma, beta, 1e-6), rtol=1e-5, atol=1e-5)


def test_grn_channels_last_agrees(rng):
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    gamma = rng.standard_normal(3).astype(np.float32)
    beta = rng.standard_normal(3).astype(np.float32)
    first = F.global_response_norm(t32(x), t32(gamma), t32(beta)).data
    last = F.global_response_norm(t32(x.transpose(0, 2, 3, 1)), t32(gamma), t32(beta), channel_axis=-1).data
    np.testing.assert_allclose(last.transpose(0, 3, 1, 2), first, rtol=1e-6, atol=1e-6)


# -- softmax -----------------------------------------------------------------

def test_softmax_values():
    out = F.softmax_with_temperature(Tensor(np.array([[1.0, 0.0, -1.0]])), 1.0).data[0]
    np.testing.assert_allclose(out, [0.66524, 0.24473, 0.09003], atol=1e-5)
    np.testing.assert_allclose(out, oracles.softmax_direct([1.0, 0.0, -1.0]), rtol=1e-12)


def test_softmax_high_temperature_is_flat(rng):
    out = F.softmax_with_temperature(t32(rng.standard_normal((4, 5))), 1000.0).data
    assert np.all(out.max(axis=1) - out.min(axis=1) < 1e-3)


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        F.softmax_with_temperature(t32([[1.0, 2.0]]), 0.0)


@settings(max_examples=60, deadline=None)
@given(
    logits=st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=8),
    temperature=st.floats(0.05, 200.0),
)
def test_softmax_rows_and_argmax(logits, temperature):
    z = np.array([logits], dtype=np.float32)
    p = F.softmax_with_temperature(Tensor(z), temperature).data
    assert abs(float(p.sum()) - 1.0) < 1e-6
    # logits closer than float resolution may tie in probability, so only
    # require that the largest logit also carries the largest probability
    assert p[0][int(np.argmax(z[0]))] == p[0].max()


# -- aux primitives ----------------------------------------------------------

def test_dropout_eval_identity_and_drop_path_zero(rng):
    x = t32(rng.standard_normal((3, 4)))
    assert F.dropout(x, 0.5, rng, training=False) is x
    x4 = t32(rng.standard_normal((2, 3, 2, 2)))
    assert F.drop_path(x4, 0.0, rng, training=True) is x4
    assert F.drop_path(x4, 0.0, rng, training=False) is x4


def test_dropout_scales_survivors(rng):
    x = t32(np.ones((200, 50)))
    out = F.dropout(x, 0.2, rng).data
    assert set(np.unique(out)) <= {0.0, np.float32(1 / 0.8)}


def test_drop_path_drops_whole_samples(rng):
    x = t32(np.ones((64, 2, 3, 3)))
    out = F.drop_path(x, 0.5, rng).data
    per_sample = out.reshape(64, -1)
    for row in per_sample:
        assert np.all(row == 0) or np.all(row == 2.0)


@pytest.mark.parametrize("p", [-0.1, 1.0])
def test_drop_rates_out_of_range(rng, p):
    with pytest.raises(ValueError):
        F.dropout(t32(np.ones(3)), p, rng)
    with pytest.raises(ValueError):
        F.drop_path(t32(np.ones((1, 3))), p, rng)


def test_global_avg_pool_hand_mean():
    x = np.arange(1, 9, dtype=np.float32).reshape(1, 2, 2, 2)
    np.testing.assert_array_equal(F.global_avg_pool(t32(x)).data, [[2.5, 6.5]])


# -- backward ----------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = t32(rng.standard_normal((3, 2)), grad=True)
    backward(F.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_fan_out_accumulates(rng):
    x = t32(rng.standard_normal(5), grad=True)
    backward(F.sum(x + x))
    np.testing.assert_array_equal(x.grad, np.full(5, 2.0))


def test_non_participating_leaf_gets_zero_grad():
    a = t32([1.0, 2.0], grad=True)
    b = t32([3.0, 4.0], grad=True)
    _unused = a * b
    loss = F.sum(a * 2.0)
    backward(loss)
    np.testing.assert_array_equal(a.grad, [2.0, 2.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_backward_errors():
    x = t32([1.0, 2.0], grad=True)
    with pytest.raises(GraphError):
        backward(x * 2.0)
    with pytest.raises(GraphError):
        backward(t32([1.0]))


def test_graph_records_in_order_and_no_grad():
    x = t32([1.0, 2.0], grad=True)
    with Graph() as g:
        y = F.relu(x * 3.0)
        z = F.sum(y)
    assert [n.op for n in g.nodes] == ["mul", "relu", "sum"]
    assert y.node_id < z.node_id
    with no_grad():
        w = F.sum(x * 2.0)
    assert not w.requires_grad


def test_backward_accumulates_across_calls():
    x = t32([1.0, -1.0], grad=True)
    backward(F.sum(x * 3.0))
    backward(F.sum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_chain_conv_gelu_pool_linear_ce(rng):
    """Every parameter of a small chain against finite differences in float64."""
    from kdoct.autodiff import check_parameter_gradients
    from kdoct.losses import cross_entropy

    params = {
        "k": Tensor(rng.standard_normal((4, 2, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64),
        "kb": Tensor(rng.standard_normal(4) * 0.1, requires_grad=True, dtype=np.float64),
        "w": Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64),
        "b": Tensor(rng.standard_normal(3) * 0.1, requires_grad=True, dtype=np.float64),
    }
    x = Tensor(rng.standard_normal((2, 2, 6, 6)), dtype=np.float64)
    labels = np.array([0, 2])

    def loss():
        h = F.gelu(F.conv2d(x, params["k"], params["kb"], padding=1))
        return cross_entropy(F.linear(F.global_avg_pool(h), params["w"], params["b"]), labels)

    errors = check_parameter_gradients(loss, params)
    assert max(errors.values()) < RTOL, errors


def test_forward_bit_reproducible(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    k = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
    a = F.gelu(F.conv2d(t32(x), t32(k), padding=1)).data
    b = F.gelu(F.conv2d(t32(x), t32(k), padding=1)).data
    assert a.tobytes() == b.tobytes()


def test_float32_is_default():
    assert t32([1, 2]).dtype == np.float32
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.array([1.0])).dtype == np.float64
    out = F.gelu(t32([1.0])) * 2.0 + 1.0
    assert out.dtype == np.float32


def test_nonfinite_forward_is_an_error():
    from kdoct.errors import NonFiniteError

    with pytest.raises(NonFiniteError):
        F.log(t32([0.0, 1.0]))
    assert math.isfinite(F.log(t32([1.0])).item())


# -- finite-difference sweep over every op and loss -------------------------

_CASES = build_cases()


@pytest.mark.parametrize("name", sorted(_CASES))
def test_gradcheck_sweep(name):
    cases = _CASES[name]
    assert len(cases) >= 5
    for fn, inputs in cases:
        errors = gradcheck(fn, inputs)
        assert max(errors) < RTOL, (name, [np.shape(a) for a in inputs], errors)
