import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from cagevit import tensor as T
from cagevit.errors import ContractError, DimensionError, NumericalError
from cagevit.gradcheck import check
from cagevit.tensor import Tensor


def finite_arrays(shape):
    return hnp.arrays(np.float64, shape, elements=st.floats(-10, 10, allow_nan=False))


# construction and dtypes

def test_rejects_integer_dtype():
    with pytest.raises(ContractError):
        Tensor(np.arange(3, dtype=np.int64), dtype=np.int64)


def test_rejects_zero_sized_dimension():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_default_dtype_is_float64_and_float32_is_kept():
    assert Tensor([1, 2]).dtype == np.float64
    assert Tensor(np.ones(2, np.float32)).dtype == np.float32


def test_constructor_copies_input():
    a = np.ones(3)
    t = Tensor(a)
    a[0] = 5
    assert t.data[0] == 1


def test_non_finite_input_raises():
    with pytest.raises(NumericalError):
        Tensor([1.0, np.inf]) + Tensor([1.0, 1.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflow_is_reported_as_numerical_error():
    with pytest.raises(NumericalError):
        Tensor([1e308]) * Tensor([1e10])


# matmul

def test_matmul_identity_cases():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(T.matmul(eye, eye).data, np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, eye).data, [[1, 2], [3, 4]])


def test_matmul_grad_of_sum_is_rowwise_sums_of_b(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 5)))
    T.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.tile(b.data.sum(axis=1), (3, 1)))
    assert check(lambda x: T.matmul(x, b), [a.data]) < 1e-4


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


def test_batched_matmul_broadcasts_weight(rng):
    a = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((4, 5))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(w)).data, a @ w)


# softmax

def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12


@given(finite_arrays((3, 5)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(y >= 0)


def test_softmax_jacobian(rng):
    assert check(lambda x: T.softmax(x), [rng.standard_normal(6)]) < 1e-4


# elementwise

def test_mul_by_ones_is_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(T.mul(Tensor(x), T.ones((3, 4))).data, x)


def test_sigmoid_at_zero():
    assert T.sigmoid(Tensor([0.0])).item() == 0.5


def test_gelu_gradient_on_64_points(rng):
    assert check(T.gelu, [rng.standard_normal(64) * 3]) < 1e-4


def test_gelu_matches_tanh_form(rng):
    x = rng.standard_normal(10)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-14)


def test_scale_and_operators(rng):
    x = rng.standard_normal(4)
    t = Tensor(x)
    np.testing.assert_allclose(T.scale(t, 2.5).data, 2.5 * x)
    np.testing.assert_allclose((t - t * 2).data, -x)
    np.testing.assert_allclose((1.0 - t).data, 1 - x)
    np.testing.assert_allclose((t / 4).data, x / 4)
    np.testing.assert_allclose((-t).data, -x)


# broadcasting

def test_broadcast_bias_over_batch(rng):
    x = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    (x + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(3, 10.0))


def test_broadcast_prefix_expansion(rng):
    x = rng.standard_normal((2, 5, 3))
    y = rng.standard_normal((5, 3))
    np.testing.assert_allclose((Tensor(x) + Tensor(y)).data, x + y)


def test_incompatible_broadcast_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    # general numpy broadcasting of interior axes is not supported
    with pytest.raises(DimensionError):
        Tensor(np.ones((4, 2, 3))) + Tensor(np.ones((4, 1, 3)))


# layer norm

def test_layer_norm_of_constant_is_zero():
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full((2, 8), 3.0))).data, 0.0)


def test_layer_norm_of_standardized_input_is_identity(rng):
    x = rng.standard_normal((4, 8))
    x = (x - x.mean(-1, keepdims=True)) / x.std(-1, keepdims=True)
    y = T.layer_norm(Tensor(x), T.param_ones((8,)), T.param_zeros((8,))).data
    np.testing.assert_allclose(y, x, atol=1e-5)


def test_layer_norm_gradient(rng):
    args = [rng.standard_normal((4, 8)), 1 + 0.1 * rng.standard_normal(8), 0.1 * rng.standard_normal(8)]
    assert check(lambda x, g, b: T.layer_norm(x, g, b), args) < 1e-4


# pooling

def test_avg_pool_hand_example():
    x = Tensor(np.arange(1.0, 17.0).reshape(4, 4, 1))
    np.testing.assert_array_equal(T.avg_pool_2d(x, 2).data, [[3.5], [5.5], [11.5], [13.5]])


def test_avg_pool_identity_and_constant(rng):
    x = rng.standard_normal((3, 3, 2))
    np.testing.assert_array_equal(T.avg_pool_2d(Tensor(x), 3).data, x.reshape(9, 2))
    np.testing.assert_allclose(T.avg_pool_2d(Tensor(np.full((6, 4, 2), 1.5)), 2).data, 1.5)


def test_avg_pool_gradient(rng):
    assert check(lambda x: T.avg_pool_2d(x, 2), [rng.standard_normal((4, 6, 3))]) < 1e-4


def test_avg_pool_rejects_too_small_grid():
    with pytest.raises(DimensionError):
        T.avg_pool_2d(Tensor(np.ones((1, 2, 1))), 2)


# shape ops

def test_gather_scatter_roundtrip(rng):
    x = rng.standard_normal((5, 3))
    idx = np.array([4, 0, 2])
    g = T.gather_rows(Tensor(x), idx)
    np.testing.assert_array_equal(g.data, x[idx])
    s = T.scatter_rows(g, idx, 5).data
    np.testing.assert_array_equal(s[idx], x[idx])
    np.testing.assert_array_equal(s[[1, 3]], 0.0)


def test_gather_out_of_range():
    with pytest.raises(ContractError):
        T.gather_rows(Tensor(np.ones((3, 2))), np.array([3]))


def test_concat_narrow_inverse(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
    c = T.concat([Tensor(a), Tensor(b)], axis=0)
    np.testing.assert_array_equal(T.narrow(c, 0, 2, 6).data, b)


def test_reshape_error_names_shapes():
    with pytest.raises(DimensionError, match="reshape"):
        T.reshape(Tensor(np.ones(6)), (4, 2))


# autodiff

def test_backward_simple_cases(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(5))
    y = Tensor(rng.standard_normal(5), requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_allclose(y.grad, 2 * y.data)


def test_gradients_accumulate_over_shared_use(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    (x + x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 3.0))


def test_backward_requires_scalar_and_grad():
    with pytest.raises(ContractError):
        T.backward(Tensor(np.ones(2), requires_grad=True) * 2)
    with pytest.raises(ContractError):
        T.backward(Tensor([1.0]).sum())


def test_tape_lists_leaves_in_topological_order(rng):
    a = Tensor(rng.standard_normal(2), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    loss = (a * b + a).sum()
    tape = T.GradTape(loss)
    assert set(map(id, tape.leaves())) == {id(a), id(b)}
    assert tape.nodes[-1] is loss
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert all(pos[id(p)] < pos[id(n)] for n in tape.nodes for p in n._parents)


def test_no_grad_skips_recording(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_mlp_gradient_on_every_parameter(rng):
    def mlp(x, w1, b1, w2, b2):
        return T.matmul(T.gelu(T.matmul(x, w1) + b1), w2) + b2

    args = [rng.standard_normal((4, 5)), rng.standard_normal((5, 6)), rng.standard_normal(6),
            rng.standard_normal((6, 3)), rng.standard_normal(3)]
    assert check(mlp, args) < 1e-4


def test_cross_entropy_matches_reference(rng):
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    ref = -np.mean(np.log(np.exp(logits) / np.exp(logits).sum(1, keepdims=True))[np.arange(4), labels])
    assert abs(T.cross_entropy(Tensor(logits), labels).item() - ref) < 1e-12


@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.01, 0.5))
def test_trunc_normal_bounds(m, n, std):
    w = T.trunc_normal(np.random.default_rng(0), (m, n), std).data
    assert np.all(np.abs(w) <= 2 * std)
