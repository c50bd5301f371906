import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from metacritic import autodiff as ad
from metacritic.autodiff import ShapeError, Tensor, finite_difference_check, grad
from metacritic.gradcheck import PRIMITIVE_TOL, _readout, primitive_cases
from metacritic.networks import ParamSet

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


@pytest.mark.parametrize("name", list(primitive_cases()))
def test_primitive_matches_central_differences(name):
    fn, shapes, positive = primitive_cases()[name]
    f, at = _readout(fn, shapes, seed=17, positive=positive)
    report = finite_difference_check(f, at, step=1e-6)
    assert report.max_rel_error <= PRIMITIVE_TOL, report.per_parameter


def test_relu_and_softmax_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    s = ad.softmax(Tensor(np.zeros((1, 5)))).data
    np.testing.assert_allclose(s, 0.2, rtol=0, atol=1e-15)
    assert abs(s.sum() - 1) <= 1e-12


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    s = ad.softmax(Tensor(x)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_conv1d_length_preserved_with_dilation_four():
    out = ad.conv1d(Tensor(np.ones((1, 1, 100))), Tensor(np.ones((1, 1, 2))), dilation=4, padding=(2, 2))
    assert out.shape == (1, 1, 100)


def _naive_conv1d(x, w, b, dilation, left, right, stride=1):
    x = np.pad(x, [(0, 0), (0, 0), (left, right)])
    n, cin, length = x.shape
    cout, _, k = w.shape
    lout = (length - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, cout, lout))
    for i in range(n):
        for o in range(cout):
            for t in range(lout):
                for c in range(cin):
                    for j in range(k):
                        out[i, o, t] += w[o, c, j] * x[i, c, t * stride + j * dilation]
            out[i, o] += b[o]
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 3),
       st.integers(0, 3), st.integers(1, 2), st.integers(0, 2 ** 31))
def test_conv1d_matches_direct_loops(cin, cout, k, dilation, left, right, stride, seed):
    rng = np.random.default_rng(seed)
    length = dilation * (k - 1) + 1 + rng.integers(0, 6)
    x, w, b = rng.standard_normal((2, cin, length)), rng.standard_normal((cout, cin, k)), rng.standard_normal(cout)
    got = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), dilation=dilation, padding=(left, right), stride=stride)
    np.testing.assert_allclose(got.data, _naive_conv1d(x, w, b, dilation, left, right, stride), atol=1e-12)
    assert got.shape[-1] == ad.conv_output_length(length, k, dilation, stride, left, right)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
    xp = np.pad(x, [(0, 0), (0, 0), (1, 1), (1, 1)])
    want = np.zeros((2, 4, 5, 5))
    for i in range(5):
        for j in range(5):
            want[:, :, i, j] = np.einsum("ncij,ocij->no", xp[:, :, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_max_pool_ties_route_gradient_to_first_element():
    x = leaf(np.ones((1, 1, 2, 2)))
    (g,) = grad(ad.tsum(ad.max_pool2d(x, 2)), [x])
    np.testing.assert_array_equal(g.data.reshape(-1), [1, 0, 0, 0])


def test_nll_of_uniform_logits_is_log_classes():
    loss = ad.cross_entropy(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 3]))
    assert abs(float(loss.data) - np.log(5)) < 1e-15


def test_batch_norm_uses_running_statistics_only():
    x = np.arange(6.0).reshape(2, 3)
    out = ad.batch_norm(Tensor(x), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=0.0)
    np.testing.assert_array_equal(out.data, x)
    alone = ad.batch_norm(Tensor(x[:1]), np.ones(3), np.zeros(3), np.ones(3), np.full(3, 4.0))
    both = ad.batch_norm(Tensor(x), np.ones(3), np.zeros(3), np.ones(3), np.full(3, 4.0))
    np.testing.assert_array_equal(alone.data[0], both.data[0])


@pytest.mark.parametrize("op,args", [
    ("matmul", (np.ones((2, 3)), np.ones((4, 2)))),
    ("add", (np.ones((2, 3)), np.ones((4,)))),
    ("conv1d", (np.ones((1, 2, 5)), np.ones((1, 3, 2)))),
    ("linear", (np.ones((2, 3)), np.ones((4, 5)))),
    ("mse_loss", (np.ones(3), np.ones(4))),
])
def test_shape_mismatch_names_op_and_dimensions(op, args):
    with pytest.raises(ShapeError) as info:
        ad.primitive_forward(op, list(args))
    assert info.value.op == op
    assert any(str(d) in str(info.value) for d in (2, 3, 4, 5))


def test_unknown_primitive_rejected():
    with pytest.raises(ValueError):
        ad.primitive_forward("fft", [np.ones(3)])


def test_backward_examples():
    theta = ParamSet.from_arrays({"t": np.zeros(3)}, requires_grad=True)
    g = ad.backward(ad.tsum(theta["t"]), theta)
    np.testing.assert_array_equal(g["t"].data, [1, 1, 1])
    theta = ParamSet.from_arrays({"t": [2.0, -1.0]}, requires_grad=True)
    root = ad.mul(0.5, ad.tsum(ad.mul(theta["t"], theta["t"])))
    np.testing.assert_array_equal(ad.backward(root, theta)["t"].data, [2, -1])


def test_non_scalar_root_rejected():
    x = leaf(np.ones(3))
    with pytest.raises(ValueError):
        grad(ad.mul(x, 2.0), [x])


def test_constants_and_unreachable_parameters_get_exact_zeros():
    x, y, c = leaf([1.0, 2.0]), leaf([3.0]), Tensor([5.0, 6.0])
    gx, gy, gc = grad(ad.tsum(ad.mul(x, c)), [x, y, c])
    np.testing.assert_array_equal(gx.data, [5, 6])
    np.testing.assert_array_equal(gy.data, [0])
    np.testing.assert_array_equal(gc.data, [0, 0])
    assert gy.shape == y.shape


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = ad.exp(x)
    assert not y.requires_grad and y.is_leaf


def test_retained_gradient_is_differentiable():
    x = leaf([1.5])
    (g,) = grad(ad.tsum(ad.power(x, 3.0)), [x], create_graph=True)
    assert g.requires_grad
    (gg,) = grad(ad.tsum(g), [x])
    np.testing.assert_allclose(gg.data, [6 * 1.5], rtol=1e-15)
    (plain,) = grad(ad.tsum(ad.power(x, 3.0)), [x])
    assert not plain.requires_grad


def test_second_order_through_inner_update():
    alpha = 0.3

    def h(t):
        return ad.tsum(ad.add(ad.power(t, 4.0), ad.mul(t, t)))

    def g(t):
        return ad.tsum(ad.add(ad.power(t, 3.0), ad.mul(2.0, t)))

    def f(p):
        t = p["t"]
        with ad.grad_mode(True):
            tt = t if t.requires_grad else Tensor(t.data, requires_grad=True)
            (dh,) = grad(h(tt), [tt], create_graph=True)
        return g(ad.sub(tt, ad.mul(alpha, dh)))

    at = ParamSet.from_arrays({"t": [0.4, -0.7, 1.1]})
    report = finite_difference_check(f, at, step=1e-5)
    assert report.max_rel_error <= 1e-5


def test_half_squared_norm_oracle():
    at = ParamSet.from_arrays({"a": [0.3, -1.2, 2.0], "b": [[1.0, 4.0]]})
    report = finite_difference_check(lambda p: ad.mul(0.5, ad.add(ad.tsum(p["a"] * p["a"]), ad.tsum(p["b"] * p["b"]))),
                                     at, step=1e-5)
    assert report.max_rel_error <= 1e-7
    assert report.checked_coordinates == 5


def test_constant_function_has_zero_error():
    report = finite_difference_check(lambda p: Tensor(3.0), ParamSet.from_arrays({"a": np.ones(4)}))
    assert report.max_rel_error == 0.0


def test_non_finite_probe_names_coordinate():
    at = ParamSet.from_arrays({"a": [1.0, 1e-7]})
    with np.errstate(invalid="ignore", divide="ignore"):
        with pytest.raises(FloatingPointError, match=r"a\[1\]"):
            finite_difference_check(lambda p: ad.tsum(ad.log(p["a"])), at, step=1e-5)


def test_step_must_be_positive():
    with pytest.raises(ValueError):
        finite_difference_check(lambda p: ad.tsum(p["a"]), {"a": np.ones(2)}, step=0.0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(["add", "mul", "relu", "sigmoid", "exp", "sum_keep"]), min_size=1, max_size=12),
       st.integers(0, 2 ** 31))
def test_graph_stays_acyclic(ops, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal(4))
    nodes = [x]
    for op in ops:
        a, b = nodes[rng.integers(len(nodes))], nodes[rng.integers(len(nodes))]
        out = {"add": lambda: ad.add(a, b), "mul": lambda: ad.mul(a, b), "relu": lambda: ad.relu(a),
               "sigmoid": lambda: ad.sigmoid(a), "exp": lambda: ad.exp(ad.mul(a, 0.1)),
               "sum_keep": lambda: ad.add(a, ad.tsum(b))}[op]()
        nodes.append(out)
    root = ad.tsum(nodes[-1])
    assert ad.graph_is_acyclic(root)
    (g,) = grad(root, [x])
    assert g.shape == x.shape


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite),
       st.sampled_from([(1,), (1, 1), (4,), "same"]), finite, finite)
def test_gradient_is_linear_and_broadcast_shaped(x, bshape, a, b):
    y_shape = x.shape if bshape == "same" else tuple(min(s, x.shape[-1]) if s != 1 else 1 for s in bshape)
    xt, yt = leaf(x), leaf(np.ones(y_shape) * 0.5)
    f1 = ad.tsum(ad.mul(ad.add(xt, yt), ad.add(xt, yt)))
    f2 = ad.tsum(ad.sigmoid(ad.mul(xt, yt)))
    combo = ad.add(ad.mul(a, f1), ad.mul(b, f2))
    gx, gy = grad(combo, [xt, yt])
    g1x, g1y = grad(f1, [xt, yt])
    g2x, g2y = grad(f2, [xt, yt])
    assert gx.shape == x.shape and gy.shape == y_shape
    np.testing.assert_allclose(gx.data, a * g1x.data + b * g2x.data, atol=1e-9)
    np.testing.assert_allclose(gy.data, a * g1y.data + b * g2y.data, atol=1e-9)


def test_forward_values_untouched_by_backward():
    x = leaf([1.0, 2.0])
    y = ad.mul(x, x)
    before = y.data.copy()
    grad(ad.tsum(y), [x], create_graph=True)
    np.testing.assert_array_equal(y.data, before)
    np.testing.assert_array_equal(x.data, [1.0, 2.0])
