import numpy as np
import pytest
from hypothesis import given, strategies as st

from s2sd import diffcore as dc
from s2sd.diffcore import Node

from conftest import philox


def fd_check(fn, params, h=1e-5):
    _, grads = dc.value_and_grad(fn, params)
    fd = dc.finite_difference_grad(fn, params, h=h)
    return max(dc.relative_error(g, f) for g, f in zip(grads, fd))


def test_quadratic():
    value, (g,) = dc.value_and_grad(lambda p: dc.sum(p * p), [np.array([1.0, 2.0, 3.0])])
    assert value == 14.0
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_stop_gradient_kills_one_factor():
    _, (g,) = dc.value_and_grad(lambda p: dc.sum(dc.stop_gradient(p) * p), [np.array([1.0, 2.0])])
    np.testing.assert_array_equal(g, [1.0, 2.0])


def test_stop_gradient_scalar_and_idempotent():
    _, (g,) = dc.value_and_grad(lambda p: dc.sum(dc.stop_gradient(p)), [np.array(3.0)])
    assert g == 0.0
    _, (g1,) = dc.value_and_grad(lambda p: dc.sum(dc.stop_gradient(p) * p), [np.array([2.0])])
    _, (g2,) = dc.value_and_grad(
        lambda p: dc.sum(dc.stop_gradient(dc.stop_gradient(p)) * p), [np.array([2.0])])
    np.testing.assert_array_equal(g1, g2)


def test_finite_difference_scalars():
    (g,) = dc.finite_difference_grad(lambda p: p * p, [np.array(3.0)], h=1e-5)
    assert abs(g - 6.0) < 1e-9
    (g,) = dc.finite_difference_grad(lambda p: dc.exp(p), [np.array(0.0)], h=1e-5)
    assert abs(g - 1.0) < 1e-9
    with pytest.raises(ValueError):
        dc.finite_difference_grad(lambda p: p, [np.array(1.0)], h=0.0)


def three_layer(x):
    def loss(w1, b1, w2, b2, w3):
        h = dc.relu(dc.linear(x, w1, b1))
        h = dc.l2_normalize(dc.linear(h, w2, b2))
        z = dc.softmax_rows(dc.matmul(h, w3), 0.7)
        return dc.sum(dc.log(z) * z) + dc.sum(dc.sqrt(dc.exp(h) + 1.0)) + dc.max(h)
    return loss


@pytest.mark.parametrize("seed", range(3))
def test_random_three_layer_composition(seed):
    rng = philox(seed)
    x = rng.standard_normal((6, 5))
    params = [rng.standard_normal(s) for s in [(7, 5), (7,), (4, 7), (4,), (4, 3)]]
    assert fd_check(three_layer(x), params, h=1e-5) < 1e-6


def test_repeated_backward_is_bit_identical():
    rng = philox(4)
    x = rng.standard_normal((6, 5))
    params = [rng.standard_normal(s) for s in [(7, 5), (7,), (4, 7), (4,), (4, 3)]]
    a = dc.value_and_grad(three_layer(x), params)
    b = dc.value_and_grad(three_layer(x), params)
    assert a[0] == b[0]
    for ga, gb in zip(a[1], b[1]):
        assert ga.tobytes() == gb.tobytes()


def test_shared_node_gradient_accumulates_once_per_use():
    # y used twice: d/dp sum((2p)^2 + 2p) = 8p + 2
    def loss(p):
        y = p * 2.0
        return dc.sum(y * y + y)
    _, (g,) = dc.value_and_grad(loss, [np.array([1.0, -1.0])])
    np.testing.assert_allclose(g, [10.0, -6.0])


def test_shape_error_names_primitive():
    with pytest.raises(dc.ShapeError, match="matmul"):
        dc.matmul(Node(np.ones((2, 3))), Node(np.ones((2, 3))))
    with pytest.raises(dc.ShapeError, match="add"):
        dc.add(Node(np.ones((2, 3))), Node(np.ones((3, 2))))


def test_nonfinite_names_first_offending_node():
    with pytest.raises(dc.NonFiniteError) as err:
        dc.value_and_grad(lambda p: dc.sum(dc.log(p) * 0.0 + 1.0), [np.array([-1.0, 1.0])])
    assert err.value.op == "log"


@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_softmax_rows_are_stochastic(seed, T):
    x = philox(seed).uniform(-1, 1, (5, 7))
    p = dc.softmax_rows(x, T).value
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-9)
    lp = dc.log_softmax_rows(x, T).value
    np.testing.assert_allclose(np.exp(lp), p, atol=1e-12)


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))
def test_l2_normalize_gives_unit_rows(seed, n, d):
    x = philox(seed).standard_normal((n, d)) * 10
    np.testing.assert_allclose(np.linalg.norm(dc.l2_normalize(x).value, axis=1), 1.0, atol=1e-9)


def test_l2_normalize_zero_row_is_finite():
    out = dc.l2_normalize(np.zeros((1, 3))).value
    assert np.all(np.isfinite(out))


@given(st.integers(0, 2**31), st.lists(st.integers(1, 5), min_size=1, max_size=4))
def test_block_cosine_matches_per_block(seed, sizes):
    rng = philox(seed)
    b = 4
    x = rng.standard_normal((b, sum(sizes)))
    out = dc.block_cosine(x, sizes).value
    starts = np.cumsum([0] + sizes)
    for k in range(len(sizes)):
        blk = x[:, starts[k]:starts[k + 1]]
        blk = blk / np.sqrt((blk * blk).sum(1, keepdims=True) + dc.NORM_EPS)
        np.testing.assert_allclose(out[k * b:(k + 1) * b], blk @ blk.T, atol=1e-12)


@given(st.integers(0, 2**31))
def test_block_linear_matches_per_block(seed):
    rng = philox(seed)
    ins, outs = [3, 2, 4], [2, 5, 1]
    x = rng.standard_normal((5, sum(ins)))
    ws = [rng.standard_normal((o, i)) for o, i in zip(outs, ins)]
    b = rng.standard_normal(sum(outs))
    got = dc.block_linear(x, ws, b).value
    xs = np.split(x, np.cumsum(ins)[:-1], axis=1)
    want = np.concatenate([xi @ w.T for xi, w in zip(xs, ws)], axis=1) + b
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_cross_kl_rows_matches_direct_formula():
    rng = philox(7)
    a = rng.uniform(-1, 1, (4, 6))
    log_q = np.log(dc.softmax_rows(rng.uniform(-1, 1, (4, 6)), 0.5).value)
    lp = dc.log_softmax_rows(a, 0.5).value
    want = (np.exp(lp) * (2.0 * lp - log_q)).sum()
    assert abs(dc.cross_kl_rows(a, log_q, 2.0, 0.5).value - want) < 1e-12


def _fused_case(name, rng):
    if name == "block_cosine":
        w = rng.standard_normal((12, 4))
        return (lambda x: dc.sum(dc.block_cosine(x, [2, 3, 1]) * w),
                [rng.standard_normal((4, 6))])
    if name == "block_linear":
        x = rng.standard_normal((5, 5))
        return (lambda w1, w2, b: dc.sum(dc.exp(dc.block_linear(x, [w1, w2], b) * 0.3)),
                [rng.standard_normal((2, 3)), rng.standard_normal((3, 2)),
                 rng.standard_normal(5)])
    if name == "cross_kl_rows":
        log_q = np.log(dc.softmax_rows(rng.uniform(-1, 1, (3, 5))).value)
        return lambda a: dc.cross_kl_rows(a, log_q, 1.5, 0.8), [rng.uniform(-1, 1, (3, 5))]
    return (lambda a, b: dc.sum(dc.exp(dc.take(dc.concatenate([a, b], axis=1), slice(1, 3)))),
            [rng.standard_normal((3, 2)), rng.standard_normal((3, 3))])


@pytest.mark.parametrize("name", ["block_cosine", "block_linear", "cross_kl_rows", "concat_take"])
def test_fused_primitives_match_finite_differences(name):
    fn, params = _fused_case(name, philox(11))
    assert fd_check(fn, params) < 1e-6


def test_finite_differences_hold_stop_gradient_values_fixed():
    fn = lambda p: dc.sum(p * dc.stop_gradient(p * p))
    p = np.array([0.5, -2.0])
    (frozen,) = dc.finite_difference_grad(fn, [p])
    (raw,) = dc.finite_difference_grad(fn, [p], freeze_stops=False)
    _, (g,) = dc.value_and_grad(fn, [p])
    np.testing.assert_allclose(frozen, p * p, atol=1e-8)
    np.testing.assert_allclose(raw, 3 * p * p, atol=1e-6)
    np.testing.assert_allclose(g, frozen, atol=1e-8)


def test_relative_error():
    assert dc.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert dc.relative_error(np.array([0.0]), np.array([0.0])) == 0.0
    assert abs(dc.relative_error(np.array([1.0]), np.array([1.1])) - 0.1 / 1.1) < 1e-15
