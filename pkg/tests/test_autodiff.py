import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isochrony_st import autodiff as ad
from isochrony_st.autodiff import GraphConsumedError, ShapeError, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar f w.r.t. every entry of x (modified in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def check_grads(build, *arrays, tol=1e-5, weights=None):
    """``build(*tensors) -> Tensor``; compares d sum(w * out) / d inputs."""
    rng = np.random.default_rng(0)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = rng.normal(size=out.shape) if weights is None else weights
    (out * w).sum().backward()
    for t in tensors:
        def f():
            with ad.no_grad():
                return float((build(*tensors).data * w).sum())
        num = numeric_grad(f, t.data)
        assert rel_err(t.grad, num) <= tol, (t.grad, num)


R = np.random.default_rng(42)


# -- matmul ----------------------------------------------------------------

def test_matmul_identity_and_projector():
    I = Tensor(np.eye(2))
    A = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((I @ A).data, A.data)
    P = Tensor([[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal((P @ Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[5, 6], [0, 0]])


def test_matmul_grad_of_sum_is_ones_times_bT():
    a = Tensor(R.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(R.normal(size=(4, 2)), requires_grad=True)
    (a @ b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    # independent check by central differences
    num = numeric_grad(lambda: float((a.data @ b.data).sum()), a.data)
    assert rel_err(a.grad, num) <= 1e-3


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


@pytest.mark.parametrize("sa,sb", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 2, 3, 4), (2, 2, 4, 3)),
                                   ((2, 3, 4), (1, 4, 2))])
def test_matmul_grads(sa, sb):
    check_grads(lambda a, b: a @ b, R.normal(size=sa), R.normal(size=sb))


# -- elementwise ---------------------------------------------------------------

def test_elementwise_grads():
    a, b = R.normal(size=(3, 4)), R.normal(size=(4,))
    check_grads(lambda x, y: x + y, a, b)
    check_grads(lambda x, y: x - y, a, b)
    check_grads(lambda x, y: x * y, a, b)
    check_grads(lambda x, y: x / (y * y + 1.0), a, b)
    check_grads(lambda x: (x * x).exp(), a * 0.3)
    check_grads(lambda x: (x * x + 1.0).log(), a)
    check_grads(lambda x: -x ** 3, a)
    check_grads(lambda x: x.sum(axis=1), a)
    check_grads(lambda x: x.mean(axis=0, keepdims=True), a)
    check_grads(lambda x: x.reshape(4, 3).transpose(1, 0), a)
    check_grads(lambda x: x.swapaxes(0, 1), a)


def test_relu_grad_away_from_kink():
    a = R.normal(size=(5, 3))
    a[np.abs(a) < 0.1] = 0.5
    check_grads(ad.relu, a)


# -- softmax ---------------------------------------------------------------

def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(ad.softmax_last_axis(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    y = ad.softmax_last_axis(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(1.0) and y[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_high_precision_reference():
    from decimal import Decimal, getcontext

    getcontext().prec = 40
    e = [Decimal(k).exp() for k in (1, 2, 3)]
    ref = [float(v / sum(e)) for v in e]
    np.testing.assert_allclose(ad.softmax_last_axis(Tensor([1.0, 2.0, 3.0])).data, ref, rtol=1e-15)


def test_softmax_nan_raises():
    with pytest.raises(FloatingPointError):
        ad.softmax_last_axis(Tensor([np.nan, 0.0]))


def test_softmax_and_logsoftmax_grads():
    check_grads(ad.softmax_last_axis, R.normal(size=(3, 5)))
    check_grads(ad.log_softmax_last_axis, R.normal(size=(2, 3, 4)))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(xs):
    assert abs(ad.softmax_last_axis(Tensor(xs)).data.sum() - 1.0) <= 1e-6


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_cases():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(ad.layer_norm(Tensor(np.full(4, 3.0)), g, b).data, np.zeros(4))
    out = ad.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-5)
    row = ad.layer_norm(Tensor(R.normal(3.0, 2.0, size=16)), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert abs(row.mean()) <= 1e-5 and abs(row.var() - 1.0) <= 1e-5 * 16


def test_layer_norm_grads():
    x = R.normal(size=(3, 6))
    check_grads(lambda x, g, b: ad.layer_norm(x, g, b), x, R.normal(size=6), R.normal(size=6))


def test_layer_norm_shape_check():
    with pytest.raises(ShapeError):
        ad.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# -- embedding ---------------------------------------------------------------------

def test_embedding_lookup():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    np.testing.assert_array_equal(ad.embedding_lookup(table, [0]).data, [[0, 1, 2]])
    out = ad.embedding_lookup(table, [2, 2])
    out.sum().backward()
    expected = np.zeros((4, 3))
    expected[2] = 2.0
    np.testing.assert_array_equal(table.grad, expected)
    with pytest.raises(IndexError, match="4"):
        ad.embedding_lookup(table, [4])


# -- concat / slice --------------------------------------------------------------

def test_concat_slice_round_trip():
    A, B = R.normal(size=(2, 3)), R.normal(size=(2, 2))
    c = ad.concat_last_axis([Tensor(A), Tensor(B)])
    assert c.shape == (2, 5)
    np.testing.assert_array_equal(ad.slice_last_axis(c, 0, 3).data, A)
    np.testing.assert_array_equal(ad.slice_last_axis(c, 3, 5).data, B)


def test_concat_of_four_blocks_width():
    Iz, I = 8, 4
    parts = [Tensor(np.zeros((2, 5, Iz)))] + [Tensor(np.zeros((2, 5, I))) for _ in range(3)]
    assert ad.concat_last_axis(parts).shape[-1] == 3 * I + Iz == 20


def test_slice_errors_and_mismatched_concat():
    with pytest.raises(ShapeError):
        ad.slice_last_axis(Tensor(np.zeros((2, 4))), 2, 2)
    with pytest.raises(ShapeError):
        ad.concat_last_axis([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])


def test_slice_routes_zero_gradient_outside_range():
    x = Tensor(R.normal(size=(2, 6)), requires_grad=True)
    ad.slice_last_axis(x, 1, 4).sum().backward()
    np.testing.assert_array_equal(x.grad[:, [0, 4, 5]], 0.0)
    np.testing.assert_array_equal(x.grad[:, 1:4], 1.0)


def test_concat_grads():
    check_grads(lambda a, b: ad.concat_last_axis([a, b * 2.0]), R.normal(size=(2, 3)), R.normal(size=(2, 2)))


# -- losses ------------------------------------------------------------------------

def test_cross_entropy_cases():
    targets = np.array([1, 3, 0])
    logits = np.zeros((3, 4))
    logits[np.arange(3), targets] = 1e6
    assert ad.cross_entropy_from_logits(Tensor(logits), targets).item() == pytest.approx(0.0, abs=1e-9)
    assert ad.cross_entropy_from_logits(Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 0]).item() == pytest.approx(
        math.log(4), abs=1e-12)


def test_cross_entropy_matches_composition():
    logits = R.normal(size=(6, 5))
    t = R.integers(0, 5, size=6)
    mask = np.array([1, 1, 0, 1, 0, 1.0])
    fused = ad.cross_entropy_from_logits(Tensor(logits), t, mask).item()
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    manual = -sum(math.log(p[i, t[i]]) for i in range(6) if mask[i]) / mask.sum()
    assert fused == pytest.approx(manual, rel=1e-12)
    check_grads(lambda x: ad.cross_entropy_from_logits(x, t, mask), logits, weights=1.0)
    check_grads(lambda x: ad.cross_entropy_from_logits(x, t, mask, label_smoothing=0.1), logits, weights=1.0)


def test_cross_entropy_all_masked_errors():
    with pytest.raises(ValueError):
        ad.cross_entropy_from_logits(Tensor(np.zeros((2, 3))), [0, 1], [0, 0])


def test_mse_cases():
    assert ad.mse_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert ad.mse_loss(Tensor([0.0]), [2.0]).item() == 4.0
    a, b = R.normal(size=50), R.normal(size=50)
    oracle = math.fsum((x - y) ** 2 for x, y in zip(a, b)) / 50
    assert abs(ad.mse_loss(Tensor(a), b).item() - oracle) <= 1e-9
    with pytest.raises(ShapeError):
        ad.mse_loss(Tensor(np.zeros(3)), np.zeros(2))
    check_grads(lambda x: ad.mse_loss(x, b[:6], [1, 0, 1, 1, 1, 0]), a[:6], weights=1.0)


@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_losses_non_negative(T, V, seed):
    rng = np.random.default_rng(seed)
    ce = ad.cross_entropy_from_logits(Tensor(rng.normal(size=(T, V)) * 5), rng.integers(0, V, size=T)).item()
    mse = ad.mse_loss(Tensor(rng.normal(size=T)), rng.normal(size=T)).item()
    assert ce >= 0 and mse >= 0


# -- graph mechanics -----------------------------------------------------------------

def test_square_gradient():
    p = Tensor([1.5], requires_grad=True)
    (p * p).sum().backward()
    np.testing.assert_allclose(p.grad, [3.0])


def test_second_backward_is_an_error():
    p = Tensor([1.0, 2.0], requires_grad=True)
    loss = (p * p).sum()
    loss.backward()
    with pytest.raises(GraphConsumedError):
        loss.backward()


def test_shared_subgraph_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = Tensor([-4.0], requires_grad=True)
    q = ((x + y) * (x + 1.0)).sum()
    q.backward()
    np.testing.assert_allclose(x.grad, [1.0])
    np.testing.assert_allclose(y.grad, [3.0])


def test_zero_grad_and_no_grad():
    p = Tensor(np.ones(3), requires_grad=True)
    (p * 2.0).sum().backward()
    p.zero_grad()
    assert np.all(p.grad == 0.0)
    with ad.no_grad():
        out = p * 2.0
    assert not out.requires_grad


def test_dropout_eval_identity_and_train_scaling():
    x = Tensor(np.ones((100, 100)))
    assert ad.dropout(x, 0.1, None, training=False) is x
    y = ad.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(4, 5)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 3)).astype(np.float32), requires_grad=True)
        y = ad.softmax_last_axis(a @ b).sum()
        y.backward()
        return y.data.tobytes(), a.grad.tobytes()

    assert run() == run()


def test_single_precision_grads_within_1e3():
    a = R.normal(size=(3, 4))
    b = R.normal(size=(4, 5))
    g, z = R.normal(size=5), R.normal(size=5)
    ta = Tensor(a.astype(np.float32), requires_grad=True)
    tb = Tensor(b.astype(np.float32))
    w = R.normal(size=(3, 5))
    out = ad.layer_norm(ta @ tb, Tensor(g.astype(np.float32)), Tensor(z.astype(np.float32)))
    (out * Tensor(w.astype(np.float32))).sum().backward()

    def f():
        with ad.no_grad():
            return float((ad.layer_norm(Tensor(a) @ Tensor(b), Tensor(g), Tensor(z)).data * w).sum())

    assert rel_err(ta.grad, numeric_grad(f, a, h=1e-6)) <= 1e-3
