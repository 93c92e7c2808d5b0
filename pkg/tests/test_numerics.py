import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from m3h import numerics as nx
from m3h.errors import DimensionError, DomainError, LabelIndexError, NumericError
from m3h.numerics import ProblemClass, Tensor


def test_affine_identity():
    out = nx.affine([[1.0, 2.0]], np.eye(2), [0.0, 0.0])
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_affine_zero_input_passes_bias():
    W = np.random.default_rng(0).normal(size=(2, 3))
    out = nx.affine([[0.0, 0.0]], W, [5.0, 6.0, 7.0])
    np.testing.assert_array_equal(out.data, [[5.0, 6.0, 7.0]])


def test_affine_hand_case():
    # [1,2] @ [[1,0],[1,1]] = [3,2]; plus [1,1]
    out = nx.affine([[1.0, 2.0]], [[1.0, 0.0], [1.0, 1.0]], [1.0, 1.0])
    np.testing.assert_array_equal(out.data, [[4.0, 3.0]])


def test_affine_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        nx.affine(np.ones((1, 3)), np.eye(2), np.zeros(2))


@given(
    hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
    hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_affine_is_linear(x, y, a, b):
    W = np.random.default_rng(1).normal(size=(4, 2))
    zero = np.zeros(2)
    lhs = nx.affine(a * x + b * y, W, zero).data
    rhs = a * nx.affine(x, W, zero).data + b * nx.affine(y, W, zero).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax([2.0, 2.0, 2.0]).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    assert nx.softmax([42.0]).data.tolist() == [1.0]
    e = math.e
    np.testing.assert_allclose(nx.softmax([1.0, 0.0]).data, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    np.testing.assert_allclose(nx.softmax([1.0, 0.0]).data, [0.73106, 0.26894], atol=1e-5)


def test_softmax_empty():
    with pytest.raises(DomainError):
        nx.softmax([])


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e4, 1e4)))
def test_softmax_probability_vector(v):
    p = nx.softmax(v).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(p[order]) >= 0)


def test_task_loss_examples():
    assert nx.task_loss("binary", [0.5], [1]).item() == pytest.approx(0.693147, abs=1e-6)
    assert nx.task_loss("binary", [0.5], [1]).item() == pytest.approx(-math.log(0.5), abs=1e-15)
    assert nx.task_loss("regression", [1.5, -2.0], [1.5, -2.0]).item() == 0.0
    assert nx.task_loss("cluster", [[1.0, 2.0]], [[1.0, 2.0]]).item() == 0.0


def test_task_loss_batch_average_matches_direct_formulas():
    p = np.array([0.2, 0.9, 0.6])
    y = np.array([0, 1, 1])
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert nx.task_loss(ProblemClass.BINARY, p, y).item() == pytest.approx(bce, rel=1e-14)
    logp = np.log(np.array([[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]]))
    assert nx.task_loss("multiclass", logp, [1, 2]).item() == pytest.approx(-(np.log(0.5) + np.log(0.8)) / 2)
    assert nx.task_loss("regression", [1.0, 4.0], [2.0, 2.0]).item() == pytest.approx(1.5)
    assert nx.task_loss("cluster", [[0.0, 0.0]], [[1.0, 3.0]]).item() == pytest.approx(5.0)


def test_task_loss_errors():
    with pytest.raises(DomainError):
        nx.task_loss("binary", [1.5], [1])
    with pytest.raises(DomainError):
        nx.task_loss("binary", [-0.1], [0])
    with pytest.raises(LabelIndexError):
        nx.task_loss("multiclass", np.log([[0.5, 0.25, 0.25]]), [3])


def test_binary_loss_clamps_saturated_predictions():
    loss = nx.task_loss("binary", [0.0, 1.0], [1, 0]).item()
    assert math.isfinite(loss)
    assert loss == pytest.approx(-math.log(1e-7), rel=1e-6)


@given(
    st.sampled_from(["binary", "multiclass", "regression", "cluster"]),
    st.integers(0, 2**32 - 1),
)
@settings(max_examples=60)
def test_task_loss_non_negative(kind, seed):
    rng = np.random.default_rng(seed)
    n = 5
    if kind == "binary":
        pred, target = rng.uniform(0, 1, n), rng.integers(0, 2, n)
    elif kind == "multiclass":
        pred, target = np.log(rng.dirichlet(np.ones(4), n)), rng.integers(0, 4, n)
    elif kind == "regression":
        pred, target = rng.normal(size=n), rng.normal(size=n)
    else:
        pred, target = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    assert nx.task_loss(kind, pred, target).item() >= 0.0


def test_zero_loss_iff_certain_on_target():
    assert nx.task_loss("multiclass", np.log([[1e-300, 1.0, 1e-300]]), [1]).item() == pytest.approx(0.0, abs=1e-12)
    assert nx.task_loss("multiclass", np.log([[0.1, 0.9, 1e-300]]), [1]).item() > 0
    assert nx.task_loss("binary", [1.0], [1]).item() == pytest.approx(1e-7, rel=1e-3)
    assert nx.task_loss("binary", [0.9], [1]).item() > 1e-3


# ---------------------------------------------------------------------------
# reverse mode vs. central differences


def test_gradient_check_single_affine_mae():
    rng = np.random.default_rng(3)
    W = Tensor(rng.normal(size=(4, 1)), True)
    b = Tensor(rng.normal(size=1), True)
    x, y = rng.normal(size=(8, 4)), rng.normal(size=8)
    err = nx.gradient_check(lambda: nx.task_loss("regression", nx.affine(x, W, b), y), {"W": W, "b": b}, 1e-5)
    assert err < 1e-6


def test_gradient_check_detects_zeroed_buffer():
    rng = np.random.default_rng(4)
    W = Tensor(rng.normal(size=(3, 2)), True)
    b = Tensor(rng.normal(size=2), True)
    x = rng.normal(size=(5, 3))
    fn = lambda: nx.mean(nx.square(nx.affine(x, W, b)))
    grads = nx.analytic_gradients(fn, {"W": W, "b": b})
    grads["W"] = np.zeros_like(grads["W"])
    errors = nx.gradient_errors(fn, {"W": W, "b": b}, grads, 1e-5)
    assert errors["W"] >= 0.5
    assert errors["b"] < 1e-6


@pytest.mark.filterwarnings("ignore:invalid value")
def test_gradient_check_rejects_bad_eps_and_nan():
    W = Tensor(np.ones((1, 1)), True)
    with pytest.raises(DomainError):
        nx.gradient_check(lambda: nx.sum_(W), {"W": W}, eps=0.1)
    with pytest.raises(NumericError):
        nx.gradient_check(lambda: nx.log(nx.mul(W, -1.0)), {"W": W})


def test_unreachable_parameter_gets_zero_gradient():
    a = Tensor(np.ones(3), True)
    unused = Tensor(np.ones(2), True)
    grads = nx.analytic_gradients(lambda: nx.sum_(nx.square(a)), {"a": a, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], np.zeros(2))
    np.testing.assert_array_equal(grads["a"], 2 * np.ones(3))


OPS = {
    "relu": lambda t: nx.relu(t),
    "sigmoid": lambda t: nx.sigmoid(t),
    "exp": lambda t: nx.exp(t),
    "log": lambda t: nx.log(nx.add(nx.square(t), 1.0)),
    "abs": lambda t: nx.absolute(t),
    "softmax_rows": lambda t: nx.softmax(t, axis=-1),
    "softmax_cols": lambda t: nx.softmax(t, axis=0),
    "log_softmax": lambda t: nx.log_softmax(t, axis=-1),
    "l2_normalize": lambda t: nx.l2_normalize(t),
    "swap_last": lambda t: nx.swap_last(t),
    "concat": lambda t: nx.concat([t, nx.square(t)], axis=1),
    "stack": lambda t: nx.stack([t, nx.exp(t)], axis=1),
    "take_rows": lambda t: nx.take_rows(t, [2, 0, 2]),
    "pick": lambda t: nx.pick(t, [1, 0, 3]),
    "index_axis": lambda t: nx.index_axis(t, 1, axis=1),
    "matmul_self": lambda t: nx.matmul(t, nx.swap_last(t)),
    "div_bcast": lambda t: nx.div(t, nx.add(nx.sum_(nx.square(t), axis=1, keepdims=True), 1.0)),
    "guarded_max": lambda t: nx.div(t, nx.guarded_max(nx.reshape(t, (1, 3, 4)))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_at_random_points(name):
    weights = np.random.default_rng(99).normal(size=64)
    for k in range(10):
        x = Tensor(np.random.default_rng(k).normal(size=(3, 4)), True)

        def loss():
            out = OPS[name](x)
            flat = nx.reshape(out, (-1,))
            return nx.sum_(nx.mul(flat, weights[: flat.shape[0]]))

        assert nx.gradient_check(loss, {"x": x}, 1e-5) < 1e-4, (name, k)


def test_no_grad_builds_no_graph():
    W = Tensor(np.ones((2, 2)), True)
    with nx.no_grad():
        out = nx.matmul(np.ones((1, 2)), W)
    assert not out.requires_grad
    assert nx.matmul(np.ones((1, 2)), W).requires_grad


def test_no_grad_is_per_thread():
    import threading

    inside, done = threading.Event(), threading.Event()

    def evaluate():
        with nx.no_grad():
            inside.set()
            done.wait(5)

    t = threading.Thread(target=evaluate)
    t.start()
    inside.wait(5)
    W = Tensor(np.ones((2, 2)), True)
    try:
        assert nx.matmul(np.ones((1, 2)), W).requires_grad
    finally:
        done.set()
        t.join()
