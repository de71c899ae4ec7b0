import numpy as np
import pytest

from amflow import tensor as T
from amflow.tensor import ShapeError, Tape, Tensor, finite_diff_check


def test_softmax_symmetry():
    out = T.softmax(Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), rtol=0, atol=1e-12)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3))
    out = T.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, np.eye(3) @ a)


def test_layer_norm_row_stats():
    # oracle: recompute mean/variance of the output rows directly
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 8))
    out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(axis=1), np.zeros(4), atol=1e-6)
    np.testing.assert_allclose(out.var(axis=1), np.ones(4), atol=1e-4)


def test_backward_product_rule():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        f = T.mul(x, y)
        tape.backward(f)
    assert x.grad[0] == 3.0
    assert y.grad[0] == 2.0


def test_backward_sum_squares():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum_squares(x))
    np.testing.assert_array_equal(x.grad, [2.0, -4.0])


def test_softmax_dot_gradient_matches_fd():
    rng = np.random.default_rng(7)
    w = rng.standard_normal(5)

    def fn(v):
        prods = T.mul(T.softmax(v), Tensor(w))
        return T.sum_squares(prods)

    err = finite_diff_check(fn, Tensor(rng.standard_normal(5)), 1e-5)
    assert err < 1e-6


def test_all_ops_match_finite_differences():
    from amflow.gradcheck import check_ops

    results = check_ops(instances=8, seed=42)
    failures = [(name, err) for name, err, ok in results if not ok]
    assert not failures, f"ops exceeding 1e-5 relative error: {failures}"


def test_backward_linearity():
    rng = np.random.default_rng(3)
    point = rng.standard_normal(6)
    a, b = 1.7, -0.4

    def grad_of(builder):
        x = Tensor(point.copy(), requires_grad=True)
        with Tape() as tape:
            tape.backward(builder(x))
        return x.grad

    gf = grad_of(lambda x: T.sum_squares(x))
    gg = grad_of(lambda x: T.sum_squares(T.softmax(x)))
    combined = grad_of(lambda x: T.add(T.scale(T.sum_squares(x), a),
                                       T.scale(T.sum_squares(T.softmax(x)), b)))
    np.testing.assert_allclose(combined, a * gf + b * gg, atol=1e-10)


def test_forward_determinism():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((4, 4))
    first = T.softmax(T.matmul(Tensor(x), Tensor(x))).data
    second = T.softmax(T.matmul(Tensor(x), Tensor(x))).data
    assert np.array_equal(first, second)


def test_off_path_leaf_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        _unused = T.scale(y, 2.0)
        out = T.sum_squares(x)
        tape.backward(out)
    np.testing.assert_array_equal(y.grad, np.zeros(3))
    np.testing.assert_array_equal(x.grad, 2.0 * np.ones(3))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = T.scale(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(out)


def test_backward_rejects_foreign_output():
    x = Tensor(np.ones(1), requires_grad=True)
    with Tape() as tape:
        with pytest.raises(ValueError, match="produced"):
            tape.backward(x)


def test_shape_mismatch_reports_both_dims():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_non_finite_input_rejected():
    bad = np.array([1.0, np.nan])
    with pytest.raises(ValueError, match="non-finite"):
        T.add(Tensor(bad), Tensor(np.ones(2)))
    with pytest.raises(ValueError, match="non-finite"):
        T.softmax(Tensor(np.array([np.inf, 0.0])))


def test_mixed_dtype_rejected():
    a = Tensor(np.ones(2, dtype=np.float32))
    b = Tensor(np.ones(2, dtype=np.float64))
    with pytest.raises(ValueError, match="mixed dtypes"):
        T.add(a, b)


def test_nested_tape_rejected():
    with Tape():
        with pytest.raises(RuntimeError, match="single-owner"):
            with Tape():
                pass


def test_softmax_high_temperature_stable():
    out = T.softmax(Tensor(np.array([500.0, 0.0, -500.0])), temperature=4.0)
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(1.0)


def test_finite_diff_quadratic_is_exact():
    err = finite_diff_check(lambda x: T.sum_squares(x),
                            Tensor(np.array([0.3, -1.2, 2.0])), 1e-5)
    assert err < 1e-9


def test_finite_diff_rejects_zero_eps():
    with pytest.raises(ValueError, match="eps"):
        finite_diff_check(lambda x: T.sum_squares(x), Tensor(np.ones(2)), 0.0)


def test_finite_diff_rejects_nondeterministic_fn():
    rng = np.random.default_rng(0)

    def fn(x):
        return T.sum_squares(T.mul(x, Tensor(rng.standard_normal(2))))

    with pytest.raises(ValueError, match="deterministic"):
        finite_diff_check(fn, Tensor(np.ones(2)), 1e-5)


def test_finite_diff_motion_loss_small_capture():
    # 2 frames, 4 patches (2x2 grid): the loss gradient oracle runs end to end
    from amflow.flow import amf_loss, flow_from_capture

    rng = np.random.default_rng(5)
    ref = flow_from_capture(rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 4, 3)),
                            2.0, 2, 2, mode="hard")

    def fn(stacked):
        q = T.reshape(T.gather_rows(T.reshape(stacked, (2, 24)), [0]), (2, 4, 3))
        k = T.reshape(T.gather_rows(T.reshape(stacked, (2, 24)), [1]), (2, 4, 3))
        return amf_loss(ref, flow_from_capture(q, k, 2.0, 2, 2, mode="soft"))

    err = finite_diff_check(fn, Tensor(rng.standard_normal((2, 2, 4, 3))), 1e-5)
    assert err < 1e-4
