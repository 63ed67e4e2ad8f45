import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vidtune import functional as F
from vidtune.checks import tensor_cases
from vidtune.errors import ConfigurationError, ContractError, DimensionError, NumericError
from vidtune.gradcheck import gradcheck
from vidtune.tensor import Tape, Tensor, backward, matmul


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def naive_conv3x3(x, w, b):
    """Direct-loop 3x3 same-padding cross-correlation."""
    f, c, h, wd = x.shape
    co = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((f, co, h, wd))
    for n in range(f):
        for o in range(co):
            for i in range(h):
                for j in range(wd):
                    out[n, o, i, j] = (xp[n, :, i : i + 3, j : j + 3] * w[o]).sum() + b[o]
    return out


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    b = np.array([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_dot():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    a, b = leaf(rng.standard_normal((4, 5))), leaf(rng.standard_normal((5, 3)))
    r = rng.standard_normal((4, 3))
    rep = gradcheck(lambda a, b: ((a @ b) * r).sum(), [a, b], rtol=1e-5, atol=1e-8, eps=1e-6)
    assert rep.passed, rep


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


# -- softmax -----------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(F.softmax_lastdim(Tensor([0.0, np.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-15)
    y = F.softmax_lastdim(Tensor([1000.0, 1000.0])).data
    assert np.isfinite(y).all()
    np.testing.assert_array_equal(y, [0.5, 0.5])


def test_softmax_empty_last_dim():
    with pytest.raises(DimensionError):
        F.softmax_lastdim(Tensor(np.zeros((3, 0))))


def test_softmax_fully_masked_row():
    with pytest.raises(ContractError):
        F.softmax_lastdim(Tensor(np.zeros((2, 3))), mask=np.array([[True, False, False], [False] * 3]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_are_distributions(x):
    y = F.softmax_lastdim(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


# -- convolutions --------------------------------------------------------------


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 3, 5, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    np.testing.assert_allclose(F.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, naive_conv3x3(x, w, b), atol=1e-12)


def test_pseudo3d_dirac_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 5, 5))
    w = np.zeros((3, 3, 1, 3, 3))
    for c in range(3):
        w[c, c, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(F.pseudo3d_conv(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data, x)


def test_pseudo3d_single_frame_equals_conv2d():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((2, 3, 1, 6, 6)), rng.standard_normal((5, 3, 1, 3, 3)), rng.standard_normal(5)
    y = F.pseudo3d_conv(Tensor(x), Tensor(w), Tensor(b)).data[:, :, 0]
    ref = F.conv2d(Tensor(x[:, :, 0]), Tensor(w[:, :, 0]), Tensor(b)).data
    np.testing.assert_array_equal(y, ref)


def test_pseudo3d_is_frame_local():
    rng = np.random.default_rng(4)
    m = 4
    x = leaf(rng.standard_normal((1, 2, m, 5, 5)))
    w, b = Tensor(rng.standard_normal((3, 2, 1, 3, 3))), Tensor(rng.standard_normal(3))
    for i in range(m):
        x.grad = None
        with Tape() as tape:
            y = F.pseudo3d_conv(x, w, b)
            loss = (y[:, :, i] * rng.standard_normal(y[:, :, i].shape)).sum()
        backward(loss, tape)
        for j in range(m):
            if j != i:
                assert not x.grad[:, :, j].any()
        assert x.grad[:, :, i].any()


def test_pseudo3d_rejects_temporal_kernel():
    with pytest.raises(ConfigurationError):
        F.pseudo3d_conv(Tensor(np.zeros((1, 2, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3, 3))))


# -- group norm ----------------------------------------------------------------


def test_group_norm_constant_input_is_zero():
    x = Tensor(np.full((2, 4, 3, 3), 7.0))
    y = F.group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    np.testing.assert_array_equal(y, 0.0)


def test_group_norm_zero_scale_gives_shift():
    rng = np.random.default_rng(5)
    y = F.group_norm(Tensor(rng.standard_normal((2, 4, 3, 3))), 4, Tensor(np.zeros(4)), Tensor(np.full(4, 2.5))).data
    np.testing.assert_array_equal(y, 2.5)


def test_group_norm_statistics():
    rng = np.random.default_rng(6)
    # epsilon=1e-5 shifts the output variance by ~1e-5/var, so use var ~ 25
    x = rng.standard_normal((3, 8, 5, 5)) * 5 + 1
    y = F.group_norm(Tensor(x), 4, Tensor(np.ones(8)), Tensor(np.zeros(8))).data.reshape(3, 4, -1)
    assert np.abs(y.mean(axis=-1)).max() < 1e-10
    var = y.var(axis=-1)
    np.testing.assert_allclose(var, x.reshape(3, 4, -1).var(axis=-1) / (x.reshape(3, 4, -1).var(axis=-1) + 1e-5), atol=1e-12)
    assert np.abs(var - 1).max() < 1e-6


def test_group_norm_indivisible():
    with pytest.raises(ConfigurationError):
        F.group_norm(Tensor(np.zeros((1, 6, 2, 2))), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


# -- backward / tape ---------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        y = x.sum()
    backward(y, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x():
    x = leaf([1.0, -2.0, 3.5])
    with Tape() as tape:
        y = (x * x).sum()
    backward(y, tape)
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2
    with pytest.raises(ContractError):
        backward(y, tape)


def test_gradients_accumulate_across_passes():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = (x * x).sum()
    backward(y, tape)
    backward(y, tape)
    np.testing.assert_array_equal(x.grad, 4 * x.data)


def test_tape_is_topologically_ordered():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ((x * 3).exp() + x).sum()
    seen = {id(x)}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad:
                assert id(inp) in seen
        seen.add(id(node.output))


def test_nothing_recorded_without_tape():
    x = leaf([1.0])
    y = x * 2
    assert y.is_leaf and not y.requires_grad


def test_shared_subexpression_gradient():
    x = leaf([1.5, -0.5])
    with Tape() as tape:
        h = x * x
        y = (h + h * x).sum()
    backward(y, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data**2)


# -- gradcheck harness ---------------------------------------------------------------


def test_gradcheck_linear_function_is_exact_on_dyadic_input():
    x = leaf(np.arange(-4, 4) / 8.0)
    rep = gradcheck(lambda x: x.sum(), x)
    assert rep.passed
    assert rep.max_abs_error < 1e-9


def test_gradcheck_softmax_sum():
    rng = np.random.default_rng(8)
    rep = gradcheck(lambda x: F.softmax_lastdim(x).sum(), leaf(rng.standard_normal((3, 4))))
    assert rep.passed
    assert rep.max_abs_error < 1e-6


def test_gradcheck_reports_wrong_gradient():
    from vidtune.tensor import make_op

    def bad_square(x):
        return make_op(x.data**2, (x,), lambda g: (g * x.data,))  # missing factor 2

    rep = gradcheck(lambda x: bad_square(x).sum(), leaf([1.0, 2.0]))
    assert not rep.passed
    assert rep.max_rel_error > 0.4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradcheck_non_finite_raises():
    with pytest.raises(NumericError):
        gradcheck(lambda x: x.log().sum(), leaf([-1.0, 1.0]))


@pytest.mark.parametrize("seed", range(10))
def test_every_differentiable_op_gradchecks(seed):
    for name, f, inputs in tensor_cases(seed):
        rep = gradcheck(f, inputs, rtol=1e-4, atol=1e-8)
        assert rep.passed, (name, str(rep))


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x, w = rng.standard_normal((4, 3, 8, 8)), rng.standard_normal((5, 3, 3, 3))
    a = F.group_norm(F.conv2d(Tensor(x), Tensor(w)), 5, Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    b = F.group_norm(F.conv2d(Tensor(x), Tensor(w)), 5, Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    assert a.tobytes() == b.tobytes()


def test_separate_threads_use_separate_tapes():
    import threading

    results = {}

    def work(k):
        x = leaf(np.full(3, float(k)))
        with Tape() as tape:
            y = (x * x).sum()
        backward(y, tape)
        results[k] = x.grad.copy()

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        np.testing.assert_array_equal(results[k], np.full(3, 2.0 * k))
