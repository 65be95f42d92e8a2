"""Forward values and backward exactness of the autodiff operation set."""

import numpy as np
import numpy.testing as npt
import pytest

from mnew.autodiff import (
    Parameter,
    Tape,
    Tensor,
    add,
    broadcast_to,
    concat,
    exp,
    gather_rows,
    grad_check,
    log,
    matmul,
    mul,
    reduce,
    relu,
    reshape,
    shared_perceptron,
    sigmoid,
    softmax_cross_entropy,
    sqrt_safe,
    sub,
)

N_SEEDS = 20
FD_STEP = 1e-5
FD_TOL = 1e-4


def _scalarize(out, rng):
    """Weighted sum with O(1) weights so every element carries gradient."""
    w = Tensor(rng.uniform(0.5, 1.5, out.shape))
    s = mul(out, w)
    for _ in range(s.ndim):
        s = reduce(s, 0, "sum")
    return s


def _check_param(build, param, tol=FD_TOL):
    err = grad_check(build, [param], FD_STEP)
    assert err < tol, f"finite-difference mismatch: {err:.3e}"


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        npt.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        npt.assert_array_equal(out.data, [[11.0]])

    def test_sum_gradient_closed_form(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        with Tape() as tape:
            s = reduce(reduce(matmul(a, b), 0, "sum"), 0, "sum")
        tape.backward(s)
        npt.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=0, atol=1e-12)

        pa = Parameter("a", a.data.copy())
        err = grad_check(
            lambda: reduce(reduce(matmul(pa.tensor, b), 0, "sum"), 0, "sum"), [pa], FD_STEP
        )
        assert err < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_batched_backward(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(100 + seed)
            a = Parameter("a", rng.normal(size=(2, 3, 4)))
            b = Parameter("b", rng.normal(size=(4, 5)))
            _check_param(lambda: _scalarize(matmul(a.tensor, b.tensor), np.random.default_rng(1)), a)
            _check_param(lambda: _scalarize(matmul(a.tensor, b.tensor), np.random.default_rng(1)), b)


# ---------------------------------------------------------------------------
# shared perceptron
# ---------------------------------------------------------------------------


class TestSharedPerceptron:
    def test_identity_layer(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        out = shared_perceptron(x, np.eye(3), np.zeros(3), "none")
        npt.assert_array_equal(out.data, x.data)

    def test_hand_relu(self):
        out = shared_perceptron(Tensor([[-1.0, 2.0]]), [[1.0], [1.0]], [0.0], "relu")
        npt.assert_array_equal(out.data, [[1.0]])

    def test_unknown_activation(self):
        with pytest.raises(ValueError, match="activation"):
            shared_perceptron(Tensor([[1.0]]), [[1.0]], [0.0], "tanh")

    def test_gradients(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(200 + seed)
            x = Parameter("x", rng.normal(size=(2, 5, 3)))
            w = Parameter("w", rng.normal(size=(3, 8)) + 0.1)
            b = Parameter("b", rng.normal(size=8) * 0.5)
            for act in ("relu", "sigmoid", "none"):
                def f():
                    return _scalarize(
                        shared_perceptron(x.tensor, w.tensor, b.tensor, act),
                        np.random.default_rng(2),
                    )

                for p in (x, w, b):
                    _check_param(f, p)


# ---------------------------------------------------------------------------
# reduce
# ---------------------------------------------------------------------------


class TestReduce:
    def test_mean(self):
        assert reduce(Tensor([1.0, 2.0, 3.0]), 0, "mean").item() == 2.0

    def test_max_tie_routes_to_first(self):
        x = Tensor([5.0, 5.0, 1.0], requires_grad=True)
        with Tape() as tape:
            out = reduce(x, 0, "max")
        assert out.item() == 5.0
        tape.backward(out)
        npt.assert_array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_masked_mean(self):
        out = reduce(Tensor([10.0, 20.0, 30.0]), 0, "mean", mask=[True, False, True])
        assert out.item() == 20.0

    def test_fully_masked_slice_identified(self):
        x = Tensor(np.ones((2, 3)))
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(ValueError, match=r"\(1,\)"):
            reduce(x, 1, "mean", mask=mask)

    def test_empty_fill_has_no_gradient(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        mask = np.array([[True, True, True], [False, False, False]])
        with Tape() as tape:
            out = reduce(x, 1, "mean", mask=mask, empty=0.0)
            s = reduce(out, 0, "sum")
        npt.assert_array_equal(out.data, [1.0, 0.0])
        tape.backward(s)
        npt.assert_array_equal(x.grad[1], np.zeros(3))

    @pytest.mark.parametrize("mode", ["max", "mean", "sum"])
    def test_gradients(self, mode):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(300 + seed)
            # keep values separated so max switches stay away from the step
            vals = rng.permutation(np.linspace(-2.0, 2.0, 24)).reshape(2, 3, 4)
            p = Parameter("x", vals)
            mask = rng.uniform(size=(2, 3)) < 0.7
            mask[:, 0] = True

            def f(axis=seed % 3):
                return _scalarize(reduce(p.tensor, axis, mode), np.random.default_rng(3))

            def fm():
                return _scalarize(
                    reduce(p.tensor, 1, mode, mask=mask), np.random.default_rng(4)
                )

            _check_param(f, p)
            _check_param(fm, p)


# ---------------------------------------------------------------------------
# concat / reshape / broadcast / gather
# ---------------------------------------------------------------------------


class TestStructural:
    def test_concat_values(self):
        out = concat([Tensor([[1.0]]), Tensor([[2.0]])], axis=1)
        npt.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_concat_shape_law(self):
        out = concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5)))], axis=1)
        assert out.shape == (2, 8)

    def test_concat_mismatch(self):
        with pytest.raises(ValueError, match="concat"):
            concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)

    def test_concat_sum_gradient_is_ones(self):
        a = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
        b = Tensor(np.random.default_rng(1).normal(size=(2, 5)), requires_grad=True)
        with Tape() as tape:
            s = reduce(reduce(concat([a, b], axis=1), 0, "sum"), 0, "sum")
        tape.backward(s)
        npt.assert_array_equal(a.grad, np.ones((2, 3)))
        npt.assert_array_equal(b.grad, np.ones((2, 5)))

    def test_gather_rows_with_repeats(self):
        x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        idx = np.array([[0, 0], [3, 1]])
        with Tape() as tape:
            out = gather_rows(x, idx)
            s = _scalarize(out, np.random.default_rng(5))
        assert out.shape == (2, 2, 3)
        tape.backward(s)
        assert x.grad is not None

    def test_gather_rows_bounds(self):
        with pytest.raises(IndexError, match="out of range"):
            gather_rows(Tensor(np.zeros((3, 2))), np.array([0, 3]))

    def test_elementwise_and_structural_gradients(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(400 + seed)
            a = Parameter("a", rng.uniform(0.2, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)))
            b = Parameter("b", rng.uniform(0.2, 2.0, (3, 4)))
            pos = Parameter("pos", rng.uniform(0.5, 3.0, (3, 4)))
            idx = rng.integers(0, 3, size=(5, 2))
            fixed = lambda: np.random.default_rng(42)  # noqa: E731
            cases = [
                lambda: _scalarize(add(a.tensor, b.tensor), fixed()),
                lambda: _scalarize(sub(a.tensor, b.tensor), fixed()),
                lambda: _scalarize(mul(a.tensor, b.tensor), fixed()),
                lambda: _scalarize(relu(a.tensor), fixed()),
                lambda: _scalarize(sigmoid(a.tensor), fixed()),
                lambda: _scalarize(exp(mul(a.tensor, 0.5)), fixed()),
                lambda: _scalarize(log(pos.tensor), fixed()),
                lambda: _scalarize(sqrt_safe(pos.tensor), fixed()),
                lambda: _scalarize(reshape(a.tensor, (4, 3)), fixed()),
                lambda: _scalarize(broadcast_to(reshape(a.tensor, (3, 1, 4)), (3, 5, 4)), fixed()),
                lambda: _scalarize(concat([a.tensor, b.tensor], axis=0), fixed()),
                lambda: _scalarize(gather_rows(a.tensor, idx), fixed()),
            ]
            for f in cases:
                for p in (a, b, pos):
                    _check_param(f, p)


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------


def _ce_reference(logits, labels, weights=None):
    """Independent high-precision evaluation in extended precision."""
    z = np.asarray(logits, dtype=np.longdouble)
    m = z.max(axis=1, keepdims=True)
    lse = (m[:, 0] + np.log(np.exp(z - m).sum(axis=1))).astype(np.longdouble)
    nll = lse - z[np.arange(len(labels)), labels]
    if weights is not None:
        nll = nll * np.asarray(weights, dtype=np.longdouble)[labels]
    return float(nll.mean())


class TestSoftmaxCrossEntropy:
    def test_uniform_two_class(self):
        loss = softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
        npt.assert_allclose(loss.item(), np.log(2.0), rtol=0, atol=1e-12)

    def test_huge_logit_is_stable(self):
        loss = softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
        assert 0.0 <= loss.item() < 1e-12
        assert np.isfinite(loss.item())

    def test_matches_high_precision_reference(self):
        rng = np.random.default_rng(17)
        logits = rng.normal(size=(4, 5)) * 3
        labels = rng.integers(0, 5, 4)
        loss = softmax_cross_entropy(Tensor(logits), labels)
        assert abs(loss.item() - _ce_reference(logits, labels)) < 1e-10

    def test_class_weights(self):
        rng = np.random.default_rng(18)
        logits = rng.normal(size=(6, 3))
        labels = rng.integers(0, 3, 6)
        weights = np.array([0.5, 2.0, 1.0])
        loss = softmax_cross_entropy(Tensor(logits), labels, weights)
        assert abs(loss.item() - _ce_reference(logits, labels, weights)) < 1e-10

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label out of range"):
            softmax_cross_entropy(Tensor([[0.0, 0.0]]), [2])

    def test_gradients(self):
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(500 + seed)
            p = Parameter("logits", rng.normal(size=(4, 5)))
            labels = rng.integers(0, 5, 4)
            weights = rng.uniform(0.5, 2.0, 5) if seed % 2 else None
            _check_param(lambda: softmax_cross_entropy(p.tensor, labels, weights), p)


# ---------------------------------------------------------------------------
# tape invariants
# ---------------------------------------------------------------------------


class TestTapeInvariants:
    def test_fanout_accumulates_to_exactly_twice(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2)))

        def branch():
            return reduce(reduce(sigmoid(matmul(x, w)), 0, "sum"), 0, "sum")

        with Tape() as tape:
            s = branch()
        tape.backward(s)
        single = x.grad.copy()

        x.grad = None
        with Tape() as tape:
            s = add(branch(), branch())
        tape.backward(s)
        npt.assert_array_equal(x.grad, 2.0 * single)

    def test_grad_accumulates_across_backward_calls(self):
        x = Tensor([2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                s = reduce(mul(x, x), 0, "sum")
            tape.backward(s)
        npt.assert_array_equal(x.grad, [8.0])

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(16, 8)))
        w = Tensor(rng.normal(size=(8, 8)))
        a = sigmoid(matmul(x, w)).data
        b = sigmoid(matmul(x, w)).data
        npt.assert_array_equal(a, b)

    def test_no_tape_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        y = mul(x, x)
        assert y.requires_grad and y.grad is None

    def test_guarded_ops_stay_finite(self):
        big = Tensor(np.array([-1e6, -700.0, 0.0, 700.0, 1e6]))
        assert np.isfinite(sigmoid(big).data).all()
        assert np.isfinite(sqrt_safe(Tensor([-1.0, 0.0, 4.0])).data).all()
        npt.assert_array_equal(sqrt_safe(Tensor([-1.0, 0.0, 4.0])).data, [0.0, 0.0, 2.0])
