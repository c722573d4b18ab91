"""Unit and property tests for the reverse-mode autodiff core."""

import numpy as np
import pytest

from lipspline import autodiff as ad
from lipspline.autodiff import (
    Graph,
    GraphReuseError,
    NonFiniteError,
    Tensor,
    concat,
    conv2d_circular,
    conv2d_circular_array,
    conv2d_circular_adjoint_array,
    evaluate,
    finite_diff_check,
    gradient,
    group_sort,
    l1_norm,
    no_grad,
    squared_l2_norm,
    take,
)


def scalarize(fn, weights):
    """Turn a tensor-valued op into a scalar probe with fixed random weights."""

    def probe(x):
        return (fn(x) * Tensor(weights)).sum()

    return probe


class TestForwardSemantics:
    def test_matmul_diagonal_action(self):
        out = Tensor([[2.0, 0.0], [0.0, 1.0]]) @ Tensor([1.0, 1.0])
        np.testing.assert_allclose(out.data, [2.0, 1.0])

    def test_clip_saturates_above_threshold(self):
        assert Tensor(1.5).clip(1.0).item() == 1.0
        assert Tensor(0.5).clip(1.0).item() == 0.5
        assert Tensor(-5.0).clip(2.0).item() == -2.0

    def test_cumsum(self):
        out = Tensor([1.0, -1.0, 2.0]).cumsum()
        np.testing.assert_allclose(out.data, [1.0, 0.0, 2.0])

    def test_group_sort_ascending_within_groups(self):
        out = group_sort(Tensor([3.0, 1.0, 0.0, -2.0]), 2)
        np.testing.assert_allclose(out.data, [1.0, 3.0, -2.0, 0.0])

    def test_non_finite_intermediate_raises(self):
        with pytest.raises(NonFiniteError):
            Tensor(1.0) / Tensor(0.0)
        with pytest.raises(NonFiniteError):
            Tensor(np.nan)

    def test_evaluate_is_deterministic(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((8, 8))
        x = rng.standard_normal(8)
        graph = Graph(
            lambda leaves: {"y": squared_l2_norm(leaves["w"] @ leaves["x"])},
            leaves=("w", "x"),
            outputs=("y",),
        )
        first = evaluate(graph, {"w": w, "x": x})["y"]
        second = evaluate(graph, {"w": w, "x": x})["y"]
        assert first.tobytes() == second.tobytes()

    def test_evaluate_rejects_unbound_leaf(self):
        graph = Graph(lambda leaves: {"y": leaves["x"].sum()}, ("x",), ("y",))
        with pytest.raises(KeyError):
            evaluate(graph, {})


class TestGradients:
    def test_squared_norm_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        squared_l2_norm(x).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_abs_gradient_sign_and_zero(self):
        x = Tensor([-3.0, 0.0, 2.0], requires_grad=True)
        x.abs().sum().backward()
        np.testing.assert_allclose(x.grad, [-1.0, 0.0, 1.0])

    def test_weight_gradient_of_matvec_norm(self):
        w = Tensor(np.eye(2), requires_grad=True)
        v = Tensor([1.0, 0.0])
        squared_l2_norm(w @ v).backward()
        np.testing.assert_allclose(w.grad, [[2.0, 0.0], [0.0, 0.0]])

    def test_clip_gradient_zero_at_and_beyond_threshold(self):
        x = Tensor([0.5, 1.0, 1.5, -1.0, -2.0], requires_grad=True)
        x.clip(1.0).sum().backward()
        np.testing.assert_allclose(x.grad, [1.0, 0.0, 0.0, 0.0, 0.0])

    def test_max_tie_goes_to_first_argument(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([1.0, 5.0], requires_grad=True)
        a.maximum(b).sum().backward()
        np.testing.assert_allclose(a.grad, [1.0, 0.0])
        np.testing.assert_allclose(b.grad, [0.0, 1.0])

    def test_min_tie_goes_to_first_argument(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([1.0], requires_grad=True)
        a.minimum(b).sum().backward()
        np.testing.assert_allclose(a.grad, [1.0])
        np.testing.assert_allclose(b.grad, [0.0])

    def test_gradient_facade_returns_leaf_grads(self):
        graph = Graph(
            lambda leaves: {"loss": squared_l2_norm(leaves["w"] @ leaves["x"])},
            leaves=("w", "x"),
            outputs=("loss",),
        )
        grads = gradient(graph, {"w": np.eye(2), "x": np.array([1.0, 0.0])}, "loss")
        np.testing.assert_allclose(grads["w"], [[2.0, 0.0], [0.0, 0.0]])
        np.testing.assert_allclose(grads["x"], [2.0, 0.0])

    def test_gradient_rejects_nonscalar_output(self):
        graph = Graph(lambda leaves: {"y": leaves["x"] * 2.0}, ("x",), ("y",))
        with pytest.raises(ValueError):
            gradient(graph, {"x": np.array([1.0, 2.0])}, "y")

    def test_tape_reuse_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * 2.0
        y.sum().backward()
        with pytest.raises(GraphReuseError):
            (y * 3.0).sum()

    def test_double_backward_raises(self):
        x = Tensor([1.0], requires_grad=True)
        y = x.sum()
        y.backward()
        with pytest.raises(GraphReuseError):
            y.backward()

    def test_no_grad_blocks_recording(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = squared_l2_norm(x * 3.0)
        assert not y.requires_grad
        assert y._parents == ()


class TestFiniteDiffOracle:
    def test_quadratic_is_exact_to_roundoff(self):
        err = finite_diff_check(lambda x: (x * x).sum(), np.array([3.0]), eps=1e-5)
        assert err <= 1e-7

    def test_constant_function_has_zero_error(self):
        err = finite_diff_check(lambda x: Tensor(4.0) * Tensor(1.0), np.array([1.0, 2.0]))
        assert err == 0.0

    def test_eps_domain_enforced(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda x: x.sum(), np.array([1.0]), eps=1e-2)

    def test_point_is_not_mutated(self):
        point = np.array([1.0, 2.0])
        finite_diff_check(lambda x: squared_l2_norm(x), point)
        np.testing.assert_array_equal(point, [1.0, 2.0])


def _kink_free(arr, margin=1e-3):
    """Keep random draws away from the kinks of abs/max/clip style ops."""
    return np.all(np.abs(arr) > margin)


class TestGradcheckPerNodeKind:
    """Every node kind matches central differences at random kink-free points."""

    N_POINTS = 100
    TOL = 1e-4

    def _run(self, make_fn, shape, rng, transform=None):
        worst = 0.0
        checked = 0
        while checked < self.N_POINTS:
            x = rng.standard_normal(shape)
            if transform is not None:
                x = transform(x)
            if not _kink_free(x):
                continue
            err = finite_diff_check(make_fn(rng), x)
            worst = max(worst, err)
            checked += 1
        assert worst <= self.TOL, f"worst relative error {worst}"

    def test_add_subtract_scale(self):
        rng = np.random.default_rng(1)
        other = rng.standard_normal(6)

        def make(rng):
            w = rng.standard_normal(6)
            return scalarize(lambda x: (x + Tensor(other)) - (x * 0.5) + 2.0 * x, w)

        self._run(make, (6,), rng)

    def test_multiply_divide(self):
        rng = np.random.default_rng(2)
        other = rng.standard_normal(5) + 3.0

        def make(rng):
            w = rng.standard_normal(5)
            return scalarize(lambda x: (x * Tensor(other)) / Tensor(other), w)

        self._run(make, (5,), rng)

    def test_matmul(self):
        rng = np.random.default_rng(3)
        mat = rng.standard_normal((4, 3))

        def make(rng):
            w = rng.standard_normal((4, 2))
            return scalarize(lambda x: Tensor(mat) @ x, w)

        self._run(make, (3, 2), rng)

    def test_abs_max_min_clip(self):
        rng = np.random.default_rng(4)
        ref = rng.standard_normal(7)

        def make(rng):
            w = rng.standard_normal(7)
            return scalarize(
                lambda x: x.abs() + x.maximum(Tensor(ref)) + x.minimum(-x) + x.clip(1.5),
                w,
            )

        def away_from_kinks(x):
            bad = (np.abs(x - ref) < 1e-3) | (np.abs(np.abs(x) - 1.5) < 1e-3)
            return np.where(bad, x + 0.3, x)

        self._run(make, (7,), rng, transform=away_from_kinks)

    def test_group_sort(self):
        rng = np.random.default_rng(5)

        def make(rng):
            w = rng.standard_normal(8)
            return scalarize(lambda x: group_sort(x, 4), w)

        def spread(x):
            # keep entries pairwise distinct so the permutation is stable
            return x + np.arange(8) * 0.05

        self._run(make, (8,), rng, transform=spread)

    def test_cumsum_sum_mean(self):
        rng = np.random.default_rng(6)

        def make(rng):
            w = rng.standard_normal(6)
            return scalarize(
                lambda x: x.cumsum() + x.sum() * 0.1 + x.mean(axis=0, keepdims=True),
                w,
            )

        self._run(make, (6,), rng)

    def test_norms(self):
        rng = np.random.default_rng(7)

        def make(rng):
            return lambda x: l1_norm(x) + squared_l2_norm(x)

        self._run(make, (6,), rng)

    def test_sqrt_reshape_transpose_concat_take(self):
        rng = np.random.default_rng(8)
        idx = np.array([0, 2, 5, 5, 1])

        def make(rng):
            w = rng.standard_normal(5)

            def fn(x):
                pos = (x * x + 1.0).sqrt()
                flat = concat([pos.reshape(6), pos.T.reshape(6)], axis=0)
                return (take(flat, idx) * Tensor(w)).sum()

            return fn

        self._run(make, (2, 3), rng)

    def test_conv2d_circular(self):
        rng = np.random.default_rng(9)
        kernel = rng.standard_normal((2, 3, 3, 3)) * 0.3

        def make(rng):
            w = rng.standard_normal((1, 2, 4, 4))
            return scalarize(lambda x: conv2d_circular(x, Tensor(kernel)), w)

        self._run(make, (1, 3, 4, 4), rng)

    def test_conv2d_kernel_gradient(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((2, 3, 5, 5))

        def fn(k):
            return (conv2d_circular(Tensor(x), k) * Tensor(w)).sum()

        err = finite_diff_check(fn, rng.standard_normal((3, 2, 3, 3)))
        assert err <= 1e-4


class TestConvAdjointAndIsometry:
    def test_conv_adjoint_identity(self):
        rng = np.random.default_rng(11)
        kernel = rng.standard_normal((4, 3, 3, 3))
        x = rng.standard_normal((2, 3, 8, 8))
        y = rng.standard_normal((2, 4, 8, 8))
        lhs = np.sum(conv2d_circular_array(x, kernel) * y)
        rhs = np.sum(x * conv2d_circular_adjoint_array(y, kernel))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)

    def test_group_sort_is_isometry_per_group(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            x = rng.standard_normal(12)
            y = rng.standard_normal(12)
            with no_grad():
                sx = group_sort(Tensor(x), 3).data
                sy = group_sort(Tensor(y), 3).data
            assert np.linalg.norm(sx - sy) <= np.linalg.norm(x - y) + 1e-12
