"""Tests for Wasserstein-1 estimation: sampler, dual objective, quantile
oracle, Monte Carlo estimates, and critic training."""

import csv

import numpy as np
import pytest

from lipspline.layers import DenseLayer
from lipspline.network import Network, NetworkSpec, build_network, lipschitz_audit
from lipspline.training import TrainConfig
from lipspline.wasserstein import (
    MixtureParams,
    dual_objective,
    estimate_w1,
    gaussian_params,
    sample_mixture,
    train_critic,
    w1_1d_oracle,
    write_results_csv,
)


def identity_critic():
    """f(x) = x as a single unconstrained affine layer."""
    layer = DenseLayer(np.array([[1.0]]), np.zeros(1), constraint="none")
    return Network([layer], [])


def zero_critic():
    layer = DenseLayer(np.array([[0.0]]), np.zeros(1), constraint="none")
    return Network([layer], [])


class TestSampler:
    def test_point_mass_components(self):
        """A zero covariance factor collapses each component onto its mean."""
        params = MixtureParams(means=[[0.0], [2.0]],
                               factors=np.zeros((2, 1, 1)))
        rng = np.random.default_rng(0)
        z = sample_mixture(params, 4000, rng)[:, 0]
        assert set(np.unique(z)) == {0.0, 2.0}
        # fair coin: component frequencies near 1/2
        assert abs((z == 2.0).mean() - 0.5) < 0.03

    def test_gaussian_moments(self):
        """z = mu + A'g reproduces the requested mean and covariance."""
        a = np.array([[2.0, 1.0], [0.0, 1.0]])
        params = gaussian_params([1.0, -1.0], a)
        rng = np.random.default_rng(1)
        z = sample_mixture(params, 200_000, rng)
        np.testing.assert_allclose(z.mean(axis=0), [1.0, -1.0], atol=0.02)
        np.testing.assert_allclose(np.cov(z.T), a.T @ a, atol=0.05)

    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            MixtureParams(means=np.zeros((3, 1)), factors=np.zeros((3, 1, 1)))
        with pytest.raises(ValueError):
            MixtureParams(means=np.zeros((2, 2)), factors=np.zeros((2, 1, 1)))


class TestDualObjective:
    def test_identical_batches_vanish(self):
        """Same batch on both sides gives exactly zero."""
        critic = identity_critic()
        batch = np.linspace(-1.0, 1.0, 7)[:, None]
        assert dual_objective(critic, batch, batch).item() == 0.0

    def test_identity_critic_on_shifted_points(self):
        """f(x)=x on batches at 0 and 1 gives mean difference -1."""
        critic = identity_critic()
        b1 = np.zeros((4, 1))
        b2 = np.ones((4, 1))
        assert dual_objective(critic, b1, b2).item() == -1.0


class TestOracle:
    def test_point_masses(self):
        """W1 between unit point masses at 0 and 1 is exactly 1."""
        assert w1_1d_oracle(("point", 0.0), ("point", 1.0)) == pytest.approx(
            1.0, abs=1e-9)

    def test_shifted_gaussians(self):
        """Equal-variance Gaussians three apart are exactly 3 away in W1."""
        d1 = ("gaussian", 0.0, 1.0)
        d2 = ("gaussian", 3.0, 1.0)
        assert w1_1d_oracle(d1, d2) == pytest.approx(3.0, abs=1e-6)

    def test_scaled_gaussians(self):
        """N(0,1) vs N(0,4): the quantile gap integrates to E|Z| = sqrt(2/pi)."""
        d1 = ("gaussian", 0.0, 1.0)
        d2 = ("gaussian", 0.0, 2.0)
        assert w1_1d_oracle(d1, d2) == pytest.approx(np.sqrt(2.0 / np.pi),
                                                     abs=1e-6)

    def test_empirical_pair(self):
        """Equal-size empirical samples: mean absolute gap of sorted values."""
        d1 = ("empirical", [0.0, 1.0])
        d2 = ("empirical", [1.0, 2.0])
        assert w1_1d_oracle(d1, d2) == pytest.approx(1.0, abs=1e-6)

    def test_mixture_shift(self):
        """Shifting a mixture by c moves it exactly c in W1."""
        base = MixtureParams(means=[[-1.0], [1.0]],
                             factors=[[[1.0]], [[0.5]]])
        shifted = MixtureParams(means=[[1.0], [3.0]],
                                factors=[[[1.0]], [[0.5]]])
        got = w1_1d_oracle(("mixture1d", base), ("mixture1d", shifted))
        assert got == pytest.approx(2.0, abs=1e-5)

    def test_unknown_descriptor(self):
        with pytest.raises(ValueError):
            w1_1d_oracle(("cauchy", 0.0), ("point", 0.0))


class TestEstimate:
    def test_zero_critic_estimates_zero(self):
        """A constant critic bounds nothing: estimate is exactly 0."""
        pair = (gaussian_params(0.0, [[1.0]]), gaussian_params(3.0, [[1.0]]))
        mean, std = estimate_w1(zero_critic(), pair, 1000,
                                np.random.default_rng(0))
        assert mean == 0.0 and std == 0.0

    def test_identity_critic_attains_shift(self):
        """f(x)=x is an optimal critic for a pure shift; estimate ~ -3 shift.

        The dual convention is E f(P1) - E f(P2), so with P2 shifted right
        the optimal critic is f(x) = -x; equivalently swap the arguments.
        """
        pair = (gaussian_params(3.0, [[1.0]]), gaussian_params(0.0, [[1.0]]))
        mean, std = estimate_w1(identity_critic(), pair, 20_000,
                                np.random.default_rng(7))
        assert mean == pytest.approx(3.0, abs=0.05)
        assert std < 0.05

    def test_weak_duality_for_true_critics(self):
        """Any 1-Lipschitz critic stays below oracle + 3 * MC standard error."""
        pair = (gaussian_params(3.0, [[1.0]]), gaussian_params(0.0, [[1.0]]))
        oracle = 3.0
        mean, std = estimate_w1(identity_critic(), pair, 20_000,
                                np.random.default_rng(3), repeats=5)
        assert mean <= oracle + 3.0 * (std / np.sqrt(5.0) + 1.0 / np.sqrt(20_000.0))


class TestCriticTraining:
    def test_critic_learns_shifted_gaussians(self):
        """An orthonormal GroupSort critic approaches W1 = 3 and stays 1-Lipschitz
        after every epoch."""
        pair = (gaussian_params(3.0, [[1.0]]), gaussian_params(0.0, [[1.0]]))
        spec = NetworkSpec(widths=[1, 16, 16, 1], activation="groupsort",
                           constraint="orthonormal", init="orthogonal", seed=5)
        critic = build_network(spec)
        config = TrainConfig(eta=5e-3, batch_size=256, epochs=25, seed=5)
        history = train_critic(pair, critic, config, n_train=2048,
                               audit_pairs=2000)
        assert len(history) == 25
        assert all(row["lipschitz_audit"] <= 1.0 + 1e-6 for row in history)
        assert history[-1]["train_dual"] > history[0]["train_dual"]
        assert history[-1]["train_dual"] > 2.6

        # fresh-sample estimate is close to the oracle and weakly dual
        mean, std = estimate_w1(critic, pair, 20_000,
                                np.random.default_rng(11))
        assert mean == pytest.approx(3.0, rel=0.05)
        assert mean <= 3.0 + 3.0 * (std / np.sqrt(5.0) + 1.0 / np.sqrt(20_000.0))


class TestResultsCsv:
    def test_columns_and_blank_oracle(self, tmp_path):
        path = tmp_path / "results.csv"
        write_results_csv(str(path), [
            {"activation": "lls", "depth": 3, "width": 32, "seed": 0,
             "estimate_mean": 2.5, "estimate_std": 0.01, "oracle": 3.0},
            {"activation": "relu", "depth": 3, "width": 32, "seed": 0,
             "estimate_mean": 2.0, "estimate_std": 0.02, "oracle": None},
        ])
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["activation", "depth", "width", "seed",
                           "estimate_mean", "estimate_std", "oracle"]
        assert rows[1][6] == "3.0"
        assert rows[2][6] == ""
