"""Tests for the convolutional denoiser stack: channelwise activations,
audits, patch plumbing, training behavior, and deployment wrappers."""

import csv

import numpy as np
import pytest

from lipspline.autodiff import Tensor, conv2d_circular_array
from lipspline.denoiser import (
    AveragedDenoiser,
    ConvNet,
    ConvNetSpec,
    DenoiserTrainConfig,
    IdentityMap,
    ScaledDenoiser,
    ZeroMap,
    aelr_report,
    build_conv_net,
    conv_lipschitz_audit,
    extract_patches,
    grid_search_beta_sigma,
    load_grayscale_dir,
    train_denoiser,
    write_aelr_csv,
)
from lipspline.imaging import phantom, psnr, write_pgm
from lipspline.layers import ConvLayer
from lipspline.spline import init_spline_bank


def identity_kernel(channels):
    """1x1 kernels wiring channel i to channel i."""
    k = np.zeros((channels, channels, 1, 1))
    for i in range(channels):
        k[i, i, 0, 0] = 1.0
    return k


def passthrough_net(channels, slot):
    """identity conv -> slot -> identity conv, unconstrained."""
    layers = [ConvLayer(identity_kernel(channels), constraint="none"),
              ConvLayer(identity_kernel(channels), constraint="none")]
    return ConvNet(layers, [slot])


class TestConvNetStructure:
    def test_build_shapes_and_parameters(self):
        spec = ConvNetSpec(channels=[1, 8, 8, 1], seed=0)
        net = build_conv_net(spec)
        assert net.c_in == 1 and net.c_out == 1
        assert len(net.layers) == 3 and len(net.activations) == 2
        groups = net.parameter_groups()
        # kernels + biases, then one (c, alpha) pair per spline slot
        assert len(groups["weights"]) == 6
        assert len(groups["spline_c"]) == 2
        x = np.random.default_rng(0).normal(size=(2, 1, 8, 8))
        assert net.forward_array(x).shape == (2, 1, 8, 8)

    def test_channel_mismatch_rejected(self):
        layers = [ConvLayer(np.zeros((4, 1, 3, 3))),
                  ConvLayer(np.zeros((1, 8, 3, 3)))]
        with pytest.raises(ValueError):
            ConvNet(layers, [init_spline_bank("identity", 4, 5)])

    def test_activation_count_rejected(self):
        spec = ConvNetSpec(channels=[1, 4, 1], activation=["lls", "lls"])
        with pytest.raises(ValueError):
            build_conv_net(spec)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ConvNetSpec(channels=[1])
        with pytest.raises(ValueError):
            ConvNetSpec(channels=[1, 4, 1], kernel_size=4)


class TestChannelwiseActivation:
    def test_spline_acts_per_channel(self):
        """A ReLU-preset spline bank clips negative channel values."""
        bank = init_spline_bank("relu", 2, 5, (-1.0, 1.0))
        net = passthrough_net(2, bank)
        x = np.array([[[[0.5, -0.5]], [[-0.25, 0.75]]]])  # (1,2,1,2)
        out = net.forward_array(x)
        np.testing.assert_allclose(
            out, [[[[0.5, 0.0]], [[0.0, 0.75]]]], atol=1e-12)

    def test_groupsort_sorts_channels(self):
        from lipspline.activations import groupsort_kind

        net = passthrough_net(2, groupsort_kind(2))
        x = np.array([[[[3.0]], [[1.0]]]])
        out = net.forward_array(x)
        np.testing.assert_allclose(out, [[[[1.0]], [[3.0]]]], atol=0)

    def test_graph_matches_array_forward(self):
        """Training-graph and deployment forwards share the same wiring
        (checked without the constraint, whose two routes only agree in the
        converged limit)."""
        spec = ConvNetSpec(channels=[1, 4, 1], constraint="none",
                           norm_hw=(8, 8), seed=3)
        net = build_conv_net(spec)
        x = np.random.default_rng(4).normal(size=(2, 1, 8, 8))
        graph_out = net.forward_graph(Tensor(x)).data
        array_out = net.forward_array(x)
        np.testing.assert_allclose(graph_out, array_out, atol=1e-12)

    def test_single_image_convenience(self):
        spec = ConvNetSpec(channels=[1, 4, 1], norm_hw=(8, 8), seed=5)
        net = build_conv_net(spec)
        img = np.random.default_rng(6).normal(size=(8, 8))
        out = net.forward_array(img)
        assert out.shape == (8, 8)
        np.testing.assert_allclose(
            out, net.forward_array(img[None, None])[0, 0], atol=0)

    def test_unconstrained_layer_matches_plain_convolution(self):
        rng = np.random.default_rng(7)
        kernel = rng.normal(size=(3, 2, 3, 3))
        layer = ConvLayer(kernel, bias=rng.normal(size=3), constraint="none")
        x = rng.normal(size=(2, 2, 6, 6))
        expected = conv2d_circular_array(x, kernel) + layer.bias.data[:, None, None]
        np.testing.assert_allclose(layer.forward_array(x), expected, atol=0)


class TestAudit:
    @pytest.mark.parametrize("activation", ["lls", "relu", "groupsort"])
    def test_spectral_nets_pass(self, activation):
        """Every materialized spectral conv net is empirically 1-Lipschitz."""
        spec = ConvNetSpec(channels=[1, 6, 6, 1], activation=activation,
                           norm_hw=(8, 8), seed=1)
        net = build_conv_net(spec)
        ratio = conv_lipschitz_audit(net, hw=(8, 8), n_pairs=2000,
                                     rng=np.random.default_rng(2))
        assert ratio <= 1.0 + 1e-6

    def test_detects_amplifying_map(self):
        layer = ConvLayer(1.5 * identity_kernel(1), constraint="none")
        net = ConvNet([layer], [])
        ratio = conv_lipschitz_audit(net, hw=(8, 8), n_pairs=200,
                                     rng=np.random.default_rng(3))
        assert ratio == pytest.approx(1.5, abs=1e-9)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = ConvNetSpec(channels=[1, 4, 1], norm_hw=(8, 8), seed=9)
        net = build_conv_net(spec)
        path = str(tmp_path / "denoiser.npz")
        net.save(path)
        back = ConvNet.load(path)
        for p, q in zip(net.parameters(), back.parameters()):
            np.testing.assert_array_equal(p.data, q.data)
        x = np.random.default_rng(10).normal(size=(1, 1, 8, 8))
        np.testing.assert_array_equal(back.forward_array(x),
                                      net.forward_array(x))

    def test_foreign_checkpoint_rejected(self, tmp_path):
        from lipspline.network import NetworkSpec, build_network

        dense = build_network(NetworkSpec(widths=[2, 2]))
        path = str(tmp_path / "dense.npz")
        dense.save(path)
        with pytest.raises(ValueError):
            ConvNet.load(path)


class TestPatches:
    def test_shapes_and_values(self):
        images = [phantom(40, seed=0), phantom(48, seed=1)]
        rng = np.random.default_rng(2)
        patches = extract_patches(images, 16, 10, rng)
        assert patches.shape == (10, 1, 16, 16)
        assert patches.min() >= 0.0 and patches.max() <= 1.0

    def test_deterministic(self):
        images = [phantom(40, seed=0)]
        a = extract_patches(images, 8, 5, np.random.default_rng(3))
        b = extract_patches(images, 8, 5, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty dataset"):
            extract_patches([], 8, 4, np.random.default_rng(0))

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            extract_patches([np.zeros((4, 4))], 8, 1, np.random.default_rng(0))

    def test_load_grayscale_dir(self, tmp_path):
        write_pgm(str(tmp_path / "b.pgm"), phantom(32, seed=1))
        write_pgm(str(tmp_path / "a.pgm"), phantom(32, seed=0))
        images = load_grayscale_dir(str(tmp_path))
        assert len(images) == 2
        # sorted by name: a.pgm first
        assert np.abs(images[0] - phantom(32, seed=0)).max() <= 0.5 / 255 + 1e-12


class TestTraining:
    def test_history_and_learning(self):
        images = [phantom(32, seed=0), phantom(32, seed=1)]
        spec = ConvNetSpec(channels=[1, 4, 1], norm_hw=(16, 16), seed=0)
        config = DenoiserTrainConfig(sigma=10 / 255, patch_size=16,
                                     n_patches=48, epochs=3, batch_size=8,
                                     eta=4e-3, seed=0, audit_pairs=400,
                                     audit_hw=(8, 8), probe_patches=32)
        net, history = train_denoiser(images, spec, config)
        assert [row["epoch"] for row in history] == [1, 2, 3]
        assert history[-1]["train_mse"] < history[0]["train_mse"]
        assert all(row["lipschitz_audit"] <= 1.0 + 1e-6 for row in history)
        assert all(np.isfinite(row["mean_aelr"]) for row in history)

    def test_zero_noise_training_moves_toward_identity(self):
        """With sigma=0 the MSE optimum is the identity: training raises the
        PSNR of reproduced clean patches above its initial value."""
        images = [phantom(32, seed=2)]
        spec = ConvNetSpec(channels=[1, 4, 1], norm_hw=(16, 16), seed=1)
        config = DenoiserTrainConfig(sigma=0.0, patch_size=16, n_patches=48,
                                     epochs=3, batch_size=8, eta=4e-3, seed=1,
                                     audit_pairs=200, audit_hw=(8, 8),
                                     probe_patches=16)
        rng = np.random.default_rng(3)
        probe = extract_patches(images, 16, 8, rng)
        init_net = build_conv_net(spec)
        init_mse = float(np.mean((init_net.forward_array(probe) - probe) ** 2))
        net, history = train_denoiser(images, spec, config)
        final_mse = float(np.mean((net.forward_array(probe) - probe) ** 2))
        assert final_mse < init_mse
        assert history[-1]["train_mse"] < history[0]["train_mse"]

    def test_empty_dataset_rejected(self):
        spec = ConvNetSpec(channels=[1, 4, 1])
        with pytest.raises(ValueError, match="empty dataset"):
            train_denoiser([], spec, DenoiserTrainConfig())

    def test_checkpoint_and_metrics_emitted(self, tmp_path):
        images = [phantom(32, seed=4)]
        spec = ConvNetSpec(channels=[1, 2, 1], norm_hw=(8, 8), seed=2)
        config = DenoiserTrainConfig(sigma=10 / 255, patch_size=8,
                                     n_patches=16, epochs=1, batch_size=8,
                                     seed=2, audit_pairs=100, audit_hw=(8, 8),
                                     probe_patches=8)
        ckpt = str(tmp_path / "net.npz")
        metrics = str(tmp_path / "metrics.csv")
        net, _ = train_denoiser(images, spec, config, checkpoint_path=ckpt,
                                metrics_path=metrics)
        back = ConvNet.load(ckpt)
        assert back.parameter_count() == net.parameter_count()
        with open(metrics, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "train_mse", "test_mse", "mean_aelr",
                           "lipschitz_audit"]


class TestAelrReport:
    def test_report_and_csv(self, tmp_path):
        spec = ConvNetSpec(channels=[1, 4, 4, 1], spline_preset="relu", seed=0)
        net = build_conv_net(spec)
        report = aelr_report(net)
        # relu-initialized splines have one active knot: AELR 2 everywhere
        assert report["mean_aelr"] == pytest.approx(2.0, abs=0)
        assert [s["slot"] for s in report["slots"]] == [0, 1]
        path = str(tmp_path / "aelr.csv")
        write_aelr_csv(path, net)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["slot", "neuron", "aelr", "tv2"]
        assert len(rows) == 1 + 8


class TestWrappers:
    def test_averaged_denoiser_algebra(self):
        x = np.random.default_rng(0).normal(size=(6, 6))
        half = AveragedDenoiser(ZeroMap(), 0.5)
        np.testing.assert_allclose(half.apply(x), 0.5 * x, atol=0)
        ident = AveragedDenoiser(IdentityMap(), 0.3)
        np.testing.assert_allclose(ident.apply(x), x, atol=1e-15)
        assert half.lipschitz_bound == 1.0

    def test_beta_validation(self):
        with pytest.raises(ValueError):
            AveragedDenoiser(ZeroMap(), 0.0)
        with pytest.raises(ValueError):
            AveragedDenoiser(ZeroMap(), 1.0)

    def test_scaled_denoiser(self):
        x = np.ones((4, 4))
        zero = ScaledDenoiser(IdentityMap(), 0.0)
        np.testing.assert_array_equal(zero.apply(x), np.zeros((4, 4)))
        half = ScaledDenoiser(IdentityMap(), 0.5)
        np.testing.assert_allclose(half.apply(x), 0.5 * x, atol=0)
        assert half.lipschitz_bound == 0.5
        with pytest.raises(ValueError):
            ScaledDenoiser(IdentityMap(), -0.1)


class TestGridSearch:
    def test_prefers_weak_shrinkage_for_zero_base(self):
        """With R = 0, D = (1-beta)*x: the smallest beta distorts least."""
        images = [phantom(32, seed=s) for s in range(3)]
        rng = np.random.default_rng(1)
        beta, sigma, rows = grid_search_beta_sigma(
            {10 / 255: ZeroMap()}, images, eval_sigma=5 / 255, rng=rng)
        assert beta == pytest.approx(0.1)
        assert sigma == pytest.approx(10 / 255)
        assert len(rows) == 9

    def test_identity_base_beats_zero_base(self):
        images = [phantom(32, seed=7)]
        rng = np.random.default_rng(2)
        _, sigma, rows = grid_search_beta_sigma(
            {5 / 255: IdentityMap(), 15 / 255: ZeroMap()},
            images, eval_sigma=5 / 255, rng=rng)
        assert sigma == pytest.approx(5 / 255)
        assert len(rows) == 18

    def test_empty_validation_set(self):
        with pytest.raises(ValueError):
            grid_search_beta_sigma({0.1: ZeroMap()}, [], 0.05,
                                   np.random.default_rng(0))
