"""1-Lipschitz convolutional denoisers.

A plain CNN (no residual connection) of spectrally normalized circular
convolutions with 1-Lipschitz activations between them.  Spline activations
act per channel.  Trained by MSE on noisy patches, optionally with the
second-order total-variation penalty on the splines; the per-epoch history
carries an empirical Lipschitz audit of the materialized network.

``AveragedDenoiser`` wraps a base network R as D = beta*R + (1-beta)*Id,
the form required by the convergent plug-and-play solver;
``ScaledDenoiser`` realizes a K-Lipschitz map as K times an audited map.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .config import atomic_open
from .activations import ActivationKind, apply_activation
from .autodiff import Tensor, no_grad
from .imaging import psnr, read_pgm
from .layers import ConvLayer, load_archive, save_archive
from .network import NetworkSpec, _make_slot
from .spline import SplineBank
from .training import (
    AdamState,
    TrainConfig,
    adam_step,
    collect_gradients,
    objective,
    _mean_aelr,
    write_metrics_csv,
)

DEFAULT_BETAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_SIGMAS = (5.0 / 255.0, 10.0 / 255.0, 15.0 / 255.0)


@dataclass
class ConvNetSpec:
    """Recipe for ``build_conv_net``.

    channels: [C_0 ... C_L]; layer l maps C_{l-1} to C_l channels.
    norm_hw: image size at which spectral normalization is anchored during
        training (deployment re-normalizes at the deployed size).
    """

    channels: list[int]
    kernel_size: int = 3
    activation: object = "lls"
    constraint: str = "spectral"
    norm_hw: tuple = (32, 32)
    spline_K: int = 21
    spline_range: float = 1.0
    spline_preset: str = "identity"
    spline_shared: bool = False
    groupsort_size: int = 2
    prelu_init: str = "absolute_value"
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ValueError("need at least input and output channel counts")
        if any(int(c) <= 0 for c in self.channels):
            raise ValueError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd and positive")


class ConvNet:
    """Alternating constrained conv layers and channelwise activations."""

    def __init__(self, layers: list[ConvLayer], activations: list):
        if len(activations) != len(layers) - 1:
            raise ValueError("need exactly one activation between layers")
        for l, (first, second) in enumerate(zip(layers[:-1], layers[1:])):
            if first.c_out != second.c_in:
                raise ValueError(f"channel mismatch between layers {l} and {l+1}")
        self.layers = layers
        self.activations = activations

    @property
    def c_in(self) -> int:
        return self.layers[0].c_in

    @property
    def c_out(self) -> int:
        return self.layers[-1].c_out

    # -- forward ---------------------------------------------------------

    def forward_graph(self, x: Tensor) -> Tensor:
        for l, layer in enumerate(self.layers):
            x = layer.forward_graph(x)
            if l < len(self.activations):
                x = self._activate(l, x)
        return x

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        """Deployment forward on materialized weights.

        Accepts (B, C, H, W) batches or a single (H, W) grayscale image.
        """
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 2
        if single:
            if self.c_in != 1 or self.c_out != 1:
                raise ValueError("2-D input requires a 1-channel network")
            arr = arr[None, None]
        with no_grad():
            out = arr
            for l, layer in enumerate(self.layers):
                out = layer.forward_array(out)
                if l < len(self.activations):
                    out = self._activate(l, Tensor(out)).data
        return out[0, 0] if single else out

    def __call__(self, x):
        if isinstance(x, Tensor):
            return self.forward_graph(x)
        return self.forward_array(x)

    def _activate(self, slot: int, x: Tensor) -> Tensor:
        """Apply the slot activation across the channel axis."""
        act = self.activations[slot]
        b, c, h, w = x.shape
        flat = x.transpose((0, 2, 3, 1)).reshape((b * h * w, c))
        if isinstance(act, SplineBank):
            out = act.eval(flat)
        else:
            out = apply_activation(act, flat)
        return out.reshape((b, h, w, c)).transpose((0, 3, 1, 2))

    # -- constraint bookkeeping -------------------------------------------

    def refresh(self, iters: int = 1) -> None:
        for layer in self.layers:
            layer.refresh(iters)

    def materialize(self, hw=None) -> None:
        for layer in self.layers:
            layer.materialize(hw=hw)

    def invalidate(self) -> None:
        for layer in self.layers:
            layer.invalidate()

    # -- parameters --------------------------------------------------------

    def spline_banks(self) -> list[SplineBank]:
        return [a for a in self.activations if isinstance(a, SplineBank)]

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        groups = {"weights": [], "spline_alpha": [], "spline_c": []}
        for layer in self.layers:
            groups["weights"].extend(layer.parameters())
        for act in self.activations:
            if isinstance(act, SplineBank):
                groups["spline_c"].append(act.c)
                groups["spline_alpha"].append(act.alpha)
            else:
                groups["weights"].extend(act.parameters())
        return groups

    def parameters(self) -> list[Tensor]:
        return [p for group in self.parameter_groups().values() for p in group]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    # -- checkpoints --------------------------------------------------------

    def save(self, path: str) -> None:
        arrays: dict[str, np.ndarray] = {}
        meta = {"format": "lipspline-convnet-v1", "layers": [], "slots": []}
        for i, layer in enumerate(self.layers):
            meta["layers"].append(layer.metadata())
            for key, value in layer.state_arrays().items():
                arrays[f"layer{i}/{key}"] = value
        for i, act in enumerate(self.activations):
            if isinstance(act, SplineBank):
                meta["slots"].append({
                    "type": "spline", "T": act.T,
                    "k_min": act.k_min, "k_max": act.k_max, "n": act.n,
                })
                arrays[f"slot{i}/c"] = act.c.data
                arrays[f"slot{i}/alpha"] = act.alpha.data
            else:
                entry = {"type": "kind", "tag": act.tag}
                if act.tag == "groupsort":
                    entry["group_size"] = act.group_size
                if act.tag == "prelu":
                    arrays[f"slot{i}/a"] = act.a.data
                if act.tag == "householder":
                    arrays[f"slot{i}/v"] = act.v.data
                meta["slots"].append(entry)
        save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path: str) -> "ConvNet":
        arrays, meta = load_archive(path)
        if meta.get("format") != "lipspline-convnet-v1":
            raise ValueError("not a convolutional-network checkpoint")
        layers = []
        for i, lm in enumerate(meta["layers"]):
            if lm["kind"] != "conv2d":
                raise ValueError("expected conv2d layers in the checkpoint")
            layer = ConvLayer(arrays[f"layer{i}/kernel"],
                              bias=arrays[f"layer{i}/bias"],
                              norm_hw=tuple(lm["norm_hw"]),
                              constraint=lm["constraint"])
            layer._u = np.asarray(arrays[f"layer{i}/u"], dtype=np.float64)
            layers.append(layer)
        slots = []
        for i, sm in enumerate(meta["slots"]):
            if sm["type"] == "spline":
                slots.append(SplineBank(
                    c=Tensor(arrays[f"slot{i}/c"], requires_grad=True),
                    alpha=Tensor(arrays[f"slot{i}/alpha"], requires_grad=True),
                    T=sm["T"], k_min=sm["k_min"], k_max=sm["k_max"]))
            elif sm["tag"] == "prelu":
                slots.append(ActivationKind(
                    "prelu", a=Tensor(arrays[f"slot{i}/a"], requires_grad=True)))
            elif sm["tag"] == "householder":
                slots.append(ActivationKind(
                    "householder",
                    v=Tensor(arrays[f"slot{i}/v"], requires_grad=True)))
            else:
                slots.append(ActivationKind(
                    sm["tag"], group_size=sm.get("group_size", 2)))
        return cls(layers, slots)


def build_conv_net(spec: ConvNetSpec) -> ConvNet:
    """Assemble and initialize a conv net from its spec (deterministic)."""
    rng = np.random.default_rng(spec.seed)
    k = spec.kernel_size
    layers = []
    for c_in, c_out in zip(spec.channels[:-1], spec.channels[1:]):
        fan_in = c_in * k * k
        kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
        layers.append(ConvLayer(kernel, norm_hw=spec.norm_hw,
                                constraint=spec.constraint))
    # reuse the dense-network slot factory via a spec proxy for spline params
    proxy = NetworkSpec(widths=[1, 1], activation=spec.activation,
                        spline_K=spec.spline_K,
                        spline_range=spec.spline_range,
                        spline_preset=spec.spline_preset,
                        spline_shared=spec.spline_shared,
                        groupsort_size=spec.groupsort_size,
                        prelu_init=spec.prelu_init)
    entries = spec.activation
    if not isinstance(entries, (list, tuple)):
        entries = [entries] * (len(layers) - 1)
    if len(entries) != len(layers) - 1:
        raise ValueError("need one activation entry per slot")
    slots = [_make_slot(entry, layers[i].c_out, proxy, rng)
             for i, entry in enumerate(entries)]
    return ConvNet(layers, slots)


def conv_lipschitz_audit(network: ConvNet, hw=(8, 8), n_pairs: int = 10_000,
                         rng=None, chunk: int = 512) -> float:
    """Empirical Lipschitz ratio of the materialized network at size ``hw``.

    Half the pairs are independent; half differ by a small perturbation.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    h, w = hw
    c = network.c_in
    network.materialize(hw=hw)
    worst = 0.0
    done = 0
    while done < n_pairs:
        n = min(chunk, n_pairs - done)
        x1 = rng.normal(size=(n, c, h, w))
        x2 = np.where((np.arange(n) + done)[:, None, None, None] % 2 == 0,
                      rng.normal(size=(n, c, h, w)),
                      x1 + 1e-3 * rng.normal(size=(n, c, h, w)))
        dy = network.forward_array(x2) - network.forward_array(x1)
        dx = (x2 - x1).reshape(n, -1)
        num = np.linalg.norm(dy.reshape(n, -1), axis=1)
        den = np.linalg.norm(dx, axis=1)
        worst = max(worst, float((num / den).max()))
        done += n
    return worst


# ---------------------------------------------------------------------------
# Data plumbing


def load_grayscale_dir(path: str) -> list[np.ndarray]:
    """All *.pgm images under a directory, sorted by name."""
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".pgm"))
    return [read_pgm(os.path.join(path, n)) for n in names]


def extract_patches(images, size: int, count: int, rng) -> np.ndarray:
    """(count, 1, size, size) patches sampled uniformly over images/offsets."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    images = [np.asarray(im, dtype=np.float64) for im in images]
    for im in images:
        if im.ndim != 2 or im.shape[0] < size or im.shape[1] < size:
            raise ValueError(f"image of shape {im.shape} smaller than "
                             f"patch size {size}")
    patches = np.empty((count, 1, size, size))
    for i in range(count):
        im = images[rng.integers(len(images))]
        top = rng.integers(im.shape[0] - size + 1)
        left = rng.integers(im.shape[1] - size + 1)
        patches[i, 0] = im[top:top + size, left:left + size]
    return patches


# ---------------------------------------------------------------------------
# Training


@dataclass
class DenoiserTrainConfig:
    """Noise level, patch pipeline, and optimizer settings."""

    sigma: float = 10.0 / 255.0
    patch_size: int = 32
    n_patches: int = 512
    epochs: int = 8
    batch_size: int = 16
    eta: float = 4e-3
    lambda_: float = 0.0
    seed: int = 0
    audit_pairs: int = 10_000
    audit_hw: tuple = (8, 8)
    probe_patches: int = 128


def train_denoiser(images, spec: ConvNetSpec, config: DenoiserTrainConfig,
                   checkpoint_path: str | None = None,
                   metrics_path: str | None = None):
    """MSE-train a 1-Lip plain CNN on noisy patches; returns (net, history).

    ``images``: directory path or list of [0,1] grayscale arrays.  Per-epoch
    history rows carry probe MSEs, mean AELR, and a Lipschitz audit.
    """
    if isinstance(images, str):
        images = load_grayscale_dir(images)
    if len(images) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    clean = extract_patches(images, config.patch_size, config.n_patches, rng)
    network = build_conv_net(spec)
    state = AdamState(network.parameter_groups())
    train_cfg = TrainConfig(eta=config.eta, batch_size=config.batch_size,
                            epochs=config.epochs, lambda_=config.lambda_,
                            seed=config.seed)
    n_probe = min(config.probe_patches, config.n_patches)
    probe_rng = np.random.default_rng([config.seed, 101])
    probe_clean = clean[:n_probe]
    probe_noisy = probe_clean + config.sigma * probe_rng.normal(
        size=probe_clean.shape)
    history = []
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(config.n_patches)
        for start in range(0, config.n_patches, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch_clean = clean[idx]
            noisy = batch_clean + config.sigma * rng.normal(
                size=batch_clean.shape)
            network.refresh(iters=1)
            loss = objective(network, (noisy, batch_clean), config.lambda_)
            loss.backward()
            grads = collect_gradients(state.groups)
            adam_step(state, grads, train_cfg)
            network.invalidate()
        audit_rng = np.random.default_rng([config.seed, epoch])
        denoised = network.forward_array(probe_noisy)
        history.append({
            "epoch": epoch,
            "train_mse": float(np.mean((denoised - probe_clean) ** 2)),
            "test_mse": float(np.mean((probe_noisy - probe_clean) ** 2)),
            "mean_aelr": _mean_aelr(network),
            "lipschitz_audit": conv_lipschitz_audit(
                network, hw=config.audit_hw, n_pairs=config.audit_pairs,
                rng=audit_rng),
        })
        network.invalidate()
    if checkpoint_path is not None:
        network.save(checkpoint_path)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, history)
    return network, history


def aelr_report(network) -> dict:
    """Mean AELR plus per-slot AELR/TV(2) values for spline activations."""
    banks = network.spline_banks()
    slots = []
    for i, act in enumerate(network.activations):
        if isinstance(act, SplineBank):
            slots.append({"slot": i,
                          "aelr": act.aelr_values().tolist(),
                          "tv2": act.tv2_values().tolist()})
    return {"mean_aelr": _mean_aelr(network), "slots": slots}


def write_aelr_csv(path: str, network) -> None:
    """Per-neuron AELR/TV(2) table: slot, neuron, aelr, tv2."""
    report = aelr_report(network)
    with atomic_open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "neuron", "aelr", "tv2"])
        for slot in report["slots"]:
            for j, (a, t) in enumerate(zip(slot["aelr"], slot["tv2"])):
                writer.writerow([slot["slot"], j, repr(float(a)),
                                 repr(float(t))])


# ---------------------------------------------------------------------------
# Deployment wrappers


class AveragedDenoiser:
    """D = beta*R + (1-beta)*Id on (H, W) images."""

    def __init__(self, base, beta: float):
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        self.base = base
        self.beta = float(beta)

    def _base_apply(self, x: np.ndarray) -> np.ndarray:
        if hasattr(self.base, "forward_array"):
            return self.base.forward_array(x)
        return self.base.apply(x)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.beta * self._base_apply(x) + (1.0 - self.beta) * x

    @property
    def lipschitz_bound(self) -> float:
        return 1.0  # beta * 1 + (1 - beta), with R audited to 1


class ScaledDenoiser:
    """K times an audited map: globally K-Lipschitz by construction."""

    def __init__(self, base, K: float):
        if K < 0.0:
            raise ValueError("K must be nonnegative")
        self.base = base
        self.K = float(K)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.K == 0.0:
            return np.zeros_like(x)
        if hasattr(self.base, "forward_array"):
            return self.K * self.base.forward_array(x)
        return self.K * self.base.apply(x)

    @property
    def lipschitz_bound(self) -> float:
        return self.K


class IdentityMap:
    """R = Id (for algebraic fixtures)."""

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    lipschitz_bound = 1.0


class ZeroMap:
    """R = 0 (for algebraic fixtures)."""

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    lipschitz_bound = 0.0


# ---------------------------------------------------------------------------
# beta/sigma selection


def grid_search_beta_sigma(networks: dict, images, eval_sigma: float, rng,
                           betas=DEFAULT_BETAS):
    """Pick (beta, sigma) maximizing aggregate PSNR on a validation set.

    ``networks`` maps training noise level sigma to a base network R; each
    candidate D = beta*R_sigma + (1-beta)*Id denoises the validation images
    corrupted at ``eval_sigma``, scored by aggregate (mean) PSNR.
    Returns (best_beta, best_sigma, rows) with rows of (beta, sigma, psnr).
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len(images) == 0:
        raise ValueError("empty validation set")
    noisy = [im + eval_sigma * rng.normal(size=im.shape) for im in images]
    rows = []
    best = None
    for sigma in sorted(networks):
        base = networks[sigma]
        for beta in betas:
            den = AveragedDenoiser(base, beta)
            score = float(np.mean([psnr(den.apply(n), im)
                                   for n, im in zip(noisy, images)]))
            rows.append((float(beta), float(sigma), score))
            if best is None or score > best[2]:
                best = (float(beta), float(sigma), score)
    return best[0], best[1], rows
