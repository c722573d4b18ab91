"""Feedforward 1-Lipschitz networks: assembly, audits, checkpoints.

A network is L constrained affine layers with an activation slot between
consecutive layers; each slot holds either a baseline ActivationKind or a
SplineBank (one learnable linear spline per neuron, or one shared per
layer).  Composition of 1-Lipschitz pieces keeps the end-to-end map
1-Lipschitz, which `lipschitz_audit` verifies empirically on the
materialized (deployment) weights.

Checkpoints are NPZ archives of named float64 arrays plus one JSON metadata
entry; round-trips are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .activations import ActivationKind, apply_activation
from .autodiff import Tensor, no_grad
from .layers import DenseLayer, load_archive, save_archive
from .spline import SplineBank, init_spline_bank

_BASELINE_TAGS = ("relu", "absolute_value", "prelu", "groupsort", "householder")


@dataclass
class NetworkSpec:
    """Recipe for `build_network`.

    widths: [N_0 ... N_L]; layer l maps width N_{l-1} to N_l.
    activation: "lls" for spline activations, a baseline tag, or an
        ActivationKind instance; a list gives one entry per slot.
    constraint: "spectral", "orthonormal", or "none" (single or per layer).
    init: "kaiming" or "orthogonal".
    spline_K: coefficients per spline (odd; linear regions + 1).
    spline_range: R of the nonlinear interval [-R, R].
    spline_preset: initial shape of every spline.
    spline_shared: one spline per layer instead of one per neuron.
    prelu_init: "absolute_value" (a=-1), "relu" (a=0), or "maxmin"
        (alternating a=+1/-1).
    """

    widths: list[int]
    activation: object = "lls"
    constraint: object = "spectral"
    init: str = "kaiming"
    spline_K: int = 21
    spline_range: float = 1.0
    spline_preset: str = "maxmin_pairing"
    spline_shared: bool = False
    groupsort_size: int = 2
    prelu_init: str = "absolute_value"
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("need at least an input and an output width")
        if any(int(w) <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.init not in ("kaiming", "orthogonal"):
            raise ValueError("init must be 'kaiming' or 'orthogonal'")


def _init_weight(rng, out_dim: int, in_dim: int, scheme: str) -> np.ndarray:
    if scheme == "kaiming":
        return rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
    a = rng.normal(size=(max(out_dim, in_dim), min(out_dim, in_dim)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if out_dim >= in_dim else q.T


def _make_slot(entry, width: int, spec: NetworkSpec, rng):
    """Build one activation slot (ActivationKind or SplineBank)."""
    if isinstance(entry, (ActivationKind, SplineBank)):
        return entry
    if entry == "lls":
        n = 1 if spec.spline_shared else width
        return init_spline_bank(spec.spline_preset, n, spec.spline_K,
                                (-spec.spline_range, spec.spline_range))
    if entry in ("relu", "absolute_value"):
        return ActivationKind(entry)
    if entry == "prelu":
        if spec.prelu_init == "absolute_value":
            a = -np.ones(width)
        elif spec.prelu_init == "relu":
            a = np.zeros(width)
        elif spec.prelu_init == "maxmin":
            a = np.where(np.arange(width) % 2 == 0, 1.0, -1.0)
        else:
            raise ValueError(f"unknown prelu_init {spec.prelu_init!r}")
        return ActivationKind("prelu", a=Tensor(a, requires_grad=True))
    if entry == "groupsort":
        if width % spec.groupsort_size != 0:
            raise ValueError(
                f"width {width} not divisible by group size "
                f"{spec.groupsort_size}")
        return ActivationKind("groupsort", group_size=spec.groupsort_size)
    if entry == "householder":
        if width % 2 != 0:
            raise ValueError("householder needs an even width")
        v = np.tile(np.array([[1.0, -1.0]]) / np.sqrt(2.0), (width // 2, 1))
        return ActivationKind("householder", v=Tensor(v, requires_grad=True))
    raise ValueError(f"unknown activation {entry!r}")


class Network:
    """Alternating constrained affine layers and 1-Lipschitz activations."""

    def __init__(self, layers: list[DenseLayer], activations: list):
        if len(activations) != len(layers) - 1:
            raise ValueError("need exactly one activation between layers")
        for l, (first, second) in enumerate(zip(layers[:-1], layers[1:])):
            if first.out_dim != second.in_dim:
                raise ValueError(f"width mismatch between layers {l} and {l+1}")
        self.layers = layers
        self.activations = activations

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [l.out_dim for l in self.layers]

    # -- forward ---------------------------------------------------------

    def forward_graph(self, x: Tensor) -> Tensor:
        """In-graph forward with approximate (warm-start) constraints."""
        for l, layer in enumerate(self.layers):
            x = layer.forward_graph(x)
            if l < len(self.activations):
                x = self._activate(l, x)
        return x

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        """Deployment forward on materialized (converged) weights."""
        arr = np.asarray(x, dtype=np.float64)
        squeeze = arr.ndim == 1
        if squeeze:
            arr = arr[None]
        with no_grad():
            out = arr
            for l, layer in enumerate(self.layers):
                out = layer.forward_array(out)
                if l < len(self.activations):
                    out = self._activate(l, Tensor(out)).data
        return out[0] if squeeze else out

    def __call__(self, x):
        if isinstance(x, Tensor):
            return self.forward_graph(x)
        return self.forward_array(x)

    def _activate(self, slot: int, x: Tensor) -> Tensor:
        act = self.activations[slot]
        if isinstance(act, SplineBank):
            return act.eval(x)
        return apply_activation(act, x)

    # -- constraint bookkeeping -------------------------------------------

    def refresh(self, iters: int = 1) -> None:
        """One warm-start power-iteration step per layer (pre-step)."""
        for layer in self.layers:
            layer.refresh(iters)

    def materialize(self) -> None:
        """Converge all constraints so forward_array is the audited map."""
        for layer in self.layers:
            layer.materialize()

    def invalidate(self) -> None:
        for layer in self.layers:
            layer.invalidate()

    # -- parameters --------------------------------------------------------

    def spline_banks(self) -> list[SplineBank]:
        return [a for a in self.activations if isinstance(a, SplineBank)]

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        """Optimizer groups: weights at eta, alpha at eta/4, c at eta/40."""
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
        meta = {"format": "lipspline-network-v1", "layers": [], "slots": []}
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
    def load(cls, path: str) -> "Network":
        arrays, meta = load_archive(path)
        if meta.get("format") != "lipspline-network-v1":
            raise ValueError("not a network checkpoint")
        layers = []
        for i, lm in enumerate(meta["layers"]):
            if lm["kind"] != "dense":
                raise ValueError("network checkpoints hold dense layers only")
            layer = DenseLayer(arrays[f"layer{i}/weight"],
                               bias=arrays[f"layer{i}/bias"],
                               constraint=lm["constraint"],
                               bjorck_iters=lm.get("bjorck_iters", 25))
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


def build_network(spec: NetworkSpec) -> Network:
    """Assemble and initialize a network from its spec (deterministic)."""
    rng = np.random.default_rng(spec.seed)
    widths = [int(w) for w in spec.widths]
    n_layers = len(widths) - 1
    constraints = (list(spec.constraint)
                   if isinstance(spec.constraint, (list, tuple))
                   else [spec.constraint] * n_layers)
    if len(constraints) != n_layers:
        raise ValueError("need one constraint per layer")
    acts_spec = (list(spec.activation)
                 if isinstance(spec.activation, (list, tuple))
                 and not isinstance(spec.activation, str)
                 else [spec.activation] * (n_layers - 1))
    if len(acts_spec) != n_layers - 1:
        raise ValueError("need one activation per slot")

    layers = []
    for l in range(n_layers):
        weight = _init_weight(rng, widths[l + 1], widths[l], spec.init)
        layers.append(DenseLayer(weight, constraint=constraints[l]))
    slots = [_make_slot(entry, widths[l + 1], spec, rng)
             for l, entry in enumerate(acts_spec)]
    return Network(layers, slots)


def lipschitz_audit(network: Network, n_pairs: int = 10_000,
                    rng=None, scale: float = 1.0) -> float:
    """Largest output/input distance ratio over random pairs.

    Half the pairs are drawn independently (scale * standard normal); the
    other half differ by a small perturbation, which probes the local slope
    where a piecewise-linear map attains its Lipschitz constant.  Runs on
    the materialized deployment weights.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    network.materialize()
    d = network.in_dim
    n_far = n_pairs // 2
    x1 = rng.normal(0.0, scale, size=(n_pairs, d))
    x2 = np.empty_like(x1)
    x2[:n_far] = rng.normal(0.0, scale, size=(n_far, d))
    x2[n_far:] = x1[n_far:] + rng.normal(
        0.0, 1e-3 * scale, size=(n_pairs - n_far, d))
    y1 = network.forward_array(x1)
    y2 = network.forward_array(x2)
    num = np.linalg.norm(y1 - y2, axis=1)
    den = np.linalg.norm(x1 - x2, axis=1)
    keep = den > 0
    return float(np.max(num[keep] / den[keep]))
