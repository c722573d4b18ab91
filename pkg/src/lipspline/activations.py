"""Baseline 1-Lipschitz activations and exact cross-family rewrites.

Five families: relu, absolute_value, prelu (slope per neuron, clipped into
[-1, 1] inside the forward pass), groupsort (ascending sort within groups),
and householder (a reflection per pair of neurons, direction normalized
inside the forward pass).  MaxMin — (max, min) per pair — is groupsort of
size 2 followed by a swap; fragments fold that swap into their weights.

`build_equivalence_fragment` returns a small two-layer network that
reproduces one family exactly with another on a bounded interval.  The
fragments double as executable fixtures for expressiveness tests: every
weight matrix they emit has spectral norm <= 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, group_sort, take

_TAGS = ("relu", "absolute_value", "prelu", "groupsort", "householder")

_SQ2 = np.sqrt(2.0)


@dataclass
class ActivationKind:
    """Descriptor for one activation family plus its parameters.

    a: prelu slope, one per neuron (clipped into [-1, 1] in the forward).
    group_size: groupsort group length; must divide the width.
    v: householder direction per pair, shape (pairs, 2), raw (normalized
       in the forward so the reflection is exact).
    """

    tag: str
    a: Tensor | None = None
    group_size: int = 2
    v: Tensor | None = None

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise ValueError(f"unknown activation tag {self.tag!r}")
        if self.tag == "prelu":
            if self.a is None:
                raise ValueError("prelu requires slope parameter a")
            if not isinstance(self.a, Tensor):
                self.a = Tensor(np.asarray(self.a, dtype=np.float64),
                                requires_grad=True)
        if self.tag == "groupsort" and self.group_size < 2:
            raise ValueError("groupsort requires group_size >= 2")
        if self.tag == "householder":
            if self.v is None:
                raise ValueError("householder requires direction parameter v")
            if not isinstance(self.v, Tensor):
                self.v = Tensor(np.asarray(self.v, dtype=np.float64),
                                requires_grad=True)
            if self.v.data.ndim != 2 or self.v.data.shape[1] != 2:
                raise ValueError("householder v must have shape (pairs, 2)")
            norms = np.linalg.norm(self.v.data, axis=1)
            if np.any(norms < 1e-12):
                raise ValueError("householder v has a near-zero direction")

    def parameters(self) -> list[Tensor]:
        if self.tag == "prelu":
            return [self.a]
        if self.tag == "householder":
            return [self.v]
        return []

    def check_width(self, width: int) -> None:
        if self.tag == "prelu" and self.a.data.ndim > 0:
            if self.a.data.shape != (width,):
                raise ValueError(
                    f"prelu slope has shape {self.a.data.shape}, "
                    f"expected ({width},)")
        if self.tag == "groupsort" and width % self.group_size != 0:
            raise ValueError(
                f"width {width} not divisible by group_size {self.group_size}")
        if self.tag == "householder" and width != 2 * self.v.data.shape[0]:
            raise ValueError(
                f"householder with {self.v.data.shape[0]} pairs needs width "
                f"{2 * self.v.data.shape[0]}, got {width}")


def relu_kind() -> ActivationKind:
    return ActivationKind("relu")


def absolute_value_kind() -> ActivationKind:
    return ActivationKind("absolute_value")


def prelu_kind(a) -> ActivationKind:
    return ActivationKind("prelu", a=a)


def groupsort_kind(group_size: int = 2) -> ActivationKind:
    return ActivationKind("groupsort", group_size=group_size)


def householder_kind(v) -> ActivationKind:
    return ActivationKind("householder", v=v)


def apply_activation(kind: ActivationKind, x: Tensor) -> Tensor:
    """Apply one activation family to a (batch, width) tensor."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    width = x.shape[-1]
    kind.check_width(width)
    if kind.tag == "relu":
        return x.maximum(Tensor(0.0))
    if kind.tag == "absolute_value":
        return x.abs()
    if kind.tag == "prelu":
        slope = kind.a.clip(1.0)
        return x.maximum(x * slope)
    if kind.tag == "groupsort":
        return group_sort(x, kind.group_size, axis=-1)
    # householder: reflect each pair z across v's hyperplane when v'z < 0
    pairs = width // 2
    lead = x.shape[:-1]
    z = x.reshape(*lead, pairs, 2)
    sq = (kind.v * kind.v).sum(axis=1, keepdims=True)
    vn = kind.v / sq.sqrt()
    vb = vn.reshape(*((1,) * len(lead)), pairs, 2)
    ip = (z * vb).sum(axis=-1, keepdims=True)
    neg = ip.minimum(Tensor(0.0))
    out = z - neg * vb * 2.0
    return out.reshape(*lead, width)


def maxmin(x: Tensor) -> Tensor:
    """(max, min) per consecutive pair: groupsort(2) with each pair swapped."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    batch, width = x.shape
    if width % 2 != 0:
        raise ValueError("maxmin needs an even width")
    s = group_sort(x, 2, axis=-1)
    perm = np.arange(width).reshape(-1, 2)[:, ::-1].ravel()
    flat = np.arange(batch)[:, None] * width + perm[None, :]
    return take(s, flat)


def _fragment(weights, biases, kind):
    """Assemble a two-layer network with fixed (unconstrained) weights."""
    from .network import Network
    from .layers import DenseLayer

    layers = [
        DenseLayer(w, bias=b, constraint="none")
        for w, b in zip(weights, biases)
    ]
    return Network(layers, [kind])


def build_equivalence_fragment(from_kind: ActivationKind,
                               to_kind: ActivationKind,
                               B: float):
    """Network of `to`-activations that equals `from` on a bounded domain.

    B must be large enough that every input coordinate stays above -B.
    Supported pairs: absolute_value<->prelu, absolute_value<->groupsort,
    groupsort(2)<->householder.  relu is excluded as a target: it cannot
    reproduce the others without losing gradient norm.
    """
    src, dst = from_kind.tag, to_kind.tag
    if dst == "relu":
        raise ValueError("relu is excluded as a rewrite target")
    if B <= 0:
        raise ValueError("B must be positive")

    if (src, dst) == ("absolute_value", "prelu"):
        return _fragment(
            [np.eye(1), np.eye(1)],
            [np.zeros(1), np.zeros(1)],
            prelu_kind(np.array([-1.0])),
        )

    if (src, dst) == ("prelu", "absolute_value"):
        a = float(np.clip(from_kind.a.data, -1.0, 1.0).reshape(()))
        s = np.sqrt((1.0 + a) / 2.0)
        t = np.sqrt((1.0 - a) / 2.0)
        return _fragment(
            [np.array([[s], [t]]), np.array([[s, t]])],
            [np.array([s * B, 0.0]), np.array([-(1.0 + a) * B / 2.0])],
            absolute_value_kind(),
        )

    if (src, dst) == ("absolute_value", "groupsort"):
        # |x| = [-1, 1]/sq2 . sort_asc([1; -1]/sq2 x)
        return _fragment(
            [np.array([[1.0], [-1.0]]) / _SQ2,
             np.array([[-1.0, 1.0]]) / _SQ2],
            [np.zeros(2), np.zeros(1)],
            groupsort_kind(2),
        )

    if (src, dst) == ("groupsort", "absolute_value"):
        if from_kind.group_size != 2:
            raise ValueError("rewrite supports groups of size 2 only")
        M = np.array([[1.0, 1.0], [1.0, -1.0]]) / _SQ2
        P = np.array([[0.0, 1.0], [1.0, 0.0]])
        return _fragment(
            [M, P @ M],
            [np.array([B, 0.0]), np.full(2, -B / _SQ2)],
            absolute_value_kind(),
        )

    if (src, dst) == ("groupsort", "householder"):
        if from_kind.group_size != 2:
            raise ValueError("rewrite supports groups of size 2 only")
        # sort ascending = swap(MaxMin) and MaxMin = HH at v = (1, -1)/sq2
        P = np.array([[0.0, 1.0], [1.0, 0.0]])
        return _fragment(
            [np.eye(2), P],
            [np.zeros(2), np.zeros(2)],
            householder_kind(np.array([[1.0, -1.0]]) / _SQ2),
        )

    if (src, dst) == ("householder", "groupsort"):
        v = from_kind.v.data
        if v.shape != (1, 2):
            raise ValueError("rewrite supports a single pair only")
        v = v[0] / np.linalg.norm(v[0])
        # HH_v(z) = R MaxMin(R' z) with R the rotation taking (1,-1)/sq2 to v
        gamma = np.arctan2(v[1], v[0]) + np.pi / 4.0
        cg, sg = np.cos(gamma), np.sin(gamma)
        R = np.array([[cg, -sg], [sg, cg]])
        P = np.array([[0.0, 1.0], [1.0, 0.0]])
        return _fragment(
            [R.T, R @ P],
            [np.zeros(2), np.zeros(2)],
            groupsort_kind(2),
        )

    raise ValueError(f"unsupported rewrite pair ({src!r}, {dst!r})")
