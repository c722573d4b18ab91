"""Norm-constrained affine layers: spectral normalization and Bjorck.

Both layer types keep a raw weight plus a persistent power-iteration vector.
During training the constraint is applied in-graph each step from a one-step
refresh of that vector (warm start), so gradients flow through the
normalization.  For evaluation, audits, and checkpoints `materialize()`
re-runs power iteration to convergence and caches the effective weight.

Operator norms of circular convolutions depend on the spatial size, so a
ConvLayer is normalized at a declared size and can be re-materialized at the
deployment size.
"""

from __future__ import annotations

import json

import numpy as np

from .config import atomic_open
from .autodiff import (
    Tensor,
    conv2d_circular,
    conv2d_circular_adjoint_array,
    conv2d_circular_array,
    no_grad,
)

# change-based stopping: with convergence rate r the remaining error is about
# tol * r / (1 - r), so 1e-10 keeps sigma within ~1e-8 even for slow spectra
EVAL_TOL = 1e-10
EVAL_MAX_ITERS = 20000


# ---------------------------------------------------------------------------
# linear operators and power iteration


class MatrixOperator:
    """y = W x for a dense matrix W of shape (out, in)."""

    def __init__(self, W: np.ndarray):
        self.W = np.asarray(W, dtype=np.float64)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.W @ x

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self.W.T @ y

    def input_template(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(size=self.W.shape[1])


class ConvOperator:
    """Circular correlation on (C_in, H, W) -> (C_out, H, W)."""

    def __init__(self, kernel: np.ndarray, hw: tuple[int, int]):
        self.kernel = np.asarray(kernel, dtype=np.float64)
        self.hw = (int(hw[0]), int(hw[1]))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return conv2d_circular_array(x[None], self.kernel)[0]

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return conv2d_circular_adjoint_array(y[None], self.kernel)[0]

    def input_template(self, rng: np.random.Generator) -> np.ndarray:
        h, w = self.hw
        return rng.normal(size=(self.kernel.shape[1], h, w))


def power_iteration(op, iters: int, u: np.ndarray):
    """Estimate the largest singular value of a linear operator.

    Returns (sigma, u') where u' is the input-space iterate, suitable for
    warm-starting the next call.  A zero operator yields sigma 0.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu == 0:
        raise ValueError("power iteration needs a nonzero start vector")
    u = u / nu
    v = None
    for _ in range(iters):
        w = op.apply(u)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0, u
        v = w / nw
        back = op.adjoint(v)
        nb = np.linalg.norm(back)
        if nb == 0:
            return 0.0, u
        u = back / nb
    sigma = float(np.vdot(v, op.apply(u)))
    return sigma, u


def converge_power_iteration(op, u: np.ndarray, tol: float = EVAL_TOL,
                             max_iters: int = EVAL_MAX_ITERS):
    """Iterate until the sigma estimate stabilizes; returns (sigma, u, v)."""
    u = np.asarray(u, dtype=np.float64)
    u = u / np.linalg.norm(u)
    sigma_prev = -1.0
    v = None
    for _ in range(max_iters):
        w = op.apply(u)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0, u, np.zeros_like(w)
        v = w / nw
        back = op.adjoint(v)
        nb = np.linalg.norm(back)
        if nb == 0:
            return 0.0, u, v
        u = back / nb
        sigma = float(np.vdot(v, op.apply(u)))
        if abs(sigma - sigma_prev) <= tol * max(1.0, abs(sigma)):
            return sigma, u, v
        sigma_prev = sigma
    return sigma_prev, u, v


# ---------------------------------------------------------------------------
# Bjorck orthonormalization


def orthonormality_defect(W: np.ndarray) -> float:
    """Frobenius distance of the Gram matrix from the identity.

    Uses W'W for tall/square matrices and WW' for wide ones (row frame).
    """
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    G = W.T @ W if m >= n else W @ W.T
    return float(np.linalg.norm(G - np.eye(G.shape[0])))


def bjorck_orthonormalize(W, iters: int = 25):
    """Iterate W <- W(I + (I - W'W)/2); needs all singular values <= ~1.

    Accepts a Tensor (kept in-graph, differentiable) or a plain ndarray.
    Raises if the iterate grows, which signals insufficient pre-scaling.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    is_tensor = isinstance(W, Tensor)
    limit = 1.05 * max(
        np.linalg.norm(W.data if is_tensor else W),
        np.sqrt(max(W.shape)),
    )
    for _ in range(iters):
        if is_tensor:
            W = W * 1.5 - (W @ (W.T @ W)) * 0.5
            fro = np.linalg.norm(W.data)
        else:
            W = 1.5 * W - 0.5 * (W @ (W.T @ W))
            fro = np.linalg.norm(W)
        if not np.isfinite(fro) or fro > limit:
            raise ValueError(
                "Bjorck iteration diverged: pre-scale the input so its "
                "singular values are at most 1")
    return W


def _bjorck_converged(W: np.ndarray, tol: float = 1e-9,
                      max_iters: int = 200) -> np.ndarray:
    for _ in range(max_iters):
        W = 1.5 * W - 0.5 * (W @ (W.T @ W))
        if orthonormality_defect(W) <= tol:
            break
    return W


# ---------------------------------------------------------------------------
# layers

_CONSTRAINTS = ("none", "spectral", "orthonormal")


class DenseLayer:
    """Affine map x -> x W' + b with an optional norm constraint."""

    def __init__(self, weight, bias=None, constraint: str = "spectral",
                 bjorck_iters: int = 25, trainable: bool = True):
        if constraint not in _CONSTRAINTS:
            raise ValueError(f"unknown constraint {constraint!r}")
        weight = np.asarray(weight, dtype=np.float64)
        if weight.ndim != 2:
            raise ValueError("dense weight must be 2-D (out, in)")
        out_dim, in_dim = weight.shape
        if bias is None:
            bias = np.zeros(out_dim)
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (out_dim,):
            raise ValueError("bias shape must match the output width")
        self.weight = Tensor(weight, requires_grad=trainable)
        self.bias = Tensor(bias, requires_grad=trainable)
        self.constraint = constraint
        self.bjorck_iters = bjorck_iters
        self._u = np.ones(in_dim) / np.sqrt(in_dim)
        self._v = None
        self._sigma = None
        self._cached = None  # materialized effective weight (ndarray)

    @property
    def in_dim(self) -> int:
        return self.weight.data.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.data.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def operator(self) -> MatrixOperator:
        return MatrixOperator(self.weight.data)

    def refresh(self, iters: int = 1) -> float:
        """Advance the persistent power iteration on the raw weight."""
        if self.constraint == "none":
            return 0.0
        sigma, self._u = power_iteration(self.operator(), iters, self._u)
        w = self.weight.data @ self._u
        nw = np.linalg.norm(w)
        self._v = w / nw if nw > 0 else np.zeros_like(w)
        self._sigma = sigma
        self._cached = None
        return sigma

    def effective_weight_graph(self) -> Tensor:
        """Constraint applied in-graph from the latest refresh."""
        if self.constraint == "none":
            return self.weight
        if self._v is None:
            self.refresh(iters=10)
        sigma_hat = Tensor(self._v) @ (self.weight @ Tensor(self._u))
        if self.constraint == "spectral":
            return self.weight / sigma_hat.maximum(Tensor(1.0))
        scale = sigma_hat.maximum(Tensor(1e-12))
        return bjorck_orthonormalize(self.weight / scale, self.bjorck_iters)

    def materialize(self, tol: float = EVAL_TOL) -> np.ndarray:
        """Converged effective weight for evaluation and checkpoints."""
        if self._cached is not None:
            return self._cached
        W = self.weight.data
        if self.constraint != "none":
            sigma, self._u, self._v = converge_power_iteration(
                self.operator(), self._u, tol)
            self._sigma = sigma
            if self.constraint == "spectral":
                W = W / max(sigma, 1.0)
            else:
                if sigma <= 0:
                    raise ValueError("cannot orthonormalize a zero weight")
                W = _bjorck_converged(W / sigma)
        self._cached = W
        return W

    def invalidate(self) -> None:
        self._cached = None

    def forward_graph(self, x: Tensor) -> Tensor:
        W = self.effective_weight_graph()
        return x @ W.T + self.bias

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        return x @ self.materialize().T + self.bias.data

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight.data, "bias": self.bias.data,
                "u": self._u}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.weight.data = np.asarray(arrays["weight"], dtype=np.float64)
        self.bias.data = np.asarray(arrays["bias"], dtype=np.float64)
        self._u = np.asarray(arrays["u"], dtype=np.float64)
        self._v = None
        self._cached = None

    def metadata(self) -> dict:
        return {"kind": "dense", "constraint": self.constraint,
                "bjorck_iters": self.bjorck_iters,
                "shape": list(self.weight.data.shape)}


class ConvLayer:
    """Circular correlation with bias, spectrally normalized.

    Kernel layout is (C_out, C_in, kh, kw) and images are (B, C, H, W).
    The operator norm of a circular convolution depends on the spatial grid,
    so the layer is normalized at `norm_hw`; call `materialize(hw=...)` to
    re-normalize at a different deployment size.
    """

    def __init__(self, kernel, bias=None, norm_hw=(16, 16),
                 constraint: str = "spectral", trainable: bool = True):
        if constraint not in ("none", "spectral"):
            raise ValueError("conv layers support spectral or none only")
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 4:
            raise ValueError("kernel must have shape (C_out, C_in, kh, kw)")
        c_out = kernel.shape[0]
        if bias is None:
            bias = np.zeros(c_out)
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (c_out,):
            raise ValueError("bias shape must match the output channels")
        self.kernel = Tensor(kernel, requires_grad=trainable)
        self.bias = Tensor(bias, requires_grad=trainable)
        self.constraint = constraint
        self.norm_hw = (int(norm_hw[0]), int(norm_hw[1]))
        rng = np.random.default_rng(0)
        self._u = rng.normal(size=(kernel.shape[1], *self.norm_hw))
        self._u /= np.linalg.norm(self._u)
        self._v = None
        self._sigma = None
        self._cached = None
        self._cached_hw = None

    @property
    def c_in(self) -> int:
        return self.kernel.data.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernel.data.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.kernel, self.bias]

    def operator(self, hw=None) -> ConvOperator:
        return ConvOperator(self.kernel.data, hw or self.norm_hw)

    def refresh(self, iters: int = 1) -> float:
        if self.constraint == "none":
            return 0.0
        sigma, self._u = power_iteration(self.operator(), iters, self._u)
        w = conv2d_circular_array(self._u[None], self.kernel.data)[0]
        nw = np.linalg.norm(w)
        self._v = w / nw if nw > 0 else np.zeros_like(w)
        self._sigma = sigma
        self._cached = None
        return sigma

    def effective_kernel_graph(self) -> Tensor:
        if self.constraint == "none":
            return self.kernel
        if self._v is None:
            self.refresh(iters=10)
        image = conv2d_circular(Tensor(self._u[None]), self.kernel)
        sigma_hat = (Tensor(self._v[None]) * image).sum()
        return self.kernel / sigma_hat.maximum(Tensor(1.0))

    def materialize(self, hw=None, tol: float = EVAL_TOL) -> np.ndarray:
        hw = tuple(hw) if hw is not None else self.norm_hw
        if self._cached is not None and self._cached_hw == hw:
            return self._cached
        K = self.kernel.data
        if self.constraint == "spectral":
            if hw == self.norm_hw:
                sigma, self._u, self._v = converge_power_iteration(
                    self.operator(), self._u, tol)
            else:
                op = self.operator(hw)
                rng = np.random.default_rng(1)
                sigma, _, _ = converge_power_iteration(
                    op, op.input_template(rng), tol)
            self._sigma = sigma
            K = K / max(sigma, 1.0)
        self._cached = K
        self._cached_hw = hw
        return K

    def invalidate(self) -> None:
        self._cached = None
        self._cached_hw = None

    def forward_graph(self, x: Tensor) -> Tensor:
        K = self.effective_kernel_graph()
        return conv2d_circular(x, K) + self.bias.reshape((-1, 1, 1))

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        K = self.materialize(hw=x.shape[2:4])
        return conv2d_circular_array(x, K) + self.bias.data[:, None, None]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"kernel": self.kernel.data, "bias": self.bias.data,
                "u": self._u}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.kernel.data = np.asarray(arrays["kernel"], dtype=np.float64)
        self.bias.data = np.asarray(arrays["bias"], dtype=np.float64)
        self._u = np.asarray(arrays["u"], dtype=np.float64)
        self._v = None
        self._cached = None
        self._cached_hw = None

    def metadata(self) -> dict:
        return {"kind": "conv2d", "constraint": self.constraint,
                "norm_hw": list(self.norm_hw),
                "shape": list(self.kernel.data.shape)}


def spectral_normalize(layer):
    """Return a copy of the layer with weights divided by max(sigma, 1).

    sigma is the converged operator-norm estimate; layers already inside the
    unit ball are returned unchanged in value (never up-scaled).
    """
    if isinstance(layer, DenseLayer):
        W = layer.weight.data
        sigma, u, _ = converge_power_iteration(MatrixOperator(W), layer._u)
        out = DenseLayer(W / max(sigma, 1.0), bias=layer.bias.data.copy(),
                         constraint=layer.constraint,
                         bjorck_iters=layer.bjorck_iters)
        out._u = u
        return out
    if isinstance(layer, ConvLayer):
        op = layer.operator()
        sigma, u, _ = converge_power_iteration(op, layer._u)
        out = ConvLayer(layer.kernel.data / max(sigma, 1.0),
                        bias=layer.bias.data.copy(),
                        norm_hw=layer.norm_hw, constraint=layer.constraint)
        out._u = u
        return out
    raise TypeError(f"unsupported layer type {type(layer).__name__}")


def layer_forward(layer, x):
    """Apply a layer to a Tensor (in-graph) or ndarray (materialized)."""
    if isinstance(x, Tensor):
        return layer.forward_graph(x)
    with no_grad():
        return layer.forward_array(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# checkpoint archive: named float64 arrays + one JSON metadata entry


def save_archive(path: str, arrays: dict[str, np.ndarray],
                 metadata: dict) -> None:
    payload = {}
    for key, value in arrays.items():
        if key == "__meta__":
            raise ValueError("__meta__ is reserved for metadata")
        payload[key] = np.asarray(value, dtype=np.float64)
    payload["__meta__"] = np.frombuffer(
        json.dumps(metadata, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with atomic_open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_archive(path: str):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return arrays, meta
