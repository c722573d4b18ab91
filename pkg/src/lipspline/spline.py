"""Learnable linear-spline (LLS) activations on a uniform knot grid.

A spline activation is a continuous piecewise-linear function determined by K
coefficients on the uniform grid ``(k_min-1)T .. (k_max+1)T`` (so
``K = k_max - k_min + 3``), interpolating its coefficients at the knots and
extrapolating linearly outside the grid with the boundary slopes.  Its
Lipschitz constant is ``max|Dc|/T`` with ``D`` the first-difference stencil,
so feasibility (``Lip <= 1``) is the box constraint ``|Dc|_inf <= T``.

Feasibility is enforced by *parameterization*: the forward pass always runs
through :func:`spline_proj` (clip the differences at +-T, rebuild by
cumulative sum, restore the mean) and the optimizer updates the unconstrained
raw coefficients.  The projection is idempotent, mean-preserving, and
differentiable almost everywhere (clip has zero gradient where it saturates).

A trainable scaling factor ``alpha`` turns ``sigma`` into
``sigma_tilde(x) = sigma(alpha*x)/alpha``, which changes neither the
Lipschitz constant nor the second-order total variation ``tv2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .config import atomic_open
from .autodiff import Tensor, concat, no_grad, take

PRESETS = ("identity", "relu", "absolute_value", "leaky_relu", "maxmin_pairing")


def clip(x, T: float):
    """Symmetric saturation at +-T for tensors or arrays."""
    if T <= 0:
        raise ValueError("clip threshold must be positive")
    if isinstance(x, Tensor):
        return x.clip(T)
    return np.clip(np.asarray(x, dtype=float), -T, T)


def _diff_stencil(k: int) -> np.ndarray:
    """First-difference matrix D of shape (k-1, k)."""
    d = np.zeros((k - 1, k))
    d[np.arange(k - 1), np.arange(k - 1)] = -1.0
    d[np.arange(k - 1), np.arange(1, k)] = 1.0
    return d


def _second_diff_stencil(k: int) -> np.ndarray:
    """Second-difference matrix L of shape (k-2, k)."""
    l = np.zeros((k - 2, k))
    l[np.arange(k - 2), np.arange(k - 2)] = 1.0
    l[np.arange(k - 2), np.arange(1, k - 1)] = -2.0
    l[np.arange(k - 2), np.arange(2, k)] = 1.0
    return l


def spline_proj(c, T: float):
    """Project coefficients onto the feasible set ``{c : |Dc|_inf <= T}``.

    Computes ``D_pinv @ clip(Dc, T) + mean(c)`` matrix-free: the clipped
    differences are rebuilt by cumulative sum (the minimal-norm preimage has
    zero mean since ``null(D) = span(1)``) and the original mean is restored.
    Operates on the last axis; accepts a 1-D or 2-D Tensor or ndarray and
    returns the same kind.
    """
    if isinstance(c, Tensor):
        if c.shape[-1] < 2:
            raise ValueError("need at least two coefficients")
        squeeze = c.ndim == 1
        mat = c.reshape((1, -1)) if squeeze else c
        k = mat.shape[-1]
        d = (mat @ Tensor(_diff_stencil(k).T)).clip(T)
        u = concat([Tensor(np.zeros((mat.shape[0], 1))), d.cumsum(axis=1)], axis=1)
        out = u - u.mean(axis=1, keepdims=True) + mat.mean(axis=1, keepdims=True)
        return out.reshape((-1,)) if squeeze else out
    arr = np.asarray(c, dtype=float)
    if arr.shape[-1] < 2:
        raise ValueError("need at least two coefficients")
    d = np.clip(np.diff(arr, axis=-1), -T, T)
    u = np.concatenate([np.zeros_like(arr[..., :1]), np.cumsum(d, axis=-1)], axis=-1)
    return u - u.mean(axis=-1, keepdims=True) + arr.mean(axis=-1, keepdims=True)


def _preset_fn(preset: str, slope: float, neuron_index: int):
    if preset == "identity":
        return lambda t: t
    if preset == "relu":
        return lambda t: np.maximum(t, 0.0)
    if preset == "absolute_value":
        return np.abs
    if preset == "leaky_relu":
        if not -1.0 <= slope <= 1.0:
            raise ValueError("leaky_relu slope must lie in [-1, 1]")
        return lambda t: np.where(t < 0, slope * t, t)
    if preset == "maxmin_pairing":
        # even-indexed neurons start as the identity, odd-indexed as |x|
        return _preset_fn("identity" if neuron_index % 2 == 0 else "absolute_value",
                          slope, neuron_index)
    raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")


@dataclass
class Spline:
    """One linear-spline activation.

    ``c`` holds the raw (unconstrained) coefficients indexed
    ``k_min-1 .. k_max+1``; the feasible coefficients are
    ``spline_proj(c, T)`` and everything downstream (evaluation, tv2, aelr)
    uses the projected values.
    """

    c: Tensor
    T: float
    alpha: Tensor
    k_min: int
    k_max: int

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("grid stepsize T must be positive")
        k = self.k_max - self.k_min + 3
        if self.c.shape != (k,):
            raise ValueError(f"expected {k} coefficients, got shape {self.c.shape}")
        if float(self.alpha.data) == 0.0:
            raise ValueError("alpha must be nonzero")

    @property
    def n_coefficients(self) -> int:
        return self.c.shape[0]

    @property
    def knots(self) -> np.ndarray:
        return np.arange(self.k_min - 1, self.k_max + 2) * self.T

    def projected(self) -> np.ndarray:
        return spline_proj(self.c.data, self.T)

    def lipschitz(self) -> float:
        """Exact Lipschitz constant max|Dc|/T of the feasible spline."""
        return float(np.max(np.abs(np.diff(self.projected())))) / self.T


def init_spline(preset: str, K: int, rng: tuple[float, float] = (-1.0, 1.0), *,
                slope: float = 0.1, neuron_index: int = 0,
                trainable: bool = True) -> Spline:
    """Sample the preset function on a symmetric grid with T = 2R/(K-3).

    ``rng = (-R, R)`` is the interval on which the spline is nonlinear; one
    extrapolation coefficient on each side is counted inside ``K``.
    """
    if K < 3:
        raise ValueError("K must be at least 3")
    if K % 2 == 0:
        raise ValueError("symmetric grids need an odd number of coefficients")
    lo, hi = rng
    if not (lo == -hi and hi > 0):
        raise ValueError("range must be symmetric about 0")
    T = 2.0 * hi / (K - 3) if K > 3 else hi
    k_max = (K - 3) // 2
    k_min = -k_max
    fn = _preset_fn(preset, slope, neuron_index)
    knots = np.arange(k_min - 1, k_max + 2) * T
    return Spline(
        c=Tensor(fn(knots), requires_grad=trainable),
        T=T,
        alpha=Tensor(1.0, requires_grad=trainable),
        k_min=k_min,
        k_max=k_max,
    )


class SplineBank:
    """A vectorized collection of splines sharing one grid (one per neuron).

    ``n`` may be 1 to share a single spline across a whole layer; evaluation
    maps column ``j`` of the input to spline ``j % n``.
    """

    def __init__(self, c: Tensor, alpha: Tensor, T: float, k_min: int, k_max: int):
        self.c = c
        self.alpha = alpha
        self.T = float(T)
        self.k_min = int(k_min)
        self.k_max = int(k_max)
        self.n, k = c.shape
        if k != k_max - k_min + 3:
            raise ValueError("coefficient count does not match the grid")

    @property
    def K(self) -> int:
        return self.k_max - self.k_min + 3

    def projected(self) -> Tensor:
        return spline_proj(self.c, self.T)

    def eval(self, x: Tensor) -> Tensor:
        """Apply spline ``j % n`` to column ``j`` of a (batch, width) tensor."""
        if np.any(self.alpha.data == 0.0):
            raise ValueError("alpha must be nonzero")
        batch, width = x.shape
        cols = np.arange(width) % self.n
        if self.n == width:
            gathered_alpha = self.alpha.reshape((1, width))
        else:
            gathered_alpha = take(self.alpha, cols).reshape((1, width))
        z = x * gathered_alpha
        g = z * (1.0 / self.T) - float(self.k_min - 1)
        idx = np.clip(np.floor(g.data).astype(np.int64), 0, self.K - 2)
        t = g - idx.astype(float)
        cp = self.projected()
        flat_left = cols[None, :] * self.K + idx
        c_left = take(cp, flat_left)
        c_right = take(cp, flat_left + 1)
        val = c_left + t * (c_right - c_left)
        return val / gathered_alpha

    def tv2_total(self) -> Tensor:
        """Sum of tv2 over the bank, differentiable (objective regularizer)."""
        lc = self.projected() @ Tensor(_second_diff_stencil(self.K).T)
        return lc.abs().sum() * (1.0 / self.T)

    def tv2_values(self) -> np.ndarray:
        cp = spline_proj(self.c.data, self.T)
        lc = cp @ _second_diff_stencil(self.K).T
        return np.abs(lc).sum(axis=1) / self.T

    def aelr_values(self, threshold: float = 0.01) -> np.ndarray:
        cp = spline_proj(self.c.data, self.T)
        lc = cp @ _second_diff_stencil(self.K).T
        return (np.abs(lc) > threshold).sum(axis=1) + 1.0

    def spline(self, index: int) -> Spline:
        """A standalone copy of one member (for inspection and dumps)."""
        if not 0 <= index < self.n:
            raise IndexError(f"spline index {index} out of range [0, {self.n})")
        return Spline(
            c=Tensor(self.c.data[index].copy(), requires_grad=False),
            T=self.T,
            alpha=Tensor(float(self.alpha.data[index]), requires_grad=False),
            k_min=self.k_min,
            k_max=self.k_max,
        )


def init_spline_bank(preset: str, n: int, K: int,
                     rng: tuple[float, float] = (-1.0, 1.0), *,
                     slope: float = 0.1) -> SplineBank:
    """Build ``n`` splines from a preset (see :func:`init_spline`)."""
    rows = [init_spline(preset, K, rng, slope=slope, neuron_index=i) for i in range(n)]
    c = np.stack([s.c.data for s in rows])
    first = rows[0]
    return SplineBank(
        c=Tensor(c, requires_grad=True),
        alpha=Tensor(np.ones(n), requires_grad=True),
        T=first.T,
        k_min=first.k_min,
        k_max=first.k_max,
    )


def spline_eval(s: Spline, x) -> np.ndarray | Tensor:
    """Evaluate ``sigma(alpha*x)/alpha`` on a batch of scalars.

    Accepts an array (returns an array) or a Tensor batch (returns a Tensor
    wired for gradients with respect to ``x``, ``s.c`` and ``s.alpha``).
    """
    bank = SplineBank(
        c=s.c.reshape((1, s.n_coefficients)) if s.c.ndim == 1 else s.c,
        alpha=s.alpha.reshape((1,)),
        T=s.T,
        k_min=s.k_min,
        k_max=s.k_max,
    )
    if isinstance(x, Tensor):
        out = bank.eval(x.reshape((-1, 1)))
        return out.reshape(x.shape)
    arr = np.asarray(x, dtype=float)
    with no_grad():
        out = bank.eval(Tensor(arr.reshape(-1, 1)))
    return out.data.reshape(arr.shape)


def tv2(s: Spline) -> float:
    """Second-order total variation ``|Lc|_1 / T`` of the feasible spline."""
    cp = s.projected()
    return float(np.abs(cp @ _second_diff_stencil(s.n_coefficients).T).sum() / s.T)


def aelr(s: Spline, threshold: float = 0.01) -> float:
    """Effective number of linear regions: active knots (|Lc| > threshold) + 1."""
    cp = s.projected()
    lc = cp @ _second_diff_stencil(s.n_coefficients).T
    return float((np.abs(lc) > threshold).sum() + 1)


def dump_spline_csv(s: Spline, path: str) -> None:
    """Write knot_position, coefficient, second_difference rows (header first).

    Coefficients are the feasible (projected) values; the second-difference
    column is zero-padded at the two boundary knots where it is undefined.
    """
    cp = s.projected()
    lc = cp @ _second_diff_stencil(s.n_coefficients).T
    second = np.concatenate([[0.0], lc, [0.0]])
    with atomic_open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["knot_position", "coefficient", "second_difference"])
        for knot, coef, sec in zip(s.knots, cp, second):
            writer.writerow([repr(float(knot)), repr(float(coef)), repr(float(sec))])


def parse_spline_csv(path: str) -> Spline:
    """Rebuild a spline from a dump (alpha is not stored; it is reset to 1)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["knot_position", "coefficient", "second_difference"]:
            raise ValueError(f"unexpected header {header}")
        rows = [(float(r[0]), float(r[1])) for r in reader]
    knots = np.array([r[0] for r in rows])
    coefs = np.array([r[1] for r in rows])
    steps = np.diff(knots)
    T = float(steps[0])
    if not np.allclose(steps, T):
        raise ValueError("knot grid is not uniform")
    k_max = (len(rows) - 3) // 2
    return Spline(c=Tensor(coefs), T=T, alpha=Tensor(1.0), k_min=-k_max, k_max=k_max)
