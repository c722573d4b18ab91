"""Reverse-mode automatic differentiation over dense numpy arrays.

A computation is recorded as a dynamic tape of :class:`Tensor` nodes, each
holding its value, its parents, and a closure that routes the output gradient
back to those parents.  Tapes are built fresh for every training step and
consumed by a single ``backward`` call.

Fixed subgradient conventions (training must be reproducible):

* ``abs``: derivative 0 at 0.
* ``clip`` at threshold ``T``: derivative 0 outside *and exactly at* +-T.
* ``maximum``/``minimum``: ties send the gradient to the first argument.
* group sort: gradient is the inverse permutation of a stable argsort.

All arithmetic is float64 by default; float32 can be selected per tensor via
``dtype`` but the test tolerances assume 64-bit.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class NonFiniteError(ArithmeticError):
    """Raised when a NaN or Inf value appears in a tensor."""


class GraphReuseError(RuntimeError):
    """Raised when a consumed tape is asked to backward again."""


class _NoGrad:
    """Context manager that disables tape recording inside its block."""

    _depth = 0

    def __enter__(self):
        _NoGrad._depth += 1
        return self

    def __exit__(self, *exc):
        _NoGrad._depth -= 1
        return False


def no_grad() -> _NoGrad:
    """Disable gradient recording; use for audits and finite differences."""
    return _NoGrad()


def _recording() -> bool:
    return _NoGrad._depth == 0


class Tensor:
    """A dense array node on the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite entries")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Build an op-output node, validating finiteness of the result."""
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("non-finite intermediate value")
        out = object.__new__(Tensor)
        out.data = data
        out.grad = None
        out._consumed = False
        if any(p._consumed for p in parents):
            raise GraphReuseError("tape node reused after backward")
        if _recording() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def backward(out=None, a=self, b=other):
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        out = Tensor._op(out_data, (self, other), backward)
        return _bind(out, backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        out_data = self.data - other.data

        def backward(out=None, a=self, b=other):
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.shape))

        out = Tensor._op(out_data, (self, other), backward)
        return _bind(out, backward)

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __neg__(self):
        out_data = -self.data

        def backward(out=None, a=self):
            if a.requires_grad:
                a._accum(-out.grad)

        out = Tensor._op(out_data, (self,), backward)
        return _bind(out, backward)

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def backward(out=None, a=self, b=other):
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        out = Tensor._op(out_data, (self, other), backward)
        return _bind(out, backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = self.data / other.data

        def backward(out=None, a=self, b=other):
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        out = Tensor._op(out_data, (self, other), backward)
        return _bind(out, backward)

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __matmul__(self, other):
        other = _as_tensor(other)
        a_data, b_data = self.data, other.data
        out_data = a_data @ b_data

        def backward(out=None, a=self, b=other):
            g = out.grad
            ad, bd = a.data, b.data
            a1 = ad.reshape(1, -1) if ad.ndim == 1 else ad
            b1 = bd.reshape(-1, 1) if bd.ndim == 1 else bd
            g1 = g.reshape(a1.shape[0], b1.shape[1]) if g.ndim < 2 else g
            if a.requires_grad:
                ga = g1 @ b1.T
                a._accum(ga.reshape(ad.shape))
            if b.requires_grad:
                gb = a1.T @ g1
                b._accum(gb.reshape(bd.shape))

        out = Tensor._op(out_data, (self, other), backward)
        return _bind(out, backward)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def backward(out=None, a=self):
            if a.requires_grad:
                a._accum(out.grad.reshape(a.data.shape))

        out = Tensor._op(out_data, (self,), backward)
        return _bind(out, backward)

    def transpose(self, axes: Sequence[int] | None = None):
        out_data = np.transpose(self.data, axes)
        inv = None if axes is None else np.argsort(axes)

        def backward(out=None, a=self, inv=inv):
            if a.requires_grad:
                a._accum(np.transpose(out.grad, inv))

        out = Tensor._op(out_data, (self,), backward)
        return _bind(out, backward)

    @property
    def T(self):
        return self.transpose()

    # -- elementwise nonlinearities ------------------------------------------------

    def abs(self):
        out_data = np.abs(self.data)
        sign = np.sign(self.data)

        def backward(out=None, a=self, sign=sign):
            if a.requires_grad:
                a._accum(out.grad * sign)

        out = Tensor._op(out_data, (self,), backward)
        return _bind(out, backward)

    def clip(self, T: float):
        """Saturate at +-T; gradient is zero outside and exactly at +-T."""
        if T <= 0:
            raise ValueError("clip threshold must be positive")
        out_data = np.clip(self.data, -T, T)
        mask = (np.abs(self.data) < T).astype(self.data.dtype)

        def backward(out=None, a=self, mask=mask):
            if a.requires_grad:
                a._accum(out.grad * mask)

        out = Tensor._op(out_data, (self,), backward)
        return _bind(out, backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(out=None, a=self, od=out_data):
            if a.requires_grad:
                a._accum(out.grad * (0.5 / od))

        out = Tensor._op(out_data, (self,), backward)
        return _bind(out, backward)

    def maximum(self, other):
        other = _as_tensor(other)
        out_data = np.maximum(self.data, other.data)
        take_a = self.data >= other.data

        def backward(out=None, a=self, b=other, take_a=take_a):
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g * take_a, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * ~take_a, b.shape))

        out = Tensor._op(out_data, (self, other), backward)
        return _bind(out, backward)

    def minimum(self, other):
        other = _as_tensor(other)
        out_data = np.minimum(self.data, other.data)
        take_a = self.data <= other.data

        def backward(out=None, a=self, b=other, take_a=take_a):
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g * take_a, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * ~take_a, b.shape))

        out = Tensor._op(out_data, (self, other), backward)
        return _bind(out, backward)

    # -- reductions -------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(out=None, a=self, axis=axis, keepdims=keepdims):
            if not a.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

        out = Tensor._op(np.asarray(out_data), (self,), backward)
        return _bind(out, backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def cumsum(self, axis: int = -1):
        out_data = np.cumsum(self.data, axis=axis)

        def backward(out=None, a=self, axis=axis):
            if a.requires_grad:
                g = np.flip(np.cumsum(np.flip(out.grad, axis), axis=axis), axis)
                a._accum(g)

        out = Tensor._op(out_data, (self,), backward)
        return _bind(out, backward)

    # -- backward pass -------------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar output to the leaves."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar output")
        if self._consumed:
            raise GraphReuseError("this tape was already differentiated once")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        # mark intermediates consumed and free their state; leaves stay live
        for node in order:
            if node._parents:
                node._consumed = True
                node.grad = None
                node._backward = None


def _bind(out: Tensor, backward) -> Tensor:
    """Give the backward closure access to its own output node."""
    if out._backward is not None:
        out._backward = lambda out=out, fn=backward: fn(out=out)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- free-function ops ------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(out=None, parts=tensors, axis=axis, splits=splits):
        grads = np.split(out.grad, splits, axis=axis)
        for part, g in zip(parts, grads):
            if part.requires_grad:
                part._accum(g)

    out = Tensor._op(out_data, tuple(tensors), backward)
    return _bind(out, backward)


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; gradient scatter-adds back."""
    indices = np.asarray(indices)
    flat = x.data.reshape(-1)
    out_data = flat[indices]

    def backward(out=None, a=x, indices=indices):
        if a.requires_grad:
            g = np.zeros(a.data.size, dtype=a.data.dtype)
            np.add.at(g, indices.reshape(-1), out.grad.reshape(-1))
            a._accum(g.reshape(a.data.shape))

    out = Tensor._op(out_data, (x,), backward)
    return _bind(out, backward)


def group_sort(x: Tensor, group_size: int, axis: int = -1) -> Tensor:
    """Sort within contiguous groups of ``group_size`` along ``axis``, ascending.

    The gradient routes through the (stable) sorting permutation, so the op is
    an isometry per group.
    """
    axis = axis % x.data.ndim
    width = x.data.shape[axis]
    if width % group_size != 0:
        raise ValueError(f"group size {group_size} does not divide width {width}")
    moved = np.moveaxis(x.data, axis, -1)
    lead = moved.shape[:-1]
    grouped = moved.reshape(*lead, width // group_size, group_size)
    perm = np.argsort(grouped, axis=-1, kind="stable")
    sorted_g = np.take_along_axis(grouped, perm, axis=-1)
    out_data = np.moveaxis(sorted_g.reshape(*lead, width), -1, axis)

    def backward(out=None, a=x, perm=perm, axis=axis, lead=lead,
                 width=width, group_size=group_size):
        if not a.requires_grad:
            return
        g = np.moveaxis(out.grad, axis, -1).reshape(*lead, width // group_size, group_size)
        scattered = np.zeros_like(g)
        np.put_along_axis(scattered, perm, g, axis=-1)
        a._accum(np.moveaxis(scattered.reshape(*lead, width), -1, axis))

    out = Tensor._op(out_data, (x,), backward)
    return _bind(out, backward)


def _conv_cols(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Stack circularly shifted copies of x as (B, H, W, kh*kw*Ci) columns."""
    batch, cin, height, width = x.shape
    taps = kh * kw
    cols = np.empty((batch, height, width, taps, cin), dtype=x.dtype)
    t = 0
    for a in range(kh):
        for b in range(kw):
            da, db = a - kh // 2, b - kw // 2
            cols[:, :, :, t, :] = np.roll(x, (-da, -db), axis=(2, 3)).transpose(0, 2, 3, 1)
            t += 1
    return cols.reshape(batch, height, width, taps * cin)


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """Reorder (Co, Ci, kh, kw) kernel to a (kh*kw*Ci, Co) matrix."""
    cout, cin, kh, kw = kernel.shape
    return kernel.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)


def conv2d_circular_array(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Plain-numpy circular 2-D cross-correlation, (B,Ci,H,W) -> (B,Co,H,W)."""
    batch, _, height, width = x.shape
    cols = _conv_cols(x, kernel.shape[2], kernel.shape[3])
    y = cols.reshape(batch * height * width, -1) @ _kernel_matrix(kernel)
    return y.reshape(batch, height, width, kernel.shape[0]).transpose(0, 3, 1, 2)


def conv2d_circular_adjoint_array(y: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`conv2d_circular_array` in the kernel, (B,Co,H,W) -> (B,Ci,H,W)."""
    batch, cout, height, width = y.shape
    _, cin, kh, kw = kernel.shape
    g = y.transpose(0, 2, 3, 1).reshape(batch * height * width, cout)
    gcols = (g @ _kernel_matrix(kernel).T).reshape(batch, height, width, kh * kw, cin)
    x = np.zeros((batch, cin, height, width), dtype=y.dtype)
    t = 0
    for a in range(kh):
        for b in range(kw):
            da, db = a - kh // 2, b - kw // 2
            x += np.roll(gcols[:, :, :, t, :].transpose(0, 3, 1, 2), (da, db), axis=(2, 3))
            t += 1
    return x


def conv2d_circular(x: Tensor, kernel: Tensor) -> Tensor:
    """Circular-padding 2-D correlation of (B,Ci,H,W) with a (Co,Ci,kh,kw) kernel."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    batch, cin, height, width = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, got {cin}")
    cols = _conv_cols(x.data, kh, kw).reshape(batch * height * width, kh * kw * cin)
    out_data = (cols @ _kernel_matrix(kernel.data)).reshape(
        batch, height, width, cout
    ).transpose(0, 3, 1, 2)

    def backward(out=None, a=x, k=kernel, cols=cols):
        g = out.grad.transpose(0, 2, 3, 1).reshape(-1, k.data.shape[0])
        if k.requires_grad:
            gk = cols.T @ g
            cout, cin_, kh_, kw_ = k.data.shape
            k._accum(gk.reshape(kh_, kw_, cin_, cout).transpose(3, 2, 0, 1))
        if a.requires_grad:
            a._accum(conv2d_circular_adjoint_array(out.grad, k.data))

    out = Tensor._op(out_data, (x, kernel), backward)
    return _bind(out, backward)


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute values (subgradient 0 at 0)."""
    return _as_tensor(x).abs().sum()

def squared_l2_norm(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return (x * x).sum()


# -- named-graph facade --------------------------------------------------------------------


class Graph:
    """A named computation: ``builder`` maps leaf tensors to output tensors.

    ``leaves`` lists the leaf names that must be bound at evaluation time;
    ``outputs`` names what the builder returns. The tape itself is rebuilt on
    every call, so a Graph value is reusable even though tapes are single-use.
    """

    def __init__(self, builder: Callable[[Mapping[str, Tensor]], Mapping[str, Tensor]],
                 leaves: Iterable[str], outputs: Iterable[str]):
        self.builder = builder
        self.leaves = tuple(leaves)
        self.outputs = tuple(outputs)

    def _run(self, bindings: Mapping[str, np.ndarray], requires_grad: bool):
        missing = [name for name in self.leaves if name not in bindings]
        if missing:
            raise KeyError(f"unbound leaves: {missing}")
        leaf_tensors = {
            name: Tensor(bindings[name], requires_grad=requires_grad)
            for name in self.leaves
        }
        out = self.builder(leaf_tensors)
        for name in self.outputs:
            if name not in out:
                raise KeyError(f"builder did not produce output {name!r}")
        return leaf_tensors, out


def evaluate(graph: Graph, bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Run the graph forward and return its named output arrays."""
    with no_grad():
        _, out = graph._run(bindings, requires_grad=False)
    return {name: out[name].data for name in graph.outputs}


def gradient(graph: Graph, bindings: Mapping[str, np.ndarray],
             output: str) -> dict[str, np.ndarray]:
    """Differentiate the named scalar output with respect to every leaf."""
    leaf_tensors, out = graph._run(bindings, requires_grad=True)
    target = out[output]
    if target.data.size != 1:
        raise ValueError(f"output {output!r} is not scalar")
    target.backward()
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in leaf_tensors.items()
    }


def finite_diff_check(scalar_fn: Callable[[Tensor], Tensor], point,
                      eps: float = 1e-5) -> float:
    """Max relative error between the backward gradient and central differences.

    ``scalar_fn`` must map one tensor to a scalar tensor, and ``point`` must be
    at least ``10*eps`` away from any kink of the function (caller's duty).
    Per-coordinate relative errors use a 1e-6 floor in the denominator so that
    exact zero gradients compare absolutely.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    x0 = np.array(point, dtype=DEFAULT_DTYPE)
    leaf = Tensor(x0, requires_grad=True)
    out = scalar_fn(leaf)
    if out.data.size != 1:
        raise ValueError("scalar_fn must return a scalar")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    fd = np.zeros_like(x0)
    flat = fd.reshape(-1)
    base = x0.reshape(-1)
    with no_grad():
        for i in range(base.size):
            saved = base[i]
            base[i] = saved + eps
            hi = scalar_fn(Tensor(x0)).item()
            base[i] = saved - eps
            lo = scalar_fn(Tensor(x0)).item()
            base[i] = saved
            flat[i] = (hi - lo) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    return float(np.max(np.abs(analytic - fd) / denom)) if x0.size else 0.0
