"""Linear measurement operators for image inverse problems.

Two operator families share one interface (apply / adjoint / operator_norm):

* ``masked_dft``: unitary 2-D DFT followed by column subsampling.  Complex
  measurements are carried as two real channels, and the adjoint is defined
  for that real representation (zero-fill, inverse DFT, real part).  The
  requested column set is completed with conjugate partners ``(-c) % width``
  so that real images with energy only in sampled columns are measured at
  full norm; with the unitary DFT this makes the operator norm exactly 1.
* ``circular_blur``: circular convolution with a fixed kernel, evaluated
  through its DFT symbol.  The same symbol yields the exact operator norm
  and the Gram spectrum used by invertibility checks.

Both operators act on real ``(height, width)`` images.
"""

from __future__ import annotations

import numpy as np

from .config import atomic_open

__all__ = [
    "ForwardModel", "masked_dft", "circular_blur", "identity_model",
    "default_blur_kernel", "complex_to_channels", "channels_to_complex",
    "load_mask", "save_mask",
]


def complex_to_channels(z: np.ndarray) -> np.ndarray:
    """Stack a complex array into two real channels (real first)."""
    z = np.asarray(z)
    return np.stack([z.real.astype(np.float64), z.imag.astype(np.float64)])


def channels_to_complex(c: np.ndarray) -> np.ndarray:
    """Inverse of complex_to_channels."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[0] != 2:
        raise ValueError("expected a leading axis of size 2 (real, imag)")
    return c[0] + 1j * c[1]


class ForwardModel:
    """Measurement operator H with apply, adjoint, and norm facilities."""

    def __init__(self, kind: str, size: tuple[int, int]):
        self.kind = kind
        self.size = (int(size[0]), int(size[1]))

    # subclasses implement apply/adjoint/operator_norm/gram_range

    def _check_image(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.size:
            raise ValueError(
                f"expected image of shape {self.size}, got {x.shape}")
        return x

    def gram_range(self) -> tuple[float, float]:
        """(min, max) eigenvalue of H'H; min > 0 means H'H is invertible."""
        raise NotImplementedError

    @property
    def invertible(self) -> bool:
        return self.gram_range()[0] > 0.0


class _MaskedDFT(ForwardModel):
    def __init__(self, mask_columns, size):
        super().__init__("masked_dft", size)
        width = self.size[1]
        requested = np.unique(np.asarray(mask_columns, dtype=np.int64))
        if requested.size == 0:
            raise ValueError("mask must select at least one column")
        if requested.min() < 0 or requested.max() >= width:
            raise ValueError(f"mask columns must lie in [0, {width})")
        partners = (-requested) % width
        self.mask = np.unique(np.concatenate([requested, partners]))

    def apply(self, x) -> np.ndarray:
        x = self._check_image(x)
        spectrum = np.fft.fft2(x, norm="ortho")
        return complex_to_channels(spectrum[:, self.mask])

    def adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        expected = (2, self.size[0], self.mask.size)
        if y.shape != expected:
            raise ValueError(f"expected measurements of shape {expected}, "
                             f"got {y.shape}")
        full = np.zeros(self.size, dtype=np.complex128)
        full[:, self.mask] = channels_to_complex(y)
        return np.fft.ifft2(full, norm="ortho").real

    def operator_norm(self) -> float:
        return 1.0

    def gram_range(self) -> tuple[float, float]:
        complete = self.mask.size == self.size[1]
        return (1.0 if complete else 0.0, 1.0)


class _CircularBlur(ForwardModel):
    def __init__(self, kernel, size):
        super().__init__("circular_blur", size)
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 2:
            raise ValueError("blur kernel must be 2-D")
        h, w = self.size
        if kernel.shape[0] > h or kernel.shape[1] > w:
            raise ValueError("kernel larger than image")
        self.kernel = kernel
        kh, kw = kernel.shape
        psf = np.zeros(self.size)
        rows = (np.arange(kh) - kh // 2) % h
        cols = (np.arange(kw) - kw // 2) % w
        psf[np.ix_(rows, cols)] = kernel
        # output[i,j] = sum_{a,b} k[a,b] x[(i+a-ch)%h, (j+b-cw)%w] is the
        # cross-correlation with this point-spread function, whose DFT
        # symbol is the conjugate of the psf spectrum.
        self.symbol = np.conj(np.fft.fft2(psf))

    def apply(self, x) -> np.ndarray:
        x = self._check_image(x)
        return np.fft.ifft2(self.symbol * np.fft.fft2(x)).real

    def adjoint(self, y) -> np.ndarray:
        y = self._check_image(y)
        return np.fft.ifft2(np.conj(self.symbol) * np.fft.fft2(y)).real

    def operator_norm(self) -> float:
        return float(np.abs(self.symbol).max())

    def gram_range(self) -> tuple[float, float]:
        mags = np.abs(self.symbol)
        return float(mags.min() ** 2), float(mags.max() ** 2)


def masked_dft(mask_columns, size) -> ForwardModel:
    """Unitary 2-D DFT restricted to the given (symmetrized) columns."""
    return _MaskedDFT(mask_columns, size)


def circular_blur(kernel, size) -> ForwardModel:
    """Circular convolution with a fixed kernel at a fixed image size."""
    return _CircularBlur(kernel, size)


def identity_model(size) -> ForwardModel:
    """H = Id as a degenerate single-tap blur."""
    return _CircularBlur(np.ones((1, 1)), size)


def default_blur_kernel() -> np.ndarray:
    """Diagonally dominant 3x3 blur: 0.7*delta + 0.3*average.

    Its DFT symbol stays within [0.6, 1.0] at every size, so H'H is
    invertible with a comfortable margin.
    """
    kernel = np.full((3, 3), 0.3 / 9.0)
    kernel[1, 1] += 0.7
    return kernel


def load_mask(path: str) -> np.ndarray:
    """Read sampled column indices from a whitespace/newline text file."""
    with open(path) as fh:
        tokens = fh.read().split()
    if not tokens:
        raise ValueError(f"mask file {path!r} lists no columns")
    return np.unique(np.array([int(t) for t in tokens], dtype=np.int64))


def save_mask(path: str, columns) -> None:
    columns = np.unique(np.asarray(columns, dtype=np.int64))
    with atomic_open(path, "w") as fh:
        fh.write("\n".join(str(int(c)) for c in columns) + "\n")
