"""Image metrics, synthetic phantoms, and PGM file I/O.

All images are float64 arrays with values in [0, 1].
"""

from __future__ import annotations

import os
import tempfile

import numpy as np
from scipy import ndimage

PSNR_CAP_DB = 200.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref) -> float:
    """-10 log10(MSE) on [0,1] images, capped at 200 dB."""
    x, ref = _check_pair(x, ref)
    mse = float(np.mean((x - ref) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP_DB / 10.0):
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, -10.0 * np.log10(mse)))


def _ssim_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    coords = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_maps(x, ref):
    """Pointwise luminance/contrast/structure maps (C3 = C2/2)."""
    win = _ssim_window()

    def smooth(img):
        return ndimage.correlate(img, win, mode="reflect")

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    c3 = c2 / 2.0
    mu1, mu2 = smooth(x), smooth(ref)
    var1 = np.maximum(smooth(x * x) - mu1 ** 2, 0.0)
    var2 = np.maximum(smooth(ref * ref) - mu2 ** 2, 0.0)
    cov = smooth(x * ref) - mu1 * mu2
    sd1, sd2 = np.sqrt(var1), np.sqrt(var2)
    luminance = (2.0 * mu1 * mu2 + c1) / (mu1 ** 2 + mu2 ** 2 + c1)
    contrast = (2.0 * sd1 * sd2 + c2) / (var1 + var2 + c2)
    structure = (cov + c3) / (sd1 * sd2 + c3)
    return luminance, contrast, structure


def ssim(x, ref) -> float:
    """Mean structural similarity, 11x11 Gaussian window with sigma 1.5."""
    x, ref = _check_pair(x, ref)
    luminance, contrast, structure = _ssim_maps(x, ref)
    return float(np.mean(luminance * contrast * structure))


def ssim_components(x, ref) -> tuple[float, float, float]:
    """Mean (luminance, contrast, structure) terms of the SSIM map."""
    x, ref = _check_pair(x, ref)
    return tuple(float(np.mean(m)) for m in _ssim_maps(x, ref))


def phantom(size: int, seed: int) -> np.ndarray:
    """Random ellipse-overlay phantom in [0,1], deterministic per seed."""
    if size < 32:
        raise ValueError("phantom size must be at least 32")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    img = np.zeros((size, size))
    # enclosing disk, then additive/subtractive inner ellipses
    n_ellipses = 9
    for k in range(n_ellipses):
        if k == 0:
            cx = cy = 0.5
            ax_, ay_ = 0.42, 0.46
            angle = 0.0
            value = 0.55
        else:
            cx, cy = rng.uniform(0.25, 0.75, size=2)
            ax_, ay_ = rng.uniform(0.05, 0.22, size=2)
            angle = rng.uniform(0.0, np.pi)
            value = rng.uniform(0.12, 0.4) * rng.choice([-1.0, 1.0])
        ca, sa = np.cos(angle), np.sin(angle)
        u = (xx - cx) * ca + (yy - cy) * sa
        v = -(xx - cx) * sa + (yy - cy) * ca
        inside = (u / ax_) ** 2 + (v / ay_) ** 2 <= 1.0
        img[inside] += value
    lo, hi = img.min(), img.max()
    if hi > lo:
        img = (img - lo) / (hi - lo)
    return img


# ---------------------------------------------------------------------------
# PGM I/O (P2 ASCII and P5 binary, 8- or 16-bit, linear to [0,1])


def _header_tokens(data: bytes):
    """Yield (token, end_position) pairs, skipping '#' comments."""
    pos = 0
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            yield data[pos:end], end
            pos = end


def read_pgm(path: str) -> np.ndarray:
    """Read a P2/P5 PGM file; values map linearly onto [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = _header_tokens(data)
    try:
        magic, _ = next(tokens)
        width_tok, _ = next(tokens)
        height_tok, _ = next(tokens)
        maxval_tok, header_end = next(tokens)
    except StopIteration:
        raise ValueError(f"{path!r}: truncated PGM header") from None
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"{path!r}: not a PGM file (magic {magic!r})")
    width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ValueError(f"{path!r}: invalid PGM dimensions or maxval")
    count = width * height
    if magic == b"P2":
        values = np.array([int(tok) for tok, _ in tokens], dtype=np.float64)
        if values.size != count:
            raise ValueError(f"{path!r}: expected {count} samples, "
                             f"got {values.size}")
    else:
        start = header_end + 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[start:start + count * dtype.itemsize]
        if len(raw) != count * dtype.itemsize:
            raise ValueError(f"{path!r}: truncated P5 pixel data")
        values = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    return (values / maxval).reshape(height, width)


def write_pgm(path: str, image, bits: int = 8, binary: bool = True) -> None:
    """Write a [0,1] image as PGM (temp file + atomic rename)."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    maxval = (1 << bits) - 1
    quant = np.round(np.clip(image, 0.0, 1.0) * maxval).astype(np.int64)
    height, width = image.shape
    magic = "P5" if binary else "P2"
    header = f"{magic}\n{width} {height}\n{maxval}\n".encode()
    if binary:
        dtype = np.dtype(">u2") if bits == 16 else np.dtype("u1")
        payload = header + quant.astype(dtype).tobytes()
    else:
        rows = "\n".join(" ".join(str(v) for v in row) for row in quant)
        payload = header + rows.encode() + b"\n"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
