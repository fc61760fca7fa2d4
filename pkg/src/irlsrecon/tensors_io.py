"""Tensor files, PNG images and image quality metrics.

Tensors are plain ``float64`` numpy arrays. Images are stored channel-first,
``(c, H, W)``, with values in ``[0, 1]``.

The binary ``LTSR`` layout is::

    b"LTSR" | u32 rank | rank * u64 extents | row-major f64 payload

with every integer and float little-endian.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np
import png
from scipy.ndimage import correlate1d

MAGIC = b"LTSR"
_MAX_RANK = 32


class TensorFormatError(ValueError):
    """Raised for malformed tensor files."""


@dataclass(frozen=True)
class ImageMeta:
    bit_depth: int = 8
    channels: int = 1

    def __post_init__(self):
        if self.bit_depth not in (8, 16):
            raise ValueError(f"bit depth must be 8 or 16, got {self.bit_depth}")
        if self.channels not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {self.channels}")

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1


def write_tensor(t, path) -> None:
    arr = np.asarray(t, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise TensorFormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank > _MAX_RANK:
        raise TensorFormatError(f"{path}: rank {rank} exceeds {_MAX_RANK}")
    offset = 8 + 8 * rank
    if len(raw) < offset:
        raise TensorFormatError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", raw, 8)
    count = 1
    for extent in shape:
        count *= extent
        if count * 8 > len(raw):
            raise TensorFormatError(f"{path}: extents {shape} overflow the payload")
    if len(raw) != offset + 8 * count:
        raise TensorFormatError(
            f"{path}: payload has {len(raw) - offset} bytes, expected {8 * count}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    out = data.astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(out)):
        raise TensorFormatError(f"{path}: non-finite values")
    return out


def read_image(path) -> np.ndarray:
    """Read an 8/16-bit grayscale or RGB PNG into a ``(c, H, W)`` array."""
    try:
        width, height, rows, info = png.Reader(filename=os.fspath(path)).asDirect()
        data = np.vstack([np.asarray(r, dtype=np.float64) for r in rows])
    except (OSError, png.Error) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    planes = info["planes"]
    if info.get("alpha") or planes not in (1, 3):
        raise ValueError(f"{path}: unsupported color type ({planes} planes)")
    maxval = (1 << info["bitdepth"]) - 1
    img = data.reshape(height, width, planes).transpose(2, 0, 1)
    return img / maxval


def quantize(t, bit_depth: int = 8) -> np.ndarray:
    """Integer codes for ``t`` after clamping to [0, 1]; rounds half away from zero."""
    maxval = (1 << bit_depth) - 1
    scaled = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0) * maxval
    return np.floor(scaled + 0.5).astype(np.int64)


def write_image(t, path, meta: ImageMeta | None = None) -> None:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 2:
        t = t[None]
    if meta is None:
        meta = ImageMeta(channels=t.shape[0])
    if t.shape[0] != meta.channels:
        raise ValueError(f"tensor has {t.shape[0]} channels, meta says {meta.channels}")
    codes = quantize(t, meta.bit_depth)
    c, h, w = codes.shape
    rows = codes.transpose(1, 2, 0).reshape(h, w * c)
    writer = png.Writer(width=w, height=h, greyscale=(c == 1),
                        bitdepth=meta.bit_depth)
    with open(path, "wb") as fh:
        writer.write(fh, rows.tolist())


def psnr(x, ref, peak: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _valid_blur(img, g):
    pad = (len(g) - 1) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1,
                      mode="constant")
    return out[pad:-pad, pad:-pad]


def ssim(x, ref, peak: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-window SSIM (K1=0.01, K2=0.03), averaged over channels.

    Local statistics use population (biased) variances and only window
    positions that lie fully inside the image.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if x.ndim == 2:
        x, ref = x[None], ref[None]
    if min(x.shape[-2:]) < win_size:
        raise ValueError(f"image {x.shape[-2:]} smaller than the {win_size}x{win_size} window")
    g = _gaussian_window(win_size, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    scores = []
    for a, b in zip(x, ref):
        mu_a = _valid_blur(a, g)
        mu_b = _valid_blur(b, g)
        var_a = _valid_blur(a * a, g) - mu_a ** 2
        var_b = _valid_blur(b * b, g) - mu_b ** 2
        cov = _valid_blur(a * b, g) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
