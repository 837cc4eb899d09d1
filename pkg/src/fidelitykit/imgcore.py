"""Image container, PNG/JPEG I/O, colour conversion, resampling and filters.

All arithmetic runs on float64 samples in ``[0, 1]``; 8-bit values only appear
at the I/O boundary. Every filter uses clamp-to-edge borders.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy import ndimage

PathLike = Union[str, os.PathLike]

# A FloatMap is a plain (H, W) float64 array; kept as an alias for readability.
FloatMap = np.ndarray

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8\xff"


class ImageIOError(Exception):
    """Base class for image read/write failures."""


class ImageNotFoundError(ImageIOError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageIOError):
    pass


class CorruptImageError(ImageIOError):
    pass


class ImageWriteError(ImageIOError, OSError):
    pass


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable raster with ``channels`` in {1, 3}.

    ``data`` is a read-only float64 array of shape (height, width, channels).
    Values normally lie in [0, 1]; out-of-range values are allowed while
    working and are clamped by :meth:`to_uint8`.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) samples, got shape {np.shape(self.data)}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if arr is self.data:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def plane(self, c: int = 0) -> np.ndarray:
        """Return channel ``c`` as a 2-D view."""
        return self.data[:, :, c]

    @classmethod
    def from_uint8(cls, pixels: np.ndarray) -> "Image":
        pixels = np.asarray(pixels)
        if pixels.dtype != np.uint8:
            raise TypeError(f"expected uint8 samples, got {pixels.dtype}")
        return cls(pixels.astype(np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        """8-bit samples, (H, W, C); clamps to [0, 1] and rounds half up."""
        return np.floor(np.clip(self.data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)

    def quantized(self) -> "Image":
        """The image as it would read back after an 8-bit round trip."""
        return Image.from_uint8(self.to_uint8())

    def equals(self, other: "Image") -> bool:
        return self.shape == other.shape and np.array_equal(self.data, other.data)


def check_image(img, *, channels: tuple[int, ...] = (1, 3)) -> Image:
    """Coerce arrays to :class:`Image` and validate the channel count.

    uint8 arrays are rescaled to [0, 1]; float arrays are taken as-is.
    """
    if not isinstance(img, Image):
        arr = np.asarray(img)
        img = Image.from_uint8(arr) if arr.dtype == np.uint8 else Image(arr)
    if img.channels not in channels:
        raise ValueError(f"expected {channels} channel(s), got {img.channels}")
    return img


def load_image(path: PathLike) -> Image:
    """Decode a PNG or JPEG file.

    JPEGs always decode to three channels; grayscale PNGs decode to one.
    Alpha is discarded.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"not found: {path}")
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise ImageIOError(f"unreadable: {path}: {exc}") from exc
    if head.startswith(_PNG_MAGIC):
        fmt = "PNG"
    elif head.startswith(_JPEG_MAGIC):
        fmt = "JPEG"
    else:
        raise UnsupportedFormatError(f"unsupported format (PNG or JPEG required): {path}")

    try:
        with PILImage.open(path) as pil:
            pil.load()
            mode = pil.mode
            if fmt == "JPEG":
                arr = np.asarray(pil.convert("RGB"))
            elif mode in ("L", "LA", "1"):
                arr = np.asarray(pil.convert("L"))
            elif mode in ("I;16", "I;16B", "I;16L", "I"):
                wide = np.asarray(pil, dtype=np.float64)
                return Image(np.clip(wide / 65535.0, 0.0, 1.0))
            else:
                arr = np.asarray(pil.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise CorruptImageError(f"corrupt {fmt} stream: {path}: {exc}") from exc
    return Image.from_uint8(np.ascontiguousarray(arr))


def save_image(img: Image, path: PathLike) -> None:
    """Write ``img`` losslessly as PNG (JPEG if the suffix asks for it)."""
    path = Path(path)
    if not path.parent.is_dir():
        raise ImageWriteError(f"parent directory does not exist: {path.parent}")
    pixels = img.to_uint8()
    pil = PILImage.fromarray(pixels[:, :, 0] if img.channels == 1 else pixels,
                             mode="L" if img.channels == 1 else "RGB")
    fmt = "JPEG" if path.suffix.lower() in (".jpg", ".jpeg") else "PNG"
    try:
        if fmt == "JPEG":
            pil.save(path, format=fmt, quality=95)
        else:
            pil.save(path, format=fmt)
    except OSError as exc:
        raise ImageWriteError(f"cannot write {path}: {exc}") from exc


def to_grayscale(img: Image) -> Image:
    """BT.601 luma. One-channel input is returned unchanged."""
    if img.channels == 1:
        return img
    if img.channels != 3:
        raise ValueError(f"expected 1 or 3 channels, got {img.channels}")
    r, g, b = LUMA_WEIGHTS
    d = img.data
    return Image(r * d[:, :, 0] + g * d[:, :, 1] + b * d[:, :, 2])


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) weights: area average when shrinking, bilinear otherwise."""
    if n_out == n_in:
        return np.eye(n_in)
    w = np.zeros((n_out, n_in))
    if n_out < n_in:
        scale = n_in / n_out
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            j0, j1 = int(math.floor(lo)), min(int(math.ceil(hi)), n_in)
            for j in range(j0, j1):
                overlap = min(hi, j + 1) - max(lo, j)
                if overlap > 0:
                    w[i, j] = overlap
        w /= w.sum(axis=1, keepdims=True)
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        j0 = np.floor(src).astype(int)
        j1 = np.minimum(j0 + 1, n_in - 1)
        frac = src - j0
        rows = np.arange(n_out)
        np.add.at(w, (rows, j0), 1.0 - frac)
        np.add.at(w, (rows, j1), frac)
    return w


def resize(img: Image, target_w: int, target_h: int) -> Image:
    """Resample to exactly ``target_w`` x ``target_h``.

    Each axis is handled separably: area averaging along an axis that shrinks,
    bilinear (half-pixel centres, clamped) along one that grows.
    """
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {target_w}x{target_h}")
    if (target_w, target_h) == (img.width, img.height):
        return img
    wy = _resample_matrix(img.height, target_h)
    wx = _resample_matrix(img.width, target_w)
    out = np.einsum("ij,jkc,lk->ilc", wy, img.data, wx, optimize=True)
    return Image(out)


def rescale(img: Image, factor: float) -> Image:
    """Resize by ``factor`` with dims ``max(1, round(d * factor))``."""
    return resize(img, max(1, int(round(img.width * factor))), max(1, int(round(img.height * factor))))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian with radius ``ceil(3 * sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):
        # tiny sigma: off-centre taps underflow to exactly 0
        k = np.exp(-0.5 * np.square(x / sigma))
    return k / k.sum()


def blur_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian over the first two axes of ``arr``."""
    if sigma == 0:
        return arr
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(arr, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def gaussian_blur(img: Image, sigma: float) -> Image:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    return Image(blur_array(img.data, sigma))


def sobel_magnitude(arr: np.ndarray) -> np.ndarray:
    """Unnormalised 3x3 Sobel magnitude of a 2-D array."""
    smooth = np.array([1.0, 2.0, 1.0])
    deriv = np.array([-1.0, 0.0, 1.0])
    gx = ndimage.correlate1d(ndimage.correlate1d(arr, smooth, axis=0, mode="nearest"),
                             deriv, axis=1, mode="nearest")
    gy = ndimage.correlate1d(ndimage.correlate1d(arr, smooth, axis=1, mode="nearest"),
                             deriv, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def gradient_magnitude(img: Image) -> FloatMap:
    if img.channels != 1:
        raise ValueError("gradient_magnitude needs a 1-channel image")
    return sobel_magnitude(img.plane(0))
