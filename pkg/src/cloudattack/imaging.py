"""Floating-point image representation, PNG/JPEG I/O, and per-image statistics.

Images live in [0, 1] as float64 arrays shaped (height, width, channels),
row-major. All attack math happens in float; quantization to 8-bit occurs
only at PNG/JPEG boundaries. The quantization rule is round-half-away-from-
zero (for values in [0, 1] this is ``floor(v * 255 + 0.5)``), chosen for
determinism across platforms.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError


class ImagingError(Exception):
    """Base class for image I/O and shape errors."""


class MalformedPngError(ImagingError):
    """File exists but is not a decodable PNG."""


class UnsupportedDepthError(ImagingError):
    """PNG bit depth or color mode outside 8-bit RGB/grayscale."""


class DimensionMismatchError(ImagingError):
    """Two images that must share dimensions do not."""


class CodecError(ImagingError):
    """JPEG encode/decode failure."""


@dataclass(frozen=True)
class Image:
    """An (H, W, C) float raster with every value in [0, 1], C in {1, 3}."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ImagingError(f"expected (H, W, 1|3) array, got shape {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ImagingError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def same_shape(self, other: "Image") -> bool:
        return self.data.shape == other.data.shape


def quantize_bytes(data: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to uint8 with round-half-away-from-zero."""
    return np.floor(np.asarray(data) * 255.0 + 0.5).astype(np.uint8)


def to_byte_lattice(img: Image) -> Image:
    """Snap an image onto the 8-bit lattice (the values a PNG save would keep)."""
    return Image(quantize_bytes(img.data) / 255.0)


def load_png(path) -> Image:
    """Load an 8-bit PNG as a 3-channel float image.

    Grayscale inputs are promoted to 3 channels by replication so fusion and
    channel effects can assume RGB. 16-bit or palette/alpha modes raise
    UnsupportedDepthError; undecodable files raise MalformedPngError.
    """
    try:
        with PILImage.open(path) as pil:
            if pil.format != "PNG":
                raise MalformedPngError(f"{path}: not a PNG file (format={pil.format})")
            if pil.mode not in ("RGB", "L"):
                raise UnsupportedDepthError(
                    f"{path}: unsupported PNG mode {pil.mode!r}; need 8-bit RGB or grayscale"
                )
            arr = np.asarray(pil, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise MalformedPngError(f"{path}: cannot decode as PNG") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return Image(arr.astype(np.float64) / 255.0)


def save_png(img: Image, path) -> None:
    """Write an 8-bit PNG, quantizing with round-half-away-from-zero."""
    bytes_ = quantize_bytes(img.data)
    if img.channels == 1:
        pil = PILImage.fromarray(bytes_[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(bytes_, mode="RGB")
    pil.save(path, format="PNG")


def mean_color(img: Image) -> np.ndarray:
    """Arithmetic per-channel mean over all pixels."""
    return img.data.reshape(-1, img.channels).mean(axis=0)


def mse(a: Image, b: Image) -> float:
    """Mean squared error with p = pixels x channels (every scalar entry).

    The divisor counts each channel sample separately; this convention is
    recorded in campaign report metadata.
    """
    if not a.same_shape(b):
        raise DimensionMismatchError(f"shape {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    return float(np.mean(diff * diff))


def jpeg_roundtrip(img: Image, quality: int) -> Image:
    """Encode to baseline JPEG at the given quality and decode back.

    The standard lossy-compression defense: re-encoding destroys fine
    perturbation structure. Dimensions are preserved; output stays in [0,1].
    """
    if img.channels != 3:
        raise ImagingError("jpeg_roundtrip requires a 3-channel image")
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"JPEG quality must be in 1..100, got {quality}")
    buf = io.BytesIO()
    try:
        pil = PILImage.fromarray(quantize_bytes(img.data), mode="RGB")
        pil.save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        with PILImage.open(buf) as decoded:
            arr = np.asarray(decoded.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # Pillow raises a zoo of codec errors
        raise CodecError(f"JPEG round-trip failed: {exc}") from exc
    if arr.shape[:2] != img.data.shape[:2]:
        raise CodecError("JPEG round-trip changed image dimensions")
    return Image(arr.astype(np.float64) / 255.0)
