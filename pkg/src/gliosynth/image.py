"""Single-channel 2D rasters, binary masks, and their binary file format.

File layout (extension-agnostic, conventionally ``.img``):

* 8-byte magic ``GLB2DIMG``
* little-endian ``u32`` header length
* UTF-8 JSON header ``{"width", "height", "pixel_spacing_mm", "dtype": "f32le"}``
* row-major little-endian ``float32`` payload (``width * height`` values)

Masks are stored in the same format with pixel values 0.0 / 1.0.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

MAGIC = b"GLB2DIMG"
_DTYPE = "f32le"


@dataclass
class Image2D:
    """Float raster with isotropic pixel spacing in millimetres."""

    pixels: np.ndarray  # (height, width) float64
    pixel_spacing: float = 1.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise InvalidInputError(f"image must be 2D, got shape {self.pixels.shape}")
        if self.pixels.size == 0:
            raise InvalidInputError("image must contain at least one pixel")
        if not np.all(np.isfinite(self.pixels)):
            raise InvalidInputError("image contains non-finite values")
        if not (self.pixel_spacing > 0):
            raise InvalidInputError(f"pixel spacing must be > 0, got {self.pixel_spacing}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray) -> "Image2D":
        """New image with the same spacing and fresh pixel data."""
        return Image2D(pixels=pixels, pixel_spacing=self.pixel_spacing)

    def pixel_area_mm2(self) -> float:
        return self.pixel_spacing ** 2


@dataclass
class BinaryMask:
    """Boolean raster paired with the spacing of the images it annotates."""

    bits: np.ndarray  # (height, width) bool
    pixel_spacing: float = 1.0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise InvalidInputError(f"mask must be 2D, got shape {self.bits.shape}")
        if not (self.pixel_spacing > 0):
            raise InvalidInputError(f"pixel spacing must be > 0, got {self.pixel_spacing}")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())

    def area_mm2(self) -> float:
        return self.count() * self.pixel_spacing ** 2

    def to_image(self) -> Image2D:
        return Image2D(pixels=self.bits.astype(np.float64),
                       pixel_spacing=self.pixel_spacing)

    @classmethod
    def from_image(cls, img: Image2D, threshold: float = 0.5) -> "BinaryMask":
        return cls(bits=img.pixels > threshold, pixel_spacing=img.pixel_spacing)


def write_image(path, img: Image2D) -> None:
    header = {
        "width": img.width,
        "height": img.height,
        "pixel_spacing_mm": img.pixel_spacing,
        "dtype": _DTYPE,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(img.pixels, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_image(path) -> Image2D:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise InvalidInputError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"{path}: corrupt image header: {exc}") from exc
        for key in ("width", "height", "pixel_spacing_mm", "dtype"):
            if key not in header:
                raise InvalidInputError(f"{path}: header missing {key!r}")
        if header["dtype"] != _DTYPE:
            raise InvalidInputError(f"{path}: unsupported dtype {header['dtype']!r}")
        w, h = int(header["width"]), int(header["height"])
        if w <= 0 or h <= 0:
            raise InvalidInputError(f"{path}: bad dimensions {w}x{h}")
        raw = fh.read(4 * w * h)
        if len(raw) != 4 * w * h:
            raise InvalidInputError(f"{path}: truncated payload "
                                    f"({len(raw)} of {4 * w * h} bytes)")
        pixels = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)
    return Image2D(pixels=pixels, pixel_spacing=float(header["pixel_spacing_mm"]))


def write_mask(path, mask: BinaryMask) -> None:
    write_image(path, mask.to_image())


def read_mask(path) -> BinaryMask:
    return BinaryMask.from_image(read_image(path))
