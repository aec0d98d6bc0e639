"""
Grayscale raster types and the PGM/PNG codec.

PGM support covers plain (P2) and binary (P5) files with maxval 255 or 65535;
16-bit binary samples are big-endian. 8-bit grayscale PNG is read through pypng.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import png

from .errors import DataIOError, ImageFormatError

_MAXVAL_DEPTH = {255: 8, 65535: 16}


@dataclass(frozen=True)
class GrayImage:
    """Row-major grayscale raster (``pixels`` has shape height x width)."""
    width: int
    height: int
    bit_depth: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.bit_depth not in (8, 16):
            raise ImageFormatError(f"Unsupported bit depth {self.bit_depth}")
        if self.pixels.shape != (self.height, self.width):
            raise ImageFormatError(
                f"Pixel grid {self.pixels.shape} does not match {self.height}x{self.width}")
        if self.pixels.size and int(self.pixels.max()) >= 2 ** self.bit_depth:
            raise ImageFormatError(f"Pixel value exceeds {self.bit_depth}-bit range")

    @classmethod
    def from_array(cls, pixels: np.ndarray, bit_depth: int = 8) -> "GrayImage":
        dtype = np.uint8 if bit_depth == 8 else np.uint16
        arr = np.asarray(pixels)
        if arr.ndim != 2:
            raise ImageFormatError("Grayscale image must be two-dimensional")
        if arr.size and (arr.min() < 0 or arr.max() >= 2 ** bit_depth):
            raise ImageFormatError(f"Pixel value outside {bit_depth}-bit range")
        arr = arr.astype(dtype)
        return cls(width=arr.shape[1], height=arr.shape[0], bit_depth=bit_depth, pixels=arr)

    @property
    def maxval(self) -> int:
        return 2 ** self.bit_depth - 1


@dataclass(frozen=True)
class BoundingBox:
    """Pixel box, half-open on the max edge: columns x0..x1-1, rows y0..y1-1."""
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1 and self.x0 >= 0 and self.y0 >= 0):
            raise ValueError(f"Invalid bounding box {self.as_tuple()}")

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def fits(self, width: int, height: int) -> bool:
        return self.x1 <= width and self.y1 <= height

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        return inter / float(self.area + other.area - inter)


def _tokenize_header(data: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens: List[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ImageFormatError("Truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def decode_pgm(data: bytes) -> GrayImage:
    """Decode a P2 or P5 PGM byte string."""
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ImageFormatError(f"Unknown magic number {magic!r}")
    try:
        tokens, pos = _tokenize_header(data[2:], 3)
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError("Malformed PGM header") from None
    pos += 2
    if maxval not in _MAXVAL_DEPTH:
        raise ImageFormatError(f"Unsupported maxval {maxval}; expected 255 or 65535")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"Invalid dimensions {width}x{height}")
    bit_depth = _MAXVAL_DEPTH[maxval]
    count = width * height

    if magic == b"P5":
        # exactly one whitespace byte separates the header from the payload
        payload = data[pos + 1:]
        sample = 1 if bit_depth == 8 else 2
        if len(payload) != count * sample:
            raise ImageFormatError(
                f"Payload holds {len(payload)} bytes, {width}x{height} needs {count * sample}")
        dtype = np.dtype(np.uint8) if bit_depth == 8 else np.dtype(">u2")
        values = np.frombuffer(payload, dtype=dtype).astype(
            np.uint8 if bit_depth == 8 else np.uint16)
    else:
        try:
            values = np.array([int(tok) for tok in data[pos:].split()], dtype=np.int64)
        except ValueError:
            raise ImageFormatError("Non-integer sample in plain PGM") from None
        if values.size != count:
            raise ImageFormatError(
                f"Payload holds {values.size} samples, {width}x{height} needs {count}")
        if values.size and (values.min() < 0 or values.max() > maxval):
            raise ImageFormatError("Sample exceeds maxval")
        values = values.astype(np.uint8 if bit_depth == 8 else np.uint16)

    return GrayImage(width=width, height=height, bit_depth=bit_depth,
                     pixels=values.reshape(height, width))


def encode_pgm(image: GrayImage) -> bytes:
    """Encode as binary (P5) PGM."""
    header = f"P5\n{image.width} {image.height}\n{image.maxval}\n".encode("ascii")
    dtype = np.uint8 if image.bit_depth == 8 else np.dtype(">u2")
    return header + np.ascontiguousarray(image.pixels, dtype=dtype).tobytes()


def pgm_payload(data: bytes) -> bytes:
    """Raw sample bytes of a P5 file (everything after the header)."""
    _, pos = _tokenize_header(data[2:], 3)
    return data[2 + pos + 1:]


def _load_png(path: Path) -> GrayImage:
    try:
        width, height, rows, info = png.Reader(filename=str(path)).read()
        rows = [np.asarray(row, dtype=np.uint8) for row in rows]
    except png.Error as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    if not info.get("greyscale") or info.get("alpha") or info.get("bitdepth") != 8:
        raise ImageFormatError(f"{path}: only 8-bit grayscale PNG without alpha is supported")
    return GrayImage(width=width, height=height, bit_depth=8, pixels=np.vstack(rows))


def read_image(path: Union[str, Path]) -> GrayImage:
    """Read a PGM or PNG file from disk."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"Cannot read image {path}: {exc}") from exc
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _load_png(path)
    try:
        return decode_pgm(data)
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc


def write_pgm(image: GrayImage, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_pgm(image))
    except OSError as exc:
        raise DataIOError(f"Cannot write image {path}: {exc}") from exc
