"""Binary weight files and image I/O (PGM/PPM and raw float64).

Weight file layout (all integers little-endian u32)::

    b"FLATW1\\0"  section-count
    repeated: name-length  utf8-name  rank  dims[rank]  float64-LE payload
    crc32 of every section byte

Raw image layout: ``b"FLATI1\\0\\0"``, height, width, then H*W little-endian
float64 grayscale values in [0, 1].
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncationError

WEIGHT_MAGIC = b"FLATW1\x00"
IMAGE_MAGIC = b"FLATI1\x00\x00"


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the destination directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_weights(sections: dict) -> bytes:
    body = bytearray()
    for name, arr in sections.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw_name = name.encode("utf-8")
        body += struct.pack("<I", len(raw_name)) + raw_name
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype("<f8").tobytes(order="C")
    return WEIGHT_MAGIC + struct.pack("<I", len(sections)) + bytes(body) + struct.pack(
        "<I", zlib.crc32(body)
    )


def decode_weights(data: bytes) -> dict:
    n_magic = len(WEIGHT_MAGIC)
    if data[:n_magic] != WEIGHT_MAGIC:
        raise FormatError("bad weight-file magic", 0)
    pos = n_magic

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise TruncationError(f"truncated {what}: need {n} bytes, have {len(data) - pos}", pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "section count"))
    body_start = pos
    sections = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "section name length"))
        name_at = pos
        try:
            name = take(name_len, "section name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("section name is not valid UTF-8", name_at) from None
        (rank,) = struct.unpack("<I", take(4, "section rank"))
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for section {name!r}", pos - 4)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "section dims"))
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(8 * n_values, f"payload of section {name!r}")
        sections[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    body_end = pos
    crc_raw = take(4, "checksum")
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} unexpected trailing bytes", pos)
    (crc,) = struct.unpack("<I", crc_raw)
    if crc != zlib.crc32(data[body_start:body_end]):
        raise FormatError("checksum mismatch", body_end)
    return sections


def write_sections(path, sections: dict) -> None:
    atomic_write(path, encode_weights(sections))


def read_sections(path) -> dict:
    return decode_weights(Path(path).read_bytes())


@dataclass(frozen=True, eq=False)
class Image:
    """Pixels as an (H, W, C) float64 array in [0, 1], C being 1 or 3."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise FormatError(f"image must be HxW, HxWx1 or HxWx3, got {px.shape}", 0)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_gray(self) -> "Image":
        if self.channels == 1:
            return self
        return Image(self.pixels @ np.array([0.299, 0.587, 0.114]))


def _parse_pnm(data: bytes) -> Image:
    kind = data[:2]
    channels = {b"P5": 1, b"P6": 3}.get(kind)
    if channels is None:
        raise FormatError("not a binary PGM/PPM file", 0)
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PNM header", pos)
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise FormatError(f"invalid maxval {maxval}", pos)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * channels * dtype.itemsize
    if len(data) - pos < need:
        raise TruncationError(f"raster needs {need} bytes, file has {len(data) - pos}", pos)
    raster = np.frombuffer(data[pos : pos + need], dtype=dtype).reshape(height, width, channels)
    return Image(raster.astype(np.float64) / maxval)


def _parse_f64(data: bytes) -> Image:
    if data[: len(IMAGE_MAGIC)] != IMAGE_MAGIC:
        raise FormatError("bad raw-image magic", 0)
    if len(data) < 16:
        raise TruncationError("raw-image header is 16 bytes", len(data))
    height, width = struct.unpack("<II", data[8:16])
    need = 8 * height * width
    if len(data) - 16 < need:
        raise TruncationError(f"payload is {len(data) - 16} bytes, header declares {need}", 16)
    if len(data) - 16 > need:
        raise FormatError(f"{len(data) - 16 - need} unexpected trailing bytes", 16 + need)
    return Image(np.frombuffer(data[16:], dtype="<f8").astype(np.float64).reshape(height, width))


def read_image(path) -> Image:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".f64" or data.startswith(IMAGE_MAGIC):
        return _parse_f64(data)
    return _parse_pnm(data)


def encode_image(img: Image, fmt: str = "pnm") -> bytes:
    px = np.clip(img.pixels, 0.0, 1.0)
    if fmt == "f64":
        gray = img.to_gray().pixels[:, :, 0]
        return IMAGE_MAGIC + struct.pack("<II", *gray.shape) + gray.astype("<f8").tobytes()
    kind = b"P5" if img.channels == 1 else b"P6"
    header = kind + f"\n{img.width} {img.height}\n255\n".encode()
    return header + np.round(px * 255.0).astype(np.uint8).tobytes()


def write_image(path, img: Image) -> None:
    fmt = "f64" if str(path).lower().endswith(".f64") else "pnm"
    atomic_write(path, encode_image(img, fmt))
