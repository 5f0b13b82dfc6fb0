"""Bitstream container.

Layout, little-endian, 24-byte header followed by the range-coded payload::

    offset  size  field
    0       4     magic b"RPIC"
    4       1     version (1)
    5       1     quality_index
    6       4     image height H
    10      4     image width W
    14      2     latent height h
    16      2     latent width w
    18      2     latent channels c
    20      4     payload length in bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ..errors import BitstreamError, ValidationError
from .entropy import decode_symbols, encode_symbols

MAGIC = b"RPIC"
VERSION = 1
HEADER = struct.Struct("<4sBBIIHHHI")
HEADER_BYTES = HEADER.size


@dataclass(frozen=True)
class Bitstream:
    quality_index: int
    image_hw: tuple
    latent_shape: tuple
    payload: bytes

    def __post_init__(self):
        if not 0 <= self.quality_index <= 255:
            raise ValidationError("quality_index must fit in one byte")
        h, w, c = self.latent_shape
        if max(h, w, c) > 0xFFFF:
            raise ValidationError("latent dimensions must fit in 16 bits")

    @property
    def num_bytes(self):
        return HEADER_BYTES + len(self.payload)

    @property
    def bpp_exact(self):
        """Header plus payload bits over image pixels, as a Fraction."""
        H, W = self.image_hw
        return Fraction(8 * self.num_bytes, H * W)

    @property
    def bpp(self):
        return float(self.bpp_exact)

    def to_bytes(self):
        H, W = self.image_hw
        h, w, c = self.latent_shape
        head = HEADER.pack(MAGIC, VERSION, self.quality_index, H, W, h, w, c, len(self.payload))
        return head + bytes(self.payload)

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        if len(data) < HEADER_BYTES:
            raise BitstreamError(f"bitstream shorter than the {HEADER_BYTES}-byte header")
        magic, version, q, H, W, h, w, c, n = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        if H == 0 or W == 0 or c == 0:
            raise BitstreamError("header declares an empty image or latent")
        payload = data[HEADER_BYTES:]
        if len(payload) < n:
            raise BitstreamError(f"truncated payload: header declares {n} bytes, found {len(payload)}")
        if len(payload) > n:
            raise BitstreamError(f"{len(payload) - n} unexpected bytes after payload")
        return cls(q, (H, W), (h, w, c), payload)


def encode(latent, model, quality_index=0, image_hw=None):
    """Entropy-code an integer ``h x w x c`` latent into a :class:`Bitstream`.

    ``image_hw`` defaults to the latent's spatial size, which is only useful
    for standalone transport tests.
    """
    latent = np.asarray(latent)
    if latent.ndim != 3:
        raise ValidationError(f"latent must be h x w x c, got {latent.shape}")
    shape = tuple(int(s) for s in latent.shape)
    if image_hw is None:
        image_hw = shape[:2]
    payload = encode_symbols(latent, model)
    return Bitstream(int(quality_index), tuple(int(v) for v in image_hw), shape, payload)


def decode(stream, model):
    """Inverse of :func:`encode`; accepts a Bitstream or its serialized bytes."""
    if not isinstance(stream, Bitstream):
        stream = Bitstream.from_bytes(stream)
    return decode_symbols(stream.payload, stream.latent_shape, model)
