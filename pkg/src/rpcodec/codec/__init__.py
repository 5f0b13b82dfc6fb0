"""Toy learned image codec with exact range-coded bitstreams."""

from .bitstream import HEADER_BYTES, Bitstream, decode, encode
from .bundle import (
    BETA_LADDER,
    NUM_QUALITIES,
    CodecBundle,
    analysis,
    beta_for_quality,
    compress,
    decompress,
    init_bundle,
    quality_for_beta,
    quantize,
    reconstruct,
    synthesis,
)
from .entropy import EntropyModel, rate_estimate
from .model import FactorizedCodec, FactorizedDensity, rate_bits

__all__ = [
    "BETA_LADDER",
    "HEADER_BYTES",
    "NUM_QUALITIES",
    "Bitstream",
    "CodecBundle",
    "EntropyModel",
    "FactorizedCodec",
    "FactorizedDensity",
    "analysis",
    "beta_for_quality",
    "compress",
    "decode",
    "decompress",
    "encode",
    "init_bundle",
    "quality_for_beta",
    "quantize",
    "rate_bits",
    "rate_estimate",
    "reconstruct",
    "synthesis",
]
