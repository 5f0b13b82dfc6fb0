"""Discrete per-channel entropy model used by the range coder.

Channel ``c`` owns symbols ``offset[c] .. offset[c] + K_c - 1`` plus one
escape slot.  A symbol outside the alphabet is sent as the escape slot, a
sign bit and an Elias-gamma style magnitude in raw bits.  ``rate_estimate``
charges exactly the same events, so it tracks the coded length up to the
coder's flush and truncation overhead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, ModelSupportError, ValidationError
from .rangecoder import RangeDecoder, RangeEncoder

PRECISION = 16
LENGTH_BITS = 5  # escape magnitudes up to 2**32 - 1


def escape_bits(v):
    """Raw bits spent on an escaped magnitude ``v >= 0`` (sign included)."""
    n = (int(v) + 1).bit_length()
    return 1 + LENGTH_BITS + (n - 1)


@dataclass
class EntropyModel:
    """Integer frequency tables, one row per latent channel.

    ``freqs[c]`` has ``K_c + 1`` entries (the last is the escape slot) and
    sums to ``2**precision``.  Zero entries are allowed here so degenerate
    models can be expressed; codec bundles require strictly positive tables.
    """

    offsets: list
    freqs: list
    precision: int = PRECISION

    def __post_init__(self):
        if len(self.offsets) != len(self.freqs):
            raise ValidationError("offsets and freqs must have one entry per channel")
        if not 1 <= self.precision <= 16:
            raise ValidationError("precision must be in [1, 16]")
        total = 1 << self.precision
        self.offsets = [int(o) for o in self.offsets]
        self.freqs = [np.asarray(f, dtype=np.int64) for f in self.freqs]
        for c, f in enumerate(self.freqs):
            if f.ndim != 1 or f.size < 2:
                raise ValidationError(f"channel {c}: need at least one symbol plus escape")
            if np.any(f < 0) or int(f.sum()) != total:
                raise ValidationError(f"channel {c}: frequencies must be >= 0 and sum to {total}")
        self._cum = [[0] + np.cumsum(f).tolist() for f in self.freqs]
        self._freq_lists = [f.tolist() for f in self.freqs]

    @property
    def channels(self):
        return len(self.freqs)

    @property
    def bounds(self):
        """Per channel ``(lowest, highest)`` in-alphabet symbol."""
        return [(o, o + f.size - 2) for o, f in zip(self.offsets, self.freqs)]

    def is_strictly_positive(self):
        return all(bool(np.all(f > 0)) for f in self.freqs)

    def cdf(self, c):
        """Normalized CDF of channel ``c`` at slot boundaries, from 0 to 1."""
        return np.asarray(self._cum[c], dtype=np.float64) / (1 << self.precision)

    @classmethod
    def from_pmfs(cls, pmfs, offsets, tails=None, precision=PRECISION, positive=True):
        """Quantize float pmfs (plus tail mass) into frequency tables.

        With ``positive=True`` every slot gets at least frequency 1, which
        keeps any symbol codable.  Rounding error is absorbed by the most
        probable slot.
        """
        total = 1 << precision
        freqs = []
        for c, pmf in enumerate(pmfs):
            pmf = np.clip(np.asarray(pmf, dtype=np.float64), 0.0, None)
            tail = float(tails[c]) if tails is not None else max(0.0, 1.0 - pmf.sum())
            p = np.append(pmf, max(tail, 0.0))
            if p.sum() <= 0:
                raise ValidationError(f"channel {c}: pmf has no mass")
            p = p / p.sum()
            if positive:
                if p.size > total:
                    raise ValidationError("alphabet larger than frequency precision allows")
                f = np.floor(p * (total - p.size)).astype(np.int64) + 1
            else:
                f = np.floor(p * total).astype(np.int64)
            f[int(np.argmax(f))] += total - int(f.sum())
            freqs.append(f)
        return cls(list(offsets), freqs, precision)

    def to_dict(self):
        return {
            "precision": self.precision,
            "offsets": list(self.offsets),
            "freqs": [f.tolist() for f in self.freqs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["offsets"], d["freqs"], d.get("precision", PRECISION))

    def _check_latent(self, symbols):
        sym = np.asarray(symbols)
        if sym.ndim != 3:
            raise ValidationError(f"latent must be h x w x c, got shape {sym.shape}")
        if sym.shape[2] != self.channels:
            raise ConfigurationError(
                f"latent has {sym.shape[2]} channels, entropy model has {self.channels}"
            )
        if not np.issubdtype(sym.dtype, np.integer):
            if not np.all(np.isfinite(sym)) or np.any(sym != np.round(sym)):
                raise ValidationError("latent symbols must be integers")
        return sym.astype(np.int64)


def rate_estimate(symbols, model):
    """Ideal code length in bits: ``-sum log2 p`` plus raw escape bits."""
    sym = model._check_latent(symbols)
    total_bits = 0.0
    log_total = model.precision
    for c in range(model.channels):
        f = model.freqs[c]
        k = f.size - 1
        idx = sym[:, :, c].ravel() - model.offsets[c]
        inside = (idx >= 0) & (idx < k)
        fin = f[idx[inside]]
        if np.any(fin == 0):
            bad = int(idx[inside][fin == 0][0] + model.offsets[c])
            raise ModelSupportError(f"channel {c}: symbol {bad} has zero probability")
        n_out = int((~inside).sum())
        if n_out:
            if f[k] == 0:
                bad = int(idx[~inside][0] + model.offsets[c])
                raise ModelSupportError(
                    f"channel {c}: symbol {bad} is outside the alphabet and the escape slot has no mass"
                )
            over = idx[~inside]
            mags = np.where(over >= k, over - k, -over - 1)
            total_bits += n_out * (log_total - math.log2(int(f[k])))
            total_bits += sum(escape_bits(v) for v in mags.tolist())
        if fin.size:
            total_bits += float(np.sum(log_total - np.log2(fin.astype(np.float64))))
    return max(total_bits, 0.0)


def encode_symbols(symbols, model):
    """Range-code an ``h x w x c`` integer latent, channel-major order."""
    sym = model._check_latent(symbols)
    enc = RangeEncoder()
    prec = model.precision
    for c in range(model.channels):
        cum = model._cum[c]
        freq = model._freq_lists[c]
        k = len(freq) - 1
        off = model.offsets[c]
        for s in sym[:, :, c].ravel().tolist():
            i = s - off
            if 0 <= i < k:
                if freq[i] == 0:
                    raise ModelSupportError(f"channel {c}: symbol {s} has zero probability")
                enc.encode(cum[i], freq[i], prec)
                continue
            if freq[k] == 0:
                raise ModelSupportError(f"channel {c}: symbol {s} needs escape but escape has no mass")
            enc.encode(cum[k], freq[k], prec)
            if i >= k:
                sign, v = 0, i - k
            else:
                sign, v = 1, -i - 1
            n = (v + 1).bit_length()
            enc.encode_bits(sign, 1)
            enc.encode_bits(n - 1, LENGTH_BITS)
            enc.encode_bits((v + 1) & ((1 << (n - 1)) - 1), n - 1)
    return enc.finish()


def decode_symbols(payload, shape, model):
    h, w, c_count = shape
    if c_count != model.channels:
        raise ConfigurationError(f"latent has {c_count} channels, entropy model has {model.channels}")
    out = np.empty((c_count, h * w), dtype=np.int64)
    dec = RangeDecoder(payload)
    prec = model.precision
    for c in range(c_count):
        cum = model._cum[c]
        k = len(model._freq_lists[c]) - 1
        off = model.offsets[c]
        row = out[c]
        for j in range(h * w):
            i = dec.decode(cum, prec)
            if i < k:
                row[j] = off + i
                continue
            sign = dec.decode_bits(1)
            n = dec.decode_bits(LENGTH_BITS) + 1
            v = ((1 << (n - 1)) | dec.decode_bits(n - 1)) - 1
            row[j] = off + k + v if sign == 0 else off - 1 - v
    dec.finish()
    return out.reshape(c_count, h, w).transpose(1, 2, 0)
