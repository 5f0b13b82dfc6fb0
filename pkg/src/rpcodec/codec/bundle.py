"""Codec bundles and the numpy-facing compression API.

Latents are ``h x w x c`` arrays, images ``H x W x C``.  A bundle is frozen
once built: its network runs in eval mode without gradients and its entropy
tables are derived from the learned density exactly once.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigurationError, ValidationError
from ..images import check_image, to_image, to_tensor
from .bitstream import Bitstream, decode, encode
from .entropy import EntropyModel
from .model import FactorizedCodec

# Rate weights of the quality ladder, ascending as usually listed.
BETA_LADDER = (0.0002, 0.0008, 0.0018, 0.0035, 0.0130, 0.0350)
NUM_QUALITIES = len(BETA_LADDER)
ALPHABET_RANGE = 64


def beta_for_quality(quality_index):
    """quality 0 is the strongest rate weight (lowest bpp), 5 the weakest."""
    if not 0 <= quality_index < NUM_QUALITIES:
        raise ValidationError(f"quality_index must be in 0..{NUM_QUALITIES - 1}")
    return BETA_LADDER[NUM_QUALITIES - 1 - quality_index]


def quality_for_beta(beta):
    for q in range(NUM_QUALITIES):
        if abs(beta_for_quality(q) - beta) <= 1e-12:
            return q
    raise ValidationError(f"beta {beta} is not on the ladder {BETA_LADDER}")


class CodecBundle:
    """A trained codec at one ladder point: transforms + entropy tables."""

    def __init__(self, net, quality_index, beta=None, entropy_model=None):
        if not 0 <= quality_index < NUM_QUALITIES:
            raise ValidationError(f"quality_index must be in 0..{NUM_QUALITIES - 1}")
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.quality_index = int(quality_index)
        self.beta = float(beta if beta is not None else beta_for_quality(quality_index))
        if entropy_model is None:
            entropy_model = self.net.density.tables(max_range=ALPHABET_RANGE)
        if entropy_model.channels != net.latent:
            raise ConfigurationError("entropy model and network disagree on latent channels")
        if not entropy_model.is_strictly_positive():
            raise ValidationError("bundle entropy model must assign positive mass to every slot")
        self.entropy_model = entropy_model

    @property
    def factor(self):
        return self.net.factor

    def latent_shape(self, h, w):
        f = self.factor
        return (-(-h // f), -(-w // f), self.net.latent)

    def metadata(self):
        return {
            "quality_index": self.quality_index,
            "beta": self.beta,
            "architecture": self.net.dims(),
            "alphabet_bounds": [list(b) for b in self.entropy_model.bounds],
        }

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "meta.json").write_text(json.dumps(self.metadata(), indent=2))
        (d / "entropy.json").write_text(json.dumps(self.entropy_model.to_dict()))
        torch.save(self.net.state_dict(), d / "weights.pt")
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        if not (d / "meta.json").exists():
            raise ConfigurationError(f"{d} is not a codec checkpoint (no meta.json)")
        meta = json.loads((d / "meta.json").read_text())
        net = FactorizedCodec(**meta["architecture"])
        try:
            net.load_state_dict(torch.load(d / "weights.pt", weights_only=True))
        except RuntimeError as exc:
            raise ConfigurationError(f"checkpoint {d} does not match its architecture") from exc
        em = EntropyModel.from_dict(json.loads((d / "entropy.json").read_text()))
        return cls(net, meta["quality_index"], meta["beta"], em)


def quantize(y, mode="eval", rng=None):
    """Round half away from zero (eval) or add U[-0.5, 0.5) noise (train)."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValidationError("latent contains NaN or Inf")
    if mode == "eval":
        return np.sign(y) * np.floor(np.abs(y) + 0.5)
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng()
        return y + rng.uniform(-0.5, 0.5, size=y.shape)
    raise ValidationError(f"quantize mode must be 'train' or 'eval', got {mode!r}")


@torch.no_grad()
def analysis(x, bundle):
    x = check_image(x, "X")
    h, w = x.shape[:2]
    t = bundle.net.pad(to_tensor(x))
    y = bundle.net.g_a(t)
    lat = y[0].permute(1, 2, 0).numpy().astype(np.float32)
    if lat.shape != bundle.latent_shape(h, w):
        raise RuntimeError(f"latent shape {lat.shape} violates the shape rule")
    return lat


@torch.no_grad()
def synthesis(y_hat, bundle, image_hw=None):
    """Decode a latent to pixels, clamp to [0, 1], optionally crop to ``image_hw``."""
    y_hat = np.asarray(y_hat, dtype=np.float32)
    t = torch.from_numpy(np.ascontiguousarray(y_hat.transpose(2, 0, 1)))[None]
    x = bundle.net.g_s(t).clamp(0.0, 1.0)
    if image_hw is not None:
        x = x[..., : image_hw[0], : image_hw[1]]
    return to_image(x)


def compress(x, bundle):
    x = check_image(x, "X")
    y_hat = quantize(analysis(x, bundle), "eval").astype(np.int64)
    stream = encode(y_hat, bundle.entropy_model, bundle.quality_index, x.shape[:2])
    x_hat = synthesis(y_hat, bundle, x.shape[:2])
    return stream, x_hat


def decompress(stream, bundle):
    if not isinstance(stream, Bitstream):
        stream = Bitstream.from_bytes(stream)
    if stream.quality_index != bundle.quality_index:
        raise ConfigurationError(
            f"bitstream quality {stream.quality_index} does not match bundle quality {bundle.quality_index}"
        )
    expected = bundle.latent_shape(*stream.image_hw)
    if tuple(stream.latent_shape) != expected:
        raise ConfigurationError(f"bitstream latent {stream.latent_shape} does not match bundle rule {expected}")
    y_hat = decode(stream, bundle.entropy_model)
    return synthesis(y_hat, bundle, stream.image_hw)


def init_bundle(quality_index=0, seed=0, hidden=32, latent=32, stages=3):
    """Untrained bundle with seeded weights; handy as a fixture."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = FactorizedCodec(hidden, latent, stages)
    return CodecBundle(net, quality_index)


@torch.no_grad()
def reconstruct(x, bundle):
    """Batched X_hat for N x C x H x W tensors without entropy coding.

    Numerically the decode path of :func:`compress`, up to batched-conv
    rounding; meant for building training sets, not for rate measurement.
    """
    h, w = x.shape[-2:]
    y = bundle.net.g_a(bundle.net.pad(x))
    y_hat = torch.sign(y) * torch.floor(y.abs() + 0.5)
    return bundle.net.g_s(y_hat).clamp(0.0, 1.0)[..., :h, :w]
