"""Factorized-prior codec network (analysis / synthesis transforms + density)."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy import EntropyModel

LIKELIHOOD_FLOOR = 1e-9


class GDN(nn.Module):
    """Generalized divisive normalization, ``x / sqrt(beta + gamma * x^2)``.

    ``inverse=True`` multiplies instead (IGDN).  beta and gamma are kept
    positive through a squared reparameterization with a small floor.
    """

    def __init__(self, channels, inverse=False, beta_min=1e-6, gamma_init=0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_min = beta_min
        self._pedestal = 2.0**-18
        self.beta = nn.Parameter(torch.sqrt(torch.ones(channels) + self._pedestal))
        self.gamma = nn.Parameter(torch.sqrt(gamma_init * torch.eye(channels) + self._pedestal))

    def forward(self, x):
        beta = self.beta.pow(2) - self._pedestal
        beta = beta.clamp_min(self.beta_min)
        gamma = (self.gamma.pow(2) - self._pedestal).clamp_min(0.0)
        c = x.shape[1]
        norm = F.conv2d(x * x, gamma.view(c, c, 1, 1), beta)
        norm = torch.sqrt(norm)
        return x * norm if self.inverse else x / norm


class FactorizedDensity(nn.Module):
    """Per-channel learned monotone CDF (Balle et al. non-parametric model).

    A tiny channel-wise MLP with positive weights maps a scalar to a logit
    whose sigmoid is non-decreasing in the input.  Likelihoods of integer
    symbols are CDF differences over unit bins.
    """

    def __init__(self, channels, filters=(3, 3, 3), init_scale=10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits(self, x):
        """x: C x 1 x N -> C x 1 x N cumulative logits."""
        for i, m in enumerate(self.matrices):
            x = torch.matmul(F.softplus(m), x) + self.biases[i]
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i]) * torch.tanh(x)
        return x

    def likelihood(self, y):
        """Probability mass of the unit bin around each entry of ``y`` (N x C x H x W)."""
        n, c, h, w = y.shape
        v = y.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.logits(v - 0.5)
        upper = self.logits(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        p = p.clamp_min(LIKELIHOOD_FLOOR)
        return p.reshape(c, n, h, w).permute(1, 0, 2, 3)

    @torch.no_grad()
    def tables(self, max_range=64, tail=1e-6, precision=16):
        """Quantize the learned CDF into an :class:`EntropyModel`.

        Each channel's alphabet is the smallest integer range outside of
        which at most ``tail`` mass lies on either side, capped at
        ``[-max_range, max_range]``; the leftover mass feeds the escape slot.
        """
        grid = torch.arange(-max_range, max_range + 2, dtype=torch.float64) - 0.5
        dtype = self.matrices[0].dtype
        x = grid.to(dtype).view(1, 1, -1).expand(self.channels, 1, -1)
        cdf = torch.sigmoid(self.logits(x)).to(torch.float64)[:, 0, :].numpy()
        cdf = np.maximum.accumulate(np.clip(cdf, 0.0, 1.0), axis=1)
        symbols = np.arange(-max_range, max_range + 1)
        pmfs, offsets, tails = [], [], []
        for c in range(self.channels):
            lower, upper = cdf[c, :-1], cdf[c, 1:]
            ok_lo = np.nonzero(upper > tail)[0]
            ok_hi = np.nonzero(1.0 - lower > tail)[0]
            lo = int(ok_lo[0]) if ok_lo.size else 0
            hi = int(ok_hi[-1]) if ok_hi.size else len(symbols) - 1
            if hi < lo:
                lo = hi = int(np.argmax(upper - lower))
            pmf = upper[lo : hi + 1] - lower[lo : hi + 1]
            pmfs.append(pmf)
            offsets.append(int(symbols[lo]))
            tails.append(max(lower[lo] + (1.0 - upper[hi]), 0.0))
        return EntropyModel.from_pmfs(pmfs, offsets, tails, precision=precision, positive=True)


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, 5, stride=2, padding=2)


def _deconv(cin, cout):
    return nn.ConvTranspose2d(cin, cout, 5, stride=2, padding=2, output_padding=1)


class FactorizedCodec(nn.Module):
    """Stride-2 conv/GDN analysis and deconv/IGDN synthesis, ``stages`` deep."""

    def __init__(self, hidden=32, latent=32, stages=3, in_channels=3):
        super().__init__()
        if stages < 1:
            raise ValueError("stages must be >= 1")
        self.hidden, self.latent, self.stages, self.in_channels = hidden, latent, stages, in_channels
        enc, dec = [], []
        c = in_channels
        for i in range(stages):
            out = latent if i == stages - 1 else hidden
            enc.append(_conv(c, out))
            if i < stages - 1:
                enc.append(GDN(out))
            c = out
        for i in range(stages):
            out = in_channels if i == stages - 1 else hidden
            dec.append(_deconv(c, out))
            if i < stages - 1:
                dec.append(GDN(out, inverse=True))
            c = out
        self.g_a = nn.Sequential(*enc)
        self.g_s = nn.Sequential(*dec)
        self.density = FactorizedDensity(latent)

    @property
    def factor(self):
        return 2**self.stages

    def dims(self):
        return {
            "hidden": self.hidden,
            "latent": self.latent,
            "stages": self.stages,
            "in_channels": self.in_channels,
        }

    def pad(self, x):
        """Replicate-pad N x C x H x W on the bottom/right to a multiple of the factor."""
        f = self.factor
        h, w = x.shape[-2:]
        ph, pw = (-h) % f, (-w) % f
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        return x

    def forward(self, x, generator=None, synthesis="noise"):
        """Training pass with additive uniform noise in place of rounding.

        Returns ``(x_hat, likelihoods, y)``; ``x_hat`` is cropped to the
        input size but not clamped, keeping gradients alive at the bounds.
        ``synthesis="ste"`` decodes the rounded latent with a
        straight-through gradient while the likelihoods still use noise,
        so downstream losses see the reconstruction used at test time.
        """
        h, w = x.shape[-2:]
        y = self.g_a(self.pad(x))
        u = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
        y_tilde = y + u
        if synthesis == "noise":
            y_syn = y_tilde
        elif synthesis == "ste":
            y_syn = y + (torch.sign(y) * torch.floor(y.abs() + 0.5) - y).detach()
        else:
            raise ValueError(f"synthesis must be 'noise' or 'ste', got {synthesis!r}")
        x_hat = self.g_s(y_syn)[..., :h, :w]
        return x_hat, self.density.likelihood(y_tilde), y


def rate_bits(likelihoods):
    """Total bits per batch element from bin likelihoods."""
    return -torch.log2(likelihoods).flatten(1).sum(dim=1)
