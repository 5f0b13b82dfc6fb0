"""Conditional encoder-decoder used by both restoration backends."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def step_embedding(t, dim):
    """Sinusoidal embedding of a (fractional) step index, shape N x dim."""
    t = t.float().view(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t * freqs.view(1, -1) * 1000.0
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class _Block(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.LeakyReLU(0.1),
        )


class CondUNet(nn.Module):
    """Three-level UNet; conditioning vectors are broadcast as extra input planes.

    The output head is zero-initialized, so an untrained network returns 0.
    """

    def __init__(self, in_channels, out_channels, cond_dim, base=16, time_dim=0):
        super().__init__()
        self.cond_dim, self.time_dim = cond_dim, time_dim
        cin = in_channels + cond_dim + time_dim
        self.enc1 = _Block(cin, base)
        self.enc2 = _Block(base, 2 * base)
        self.enc3 = _Block(2 * base, 4 * base)
        self.up2 = nn.ConvTranspose2d(4 * base, 2 * base, 2, stride=2)
        self.dec2 = _Block(4 * base, 2 * base)
        self.up1 = nn.ConvTranspose2d(2 * base, base, 2, stride=2)
        self.dec1 = _Block(2 * base, base)
        self.head = nn.Conv2d(base, out_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x, cond, t=None):
        n, _, h, w = x.shape
        planes = [x]
        if self.cond_dim:
            planes.append(cond.view(n, -1, 1, 1).expand(n, self.cond_dim, h, w))
        if self.time_dim:
            planes.append(step_embedding(t, self.time_dim).view(n, -1, 1, 1).expand(n, self.time_dim, h, w))
        z = torch.cat(planes, dim=1)
        ph, pw = (-h) % 4, (-w) % 4
        if ph or pw:
            z = F.pad(z, (0, pw, 0, ph), mode="replicate")
        e1 = self.enc1(z)
        e2 = self.enc2(F.avg_pool2d(e1, 2))
        e3 = self.enc3(F.avg_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)[..., :h, :w]
