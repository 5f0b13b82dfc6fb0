"""The enhancement operator: (X_hat, phi, sigma) -> X_hat_H.

Two backends share the conditional UNet of :mod:`.networks`:

* ``regression`` predicts a residual added to X_hat;
* ``mr_sde`` learns a mean-reverting SDE whose drift target is X_hat and
  whose reverse sampler produces the restored image.  The network predicts
  the clean image as an offset from mu, and the score is derived from that
  estimate through the closed-form forward marginal.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ..errors import ConfigurationError, ValidationError
from ..images import check_image, to_image, to_tensor
from .networks import CondUNet
from .sde import MeanRevertingSDE, default_schedules

BACKENDS = ("regression", "mr_sde")
TIME_DIM = 16


@dataclass
class RestorerConfig:
    backend: str = "regression"
    sde_steps: int = 20
    theta_schedule: list = field(default_factory=list)
    sigma_schedule: list = field(default_factory=list)
    conditioning_dim: int = 19
    base_width: int = 16
    channels: int = 3

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"unknown restorer backend {self.backend!r}; expected one of {BACKENDS}")
        if int(self.sde_steps) != self.sde_steps or self.sde_steps < 0:
            raise ValidationError("sde_steps must be a non-negative integer")
        self.sde_steps = int(self.sde_steps)
        if not self.theta_schedule and not self.sigma_schedule:
            theta, sigma = default_schedules(self.sde_steps)
            self.theta_schedule, self.sigma_schedule = list(theta), list(sigma)
        self.theta_schedule = [float(v) for v in self.theta_schedule]
        self.sigma_schedule = [float(v) for v in self.sigma_schedule]
        if len(self.theta_schedule) != self.sde_steps or len(self.sigma_schedule) != self.sde_steps:
            raise ValidationError("theta and sigma schedules must have length sde_steps")
        if any(v <= 0 or not math.isfinite(v) for v in self.theta_schedule + self.sigma_schedule):
            raise ValidationError("schedule entries must be finite and > 0")
        if self.conditioning_dim < 0 or self.base_width < 1:
            raise ValidationError("conditioning_dim must be >= 0 and base_width >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def conditioning_vector(signal):
    """``concat(softmax(task_logits), content_embedding)`` as a 1-D float tensor.

    ``signal`` may be a ControlSignal-like object or an already-built vector.
    """
    if hasattr(signal, "task_logits"):
        logits = torch.as_tensor(np.asarray(signal.task_logits), dtype=torch.float32)
        emb = torch.as_tensor(np.asarray(signal.content_embedding), dtype=torch.float32)
        return torch.cat([torch.softmax(logits, dim=-1), emb.reshape(-1)])
    return torch.as_tensor(np.asarray(signal), dtype=torch.float32).reshape(-1)


class Restorer(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg if cfg is not None else RestorerConfig()
        c = self.cfg.channels
        if self.cfg.backend == "regression":
            self.net = CondUNet(c, c, self.cfg.conditioning_dim, self.cfg.base_width)
            self.sde = None
        else:
            self.net = CondUNet(2 * c, c, self.cfg.conditioning_dim, self.cfg.base_width, time_dim=TIME_DIM)
            self.sde = MeanRevertingSDE(self.cfg.theta_schedule, self.cfg.sigma_schedule)

    @property
    def backend(self):
        return self.cfg.backend

    def _check_cond(self, cond, n):
        if cond.dim() == 1:
            cond = cond.unsqueeze(0).expand(n, -1)
        if cond.shape != (n, self.cfg.conditioning_dim):
            raise ConfigurationError(
                f"conditioning has shape {tuple(cond.shape)}, restorer expects (N, {self.cfg.conditioning_dim})"
            )
        return cond

    # --- regression --------------------------------------------------------

    def forward(self, x_hat, cond):
        """Regression output (unclamped) for batched tensors."""
        if self.backend != "regression":
            raise ConfigurationError("forward() is the regression path; use sample() for mr_sde")
        cond = self._check_cond(cond, x_hat.shape[0])
        return x_hat + self.net(x_hat, cond)

    # --- mean-reverting SDE ------------------------------------------------

    def predict_x0(self, x_t, mu, cond, t):
        frac = t.float() / max(self.sde.steps, 1)
        return mu + self.net(torch.cat([x_t, mu], dim=1), cond, frac)

    def score(self, x_t, mu, cond, t):
        return self.sde.score_from_x0(x_t, mu, self.predict_x0(x_t, mu, cond, t), t)

    def sample(self, mu, cond, generator, x_start=None):
        """Reverse-SDE restoration of a batch (unclamped)."""
        if self.backend != "mr_sde":
            raise ConfigurationError("sample() requires the mr_sde backend")
        cond = self._check_cond(cond, mu.shape[0])
        return self.sde.reverse(mu, lambda x, t: self.score(x, mu, cond, t), generator, x_start)

    def training_pair(self, x_hat, x_ideal, cond, generator=None):
        """``(prediction, target)`` whose MSE is the task loss for this backend.

        regression: (restored image, ideal image).  mr_sde: a random step per
        sample, ``x_t`` drawn from the forward marginal started at the ideal
        image with mean-reversion target ``x_hat``; the pair is (implied
        noise, true noise).
        """
        cond = self._check_cond(cond, x_hat.shape[0])
        if self.backend == "regression":
            return x_hat + self.net(x_hat, cond), x_ideal
        n = x_hat.shape[0]
        if self.sde.steps == 0:
            return x_hat, x_ideal
        t = torch.randint(1, self.sde.steps + 1, (n,), generator=generator)
        eps = torch.randn(x_ideal.shape, generator=generator, dtype=x_ideal.dtype)
        return self.mr_sde_pair(x_hat, x_ideal, cond, t, eps)

    def mr_sde_pair(self, mu, x0, cond, t, eps):
        x_t = self.sde.perturb(x0, mu, t, eps)
        x0_hat = self.predict_x0(x_t, mu, cond, t)
        decay = self.sde._tensor(np.exp(-self.sde._cum), t, x0)
        std = self.sde._tensor(np.sqrt(self.sde.v_inf * (1.0 - np.exp(-2.0 * self.sde._cum))), t, x0)
        eps_hat = (x_t - (mu + (x0_hat - mu) * decay)) / std
        return eps_hat, eps

    # --- numpy inference ---------------------------------------------------

    @torch.no_grad()
    def restore_batch(self, x_hat, cond, seed=0):
        """Batched restoration of NCHW tensors, clamped to [0, 1]."""
        if self.backend == "regression":
            out = self.forward(x_hat, cond)
        else:
            g = torch.Generator().manual_seed(int(seed))
            out = self.sample(x_hat, cond, g)
        return out.clamp(0.0, 1.0)

    def restore(self, x_hat, signal, seed=0):
        x_hat = check_image(x_hat, "X_hat")
        if x_hat.shape[2] != self.cfg.channels:
            raise ValidationError(f"restorer expects {self.cfg.channels} channels")
        cond = conditioning_vector(signal)
        was_training = self.training
        self.eval()
        try:
            out = self.restore_batch(to_tensor(x_hat), cond, seed)
        finally:
            self.train(was_training)
        return to_image(out)

    # --- persistence -------------------------------------------------------

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "backend": self.cfg.backend,
            "schedules": {"theta": self.cfg.theta_schedule, "sigma": self.cfg.sigma_schedule},
            "dims": {
                "sde_steps": self.cfg.sde_steps,
                "conditioning_dim": self.cfg.conditioning_dim,
                "base_width": self.cfg.base_width,
                "channels": self.cfg.channels,
            },
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2))
        torch.save(self.state_dict(), d / "weights.pt")
        return d

    @classmethod
    def load(cls, directory, backend=None):
        d = Path(directory)
        if not (d / "meta.json").exists():
            raise ConfigurationError(f"{d} is not a restorer checkpoint (no meta.json)")
        meta = json.loads((d / "meta.json").read_text())
        if backend is not None and meta["backend"] != backend:
            raise ConfigurationError(f"checkpoint backend {meta['backend']!r} does not match requested {backend!r}")
        cfg = RestorerConfig(
            backend=meta["backend"],
            theta_schedule=meta["schedules"]["theta"],
            sigma_schedule=meta["schedules"]["sigma"],
            **meta["dims"],
        )
        model = cls(cfg)
        try:
            model.load_state_dict(torch.load(d / "weights.pt", weights_only=True))
        except RuntimeError as exc:
            raise ConfigurationError(f"checkpoint {d} does not match its dims") from exc
        return model


def restore(x_hat, signal, restorer, seed=0):
    return restorer.restore(x_hat, signal, seed)


def sde_forward_marginal(x0, mu, t, cfg):
    sde = MeanRevertingSDE(cfg.theta_schedule, cfg.sigma_schedule)
    return sde.forward_marginal(np.asarray(x0, dtype=np.float64), np.asarray(mu, dtype=np.float64), t)


def sde_reverse_sample(mu, score_fn, cfg, seed=0, x_start=None):
    """Reverse-sample from ``N(mu, v_inf)`` with an arbitrary score; clamped.

    ``mu`` is a tensor (any shape with a leading batch axis) and
    ``score_fn(x_t, t)`` returns a tensor of the same shape.
    """
    sde = MeanRevertingSDE(cfg.theta_schedule, cfg.sigma_schedule)
    g = torch.Generator().manual_seed(int(seed))
    return sde.reverse(mu, score_fn, g, x_start).clamp(0.0, 1.0)


def task_loss(prediction, target, cfg=None):
    """Mean squared error between prediction and target.

    For regression these are (X_hat_H, X_ideal); for mr_sde they are the
    implied and true forward noise from :meth:`Restorer.training_pair`, so
    the same formula is the per-step score-matching objective.
    """
    if prediction.shape != target.shape:
        raise ValidationError(f"task_loss shape mismatch {tuple(prediction.shape)} vs {tuple(target.shape)}")
    return torch.mean((prediction - target) ** 2)
