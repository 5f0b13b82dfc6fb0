"""Mean-reverting SDE ``dx = theta_t (mu - x) dt + sigma_t dW`` on ``t in [0, 1]``.

The schedules are piecewise constant over ``steps`` equal intervals of
length ``dt = 1 / steps``.  Requiring ``sigma_t^2 / (2 theta_t)`` to be the
same on every interval gives the closed-form marginal

    mean_t = mu + (x0 - mu) exp(-Theta_t)
    var_t  = v_inf (1 - exp(-2 Theta_t)),   Theta_t = sum_{i <= t} theta_i dt

with stationary variance ``v_inf = sigma^2 / (2 theta)``.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from ..errors import NumericalFailureError, ValidationError

DEFAULT_STATIONARY_STD = 10.0 / 255.0
# exp(-2 Theta_T) = 0.01 at the last step.
DEFAULT_THETA_TOTAL = math.log(100.0) / 2.0


def default_schedules(steps, stationary_std=DEFAULT_STATIONARY_STD, theta_total=DEFAULT_THETA_TOTAL):
    """Constant theta (so Theta grows linearly) and the matching sigma."""
    theta = [theta_total] * steps
    sigma = [math.sqrt(2.0 * stationary_std**2 * th) for th in theta]
    return theta, sigma


class MeanRevertingSDE:
    def __init__(self, theta_schedule, sigma_schedule, rtol=1e-6):
        theta = np.asarray(theta_schedule, dtype=np.float64)
        sigma = np.asarray(sigma_schedule, dtype=np.float64)
        if theta.shape != sigma.shape or theta.ndim != 1:
            raise ValidationError("theta and sigma schedules must be 1-D with equal length")
        if np.any(theta <= 0) or np.any(sigma <= 0):
            raise ValidationError("schedule entries must be > 0")
        if theta.size:
            ratio = sigma**2 / (2.0 * theta)
            if np.max(np.abs(ratio - ratio[0])) > rtol * ratio[0]:
                raise ValidationError("sigma^2 / (2 theta) must be constant across steps")
            self.v_inf = float(ratio[0])
        else:
            self.v_inf = 0.0
        self.theta = theta
        self.sigma = sigma
        self.steps = int(theta.size)
        self.dt = 1.0 / self.steps if self.steps else 0.0
        self._cum = np.concatenate([[0.0], np.cumsum(theta * self.dt)])

    def cumulative_theta(self, t):
        """``Theta_t`` for integer step ``t``; accepts scalars or integer arrays."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.steps):
            raise ValidationError(f"step must be in 0..{self.steps}")
        return self._cum[t]

    def marginal_variance(self, t):
        return self.v_inf * (1.0 - np.exp(-2.0 * self.cumulative_theta(t)))

    def forward_marginal(self, x0, mu, t):
        """Mean and variance of ``x_t`` given ``x_0 = x0``."""
        decay = np.exp(-self.cumulative_theta(t))
        mean = mu + (x0 - mu) * decay
        var = self.marginal_variance(t)
        return mean, float(var) if np.ndim(var) == 0 else var

    def simulate_forward(self, x0, mu, t, n_paths, substeps=100, rng=None):
        """Euler-Maruyama paths of the SDE up to step ``t`` (scalar x0, mu).

        Each schedule interval is split into ``substeps`` uniform sub-steps.
        Intended as an independent check on :meth:`forward_marginal`.
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        x = np.full(n_paths, float(x0))
        h = self.dt / substeps
        for i in range(t):
            th, sg = self.theta[i], self.sigma[i]
            for _ in range(substeps):
                x = x + th * (mu - x) * h + sg * math.sqrt(h) * rng.standard_normal(n_paths)
        return x

    # --- torch helpers used by the restorer -------------------------------

    def _tensor(self, values, t, like):
        v = torch.as_tensor(values[t.cpu().numpy()], dtype=like.dtype)
        return v.view(-1, *([1] * (like.dim() - 1)))

    def perturb(self, x0, mu, t, noise):
        """Sample ``x_t`` from the forward marginal with given standard noise."""
        decay = self._tensor(np.exp(-self._cum), t, x0)
        std = self._tensor(np.sqrt(self.v_inf * (1.0 - np.exp(-2.0 * self._cum))), t, x0)
        return mu + (x0 - mu) * decay + std * noise

    def score_from_x0(self, x_t, mu, x0_hat, t):
        """Score of the forward marginal when ``x0`` is replaced by an estimate."""
        decay = self._tensor(np.exp(-self._cum), t, x_t)
        var = self._tensor(self.v_inf * (1.0 - np.exp(-2.0 * self._cum)), t, x_t)
        mean = mu + (x0_hat - mu) * decay
        return -(x_t - mean) / var

    def reverse(self, mu, score_fn, generator, x_start=None):
        """Euler-Maruyama integration of the reverse-time SDE from ``t = 1`` to 0.

        ``score_fn(x_t, t)`` returns the score at integer step ``t`` (a long
        tensor of shape N).  The starting state defaults to a draw from the
        stationary law ``N(mu, v_inf)``.  No noise is injected on the final
        step.
        """
        if self.steps == 0:
            return mu.clone()
        if x_start is None:
            x = mu + math.sqrt(self.v_inf) * torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        else:
            x = x_start.clone()
        n = mu.shape[0]
        for step in range(self.steps, 0, -1):
            t = torch.full((n,), step, dtype=torch.long)
            score = score_fn(x, t)
            th, sg = self.theta[step - 1], self.sigma[step - 1]
            drift = th * (mu - x) - sg**2 * score
            x = x - drift * self.dt
            if step > 1:
                x = x + sg * math.sqrt(self.dt) * torch.randn(x.shape, generator=generator, dtype=x.dtype)
            if not torch.isfinite(x).all():
                raise NumericalFailureError(f"non-finite state at reverse step {step}", step=step)
        return x
