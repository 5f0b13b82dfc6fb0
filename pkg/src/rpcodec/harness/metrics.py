"""Quality metrics used to score restored images.

Full-reference metrics see ``(restored, ideal)``, no-reference metrics see
only the restored image, and external-score metrics look up precomputed
values (e.g. from LPIPS or an IQA model run elsewhere) by image key.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError, MissingScoreError, ValidationError

KINDS = ("full_reference", "no_reference", "external_scores")
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_SIGMA = 1.5
MIN_SCALE_SIDE = 8


def mse(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak=1.0, cap=100.0):
    """PSNR in dB, capped at ``cap`` for identical images."""
    m = mse(a, b)
    if m == 0:
        return cap
    return float(min(cap, 10.0 * math.log10(peak**2 / m)))


def _ssim_terms(x, y, c1, c2):
    blur = lambda z: ndimage.gaussian_filter(z, SSIM_SIGMA, mode="reflect", truncate=3.5)  # noqa: E731
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ms_ssim(a, b, peak=1.0):
    """Multi-scale SSIM on H x W x C images, averaged over channels.

    Uses the standard five-scale weights, truncated to the scales whose
    shorter side is at least MIN_SCALE_SIDE pixels and renormalized.
    Gaussian filtering uses reflected borders, so no scale is cropped.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValidationError(f"ms_ssim expects equal H x W x C images, got {a.shape} and {b.shape}")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    side = min(a.shape[:2])
    levels = 1
    while levels < len(MS_SSIM_WEIGHTS) and side // 2 ** levels >= MIN_SCALE_SIDE:
        levels += 1
    w = np.asarray(MS_SSIM_WEIGHTS[:levels])
    w = w / w.sum()
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        vals = []
        for lvl in range(levels):
            ssim, cs = _ssim_terms(x, y, c1, c2)
            vals.append(max(ssim if lvl == levels - 1 else cs, 0.0))
            if lvl < levels - 1:
                x = _halve(x)
                y = _halve(y)
        scores.append(float(np.prod(np.asarray(vals) ** w)))
    return float(np.mean(scores))


def _halve(z):
    h, w = (z.shape[0] // 2) * 2, (z.shape[1] // 2) * 2
    z = z[:h, :w]
    return 0.25 * (z[0::2, 0::2] + z[1::2, 0::2] + z[0::2, 1::2] + z[1::2, 1::2])


@dataclass
class MetricPlugin:
    """A named metric with an orientation and one of three calling conventions."""

    name: str
    orientation: str
    kind: str
    fn: object = None
    scores: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.orientation not in ("higher_better", "lower_better"):
            raise ConfigurationError(f"metric {self.name}: bad orientation {self.orientation!r}")
        if self.kind not in KINDS:
            raise ConfigurationError(f"metric {self.name}: kind must be one of {KINDS}")
        if self.kind != "external_scores" and self.fn is None:
            raise ConfigurationError(f"metric {self.name}: {self.kind} metric needs a function")

    def score(self, restored=None, ideal=None, key=None):
        if self.kind == "full_reference":
            if restored is None or ideal is None:
                raise ValidationError(f"metric {self.name} needs both restored and ideal images")
            return float(self.fn(restored, ideal))
        if self.kind == "no_reference":
            if restored is None:
                raise ValidationError(f"metric {self.name} needs the restored image")
            return float(self.fn(restored))
        system, quality, image_id = key
        for k in (f"{system}/{quality}/{image_id}", str(image_id)):
            if k in self.scores:
                return float(self.scores[k])
        raise MissingScoreError(f"metric {self.name}: no score for key '{system}/{quality}/{image_id}' or '{image_id}'")

    def describe(self):
        return {"name": self.name, "orientation": self.orientation, "kind": self.kind}


def builtin_metrics():
    return {
        "mse": MetricPlugin("mse", "lower_better", "full_reference", mse),
        "psnr": MetricPlugin("psnr", "higher_better", "full_reference", psnr),
        "ms_ssim": MetricPlugin("ms_ssim", "higher_better", "full_reference", ms_ssim),
    }


def get_metrics(names):
    table = builtin_metrics()
    out = []
    for n in names:
        if n not in table:
            raise ConfigurationError(f"unknown metric {n!r}; built-ins are {sorted(table)}")
        out.append(table[n])
    return out


def load_scores(path):
    """Score file as a ``{key: value}`` dict; JSON object or CSV with ``key,score`` columns."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text())
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: score file must be a JSON object")
        return {str(k): float(v) for k, v in data.items()}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"key", "score"} <= set(reader.fieldnames):
            raise ConfigurationError(f"{path}: score CSV needs 'key' and 'score' columns")
        return {row["key"]: float(row["score"]) for row in reader}


def external_metric(name, orientation, scores):
    if not isinstance(scores, dict):
        scores = load_scores(scores)
    return MetricPlugin(name, orientation, "external_scores", scores=scores)
