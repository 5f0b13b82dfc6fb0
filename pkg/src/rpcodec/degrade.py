"""Synthetic degradations for the six low-level tasks.

Each :class:`DegradationSpec` fully determines a corruption, including its
random draws, so ``apply_degradation`` is a pure function.  The analytic
models are deliberately simple:

* noise     - i.i.d. Gaussian noise, std ``noise_sigma`` in [0, 1] pixel units
* rain      - sparse seeds smeared along one direction, added to the image
* raindrop  - discs replaced by a blurred, brightened copy with a highlight
* haze      - atmospheric scattering over a fixed synthetic depth map
* shadow    - a soft elliptical region whose luminance is scaled down
* mask      - exactly ``round(mask_ratio * H * W)`` pixels set to 0
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import UnsupportedDegradationError, ValidationError
from .images import DTYPE, check_image

KINDS = ("none", "noise", "rain", "raindrop", "haze", "shadow", "mask")
TASKS = KINDS[1:]

# name -> (default, low, high); ranges are closed.
PARAMS = {
    "none": {},
    "noise": {"noise_sigma": (50.0 / 255.0, 0.0, 1.0)},
    "rain": {
        "rain_density": (0.03, 0.0, 1.0),
        "rain_length": (9.0, 1.0, 64.0),
        "rain_angle": (20.0, -80.0, 80.0),
        "rain_intensity": (0.8, 0.0, 1.0),
    },
    "raindrop": {
        "drop_count": (6.0, 0.0, 256.0),
        "drop_radius": (6.0, 1.0, 64.0),
        "drop_blur": (3.0, 0.0, 16.0),
        "drop_gain": (1.15, 0.5, 2.0),
        "drop_highlight": (0.25, 0.0, 1.0),
    },
    "haze": {
        "haze_beta": (1.5, 0.0, 10.0),
        "airlight": (0.9, 0.0, 1.0),
    },
    "shadow": {
        "shadow_strength": (0.6, 0.0, 1.0),
        "shadow_softness": (2.0, 0.0, 32.0),
    },
    "mask": {
        "mask_ratio": (0.25, 0.0, 1.0),
        "mask_smoothness": (2.0, 0.0, 16.0),
    },
}

MASK_FILL = 0.0
SEED_MAX = 2**64 - 1


@dataclass(frozen=True)
class DegradationSpec:
    """One task's corruption: kind, named scalar parameters and a seed.

    Missing parameters take their defaults; unknown names and out-of-range
    values raise :class:`ValidationError` at construction.
    """

    kind: str = "none"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PARAMS:
            raise UnsupportedDegradationError(f"unsupported degradation kind {self.kind!r}")
        schema = PARAMS[self.kind]
        unknown = set(self.params) - set(schema)
        if unknown:
            raise ValidationError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        full = {}
        for name, (default, lo, hi) in schema.items():
            value = float(self.params.get(name, default))
            if not (lo <= value <= hi) or math.isnan(value):
                raise ValidationError(f"{self.kind}.{name}={value} outside [{lo}, {hi}]")
            full[name] = value
        seed = int(self.seed)
        if not 0 <= seed <= SEED_MAX:
            raise ValidationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, "params", full)
        object.__setattr__(self, "seed", seed)

    @property
    def label(self):
        """Class index in ``KINDS`` (0 is ``none``)."""
        return KINDS.index(self.kind)

    def with_seed(self, seed):
        return DegradationSpec(self.kind, dict(self.params), seed)

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or "kind" not in d:
            raise ValidationError(f"degradation spec must be an object with 'kind', got {d!r}")
        return cls(d["kind"], dict(d.get("params", {})), int(d.get("seed", 0)))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.params.items())), self.seed))

    def __eq__(self, other):
        if not isinstance(other, DegradationSpec):
            return NotImplemented
        return (self.kind, dict(self.params), self.seed) == (other.kind, dict(other.params), other.seed)


@dataclass(frozen=True)
class TrainPair:
    degraded: np.ndarray
    ideal: np.ndarray
    spec: DegradationSpec

    def __post_init__(self):
        if self.degraded.shape != self.ideal.shape:
            raise ValidationError(
                f"degraded {self.degraded.shape} and ideal {self.ideal.shape} differ in shape"
            )


def count_masked(ratio, h, w):
    """Number of masked pixels; ties round half away from zero."""
    return int(math.floor(ratio * h * w + 0.5))


def mask_positions(shape, ratio, smoothness, rng):
    """Boolean H x W mask with exactly ``count_masked`` True entries.

    The top-k pixels of a (optionally smoothed) random priority field are
    taken, so ``smoothness > 0`` yields blob-shaped holes.
    """
    h, w = shape
    k = count_masked(ratio, h, w)
    priority = rng.random((h, w))
    if smoothness > 0:
        priority = ndimage.gaussian_filter(priority, smoothness, mode="wrap")
    order = np.argsort(priority, axis=None, kind="stable")[::-1]
    mask = np.zeros(h * w, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(h, w)


def haze_depth(h, w):
    """Fixed synthetic depth: far at the top, near at the bottom."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    return 0.3 + 0.7 * (1.0 - yy) + 0.1 * np.sin(np.pi * xx)


def _line_kernel(length, angle_deg):
    n = int(round(length))
    size = 2 * (n // 2) + 1
    k = np.zeros((size, size))
    c = size // 2
    a = math.radians(angle_deg)
    # Streaks fall mostly downward; angle tilts them off vertical.
    for s in np.linspace(-(n - 1) / 2, (n - 1) / 2, max(n, 1) * 2):
        y = int(round(c + s * math.cos(a)))
        x = int(round(c + s * math.sin(a)))
        k[y, x] = 1.0
    return k


def _noise(img, p, rng):
    return img + rng.normal(0.0, p["noise_sigma"], size=img.shape)


def _rain(img, p, rng):
    h, w = img.shape[:2]
    seeds = (rng.random((h, w)) < p["rain_density"]) * rng.uniform(0.5, 1.0, size=(h, w))
    streaks = ndimage.convolve(seeds, _line_kernel(p["rain_length"], p["rain_angle"]), mode="wrap")
    streaks = np.minimum(streaks, 1.0) * p["rain_intensity"]
    return img + streaks[..., None]


def _raindrop(img, p, rng):
    h, w = img.shape[:2]
    n = int(round(p["drop_count"]))
    out = img.copy()
    if n == 0:
        return out
    blurred = ndimage.gaussian_filter(img, sigma=(p["drop_blur"], p["drop_blur"], 0), mode="reflect")
    blurred = blurred * p["drop_gain"]
    yy, xx = np.mgrid[0:h, 0:w]
    # Radial profile 1 at a drop's center falling to 0 at its rim; drops
    # refract a blurred, brightened view and carry a specular highlight.
    profile = np.full((h, w), -1.0)
    for _ in range(n):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = p["drop_radius"] * rng.uniform(0.7, 1.3)
        profile = np.maximum(profile, 1.0 - ((yy - cy) ** 2 + (xx - cx) ** 2) / (r * r))
    inside = profile >= 0
    out[inside] = blurred[inside] + p["drop_highlight"] * profile[inside, None] ** 2
    return out


def _haze(img, p, rng):
    h, w = img.shape[:2]
    t = np.exp(-p["haze_beta"] * haze_depth(h, w))[..., None]
    return img * t + p["airlight"] * (1.0 - t)


def _shadow(img, p, rng):
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry, rx = rng.uniform(0.2, 0.45) * h, rng.uniform(0.2, 0.45) * w
    region = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)
    if p["shadow_softness"] > 0:
        region = ndimage.gaussian_filter(region, p["shadow_softness"], mode="nearest")
    return img * (1.0 - p["shadow_strength"] * region)[..., None]


def _mask(img, p, rng):
    mask = mask_positions(img.shape[:2], p["mask_ratio"], p["mask_smoothness"], rng)
    out = img.copy()
    out[mask] = MASK_FILL
    return out


_APPLY = {
    "noise": _noise,
    "rain": _rain,
    "raindrop": _raindrop,
    "haze": _haze,
    "shadow": _shadow,
    "mask": _mask,
}


def apply_degradation(ideal, spec):
    """Corrupt ``ideal`` according to ``spec``; output is clamped to [0, 1]."""
    if not isinstance(spec, DegradationSpec):
        raise ValidationError(f"expected DegradationSpec, got {type(spec).__name__}")
    img = check_image(ideal, "ideal")
    if spec.kind == "none":
        return img.copy()
    rng = np.random.default_rng(spec.seed)
    out = _APPLY[spec.kind](img.astype(np.float64), spec.params, rng)
    return np.clip(out, 0.0, 1.0).astype(DTYPE)


def make_pair(ideal, spec):
    ideal = check_image(ideal, "ideal")
    return TrainPair(apply_degradation(ideal, spec), ideal.copy(), spec)


def sample_spec(templates, weights, rng):
    """Draw one template by weight and give it a fresh seed from ``rng``."""
    if not templates:
        raise ValidationError("task mix is empty")
    w = np.asarray(weights if weights is not None else [1.0] * len(templates), dtype=np.float64)
    if w.shape != (len(templates),) or np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("task-mix weights must be non-negative with a positive sum")
    idx = int(rng.choice(len(templates), p=w / w.sum()))
    return templates[idx].with_seed(int(rng.integers(0, 2**63)))


def default_specs(kinds=KINDS):
    """One default-parameter spec per kind (seed 0)."""
    return [DegradationSpec(k) for k in kinds]
