"""Image tensors (H x W x C float arrays in [0, 1]) and where they come from.

Two sources exist: a procedural generator of synthetic scenes, addressed by
ids like ``synth:17``, and ordinary image files loaded through Pillow.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import ValidationError

DTYPE = np.float32
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def check_image(img, name="image"):
    """Validate an ImageTensor and return it as a float32 array."""
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise ValidationError(f"{name} must be H x W x C, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValidationError(f"{name} has an empty dimension: {arr.shape}")
    arr = arr.astype(DTYPE, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(f"{name} pixels must lie in [0, 1]")
    return arr


def to_tensor(img):
    """H x W x C array (or a stack N x H x W x C) -> N x C x H x W tensor."""
    arr = np.asarray(img, dtype=DTYPE)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_image(t):
    """1 x C x H x W (or C x H x W) tensor -> H x W x C float32 array."""
    t = t.detach()
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValidationError("to_image expects a single image")
        t = t[0]
    return t.permute(1, 2, 0).cpu().numpy().astype(DTYPE)


def array_digest(arr, decimals=None):
    """SHA-256 of an array's shape and contents.

    ``decimals`` rounds first, which makes golden hashes of float outputs
    insensitive to last-bit noise.
    """
    a = np.asarray(arr)
    if decimals is not None:
        a = np.round(a.astype(np.float64), decimals) + 0.0  # folds -0.0 into 0.0
    h = hashlib.sha256()
    h.update(str(a.shape).encode())
    h.update(str(a.dtype).encode())
    h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def synthetic_image(seed, size=64, channels=3):
    """Procedural scene: smooth gradient, textured shapes and soft grain.

    Deterministic in ``seed``; returns ``size x size x channels`` float32.
    """
    rng = np.random.default_rng(seed)
    h = w = int(size)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    corners = rng.uniform(0.1, 0.9, size=(4, channels))
    img = (
        corners[0] * ((1 - yy) * (1 - xx))[..., None]
        + corners[1] * ((1 - yy) * xx)[..., None]
        + corners[2] * (yy * (1 - xx))[..., None]
        + corners[3] * (yy * xx)[..., None]
    )

    for _ in range(rng.integers(3, 8)):
        color = rng.uniform(0.0, 1.0, size=channels)
        cy, cx = rng.uniform(0, 1, size=2)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(0.08, 0.35, size=2)
            ang = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(ang) + dy * np.sin(ang)
            v = -dx * np.sin(ang) + dy * np.cos(ang)
            inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        else:
            hy, hx = rng.uniform(0.05, 0.3, size=2)
            inside = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        if rng.random() < 0.4:
            freq = rng.uniform(4, 14)
            ang = rng.uniform(0, np.pi)
            stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)))
            shade = 0.6 + 0.4 * stripes
        else:
            shade = np.ones_like(yy)
        img = np.where(inside[..., None], color * shade[..., None], img)

    grain = ndimage.gaussian_filter(rng.normal(0, 1, size=(h, w, channels)), sigma=(1.0, 1.0, 0))
    img = img + 0.02 * grain
    return np.clip(img, 0.0, 1.0).astype(DTYPE)


def crop_to(img, size):
    """Center crop (or reflect-pad) an image to ``size x size``."""
    h, w = img.shape[:2]
    if h < size or w < size:
        ph, pw = max(0, size - h), max(0, size - w)
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
        h, w = img.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return img[top : top + size, left : left + size]


def load_image(path):
    """Read an image file as H x W x 3 float32 in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.astype(DTYPE)


def save_image(path, img):
    from PIL import Image

    arr = np.clip(np.round(check_image(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def list_image_files(folder):
    folder = Path(folder)
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def resolve_source(source, size=64):
    """Load an image from a ``synth:<seed>`` id or a file path."""
    source = str(source)
    if source.startswith("synth:"):
        try:
            seed = int(source.split(":", 1)[1])
        except ValueError as exc:
            raise ValidationError(f"bad synthetic source id {source!r}") from exc
        return synthetic_image(seed, size=size)
    return load_image(source)


def synthetic_set(n, size=64, seed=0):
    """``n`` synthetic images stacked as N x H x W x C, seeds ``seed .. seed+n-1``."""
    return np.stack([synthetic_image(seed + i, size=size) for i in range(n)])


def folder_patches(folder, size=64, per_image=4, seed=0):
    """Random ``size`` crops from every image in ``folder``."""
    rng = np.random.default_rng(seed)
    out = []
    for path in list_image_files(folder):
        img = load_image(path)
        h, w = img.shape[:2]
        if h < size or w < size:
            out.append(crop_to(img, size))
            continue
        for _ in range(per_image):
            top = rng.integers(0, h - size + 1)
            left = rng.integers(0, w - size + 1)
            out.append(img[top : top + size, left : left + size])
    if not out:
        return np.zeros((0, size, size, 3), dtype=DTYPE)
    return np.stack(out).astype(DTYPE)
