"""Controller: compressed image -> generalized feature -> (task type, content embedding).

It stands in for a frozen vision-language model and a distortion-robust
image encoder.  A small convolutional encoder turns X_hat into a feature F.
Two linear heads turn F into task logits over ``none`` plus the six
degradations, and a content embedding.  The embedding is trained to
regress a coarse thumbnail of the ideal image, so it carries scene content
to the restorer the way a caption would.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .degrade import KINDS
from .errors import ConfigurationError, TrainingError, ValidationError
from .images import check_image, to_tensor

FEATURE_DIM = 128
THUMB = 2
CONTENT_DIM = THUMB * THUMB * 3


@dataclass(frozen=True)
class Feature:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValidationError("feature contains NaN or Inf")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self):
        return self.vector.shape[0]


@dataclass(frozen=True)
class ControlSignal:
    task_logits: np.ndarray
    content_embedding: np.ndarray
    class_names: tuple = KINDS

    @property
    def probabilities(self):
        z = np.asarray(self.task_logits, dtype=np.float64)
        e = np.exp(z - z.max())
        return e / e.sum()

    @property
    def phi(self):
        """Predicted class index; ``np.argmax`` breaks ties toward the lowest index."""
        return int(np.argmax(self.task_logits))

    @property
    def task(self):
        return self.class_names[self.phi]


def content_target(ideal):
    """Area-averaged THUMB x THUMB thumbnail of NCHW images, flattened to N x CONTENT_DIM."""
    return F.adaptive_avg_pool2d(ideal, THUMB).flatten(1)


class ControllerNet(nn.Module):
    def __init__(self, feature_dim=FEATURE_DIM, num_classes=len(KINDS), content_dim=CONTENT_DIM, width=32):
        super().__init__()
        self.feature_dim, self.num_classes, self.content_dim, self.width = feature_dim, num_classes, content_dim, width
        layers, cin = [], 3
        for cout in (width // 2, width, 2 * width, 2 * width):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.1)]
            cin = cout
        self.encoder = nn.Sequential(*layers)
        # Pixel-level high-pass statistics survive the stride and help
        # separate additive noise from the codec's own smoothing.
        self.proj = nn.Linear(2 * cin + 6, feature_dim)
        self.task_head = nn.Linear(feature_dim, num_classes)
        self.content_head = nn.Linear(feature_dim, content_dim)

    def dims(self):
        return {
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "content_dim": self.content_dim,
            "width": self.width,
        }

    def features(self, x):
        z = self.encoder(2.0 * x - 1.0)
        pooled = torch.cat([z.mean(dim=(2, 3)), z.std(dim=(2, 3), unbiased=False)], dim=1)
        lap = x - F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
        stats = torch.cat([lap.abs().mean(dim=(2, 3)) * 10.0, (x < 0.02).float().mean(dim=(2, 3))], dim=1)
        return self.proj(torch.cat([pooled, stats], dim=1))

    def heads(self, feat):
        return self.task_head(F.leaky_relu(feat, 0.1)), self.content_head(F.leaky_relu(feat, 0.1))

    def forward(self, x):
        return self.heads(self.features(x))


class Controller:
    """Frozen controller used for inference; wraps a :class:`ControllerNet`."""

    def __init__(self, net=None, class_names=KINDS):
        self.net = (net if net is not None else ControllerNet()).eval()
        if len(class_names) != self.net.num_classes:
            raise ConfigurationError("class_names length does not match the task head")
        self.class_names = tuple(class_names)
        for p in self.net.parameters():
            p.requires_grad_(False)

    @property
    def embedding_dim(self):
        return self.net.feature_dim

    @property
    def conditioning_dim(self):
        return self.net.num_classes + self.net.content_dim

    @torch.no_grad()
    def extract_features(self, x_hat):
        x_hat = check_image(x_hat, "X_hat")
        return Feature(self.net.features(to_tensor(x_hat))[0].numpy())

    @torch.no_grad()
    def control(self, feature):
        v = feature.vector if isinstance(feature, Feature) else np.asarray(feature, dtype=np.float32)
        if v.shape != (self.embedding_dim,):
            raise ConfigurationError(f"feature has dimension {v.shape}, controller expects {self.embedding_dim}")
        logits, emb = self.net.heads(torch.from_numpy(v)[None])
        return ControlSignal(logits[0].numpy(), emb[0].numpy(), self.class_names)

    def signal(self, x_hat):
        return self.control(self.extract_features(x_hat))

    @torch.no_grad()
    def conditioning(self, x_hat_batch):
        """Batched conditioning vectors ``[softmax(logits), embedding]`` for NCHW input."""
        logits, emb = self.net(x_hat_batch)
        return torch.cat([torch.softmax(logits, dim=1), emb], dim=1)

    @torch.no_grad()
    def predict(self, x_hat_batch):
        return self.net(x_hat_batch)[0].argmax(dim=1)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"embedding_dim": self.embedding_dim, "class_names": list(self.class_names), "dims": self.net.dims()}
        (d / "meta.json").write_text(json.dumps(meta, indent=2))
        torch.save(self.net.state_dict(), d / "weights.pt")
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        if not (d / "meta.json").exists():
            raise ConfigurationError(f"{d} is not a controller checkpoint (no meta.json)")
        meta = json.loads((d / "meta.json").read_text())
        net = ControllerNet(**meta["dims"])
        try:
            net.load_state_dict(torch.load(d / "weights.pt", weights_only=True))
        except RuntimeError as exc:
            raise ConfigurationError(f"checkpoint {d} does not match its dims") from exc
        return cls(net, meta["class_names"])


def _epoch_loss(net, x, labels, batch_size):
    net.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            logits, _ = net(x[i : i + batch_size])
            ce = F.cross_entropy(logits, labels[i : i + batch_size], reduction="sum")
            total += ce.item()
    return total / len(x)


def train_controller(
    images,
    labels,
    ideals=None,
    epochs=10,
    batch_size=32,
    learning_rate=2e-3,
    seed=0,
    content_weight=10.0,
    out_dir=None,
    class_names=KINDS,
):
    """Fit the controller on labeled compressed images.

    ``images`` and ``ideals`` are N x H x W x C arrays; ``labels`` are class
    indices into ``class_names``.  Returns ``(controller, history)`` where
    ``history[0]`` is the training-set cross-entropy before the first update
    and ``history[k]`` the value after epoch ``k``.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or len(images) == 0:
        raise TrainingError("controller training needs a non-empty N x H x W x C image stack")
    if labels.shape != (len(images),):
        raise TrainingError("one label per image is required")
    if np.any(labels < 0) or np.any(labels >= len(class_names)):
        raise TrainingError("labels must index class_names")
    if len(np.unique(labels)) < 2:
        raise TrainingError("controller training needs at least two classes")
    x = to_tensor(images)
    y = torch.from_numpy(labels)
    target = content_target(to_tensor(ideals if ideals is not None else images))

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ControllerNet(num_classes=len(class_names))
    g = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    history = [_epoch_loss(net, x, y, batch_size)]
    for epoch in range(epochs):
        net.train()
        if epoch == int(0.75 * epochs) and epochs > 1:
            for pg in opt.param_groups:
                pg["lr"] = learning_rate * 0.1
        order = torch.randperm(len(x), generator=g)
        for i in range(0, len(x), batch_size):
            idx = order[i : i + batch_size]
            logits, emb = net(x[idx])
            loss = F.cross_entropy(logits, y[idx]) + content_weight * F.mse_loss(emb, target[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite controller loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append(_epoch_loss(net, x, y, batch_size))
    ctrl = Controller(net, class_names)
    if out_dir is not None:
        ctrl.save(out_dir)
    return ctrl, history


def extract_features(x_hat, controller):
    return controller.extract_features(x_hat)


def control(feature, controller):
    return controller.control(feature)
