"""Dataset manifests: image sources paired with degradation specs, split into train/test."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from ..degrade import DegradationSpec
from ..errors import ConfigurationError, ValidationError
from ..images import resolve_source

SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    source: str
    spec: DegradationSpec

    @property
    def task(self):
        return self.spec.kind

    def to_dict(self):
        return {"image_id": self.image_id, "source": self.source, "spec": self.spec.to_dict()}


class DatasetManifest:
    """Named collection of entries per split.

    Sources are ``synth:<seed>`` ids or image paths (relative paths resolve
    against ``root``).  Paths must exist, image ids must be unique within a
    split, and no source may appear in both splits.
    """

    def __init__(self, name, splits, image_size=64, root=None):
        self.name = str(name)
        self.image_size = int(image_size)
        self.root = Path(root) if root is not None else None
        unknown = set(splits) - set(SPLITS)
        if unknown:
            raise ValidationError(f"unknown split(s) {sorted(unknown)}; expected {SPLITS}")
        self.splits = {s: list(splits.get(s, [])) for s in SPLITS}
        for split, entries in self.splits.items():
            ids = [e.image_id for e in entries]
            dup = {i for i in ids if ids.count(i) > 1}
            if dup:
                raise ValidationError(f"{split} split has duplicate image ids {sorted(dup)}")
            for e in entries:
                if not e.source.startswith("synth:") and not self.path(e.source).exists():
                    raise ValidationError(f"entry {e.image_id}: image {e.source} does not exist")
        shared = {e.source for e in self.splits["train"]} & {e.source for e in self.splits["test"]}
        if shared:
            raise ValidationError(f"train and test splits share sources {sorted(shared)[:5]}")

    def path(self, source):
        p = Path(source)
        return p if p.is_absolute() or self.root is None else self.root / p

    def entries(self, split="test"):
        if split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}")
        return list(self.splits[split])

    def tasks(self, split="test"):
        return sorted({e.task for e in self.splits[split]})

    def load_ideal(self, entry):
        src = entry.source if entry.source.startswith("synth:") else str(self.path(entry.source))
        return resolve_source(src, self.image_size)

    def to_dict(self):
        return {
            "name": self.name,
            "image_size": self.image_size,
            "splits": {s: [e.to_dict() for e in es] for s, es in self.splits.items() if es},
        }

    @classmethod
    def from_dict(cls, d, root=None):
        try:
            splits = {
                s: [ManifestEntry(str(e["image_id"]), str(e["source"]), DegradationSpec.from_dict(e["spec"])) for e in es]
                for s, es in d["splits"].items()
            }
            return cls(d["name"], splits, d.get("image_size", 64), root)
        except KeyError as exc:
            raise ConfigurationError(f"manifest is missing field {exc}") from exc

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), root=path.parent)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
        return path


def synthetic_manifest(name, tasks, per_task, seed=0, image_size=64, train_per_task=0, params=None):
    """Manifest of synthetic scenes, one block of ``per_task`` test images per task.

    Test sources use seeds from ``seed``; train sources follow after all
    test seeds, so the splits never share a scene.
    """
    params = params or {}
    splits = {"test": [], "train": []}
    k = seed
    for split, count in (("test", per_task), ("train", train_per_task)):
        for task in tasks:
            for i in range(count):
                spec = DegradationSpec(task, params.get(task, {}), seed=k)
                splits[split].append(ManifestEntry(f"{task}-{split}-{i:04d}", f"synth:{k}", spec))
                k += 1
    return DatasetManifest(name, splits, image_size)
