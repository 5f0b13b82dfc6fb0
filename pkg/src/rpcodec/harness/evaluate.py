"""End-to-end evaluation: compress -> restore -> score, averaged into RP curves."""

from __future__ import annotations

import hashlib
import json
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..bdmetrics import BDResult, RPCurve, bd_quality, bd_rate, read_curves_csv
from ..codec import CodecBundle, compress, decompress
from ..degrade import apply_degradation
from ..errors import (
    ConfigurationError,
    MissingScoreError,
    NoOverlapError,
    NumericalFailureError,
    RPCodecError,
    ValidationError,
)
from ..trainer import JointSystem

REPORT_VERSION = 1


@dataclass
class LearnedSystem:
    """A codec ladder, optionally followed by a controller and restorer per quality.

    ``stages`` maps quality index to ``(bundle, restorer, controller)``;
    restorer and controller may be ``None`` for a codec-only system.
    """

    system_id: str
    stages: dict

    @property
    def qualities(self):
        return sorted(self.stages)

    def process(self, degraded, quality, seed):
        bundle, restorer, controller = self.stages[quality]
        stream, x_hat = compress(degraded, bundle)
        if not np.array_equal(decompress(stream.to_bytes(), bundle), x_hat):
            raise RPCodecError(f"{self.system_id} q{quality}: decode path disagrees with encoder")
        if restorer is None:
            return stream.bpp, x_hat
        return stream.bpp, restorer.restore(x_hat, controller.signal(x_hat), seed=seed)

    def describe(self):
        return {
            "id": self.system_id,
            "type": "learned",
            "qualities": self.qualities,
            "restored": any(r is not None for _, r, _ in self.stages.values()),
        }

    @classmethod
    def from_bundles(cls, system_id, bundles):
        return cls(system_id, {b.quality_index: (b, None, None) for b in bundles})

    @classmethod
    def from_joint(cls, system_id, systems):
        return cls(system_id, {s.codec.quality_index: (s.codec, s.restorer, s.controller) for s in systems})

    @classmethod
    def load(cls, system_id, directory):
        """Directory with ``q<k>`` subfolders, each a codec or a joint checkpoint."""
        d = Path(directory)
        subs = sorted((p for p in d.glob("q*") if p.is_dir()), key=lambda p: int(p.name[1:]))
        stages = {}
        for p in subs:
            if (p / "system.json").exists():
                s = JointSystem.load(p)
                stages[s.codec.quality_index] = (s.codec, s.restorer, s.controller)
            elif (p / "meta.json").exists():
                b = CodecBundle.load(p)
                stages[b.quality_index] = (b, None, None)
        if not stages:
            raise ConfigurationError(f"{d} holds no q<k> codec or joint checkpoints")
        return cls(system_id, stages)


@dataclass
class ExternalSystem:
    """Precomputed RP points (e.g. a reference codec run elsewhere)."""

    system_id: str
    curves: list

    def describe(self):
        return {"id": self.system_id, "type": "external", "curves": len(self.curves)}

    @classmethod
    def from_csv(cls, system_id, path):
        curves = [c for c in read_curves_csv(path) if not system_id or c.codec_id == system_id]
        if not curves:
            raise ConfigurationError(f"{path} has no curves for codec {system_id!r}")
        return cls(system_id, curves)


@dataclass
class EvalReport:
    curves: list = field(default_factory=list)
    bd_tables: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def find(self, codec_id, task_id, metric):
        for c in self.curves:
            if (c.codec_id, c.task_id, c.metric_name) == (codec_id, task_id, metric):
                return c
        return None

    def content(self):
        """Everything but timestamps; the basis of the report hash."""
        prov = {k: v for k, v in self.provenance.items() if k != "timestamps"}
        return {
            "version": REPORT_VERSION,
            "curves": [c.to_dict() for c in self.curves],
            "bd_tables": self.bd_tables,
            "provenance": prov,
            "failures": self.failures,
        }

    def report_hash(self):
        blob = json.dumps(self.content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self):
        d = self.content()
        d["provenance"] = dict(self.provenance)
        d["hash"] = self.report_hash()
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, d):
        return cls(
            [RPCurve.from_dict(c) for c in d.get("curves", [])],
            list(d.get("bd_tables", [])),
            dict(d.get("provenance", {})),
            list(d.get("failures", [])),
        )

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def image_seed(root_seed, quality, image_id):
    """Per-image sampler seed derived from the root seed; independent of worker order."""
    ss = np.random.SeedSequence([int(root_seed), int(quality), zlib.crc32(str(image_id).encode())])
    return int(ss.generate_state(1)[0])


def _load_pairs(manifest, entries):
    pairs, failures = {}, []
    for e in entries:
        try:
            ideal = manifest.load_ideal(e)
            pairs[e.image_id] = (apply_degradation(ideal, e.spec), ideal)
        except (OSError, ValueError, RPCodecError) as exc:
            failures.append({"image_id": e.image_id, "stage": "load", "error": f"{type(exc).__name__}: {exc}"})
    return pairs, failures


def run_eval(manifest, systems, metrics, ladder=None, split="test", root_seed=0, workers=0):
    """Evaluate every system on every task of ``split`` and collect RP curves.

    Per quality point the metric is computed per image and then averaged
    arithmetically over the images of that task; bpp is averaged the same
    way.  Entries whose image cannot be loaded or processed are recorded in
    ``failures`` and skipped.  A missing external score aborts the run with
    :class:`MissingScoreError`.
    """
    if split != "test":
        raise ConfigurationError("run_eval evaluates the test split")
    if not metrics:
        raise ConfigurationError("at least one metric is required")
    entries = manifest.entries(split)
    if not entries:
        raise ConfigurationError(f"manifest {manifest.name} has no {split} entries")
    started = time.time()
    pairs, failures = _load_pairs(manifest, entries)
    tasks = sorted({e.task for e in entries})
    curves = []
    pool = ThreadPoolExecutor(workers) if workers and workers > 1 else None
    try:
        for system in systems:
            if isinstance(system, ExternalSystem):
                curves.extend(system.curves)
                continue
            qualities = [q for q in system.qualities if ladder is None or q in ladder]
            if len(qualities) < 2:
                raise ConfigurationError(f"system {system.system_id} needs at least two quality points")
            for task in tasks:
                task_entries = [e for e in entries if e.task == task and e.image_id in pairs]
                points = {m.name: [] for m in metrics}
                for q in qualities:
                    def job(e, q=q, system=system):
                        degraded, ideal = pairs[e.image_id]
                        try:
                            bpp, out = system.process(degraded, q, image_seed(root_seed, q, e.image_id))
                        except (ValueError, RPCodecError) as exc:
                            return e, None, None, f"{type(exc).__name__}: {exc}"
                        return e, bpp, out, None

                    results = list(pool.map(job, task_entries) if pool else map(job, task_entries))
                    ok = []
                    for e, bpp, out, err in results:
                        if err is not None:
                            failures.append({"image_id": e.image_id, "system": system.system_id,
                                             "quality": q, "stage": "process", "error": err})
                        else:
                            ok.append((e, bpp, out))
                    if not ok:
                        continue
                    mean_bpp = float(np.mean([bpp for _, bpp, _ in ok]))
                    for m in metrics:
                        vals = [
                            m.score(out, pairs[e.image_id][1], (system.system_id, q, e.image_id))
                            for e, _, out in ok
                        ]
                        points[m.name].append((mean_bpp, float(np.mean(vals))))
                for m in metrics:
                    if len(points[m.name]) < 2:
                        continue
                    try:
                        curves.append(RPCurve.from_points(
                            points[m.name], metric_name=m.name, orientation=m.orientation,
                            codec_id=system.system_id, task_id=task,
                        ))
                    except ValidationError as exc:
                        failures.append({"system": system.system_id, "task": task, "metric": m.name,
                                         "stage": "curve", "error": f"ValidationError: {exc}"})
    finally:
        if pool is not None:
            pool.shutdown()
    provenance = {
        "manifest": manifest.name,
        "manifest_hash": config_hash(manifest.to_dict()),
        "config_hash": config_hash({
            "systems": [s.describe() for s in systems],
            "metrics": [m.describe() for m in metrics],
            "ladder": ladder,
            "split": split,
        }),
        "root_seed": int(root_seed),
        "seeds": {"image_seed_rule": "SeedSequence([root_seed, quality, crc32(image_id)])"},
        "averaging": "metric per image, then unweighted arithmetic mean per quality point",
        "systems": [s.describe() for s in systems],
        "metrics": [m.describe() for m in metrics],
        "timestamps": {"started": started, "finished": time.time()},
    }
    return EvalReport(curves, [], provenance, failures)


def _cell(fn, anchor, test, method):
    try:
        return fn(anchor, test, method).to_dict()
    except (NoOverlapError, NumericalFailureError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


def compare(report, anchor_id, method="pchip"):
    """BD-rate and BD-quality of every non-anchor curve against the anchor.

    Rows are keyed by (task, metric, codec).  Each row stores both results
    with their own overlap intervals.  A cell without overlap holds an
    explicit error instead of a number.  The rows are stored on the report
    and returned.
    """
    anchors = {(c.task_id, c.metric_name): c for c in report.curves if c.codec_id == anchor_id}
    if not anchors:
        raise ConfigurationError(f"anchor {anchor_id!r} has no curves in the report")
    rows = []
    for c in sorted(report.curves, key=lambda c: (c.task_id, c.metric_name, c.codec_id)):
        key = (c.task_id, c.metric_name)
        if key not in anchors:
            raise ConfigurationError(f"anchor {anchor_id!r} has no curve for task {key[0]!r}, metric {key[1]!r}")
        a = anchors[key]
        rows.append({
            "task": c.task_id,
            "metric": c.metric_name,
            "codec": c.codec_id,
            "anchor": anchor_id,
            "bd_rate": _cell(bd_rate, a, c, method),
            "bd_quality": _cell(bd_quality, a, c, method),
        })
    report.bd_tables = rows
    return rows


def table_to_json(rows):
    return json.dumps(rows, sort_keys=True)


def table_from_json(text):
    rows = json.loads(text)
    if not isinstance(rows, list):
        raise ValidationError("BD table JSON must be a list of rows")
    return rows


def row_results(row):
    """``(bd_rate, bd_quality)`` of a table row as BDResult objects (or None on error)."""
    out = []
    for k in ("bd_rate", "bd_quality"):
        cell = row[k]
        out.append(None if "error" in cell else BDResult.from_dict(cell))
    return tuple(out)


def import_external_curve(csv_path):
    """Single curve from a bdmetrics-schema CSV; raises if the file holds more than one."""
    curves = read_curves_csv(csv_path)
    if len(curves) != 1:
        raise ValidationError(f"{csv_path} holds {len(curves)} curves; use import_external_curves")
    return curves[0]


def import_external_curves(csv_path):
    return read_curves_csv(csv_path)


__all__ = [
    "EvalReport",
    "ExternalSystem",
    "LearnedSystem",
    "MissingScoreError",
    "compare",
    "import_external_curve",
    "import_external_curves",
    "run_eval",
]
