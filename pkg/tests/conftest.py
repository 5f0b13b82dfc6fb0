"""Shared fixtures.

``trained`` builds the desk-scale pipeline once per session: the stage-1
ladder, the controller, a joint/cascade pair at one quality index, and a
noise-only regression restorer on the frozen codec.  The
result is cached on disk under a key hashed from the training-side sources
and the desk configuration, so editing any of them forces a retrain.  Set
RPCODEC_TEST_CACHE=0 to always retrain.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

import rpcodec
from rpcodec.codec import (
    CodecBundle,
    EntropyModel,
    analysis,
    compress,
    init_bundle,
    quantize,
)
from rpcodec.controller import Controller, train_controller
from rpcodec.images import synthetic_set
from rpcodec.trainer import (
    JointSystem,
    RunLog,
    TrainConfig,
    controller_dataset,
    load_ladder,
    train_stage1,
    train_stage2,
)

torch.set_num_threads(1)

DESK = {
    "train_images": 512,
    "train_seed": 1000,
    "fixture_seed": 0,
    "stage1": {"stage": 1, "epochs": 47, "patch_size": 32},
    "controller": {"per_class": 1000, "epochs": 15, "seed": 0},
    "stage2": {
        "stage": 2,
        "quality_index": 2,
        "epochs": 30,
        "patch_size": 32,
        "target_bpp": "auto",
        "task_mix": [{"spec": {"kind": "noise"}, "weight": 1.0}, {"spec": {"kind": "mask"}, "weight": 1.0}],
    },
}

# Regression restorer trained on the noise task alone, on the frozen q2 codec.
# Built on demand next to the main build so adding it keeps the cache valid.
DESK_NOISE = {
    "stage": 2,
    "quality_index": 2,
    "epochs": 30,
    "patch_size": 32,
    "task_mix": [{"spec": {"kind": "noise"}, "weight": 1.0}],
}


# Modules that never influence the trained weights.
UNKEYED = ("harness", "bdmetrics.py")


def _source_key():
    h = hashlib.sha256(json.dumps(DESK, sort_keys=True).encode())
    root = Path(rpcodec.__file__).parent
    for p in sorted(root.rglob("*.py")):
        if p.relative_to(root).parts[0] in UNKEYED:
            continue
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    h.update(torch.__version__.encode())
    return h.hexdigest()[:16]


@dataclass
class Trained:
    ladder: list
    stage1_logs: list
    stage1_seconds: float
    controller: Controller
    controller_history: list
    joint: JointSystem
    cascade: JointSystem
    joint_log: tuple
    cascade_log: tuple
    stage2_seconds: float
    fixture: np.ndarray
    noise_only: JointSystem


def _build(root):
    data = synthetic_set(DESK["train_images"], 64, seed=DESK["train_seed"])
    t0 = time.time()
    ladder, _ = train_stage1(TrainConfig(**DESK["stage1"]), data, out_dir=root / "ladder")
    t1 = time.time()
    c = DESK["controller"]
    x, y, ideal = controller_dataset(ladder, data, c["per_class"], seed=c["seed"])
    ctrl, hist = train_controller(x, y, ideal, epochs=c["epochs"], seed=c["seed"], out_dir=root / "controller")
    cfg = TrainConfig(**DESK["stage2"])
    t2 = time.time()
    cascade = train_stage2(cfg, ladder[cfg.quality_index], data, ctrl, joint=False)
    joint = train_stage2(cfg, ladder[cfg.quality_index], data, ctrl, joint=True)
    t3 = time.time()
    joint.save(root / "joint")
    cascade.save(root / "cascade")
    (root / "meta.json").write_text(json.dumps({
        "stage1_seconds": t1 - t0, "stage2_seconds": t3 - t2, "controller_history": hist,
    }))
    (root / "done").write_text("ok")


def _noise_only(root, ladder, controller):
    d = root / ("noise_" + hashlib.sha256(json.dumps(DESK_NOISE, sort_keys=True).encode()).hexdigest()[:12])
    if not (d / "system.json").exists():
        data = synthetic_set(DESK["train_images"], 64, seed=DESK["train_seed"])
        cfg = TrainConfig(**DESK_NOISE)
        train_stage2(cfg, ladder[cfg.quality_index], data, controller, joint=False).save(d)
    return JointSystem.load(d)


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    use_cache = os.environ.get("RPCODEC_TEST_CACHE", "1") != "0"
    base = Path(os.environ.get("RPCODEC_TEST_CACHE_DIR", Path(__file__).parent.parent / ".desk_cache"))
    root = base / _source_key() if use_cache else tmp_path_factory.mktemp("desk")
    if not (root / "done").exists():
        root.mkdir(parents=True, exist_ok=True)
        _build(root)
    meta = json.loads((root / "meta.json").read_text())
    ladder = load_ladder(root / "ladder")
    logs = [RunLog.read_jsonl(root / "ladder" / f"q{b.quality_index}" / "runlog.jsonl") for b in ladder]
    joint = JointSystem.load(root / "joint")
    cascade = JointSystem.load(root / "cascade")
    controller = Controller.load(root / "controller")
    return Trained(
        ladder, logs, meta["stage1_seconds"], controller, meta["controller_history"],
        joint, cascade, RunLog.read_jsonl(root / "joint" / "runlog.jsonl"),
        RunLog.read_jsonl(root / "cascade" / "runlog.jsonl"), meta["stage2_seconds"],
        synthetic_set(10, 64, seed=DESK["fixture_seed"]), _noise_only(root, ladder, controller),
    )


@pytest.fixture(scope="session")
def fixture_images():
    return synthetic_set(10, 64, seed=0)


@pytest.fixture(scope="session")
def fixture_bundle():
    return init_bundle(quality_index=0, seed=0)


@pytest.fixture(scope="session")
def fixture_bpp(fixture_images, fixture_bundle):
    return float(np.mean([compress(x, fixture_bundle)[0].bpp for x in fixture_images]))


@pytest.fixture(scope="session")
def toy_ladder():
    """Six untrained-but-distinct codecs: the latent gain doubles per quality step
    and the entropy tables are fitted to the latent histogram, so bpp grows
    with quality without any training."""
    imgs = synthetic_set(8, 32, seed=7)
    out = []
    for q in range(6):
        b = init_bundle(q, seed=0)
        net = b.net
        with torch.no_grad():
            net.g_a[-1].weight.mul_(4.0 * 2**q)
            net.g_s[0].weight.div_(4.0 * 2**q)
        lat = np.concatenate([quantize(analysis(x, b)).reshape(-1, net.latent) for x in imgs])
        lo, hi = int(lat.min()) - 2, int(lat.max()) + 2
        pmfs = [np.bincount((lat[:, c] - lo).astype(int), minlength=hi - lo + 1) + 0.5 for c in range(net.latent)]
        em = EntropyModel.from_pmfs(pmfs, [lo] * net.latent, [1e-3] * net.latent)
        out.append(CodecBundle(net, q, entropy_model=em))
    return out


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record ``criterion(n, ok, detail)``; the lines are printed in the terminal summary."""

    def record(n, ok, detail=""):
        ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        print(ACCEPTANCE[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
