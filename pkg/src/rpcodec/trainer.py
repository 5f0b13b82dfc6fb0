"""Two-stage training for the total loss ``alpha*L_dist + beta*L_r + gamma*L_task``.

Stage 1 fits the codec alone (one run per ladder point).  Stage 2 starts
from a stage-1 codec and optimizes codec and restorer together on
synthetic degradation pairs.  The frozen-codec cascade it is judged
against comes from the same loop with the codec held fixed.
"""

from __future__ import annotations

import copy
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import NUM_QUALITIES, CodecBundle, beta_for_quality, reconstruct
from .codec.model import FactorizedCodec, rate_bits
from .controller import Controller
from .degrade import KINDS, DegradationSpec, apply_degradation, default_specs, sample_spec
from .errors import ConfigurationError, TrainingError, ValidationError
from .restorer import Restorer, RestorerConfig, task_loss

LAMBDA_NOTE = "the rate-perception trade-off weight lambda is realized by beta; no separate weight exists"


@dataclass
class TrainConfig:
    stage: int = 1
    alpha: float = 1.0
    beta: float | None = None
    gamma: float | None = None
    lambda_note: str = LAMBDA_NOTE
    epochs: int = 10
    batch_size: int = 16
    patch_size: int = 64
    optimizer: dict = field(default_factory=lambda: {"name": "adam", "learning_rate": 1e-3, "seed": 0})
    quality_index: int = 0
    ladder: list = field(default_factory=lambda: list(range(NUM_QUALITIES)))
    task_mix: list = field(default_factory=list)
    lr_decay_at: float = 0.8
    codec_lr_scale: float = 0.1
    unfreeze_controller: bool = False
    target_bpp: float | str | None = None
    rate_control_gain: float = 0.05
    rate_control: str = "per_task"
    stage2_synthesis: str = "ste"
    restorer: dict = field(default_factory=dict)
    codec_arch: dict = field(default_factory=lambda: {"hidden": 32, "latent": 32, "stages": 3})
    override_stage1_weights: bool = False
    workers: int = 0
    overrides: list = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage!r}")
        for name in ("epochs", "batch_size", "patch_size"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.gamma is None:
            self.gamma = 0.0 if self.stage == 1 else 1.0
        if self.beta is None:
            self.beta = beta_for_quality(self.quality_index)
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be non-negative")
        if self.stage == 1 and (self.alpha != 1.0 or self.gamma != 0.0):
            if self.override_stage1_weights:
                note = f"stage-1 weights overridden by config: alpha={self.alpha}, gamma={self.gamma}"
            else:
                note = f"stage 1 forces alpha=1, gamma=0 (config had alpha={self.alpha}, gamma={self.gamma})"
                self.alpha, self.gamma = 1.0, 0.0
            if note not in self.overrides:
                self.overrides.append(note)
        opt = {"name": "adam", "learning_rate": 1e-3, "seed": 0}
        opt.update(self.optimizer)
        if opt["name"] not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {opt['name']!r}")
        self.optimizer = opt
        if self.stage2_synthesis not in ("noise", "ste"):
            raise ConfigurationError("stage2_synthesis must be 'noise' or 'ste'")
        if self.rate_control not in ("per_task", "global"):
            raise ConfigurationError("rate_control must be 'per_task' or 'global'")
        if not (isinstance(self.target_bpp, (int, float)) or self.target_bpp in (None, "auto")):
            raise ConfigurationError("target_bpp must be a number, 'auto' or null")

    @property
    def seed(self):
        return int(self.optimizer["seed"])

    def specs(self):
        """Task-mix templates and their weights (defaults: the six tasks, equal weight)."""
        if not self.task_mix:
            return default_specs()[1:], None
        templates, weights = [], []
        for item in self.task_mix:
            spec = item["spec"] if "spec" in item else item
            templates.append(spec if isinstance(spec, DegradationSpec) else DegradationSpec.from_dict(spec))
            weights.append(float(item.get("weight", 1.0)))
        return templates, weights

    def to_dict(self):
        d = asdict(self)
        d["task_mix"] = [
            {"spec": item["spec"].to_dict() if isinstance(item.get("spec"), DegradationSpec) else item.get("spec", item),
             "weight": item.get("weight", 1.0)}
            for item in self.task_mix
        ]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
        return cls.from_dict(data)


class RunLog:
    """Per-step loss records plus an immutable config snapshot."""

    def __init__(self, cfg, seed, extra=None):
        self._config = json.dumps(cfg.to_dict(), sort_keys=True)
        self.seed = int(seed)
        self.extra = dict(extra or {})
        self.records = []
        self.started = time.time()
        self.finished = None

    @property
    def config(self):
        return json.loads(self._config)

    def record(self, step, **values):
        for k, v in values.items():
            if not math.isfinite(v):
                raise TrainingError(f"non-finite {k} at step {step}")
        self.records.append({"step": int(step), **{k: float(v) for k, v in values.items()}})

    def finish(self):
        self.finished = time.time()

    @property
    def wall_clock(self):
        end = self.finished if self.finished is not None else time.time()
        return end - self.started

    def losses(self, key="total"):
        return [r[key] for r in self.records]

    def loss_sequence(self):
        """Everything except timing; equal across reproducible runs."""
        return [tuple(sorted(r.items())) for r in self.records]

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            head = {"type": "config", "config": self.config, "seed": self.seed, **self.extra}
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps({"type": "step", **r}, sort_keys=True) + "\n")
            fh.write(json.dumps({"type": "summary", "wall_clock_s": self.wall_clock, "steps": len(self.records)}) + "\n")
        return path

    @staticmethod
    def read_jsonl(path):
        lines = [json.loads(s) for s in Path(path).read_text().splitlines() if s.strip()]
        return lines[0], [r for r in lines if r.get("type") == "step"], lines[-1]


def _weights(cfg):
    if isinstance(cfg, dict):
        return cfg.get("alpha", 1.0), cfg.get("beta", 0.0), cfg.get("gamma", 0.0)
    return cfg.alpha, cfg.beta, cfg.gamma


def compute_total_loss(x, x_hat, rate, pred, target, cfg, beta=None):
    """Total loss and its components.

    ``rate`` holds bits per batch element; L_r is bits per pixel over the
    batch.  ``pred``/``target`` feed the restorer's task loss and may be
    ``None`` when gamma is 0.  ``beta`` overrides the configured rate weight.
    It may also be a per-sample weight vector (per-task rate control).
    The returned ``beta`` component is then the effective scalar weight
    with ``total == alpha*L_dist + beta*L_r + gamma*L_task``.
    """
    alpha, b, gamma = _weights(cfg)
    if beta is not None:
        b = beta
    b = torch.as_tensor(b, dtype=x.dtype)
    if alpha < 0 or gamma < 0 or bool((b < 0).any()):
        raise ValidationError("loss weights must be non-negative")
    if x.shape != x_hat.shape:
        raise ValidationError(f"X and X_hat shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    n, _, h, w = x.shape
    rate = rate.reshape(-1)
    l_dist = torch.mean((x - x_hat) ** 2)
    l_r = torch.sum(rate) / (n * h * w)
    if b.dim() == 0:
        b_eff = b
        rate_term = b * l_r
    else:
        if b.shape != rate.shape:
            raise ValidationError("per-sample beta must have one weight per batch element")
        rate_term = torch.sum(b * rate) / (n * h * w)
        b_eff = (rate_term / l_r).detach() if l_r.item() > 0 else b.mean()
    if pred is None:
        if gamma != 0:
            raise ValidationError("gamma > 0 requires a restorer prediction")
        l_task = torch.zeros((), dtype=x.dtype)
    else:
        l_task = task_loss(pred, target)
    total = alpha * l_dist + rate_term + gamma * l_task
    return total, {"L_dist": l_dist, "L_r": l_r, "L_task": l_task, "beta": b_eff}


def _as_dataset(dataset):
    if dataset is None:
        raise ConfigurationError("dataset is empty")
    arr = np.asarray(dataset, dtype=np.float32)
    if arr.size == 0 or len(arr) == 0:
        raise ConfigurationError("dataset is empty")
    if arr.ndim != 4:
        raise ConfigurationError(f"dataset must be N x H x W x C, got {arr.shape}")
    return arr


def _crops(data, idx, patch, gen):
    """Random ``patch`` crops (one offset per sample) as an N x H x W x C array."""
    _, h, w, _ = data.shape
    if patch > h or patch > w:
        raise ConfigurationError(f"patch_size {patch} exceeds image size {h}x{w}")
    oy = torch.randint(0, h - patch + 1, (len(idx),), generator=gen).tolist()
    ox = torch.randint(0, w - patch + 1, (len(idx),), generator=gen).tolist()
    return np.stack([data[i, y : y + patch, x : x + patch] for i, y, x in zip(idx.tolist(), oy, ox)])


def _make_optimizer(name, groups):
    if name == "sgd":
        return torch.optim.SGD(groups, momentum=0.9)
    return torch.optim.Adam(groups)


def _schedule(opt, step, total, decay_at):
    if step == int(decay_at * total):
        for pg in opt.param_groups:
            pg["lr"] *= 0.1


def _steps(n, cfg):
    per_epoch = -(-n // cfg.batch_size)
    return per_epoch, per_epoch * cfg.epochs


def _new_codec(cfg):
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return FactorizedCodec(**cfg.codec_arch)


def train_codec(cfg, dataset, quality_index=None):
    """One stage-1 run at ``quality_index`` (default ``cfg.quality_index``)."""
    data = _as_dataset(dataset)
    q = cfg.quality_index if quality_index is None else quality_index
    beta = beta_for_quality(q) if quality_index is not None else cfg.beta
    net = _new_codec(cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = _make_optimizer(cfg.optimizer["name"], [{"params": net.parameters(), "lr": cfg.optimizer["learning_rate"]}])
    log = RunLog(cfg, cfg.seed, {"quality_index": q, "beta": beta, "overrides": cfg.overrides, "workers": 0})
    per_epoch, total_steps = _steps(len(data), cfg)
    net.train()
    step = 0
    for _ in range(cfg.epochs):
        order = torch.randperm(len(data), generator=gen)
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = torch.from_numpy(_crops(data, idx, cfg.patch_size, gen).transpose(0, 3, 1, 2).copy())
            x_hat, lik, _ = net(x, generator=gen)
            total, comp = compute_total_loss(x, x_hat, rate_bits(lik), None, None, cfg, beta=beta)
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite loss at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            log.record(step, total=total.item(), **{k: v.item() for k, v in comp.items()})
            step += 1
            _schedule(opt, step, total_steps, cfg.lr_decay_at)
    log.finish()
    return CodecBundle(copy.deepcopy(net), q, beta), log


def train_stage1(cfg, dataset, out_dir=None):
    """Train one codec per ladder point; returns ``(bundles, logs)`` ordered like ``cfg.ladder``."""
    if cfg.stage != 1:
        raise ConfigurationError("train_stage1 requires stage=1")
    _as_dataset(dataset)
    bundles, logs = [], []
    for q in cfg.ladder:
        bundle, log = train_codec(cfg, dataset, quality_index=q)
        bundles.append(bundle)
        logs.append(log)
        if out_dir is not None:
            d = Path(out_dir) / f"q{q}"
            bundle.save(d)
            log.write_jsonl(d / "runlog.jsonl")
    return bundles, logs


def load_ladder(directory):
    """Bundles saved by :func:`train_stage1`, ordered by quality index."""
    d = Path(directory)
    dirs = sorted((p for p in d.glob("q*") if (p / "meta.json").exists()), key=lambda p: int(p.name[1:]))
    if not dirs:
        raise ConfigurationError(f"no codec checkpoints under {d}")
    return [CodecBundle.load(p) for p in dirs]


def controller_dataset(bundles, ideals, per_class, seed=0, templates=None):
    """Compressed degraded images labeled by degradation kind.

    ``per_class`` samples of each kind (``none`` included), spread evenly
    over the given codec bundles.  Returns ``(x_hat, labels, ideal)`` as
    N x H x W x C arrays and an int array of indices into KINDS.
    """
    data = _as_dataset(ideals)
    templates = {t.kind: t for t in (templates or default_specs())}
    missing = set(KINDS) - set(templates)
    if missing:
        raise ConfigurationError(f"controller templates missing kinds {sorted(missing)}")
    rng = np.random.default_rng(seed)
    n = per_class * len(KINDS)
    labels = np.repeat(np.arange(len(KINDS)), per_class)
    rng.shuffle(labels)
    img_idx = rng.integers(0, len(data), n)
    which = np.arange(n) % len(bundles)
    ideal = data[img_idx]
    degraded = np.stack([
        apply_degradation(ideal[i], templates[KINDS[labels[i]]].with_seed(int(rng.integers(0, 2**63))))
        for i in range(n)
    ])
    x_hat = np.empty_like(degraded)
    for b, bundle in enumerate(bundles):
        sel = np.nonzero(which == b)[0]
        for i in range(0, len(sel), 64):
            chunk = sel[i : i + 64]
            t = torch.from_numpy(degraded[chunk].transpose(0, 3, 1, 2).copy())
            x_hat[chunk] = reconstruct(t, bundle).numpy().transpose(0, 2, 3, 1)
    return x_hat, labels, ideal


class PairSource:
    """Deterministic stream of degraded/ideal training patches.

    Every sample draws its crop and its degradation seed from one root
    generator, so the stream depends only on the seed, never on how many
    workers synthesize degradations.
    """

    def __init__(self, data, cfg, seed, workers=0):
        self.data = data
        self.cfg = cfg
        self.templates, self.weights = cfg.specs()
        self.gen = torch.Generator().manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.pool = ThreadPoolExecutor(workers) if workers and workers > 1 else None

    def batch(self, idx):
        ideal = _crops(self.data, idx, self.cfg.patch_size, self.gen)
        specs = [sample_spec(self.templates, self.weights, self.rng) for _ in range(len(idx))]
        mapper = self.pool.map if self.pool is not None else map
        degraded = np.stack(list(mapper(apply_degradation, ideal, specs)))
        to_t = lambda a: torch.from_numpy(a.transpose(0, 3, 1, 2).copy())  # noqa: E731
        return to_t(degraded), to_t(ideal), specs

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


@dataclass
class JointSystem:
    """Codec, restorer and controller produced by stage 2 (or the cascade baseline)."""

    codec: CodecBundle
    restorer: Restorer
    controller: Controller
    log: RunLog
    kind: str = "joint"

    def save(self, directory):
        d = Path(directory)
        self.codec.save(d / "codec")
        self.restorer.save(d / "restorer")
        self.controller.save(d / "controller")
        self.log.write_jsonl(d / "runlog.jsonl")
        (d / "system.json").write_text(json.dumps({"kind": self.kind}))
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        if not (d / "system.json").exists():
            raise ConfigurationError(f"{d} is not a joint checkpoint (no system.json)")
        kind = json.loads((d / "system.json").read_text())["kind"]
        return cls(CodecBundle.load(d / "codec"), Restorer.load(d / "restorer"), Controller.load(d / "controller"), None, kind)


def _resolve_bundle(stage1_checkpoint):
    if isinstance(stage1_checkpoint, CodecBundle):
        return stage1_checkpoint
    return CodecBundle.load(stage1_checkpoint)


def _restorer_cfg(cfg, controller):
    rc = RestorerConfig(**{"conditioning_dim": controller.conditioning_dim, **cfg.restorer})
    if rc.conditioning_dim != controller.conditioning_dim:
        raise ConfigurationError(
            f"restorer conditioning_dim {rc.conditioning_dim} does not match controller output {controller.conditioning_dim}"
        )
    return rc


@torch.no_grad()
def estimate_bpp(bundle, dataset, cfg, batches=16):
    """Noise-proxy bpp of a frozen codec on training batches: ``(overall, {kind: bpp})``."""
    data = _as_dataset(dataset)
    src = PairSource(data, cfg, cfg.seed + 7)
    gen = torch.Generator().manual_seed(cfg.seed + 8)
    per = {}
    for _ in range(batches):
        idx = torch.randint(0, len(data), (cfg.batch_size,), generator=gen)
        x, _, specs = src.batch(idx)
        _, lik, _ = bundle.net(x, generator=gen)
        bpp = rate_bits(lik) / (x.shape[2] * x.shape[3])
        for spec, v in zip(specs, bpp.tolist()):
            per.setdefault(spec.kind, []).append(v)
    allv = [v for vs in per.values() for v in vs]
    return float(np.mean(allv)), {k: float(np.mean(v)) for k, v in sorted(per.items())}


def _dual_step(current, target, gain):
    """Multiplicative dual-ascent factor for the rate weight; the relative error is clipped to [-1, 1]."""
    return math.exp(gain * max(-1.0, min(1.0, (current - target) / target)))


def train_stage2(cfg, stage1_checkpoint, dataset, controller, joint=True):
    """Joint codec + restorer optimization; ``joint=False`` is the frozen-codec cascade.

    Both variants share the restorer initialization, the data stream and the
    step count.  In the cascade the codec stays in eval mode and its
    reconstructions come from actual rounding.  With ``cfg.target_bpp`` set
    the rate weight is adapted each step by multiplicative dual ascent so
    the joint codec's rate tracks the target.  With ``rate_control="per_task"``
    every degradation kind has its own weight and target, so rates match
    task by task.  ``target_bpp="auto"`` takes the targets from the frozen
    stage-1 codec.  The effective beta is logged.
    """
    if cfg.stage != 2:
        raise ConfigurationError("train_stage2 requires stage=2")
    data = _as_dataset(dataset)
    base = _resolve_bundle(stage1_checkpoint)
    if base.quality_index != cfg.quality_index:
        raise ConfigurationError(
            f"stage-1 checkpoint has quality {base.quality_index}, config asks for {cfg.quality_index}"
        )
    if base.net.dims() != FactorizedCodec(**cfg.codec_arch).dims():
        raise ConfigurationError("stage-1 checkpoint architecture does not match config codec_arch")
    if controller.conditioning_dim != _restorer_cfg(cfg, controller).conditioning_dim:
        raise ConfigurationError("controller and restorer disagree on conditioning size")
    codec = copy.deepcopy(base.net)
    for p in codec.parameters():
        p.requires_grad_(joint)
    ctrl_net = copy.deepcopy(controller.net)
    train_ctrl = joint and cfg.unfreeze_controller
    for p in ctrl_net.parameters():
        p.requires_grad_(train_ctrl)

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed + 100)
        restorer = Restorer(_restorer_cfg(cfg, controller))

    lr = cfg.optimizer["learning_rate"]
    groups = [{"params": restorer.parameters(), "lr": lr}]
    if joint:
        groups.append({"params": codec.parameters(), "lr": lr * cfg.codec_lr_scale})
    if train_ctrl:
        groups.append({"params": ctrl_net.parameters(), "lr": lr * cfg.codec_lr_scale})
    opt = _make_optimizer(cfg.optimizer["name"], groups)

    target = cfg.target_bpp
    per_task = cfg.rate_control == "per_task"
    if target == "auto":
        overall, by_kind = estimate_bpp(base, data, cfg)
        target = by_kind if per_task else overall
    elif target is not None and per_task:
        target = {t.kind: float(target) for t in cfg.specs()[0]}
    betas = {t.kind: float(cfg.beta) for t in cfg.specs()[0]}
    src = PairSource(data, cfg, cfg.seed + 1, cfg.workers)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    extra = {"quality_index": base.quality_index, "joint": joint, "target_bpp": target,
             "overrides": cfg.overrides, "workers": cfg.workers}
    log = RunLog(cfg, cfg.seed, extra)
    per_epoch, total_steps = _steps(len(data), cfg)
    codec.train(joint)
    ctrl_net.train(train_ctrl)
    restorer.train()
    step = 0
    try:
        for _ in range(cfg.epochs):
            order = torch.randperm(len(data), generator=gen)
            for b in range(per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                x, ideal, specs = src.batch(idx)
                kinds = [sp.kind for sp in specs]
                if joint:
                    x_hat, lik, _ = codec(x, generator=gen, synthesis=cfg.stage2_synthesis)
                else:
                    with torch.no_grad():
                        _, lik, y = codec(x, generator=gen)
                        x_hat = codec.g_s(torch.sign(y) * torch.floor(y.abs() + 0.5))[..., : x.shape[2], : x.shape[3]]
                x_in = x_hat.clamp(0.0, 1.0)
                if train_ctrl:
                    logits, emb = ctrl_net(x_in)
                else:
                    with torch.no_grad():
                        logits, emb = ctrl_net(x_in)
                cond = torch.cat([torch.softmax(logits, dim=1), emb], dim=1)
                pred, tgt = restorer.training_pair(x_in, ideal, cond, gen)
                bits = rate_bits(lik)
                if per_task:
                    beta = torch.tensor([betas[k] for k in kinds], dtype=x.dtype)
                else:
                    beta = next(iter(betas.values()))
                total, comp = compute_total_loss(x, x_hat, bits, pred, tgt, cfg, beta=beta)
                if not torch.isfinite(total):
                    raise TrainingError(f"non-finite loss at step {step}")
                opt.zero_grad()
                total.backward()
                opt.step()
                log.record(step, total=total.item(), **{k: float(v.detach()) for k, v in comp.items()},
                           **({f"beta_{k}": v for k, v in betas.items()} if per_task else {}))
                if joint and target is not None:
                    bpp = (bits / (x.shape[2] * x.shape[3])).detach()
                    if per_task:
                        for k in set(kinds):
                            cur = float(np.mean([bpp[i].item() for i, kk in enumerate(kinds) if kk == k]))
                            betas[k] *= _dual_step(cur, target[k], cfg.rate_control_gain)
                    else:
                        f = _dual_step(bpp.mean().item(), target, cfg.rate_control_gain)
                        betas = {k: v * f for k, v in betas.items()}
                step += 1
                _schedule(opt, step, total_steps, cfg.lr_decay_at)
    finally:
        src.close()
    log.finish()
    bundle = CodecBundle(copy.deepcopy(codec), base.quality_index, base.beta) if joint else base
    ctrl = Controller(copy.deepcopy(ctrl_net), controller.class_names) if train_ctrl else controller
    restorer.eval()
    for p in restorer.parameters():
        p.requires_grad_(False)
    return JointSystem(bundle, restorer, ctrl, log, "joint" if joint else "cascade")


def train_cascade(cfg, stage1_checkpoint, dataset, controller):
    return train_stage2(cfg, stage1_checkpoint, dataset, controller, joint=False)
