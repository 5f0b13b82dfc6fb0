"""Command-line entry point: ``rpcodec <command> [--config FILE] [flags]``.

Each command accepts an optional JSON/YAML config whose keys provide
defaults for its flags; flags given on the command line win.  The root
seed can be overridden with the RPCODEC_SEED environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from ..bdmetrics import read_curves_csv
from ..codec import Bitstream, CodecBundle, compress, decompress
from ..controller import Controller, train_controller
from ..degrade import DegradationSpec, apply_degradation
from ..errors import ConfigurationError, RPCodecError
from ..images import (
    folder_patches,
    load_image,
    resolve_source,
    save_image,
    synthetic_set,
)
from ..trainer import (
    JointSystem,
    TrainConfig,
    controller_dataset,
    load_ladder,
    train_stage1,
    train_stage2,
)
from .evaluate import EvalReport, ExternalSystem, LearnedSystem, compare, run_eval
from .manifest import DatasetManifest
from .metrics import external_metric, get_metrics
from .plots import plot_rp

SEED_ENV = "RPCODEC_SEED"
log = logging.getLogger("rpcodec")


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if p.suffix.lower() in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(p.read_text()) or {}
    return json.loads(p.read_text())


def _merge(args, conf, keys):
    """Fill unset flags from the config; return the config keys no flag consumed."""
    rest = dict(conf)
    for k in keys:
        if k in rest:
            v = rest.pop(k)
            if getattr(args, k, None) is None:
                setattr(args, k, v)
    return rest


def root_seed(value, default=0):
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        return int(env)
    return int(value) if value is not None else default


def _dataset(spec, size):
    """``synth:N`` or ``synth:N:SEED`` for synthetic scenes, else an image folder."""
    spec = str(spec)
    if spec.startswith("synth:"):
        parts = spec.split(":")
        n = int(parts[1])
        seed = int(parts[2]) if len(parts) > 2 else 1000
        return synthetic_set(n, size, seed=seed)
    return folder_patches(spec, size=size)


def _train_cfg(rest, args, stage):
    d = dict(rest)
    d["stage"] = stage
    if args.epochs is not None:
        d["epochs"] = int(args.epochs)
    if args.patch_size is not None:
        d["patch_size"] = int(args.patch_size)
    opt = dict(d.get("optimizer", {}))
    opt["seed"] = root_seed(args.seed, opt.get("seed", 0))
    d["optimizer"] = opt
    return d


def cmd_train_codec(args):
    rest = _merge(args, _load_config(args.config), ["data", "out", "image_size", "epochs", "patch_size", "seed", "ladder"])
    d = _train_cfg(rest, args, 1)
    if args.ladder is not None:
        d["ladder"] = [int(q) for q in str(args.ladder).split(",")] if isinstance(args.ladder, str) else list(args.ladder)
    cfg = TrainConfig.from_dict(d)
    data = _dataset(args.data or "synth:512", int(args.image_size or 64))
    bundles, logs = train_stage1(cfg, data, out_dir=args.out)
    for b, lg in zip(bundles, logs):
        print(f"q{b.quality_index} beta={b.beta:g} final_total={lg.losses()[-1]:.6f} steps={len(lg.records)}")
    return 0


def cmd_train_joint(args):
    keys = ["stage1", "data", "out", "image_size", "epochs", "patch_size", "seed", "quality",
            "controller", "controller_per_class", "controller_epochs", "baseline"]
    rest = _merge(args, _load_config(args.config), keys)
    if args.stage1 is None or args.out is None:
        raise ConfigurationError("train-joint needs --stage1 and --out")
    ladder = load_ladder(args.stage1)
    data = _dataset(args.data or "synth:512", int(args.image_size or 64))
    out = Path(args.out)
    seed = root_seed(args.seed)
    if args.controller:
        ctrl = Controller.load(args.controller)
    else:
        x_hat, labels, ideal = controller_dataset(ladder, data, int(args.controller_per_class or 200), seed=seed)
        ctrl, hist = train_controller(x_hat, labels, ideal, epochs=int(args.controller_epochs or 10), seed=seed,
                                      out_dir=out / "controller")
        print(f"controller cross-entropy {hist[0]:.4f} -> {hist[-1]:.4f}")
    qualities = [int(q) for q in str(args.quality).split(",")] if args.quality is not None else [b.quality_index for b in ladder]
    by_q = {b.quality_index: b for b in ladder}
    for q in qualities:
        if q not in by_q:
            raise ConfigurationError(f"stage-1 ladder has no quality {q}")
        d = _train_cfg(rest, args, 2)
        d["quality_index"] = q
        cfg = TrainConfig.from_dict(d)
        system = train_stage2(cfg, by_q[q], data, ctrl, joint=True)
        system.save(out / "joint" / f"q{q}")
        print(f"joint q{q}: final_total={system.log.losses()[-1]:.6f}")
        if args.baseline:
            base = train_stage2(cfg, by_q[q], data, ctrl, joint=False)
            base.save(out / "cascade" / f"q{q}")
            print(f"cascade q{q}: final_total={base.log.losses()[-1]:.6f}")
    return 0


def _read_input_image(src, size, spec):
    img = resolve_source(src, size) if str(src).startswith("synth:") else load_image(src)
    if spec:
        img = apply_degradation(img, DegradationSpec.from_json(spec) if isinstance(spec, str) else DegradationSpec.from_dict(spec))
    return img


def _codec_for(path, quality):
    p = Path(path)
    if (p / "meta.json").exists():
        return CodecBundle.load(p)
    if quality is None:
        raise ConfigurationError(f"{p} is a ladder; pass --quality")
    sub = p / f"q{quality}"
    if (sub / "system.json").exists():
        return JointSystem.load(sub).codec
    return CodecBundle.load(sub)


def cmd_compress(args):
    _merge(args, _load_config(args.config), ["codec", "input", "out", "quality", "spec", "image_size"])
    bundle = _codec_for(args.codec, args.quality)
    img = _read_input_image(args.input, int(args.image_size or 64), args.spec)
    stream, _ = compress(img, bundle)
    Path(args.out).write_bytes(stream.to_bytes())
    print(f"{args.out}: {stream.num_bytes} bytes, {stream.bpp:.4f} bpp")
    return 0


def cmd_restore(args):
    _merge(args, _load_config(args.config), ["system", "input", "out", "quality", "seed", "spec", "image_size"])
    p = Path(args.system)
    sub = p if (p / "system.json").exists() else p / f"q{args.quality}"
    system = JointSystem.load(sub)
    src = Path(str(args.input))
    if src.suffix == ".rpic":
        x_hat = decompress(Bitstream.from_bytes(src.read_bytes()), system.codec)
    else:
        _, x_hat = compress(_read_input_image(args.input, int(args.image_size or 64), args.spec), system.codec)
    signal = system.controller.signal(x_hat)
    out = system.restorer.restore(x_hat, signal, seed=root_seed(args.seed))
    save_image(args.out, out)
    print(f"{args.out}: task={signal.task}")
    return 0


def _systems(specs):
    out = []
    for s in specs:
        if isinstance(s, str):
            sid, _, path = s.partition("=")
            s = {"id": sid, "path": path}
        if "csv" in s:
            out.append(ExternalSystem.from_csv(s["id"], s["csv"]))
        else:
            out.append(LearnedSystem.load(s["id"], s["path"]))
    return out


def cmd_evaluate(args):
    rest = _merge(args, _load_config(args.config), ["manifest", "system", "metrics", "out", "seed", "workers", "ladder", "anchor"])
    if args.manifest is None or not args.system or args.out is None:
        raise ConfigurationError("evaluate needs --manifest, at least one --system and --out")
    manifest = DatasetManifest.load(args.manifest)
    names = args.metrics.split(",") if isinstance(args.metrics, str) else list(args.metrics or ["psnr", "ms_ssim"])
    metrics = get_metrics(names)
    for em in rest.pop("external_metrics", []):
        metrics.append(external_metric(em["name"], em["orientation"], em["scores"]))
    ladder = [int(q) for q in str(args.ladder).split(",")] if isinstance(args.ladder, str) else args.ladder
    report = run_eval(manifest, _systems(args.system), metrics, ladder=ladder,
                      root_seed=root_seed(args.seed), workers=int(args.workers or 0))
    if args.anchor:
        compare(report, args.anchor)
    report.save(args.out)
    print(f"{args.out}: {len(report.curves)} curves, {len(report.failures)} failures, hash {report.report_hash()[:16]}")
    for f in report.failures:
        where = f.get("image_id") or "/".join(str(f[k]) for k in ("system", "task", "metric") if k in f)
        print(f"  failed {where} ({f['stage']}): {f['error']}", file=sys.stderr)
    return 0 if not report.failures else 1


def cmd_bd(args):
    _merge(args, _load_config(args.config), ["report", "curves", "anchor", "method", "out"])
    if args.anchor is None:
        raise ConfigurationError("bd needs --anchor")
    if args.report:
        report = EvalReport.load(args.report)
    elif args.curves:
        report = EvalReport(read_curves_csv(args.curves))
    else:
        raise ConfigurationError("bd needs --report or --curves")
    rows = compare(report, args.anchor, args.method or "pchip")
    text = json.dumps(rows, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    for r in rows:
        rate = r["bd_rate"].get("bd_rate_percent", r["bd_rate"].get("error"))
        qual = r["bd_quality"].get("bd_quality_delta", r["bd_quality"].get("error"))
        print(f"{r['task']:>9} {r['metric']:>8} {r['codec']:>12}  BD-rate {rate}  BD-{r['metric']} {qual}")
    errors = sum(("error" in r["bd_rate"]) + ("error" in r["bd_quality"]) for r in rows)
    return 0 if errors == 0 else 1


def cmd_plot(args):
    _merge(args, _load_config(args.config), ["report", "out"])
    paths = plot_rp(EvalReport.load(args.report), args.out)
    if not paths:
        print("empty report: no plots written")
    for p in paths:
        print(p)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="rpcodec", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON or YAML file with defaults for the flags below")
        p.set_defaults(fn=fn)
        return p

    p = add("train-codec", cmd_train_codec, "stage 1: train the codec ladder")
    p.add_argument("--data", help="synth:N[:SEED] or an image folder")
    p.add_argument("--out")
    p.add_argument("--image-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ladder", help="comma-separated quality indices")

    p = add("train-joint", cmd_train_joint, "stage 2: joint codec + restorer training")
    p.add_argument("--stage1", help="ladder directory from train-codec")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--image-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--quality", help="comma-separated quality indices (default: all)")
    p.add_argument("--controller", help="existing controller checkpoint (else one is trained)")
    p.add_argument("--controller-per-class", type=int)
    p.add_argument("--controller-epochs", type=int)
    p.add_argument("--baseline", action="store_const", const=True, help="also train the frozen-codec cascade")

    p = add("compress", cmd_compress, "encode one image to a bitstream")
    p.add_argument("--codec")
    p.add_argument("--quality", type=int)
    p.add_argument("--input", help="image path or synth:SEED")
    p.add_argument("--spec", help="optional degradation spec JSON applied first")
    p.add_argument("--image-size", type=int)
    p.add_argument("--out")

    p = add("restore", cmd_restore, "decode (or compress) and restore one image")
    p.add_argument("--system", help="joint checkpoint or directory of q<k> joint checkpoints")
    p.add_argument("--quality", type=int)
    p.add_argument("--input", help=".rpic bitstream, image path or synth:SEED")
    p.add_argument("--spec")
    p.add_argument("--image-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("evaluate", cmd_evaluate, "run the RP evaluation and write a report")
    p.add_argument("--manifest")
    p.add_argument("--system", action="append", help="ID=DIR of q<k> checkpoints; repeatable")
    p.add_argument("--metrics", help="comma-separated built-in metrics")
    p.add_argument("--ladder")
    p.add_argument("--anchor", help="also compute BD tables against this system")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")

    p = add("bd", cmd_bd, "BD tables from a report or a curve CSV")
    p.add_argument("--report")
    p.add_argument("--curves")
    p.add_argument("--anchor")
    p.add_argument("--method", choices=("pchip", "cubic_poly"))
    p.add_argument("--out")

    p = add("plot", cmd_plot, "RP-curve plots from a report")
    p.add_argument("--report")
    p.add_argument("--out")
    return ap


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, int(os.environ.get("RPCODEC_THREADS", "1"))))
    try:
        return args.fn(args)
    except (RPCodecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
