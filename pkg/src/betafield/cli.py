"""Command-line entry point: gen / train / eval / render / ablate.

Config layering (lowest to highest precedence): built-in defaults, JSON
config file (--config), environment variables with the RF_ prefix, command
line flags. The resolved config is echoed into the output directory and can
be re-fed via --config to reproduce a run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import imgio, trainer
from .scenegen import SceneConfig, gen_scene, load_dataset, save_dataset
from .trainer import TrainConfig

ENV_PREFIX = "RF_"


class UsageError(Exception):
    pass


def _field_types(dc):
    return {f.name: f.type for f in dataclasses.fields(dc)}


SCENE_FIELDS = _field_types(SceneConfig)
TRAIN_FIELDS = _field_types(TrainConfig)
ALL_FIELDS = {**SCENE_FIELDS, **TRAIN_FIELDS}


def _parse_value(key, raw):
    ftype = ALL_FIELDS[key]
    if isinstance(raw, str):
        if ftype in ("bool", bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise UsageError(f"bad boolean for {key}: {raw!r}")
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        if ftype in ("tuple", tuple):
            parts = [p for p in raw.split(",") if p]
            if key == "hidden":
                return tuple(int(p) for p in parts)
            return tuple(parts)
        return raw
    if ftype in ("tuple", tuple) and isinstance(raw, list):
        return tuple(raw)
    return raw


def _layered_config(args, keys):
    """defaults < config file < RF_ env < flags, for the given key set."""
    resolved = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        if not os.path.exists(cfg_path):
            raise UsageError(f"config file not found: {cfg_path}")
        with open(cfg_path, encoding="utf-8") as f:
            file_cfg = json.load(f)
        for k, v in file_cfg.items():
            if k not in ALL_FIELDS:
                raise UsageError(f"unknown config key {k!r}")
            if k in keys:
                resolved[k] = _parse_value(k, v)
    for env_key, v in os.environ.items():
        if not env_key.startswith(ENV_PREFIX):
            continue
        k = env_key[len(ENV_PREFIX):].lower()
        if k not in ALL_FIELDS:
            raise UsageError(f"unknown config key in environment: {env_key}")
        if k in keys:
            resolved[k] = _parse_value(k, v)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = _parse_value(k, v)
    return resolved


def _build(dc, overrides):
    try:
        return dc(**overrides)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))


def _echo_config(out_dir, scene_cfg=None, train_cfg=None):
    os.makedirs(out_dir, exist_ok=True)
    merged = {}
    if scene_cfg is not None:
        merged.update(dataclasses.asdict(scene_cfg))
    if train_cfg is not None:
        merged.update(dataclasses.asdict(train_cfg))
    for k, v in merged.items():
        if isinstance(v, tuple):
            merged[k] = list(v)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(merged, f, indent=2, sort_keys=True)
    return path


def _add_key_flags(p, fields):
    for name, ftype in fields.items():
        flag = "--" + name.replace("_", "-")
        if name == "iterations":
            p.add_argument("--iters", "--iterations", dest="iterations",
                           metavar="N")
            continue
        if ftype in ("bool", bool):
            p.add_argument(flag, dest=name, nargs="?", const="true",
                           metavar="BOOL")
        else:
            p.add_argument(flag, dest=name, metavar=name.upper())


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="betafield", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    _add_key_flags(g, SCENE_FIELDS)
    # spec'd shorthand for the occlusion ratio
    g.add_argument("--occlusion-ratio", dest="occlusion", metavar="RHO")

    t = sub.add_parser("train", help="train on a dataset")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--baseline", action="store_true",
                   help="freeze uncertainty to 1 (plain l2 control)")
    t.add_argument("--resume", help="checkpoint to resume from")
    _add_key_flags(t, TRAIN_FIELDS)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--baseline", action="store_true")
    _add_key_flags(e, TRAIN_FIELDS)

    r = sub.add_parser("render", help="render views from a checkpoint")
    common(r)
    r.add_argument("--dataset", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--views", default="test",
                   help="'test', 'train', or comma-separated indices")
    r.add_argument("--baseline", action="store_true")
    _add_key_flags(r, TRAIN_FIELDS)

    a = sub.add_parser("ablate", help="run an ablation suite")
    common(a)
    a.add_argument("--dataset", required=True)
    a.add_argument("--suite", required=True,
                   choices=sorted(trainer.ABLATION_SUITES))
    a.add_argument("--variants", help="comma-separated variant subset")
    _add_key_flags(a, TRAIN_FIELDS)
    return p


def _load_dataset(path):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    return load_dataset(path)


def _train_config(args):
    # a resolved_config.json next to the checkpoint fills in missing keys
    ckpt = getattr(args, "checkpoint", None)
    if ckpt and not getattr(args, "config", None):
        sibling = os.path.join(os.path.dirname(ckpt), "resolved_config.json")
        if os.path.exists(sibling):
            args.config = sibling
    return _build(TrainConfig, _layered_config(args, set(TRAIN_FIELDS)))


def _cmd_gen(args):
    if not args.out:
        raise UsageError("gen requires --out")
    cfg = _build(SceneConfig, _layered_config(args, set(SCENE_FIELDS)))
    ds = gen_scene(cfg)
    save_dataset(ds, args.out)
    _echo_config(args.out, scene_cfg=cfg)
    print(f"dataset written to {args.out} "
          f"({len(ds.train)} train / {len(ds.test)} test views)")
    return 0


def _cmd_train(args):
    cfg = _train_config(args)
    ds = _load_dataset(args.dataset)
    out = args.out
    if out:
        _echo_config(out, train_cfg=cfg)
    report = trainer.train(ds, cfg, out_dir=out, baseline=args.baseline,
                           resume=args.resume)
    final = report.final
    print(f"final: iter={final['iter']} psnr={final['test_psnr']:.2f} "
          f"ssim={final['test_ssim']:.4f} auroc={final['beta_auroc']:.3f}")
    return 0


def _cmd_eval(args):
    cfg = _train_config(args)
    ds = _load_dataset(args.dataset)
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    row, _, _ = trainer.evaluate_checkpoint(ds, cfg, args.checkpoint,
                                            baseline=args.baseline)
    for k in trainer.REPORT_COLUMNS:
        print(f"{k},{row[k]}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rep = trainer.RunReport(rows=[row])
        rep.to_csv(os.path.join(args.out, "eval.csv"))
    return 0


def _cmd_render(args):
    cfg = _train_config(args)
    ds = _load_dataset(args.dataset)
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    if not args.out:
        raise UsageError("render requires --out")
    os.makedirs(args.out, exist_ok=True)
    _, fld, _ = trainer.evaluate_checkpoint(ds, cfg, args.checkpoint,
                                            baseline=args.baseline)
    if args.views == "test":
        views = list(enumerate(ds.test))
    elif args.views == "train":
        views = list(enumerate(ds.train))
    else:
        allv = ds.train + ds.test
        views = [(i, allv[int(i)]) for i in args.views.split(",")]
    for i, v in views:
        img = trainer._render_full_view(ds, cfg, fld, v)
        imgio.write_image(os.path.join(args.out, f"render_{int(i):03d}.png"),
                          img)
    print(f"{len(views)} renders written to {args.out}")
    return 0


def _cmd_ablate(args):
    cfg = _train_config(args)
    ds = _load_dataset(args.dataset)
    variants = args.variants.split(",") if args.variants else None
    if args.out:
        _echo_config(args.out, train_cfg=cfg)
    table, _ = trainer.run_ablation(ds, args.suite, cfg, out_dir=args.out,
                                    variants=variants)
    print("variant,test_psnr,test_ssim,beta_auroc")
    for row in table:
        print(f"{row['variant']},{row['test_psnr']:.3f},"
              f"{row['test_ssim']:.4f},{row['beta_auroc']:.3f}")
    return 0


_COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
             "render": _cmd_render, "ablate": _cmd_ablate}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.cmd](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
