"""Command-line entry point: ``xmodal <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import data as D
from . import harness as H
from . import nn
from .archive import ArchiveError
from .otdd import ApproxConfig, FeatureCloud, otdd, otdd_classwise_approx
from .pipeline import PipelineConfig, Stage2Config, Stage3Config, run_pipeline


class ConfigError(Exception):
    pass


def _load_json(path):
    if path is None:
        return None
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=d(None), help="override the run seed")
    g.add_argument("--out", default=d(None), help="output directory (default: $XMODAL_OUT or ./xmodal_out)")
    g.add_argument("--config", default=d(None), help="JSON config file")
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(True)
    p = argparse.ArgumentParser(prog="xmodal", description="Cross-modal fine-tuning lab.",
                                parents=[_global_flags(False)])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write target dataset archives")
    g.add_argument("--task", default="sines1d", choices=sorted(D.TASK_PRESETS))

    pt = sub.add_parser("pretrain", parents=[common], help="MLM-pretrain a backbone to a token budget")
    pt.add_argument("--budget", type=int, required=True)

    r = sub.add_parser("run", parents=[common], help="run one pipeline config")
    r.add_argument("--task", default="sines1d", choices=sorted(D.TASK_PRESETS))
    r.add_argument("--proxy", default="structured", choices=H.PROXY_CHOICES)
    r.add_argument("--stage2-epochs", type=int, default=4)
    r.add_argument("--stage3-epochs", type=int, default=10)
    r.add_argument("--freeze", default="none", choices=sorted(H.FREEZE_MASKS))
    r.add_argument("--checkpoint", default=None)

    s = sub.add_parser("sweep", parents=[common], help="run a sweep preset or a sweep config")
    s.add_argument("--preset", choices=H.PRESETS)
    s.add_argument("--task", default="sines1d", choices=sorted(D.TASK_PRESETS))
    s.add_argument("--workers", type=int, default=1)

    o = sub.add_parser("otdd", parents=[common], help="OTDD between two dataset archives")
    o.add_argument("target")
    o.add_argument("source")
    o.add_argument("--solver", default="exact", choices=("exact", "entropic"))
    o.add_argument("--approx", action="store_true", help="class-wise subsampling approximation")
    o.add_argument("--subsample", type=int, default=20)
    o.add_argument("--rounds", type=int, default=4)

    pl = sub.add_parser("plot", parents=[common], help="results CSV -> SVG panels")
    pl.add_argument("table")
    return p


def _archive_cloud(path):
    ds, header = D.load_dataset(path)
    feats = ds.x.reshape(len(ds), -1)
    return FeatureCloud(feats, ds.classes, ds.num_classes)


def cmd_gen_data(args, out):
    spec = D.task_preset(args.task, **({"seed": args.seed} if args.seed is not None else {}))
    os.makedirs(os.path.join(out, "data"), exist_ok=True)
    for split, ds in D.gen_splits(spec).items():
        path = os.path.join(out, "data", f"{spec.name}-{split}.xmta")
        D.save_dataset(path, ds, spec)
        print(path)
    return 0


def cmd_pretrain(args, out):
    cfg = _load_json(args.config) or {}
    seed = args.seed if args.seed is not None else cfg.pop("seed", 0)
    try:
        spec = nn.BackboneSpec(**cfg.get("backbone", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    bb = nn.init_backbone(spec, seed)
    res = nn.pretrain_mlm(bb, args.budget, seed=seed)
    path = H.checkpoint_path(out, spec, args.budget, seed)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    loss = nn.mlm_eval_loss(bb)
    nn.save_checkpoint(path, bb, args.budget, {"seed": seed, "heldout_mlm_loss": loss})
    print(json.dumps({"checkpoint": path, "tokens_seen": res.tokens_seen, "heldout_mlm_loss": loss}))
    return 0


def cmd_run(args, out):
    raw = _load_json(args.config)
    try:
        if raw is not None:
            cfg = PipelineConfig.from_dict(raw)
        else:
            cfg = PipelineConfig(task=D.task_preset(args.task),
                                 stage2=Stage2Config(epochs=args.stage2_epochs),
                                 stage3=Stage3Config(epochs=args.stage3_epochs),
                                 checkpoint=args.checkpoint)
            H.apply_override(cfg, "proxy", args.proxy)
            H.apply_override(cfg, "freeze", args.freeze)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad pipeline config: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    run_id = cfg.run_id()
    rec = run_pipeline(cfg, os.path.join(out, "runs", run_id), run_id=run_id)
    print(json.dumps({"run_id": rec.run_id, "complete": rec.complete, "error": rec.error,
                      "final_val": rec.val_metric[-1] if rec.val_metric else None,
                      "dir": os.path.join(out, "runs", run_id)}))
    return 0 if rec.complete else 1


def cmd_sweep(args, out):
    raw = _load_json(args.config)
    seeds = [args.seed] if args.seed is not None else None
    try:
        if raw is not None:
            spec = H.SweepSpec.from_dict(raw)
            if seeds:
                spec.seeds = seeds
        elif args.preset:
            spec = H.preset(args.preset, args.task, seeds or H.DEFAULT_SEEDS)
        else:
            raise ConfigError("sweep needs --preset or --config")
        H.enumerate_runs(spec)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad sweep config: {exc}") from exc
    res = H.run_sweep(spec, os.path.join(out, "sweeps", spec.name), workers=args.workers)
    print(json.dumps(res))
    return 0 if not res["failed"] else 1


def cmd_otdd(args, out):
    a, b = _archive_cloud(args.target), _archive_cloud(args.source)
    if args.approx:
        cfg = ApproxConfig(args.subsample, args.rounds, seed=args.seed or 0)
        rep = otdd_classwise_approx(a, b, cfg, args.solver)
    else:
        rep = otdd(a, b, args.solver)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return 0


def cmd_plot(args, out):
    rows = H.read_table(args.table)
    manifest = H.emit_figures(rows, os.path.join(out, "figures"))
    print(json.dumps(manifest))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "run": cmd_run, "sweep": cmd_sweep,
            "otdd": cmd_otdd, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = H.default_out_dir(args.out)
    try:
        return COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"xmodal: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArchiveError) as exc:
        print(f"xmodal: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
