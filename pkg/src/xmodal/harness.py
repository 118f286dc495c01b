"""Sweeps over the ablation axes, the merged results table, and SVG figures."""
from __future__ import annotations

import csv
import json
import logging
import os
import re
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import data as D
from . import nn
from .metrics import METRIC_LABELS
from .pipeline import PipelineConfig, RunRecord, Stage2Config, Stage3Config, run_pipeline

log = logging.getLogger(__name__)

PROXY_CHOICES = ("structured", "fake_features", "fake_noise", "none")
FREEZE_MASKS = {
    "none": (False, False),
    "both": (True, True),
    "backbone": (False, True),
    "embedder": (True, False),
}
LADDER = (0, 10_000, 100_000, 1_000_000)
DEFAULT_SEEDS = (0, 1, 2)
TABLE_TAIL = ("seed", "stage", "epoch", "series", "value")


def default_out_dir(flag=None) -> str:
    """--out flag, then XMODAL_OUT, then ./xmodal_out."""
    return flag or os.environ.get("XMODAL_OUT") or "xmodal_out"


# -- sweep specification -------------------------------------------------------------
def proxy_classes(task: D.TaskSpec) -> int:
    # image proxies mirror a 10-class image set, 1D ones a 7-class tagging set
    return 10 if task.spatial_rank == 2 else 7


def apply_override(cfg: PipelineConfig, axis: str, value) -> None:
    """Set one axis value on ``cfg`` in place."""
    if axis == "proxy":
        if value == "none":
            cfg.proxy = None
        else:
            seed = cfg.proxy.seed if cfg.proxy is not None else 0
            cfg.proxy = D.ProxySpec(kind=value, num_classes=proxy_classes(cfg.task), seed=seed)
    elif axis == "stage2_epochs":
        cfg.stage2.epochs = int(value)
    elif axis == "freeze":
        cfg.freeze.embedder, cfg.freeze.backbone = FREEZE_MASKS[value]
    elif axis == "embedder_trained":
        if value in (False, "no"):
            cfg.stage2.epochs = 0
    elif axis == "pretrain_budget":
        cfg.pretrain_budget = int(value)
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")


@dataclass
class SweepSpec:
    name: str
    base: PipelineConfig
    axes: dict
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))

    def to_dict(self) -> dict:
        return {"name": self.name, "base": self.base.to_dict(), "axes": self.axes, "seeds": list(self.seeds)}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        unknown = set(d) - {"name", "base", "axes", "seeds"}
        if unknown:
            raise ValueError(f"unknown sweep keys: {sorted(unknown)}")
        axes = d.get("axes", {})
        if not isinstance(axes, dict) or not all(isinstance(v, list) and v for v in axes.values()):
            raise ValueError("axes must map names to non-empty lists")
        return cls(d.get("name", "sweep"), PipelineConfig.from_dict(d["base"]), dict(axes),
                   list(d.get("seeds", DEFAULT_SEEDS)))


@dataclass
class PlannedRun:
    run_id: str
    axis_values: dict
    seed: int
    config: PipelineConfig


def _slug(v) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "-", str(v))


def enumerate_runs(spec: SweepSpec) -> list:
    """Cartesian product of axes x seeds in declaration order."""
    names = list(spec.axes)
    for n in names:
        apply_override(PipelineConfig.from_dict(spec.base.to_dict()), n, spec.axes[n][0])
    out = []
    for combo in product(*(spec.axes[n] for n in names)):
        for seed in spec.seeds:
            cfg = PipelineConfig.from_dict(spec.base.to_dict())
            cfg.seed = int(seed)
            values = dict(zip(names, combo))
            for n, v in values.items():
                apply_override(cfg, n, v)
            rid = "__".join([f"{n}={_slug(v)}" for n, v in values.items()] + [f"seed={seed}"])
            out.append(PlannedRun(rid, values, int(seed), cfg))
    ids = [r.run_id for r in out]
    if len(set(ids)) != len(ids):
        raise ValueError("sweep has duplicate axis values")
    return out


def preset(name: str, task: str = "sines1d", seeds=DEFAULT_SEEDS) -> SweepSpec:
    """Packaged sweeps, one per ablation axis."""
    spec = D.task_preset(task)
    base = PipelineConfig(task=spec, proxy=D.ProxySpec(num_classes=proxy_classes(spec)),
                          stage2=Stage2Config(epochs=4), stage3=Stage3Config(epochs=10))
    if name == "proxy-choice":
        axes = {"proxy": list(PROXY_CHOICES)}
    elif name == "otdd-vs-perf":
        base.stage2.epochs = 8
        axes = {"stage2_epochs": [0, 2, 4, 8]}
    elif name == "freeze-grid":
        axes = {"freeze": ["both", "backbone", "embedder"], "embedder_trained": ["yes", "no"]}
    elif name == "pretrain-ladder":
        axes = {"pretrain_budget": list(LADDER)}
    else:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    return SweepSpec(name, base, axes, list(seeds))


PRESETS = ("proxy-choice", "otdd-vs-perf", "freeze-grid", "pretrain-ladder")


# -- execution -----------------------------------------------------------------------
def run_dir(out_dir, run_id) -> str:
    return os.path.join(out_dir, "runs", run_id)


def is_complete(out_dir, run_id) -> bool:
    path = os.path.join(run_dir(out_dir, run_id), "record.json")
    if not os.path.exists(path):
        return False
    with open(path) as fh:
        return bool(json.load(fh).get("complete"))


def checkpoint_path(out_dir, spec: nn.BackboneSpec, budget, seed) -> str:
    tag = f"h{spec.hidden}-l{spec.layers}-v{spec.vocab}"
    return os.path.join(out_dir, "checkpoints", f"backbone-{tag}-b{budget}-s{seed}.xmta")


def ensure_checkpoint(cfg: PipelineConfig, out_dir) -> str:
    """Pretrain once per (backbone, budget, seed) and cache the checkpoint."""
    path = checkpoint_path(out_dir, cfg.backbone, cfg.pretrain_budget, cfg.seed)
    if not os.path.exists(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
        bb = nn.init_backbone(cfg.backbone, cfg.seed)
        p = cfg.pretrain
        nn.pretrain_mlm(bb, cfg.pretrain_budget, p.mask_rate, p.seq_len, p.batch, p.lr, cfg.seed)
        nn.save_checkpoint(path, bb, cfg.pretrain_budget,
                           {"seed": cfg.seed, "heldout_mlm_loss": nn.mlm_eval_loss(bb)})
    return path


def _execute(args):
    run_id, cfg_dict, out = args
    rec = run_pipeline(PipelineConfig.from_dict(cfg_dict), out, run_id=run_id)
    return run_id, rec.complete, rec.error


def run_sweep(spec: SweepSpec, out_dir, workers: int = 1) -> dict:
    """Run every planned run not already complete, then merge the table.

    Returns counts of executed and skipped runs plus the table path.
    """
    os.makedirs(out_dir, exist_ok=True)
    plan = enumerate_runs(spec)
    with open(os.path.join(out_dir, "sweep.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=1)
    todo = [r for r in plan if not is_complete(out_dir, r.run_id)]
    for r in todo:
        if r.config.pretrain_budget > 0 and not r.config.checkpoint:
            r.config.checkpoint = ensure_checkpoint(r.config, out_dir)
    jobs = [(r.run_id, r.config.to_dict(), run_dir(out_dir, r.run_id)) for r in todo]
    failed = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_execute, jobs))
    else:
        results = [_execute(j) for j in jobs]
    for rid, ok, err in results:
        if not ok:
            failed.append(rid)
            log.warning("run %s incomplete: %s", rid, err)
    table = merge_results(spec, out_dir)
    return {"executed": len(jobs), "skipped": len(plan) - len(jobs), "failed": failed, "table": table}


def merge_results(spec: SweepSpec, out_dir) -> str:
    """Concatenate per-run series into results.csv in enumeration order."""
    plan = enumerate_runs(spec)
    axes = list(spec.axes)
    path = os.path.join(out_dir, "results.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "task"] + axes + list(TABLE_TAIL))
        for r in plan:
            rec_path = os.path.join(run_dir(out_dir, r.run_id), "record.json")
            if not os.path.exists(rec_path):
                continue
            with open(rec_path) as rf:
                rec = RunRecord.from_dict(json.load(rf))
            lead = [r.run_id, r.config.task.name] + [r.axis_values[a] for a in axes] + [r.seed]
            for _, stage, epoch, series, value in rec.rows():
                w.writerow(lead + [stage, epoch, series, repr(float(value))])
    os.replace(tmp, path)
    return path


def read_table(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- figures -------------------------------------------------------------------------
SERIES_LABELS = {"otdd": "OTDD (↓)", "train_loss": "train loss (↓)"}
W, H = 480, 320
MARGIN = dict(left=64, right=16, top=32, bottom=48)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def y_scale(vmin: float, vmax: float):
    """Affine, order-reversing map from data value to pixel row."""
    top, bottom = MARGIN["top"], H - MARGIN["bottom"]
    span = vmax - vmin if vmax > vmin else 1.0
    lo = vmin if vmax > vmin else vmin - 0.5
    return lambda v: bottom - (v - lo) / span * (bottom - top)


def x_scale(n_epochs: int):
    left, right = MARGIN["left"], W - MARGIN["right"]
    step = (right - left) / max(n_epochs - 1, 1)
    return lambda e: left + e * step


def aggregate(values_by_seed: dict) -> tuple:
    """Median and min/max across seeds at each epoch (epochs common to all seeds)."""
    n = min(len(v) for v in values_by_seed.values())
    arr = np.array([v[:n] for v in values_by_seed.values()], dtype=np.float64)
    return np.median(arr, axis=0), arr.min(axis=0), arr.max(axis=0)


def _ylabel(series, metric):
    if series in SERIES_LABELS:
        return SERIES_LABELS[series]
    return METRIC_LABELS.get(metric, f"{metric} (↓)")


def _esc(s) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_panel(title: str, ylabel: str, curves: dict) -> str:
    """``curves`` maps legend label -> {seed: [values per epoch]}."""
    agg = {k: aggregate(v) for k, v in curves.items()}
    lo = min(float(a[1].min()) for a in agg.values())
    hi = max(float(a[2].max()) for a in agg.values())
    n_ep = max(len(a[0]) for a in agg.values())
    fy, fx = y_scale(lo, hi), x_scale(n_ep)
    left, bottom = MARGIN["left"], H - MARGIN["bottom"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<path d="M{left},{MARGIN["top"]} L{left},{bottom} L{W - MARGIN["right"]},{bottom}" '
           'stroke="black" fill="none"/>',
           f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">epoch</text>',
           f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 14 {H / 2})">{_esc(ylabel)}</text>',
           f'<text x="{left - 4}" y="{fy(hi) + 4:.2f}" text-anchor="end" font-size="10">{hi:.4g}</text>',
           f'<text x="{left - 4}" y="{fy(lo) + 4:.2f}" text-anchor="end" font-size="10">{lo:.4g}</text>']
    for i, (label, (med, mn, mx)) in enumerate(agg.items()):
        colour = PALETTE[i % len(PALETTE)]
        n_seeds = len(curves[label])
        if n_seeds > 1:
            upper = [f"{fx(e):.2f},{fy(v):.2f}" for e, v in enumerate(mx)]
            lower = [f"{fx(e):.2f},{fy(v):.2f}" for e, v in reversed(list(enumerate(mn)))]
            out.append(f'<polygon class="band" points="{" ".join(upper + lower)}" '
                       f'fill="{colour}" fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{fx(e):.2f},{fy(v):.2f}" for e, v in enumerate(med))
        out.append(f'<polyline class="median" points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        out.append(f'<text x="{W - MARGIN["right"] - 4}" y="{MARGIN["top"] + 12 * (i + 1)}" '
                   f'text-anchor="end" font-size="10" fill="{colour}">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_figures(rows: list, out_dir, series=("otdd", "val_metric", "test_metric"), metric=None) -> dict:
    """One SVG per (task, axis, series); each axis value is one curve.

    Panels whose series has no rows are omitted and listed in the manifest.
    """
    if not rows:
        raise ValueError("results table is empty")
    cols = list(rows[0])
    axes = [c for c in cols if c not in ("run_id", "task") + TABLE_TAIL] or [None]
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"panels": [], "omitted": []}
    for task in sorted({r["task"] for r in rows}):
        task_rows = [r for r in rows if r["task"] == task]
        task_metric = metric or _task_metric(task)
        for axis in axes:
            for s in series:
                curves: dict = {}
                for r in task_rows:
                    if r["series"] != s:
                        continue
                    label = f"{axis}={r[axis]}" if axis else r["run_id"]
                    by_seed = curves.setdefault(label, {})
                    by_seed.setdefault(r["seed"], []).append((int(r["epoch"]), float(r["value"])))
                name = f"{task}__{axis or 'runs'}__{s}.svg"
                if not curves:
                    msg = f"{name}: no rows for series {s!r}"
                    warnings.warn(msg)
                    manifest["omitted"].append(msg)
                    continue
                curves = {k: {sd: [v for _, v in sorted(pts)] for sd, pts in by.items()}
                          for k, by in curves.items()}
                svg = render_panel(f"{task}: {s} by {axis or 'run'}", _ylabel(s, task_metric), curves)
                with open(os.path.join(out_dir, name), "w") as fh:
                    fh.write(svg)
                manifest["panels"].append(name)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def _task_metric(task_name: str) -> str:
    try:
        return D.task_preset(task_name).metric
    except (KeyError, ValueError):
        return "zero_one"
