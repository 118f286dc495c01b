"""Three-stage cross-modal fine-tuning: build, embedder alignment, fine-tuning.

Stage 1 builds the task embedder and predictor around a (possibly
pretrained) backbone. Stage 2 trains only the embedder to minimise the
class-wise OTDD between embedded target data and a fixed proxy cloud.
Stage 3 fine-tunes everything not masked by the freeze flags.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as D
from . import nn
from . import tensor as T
from ._rng import rng_for
from .metrics import evaluate
from .otdd import ApproxConfig, otdd_classwise_approx, otdd_classwise_loss, subsample_cloud

log = logging.getLogger(__name__)

COMPONENTS = ("embedder", "backbone", "predictor")
CSV_COLUMNS = ("run_id", "stage", "epoch", "series_name", "value")


@dataclass
class PretrainConfig:
    seq_len: int = 64
    batch: int = 16
    lr: float = 1e-3
    mask_rate: float = 0.15


@dataclass
class Stage2Config:
    epochs: int = 0
    batch: int = 32
    lr: float = 1e-3
    eps_rel: float = 0.05
    eval_size: int = 256
    approx: ApproxConfig = field(default_factory=ApproxConfig)


@dataclass
class Stage3Config:
    epochs: int = 30
    batch: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0


@dataclass
class FreezeConfig:
    embedder: bool = False
    backbone: bool = False


@dataclass
class PipelineConfig:
    task: D.TaskSpec
    proxy: D.ProxySpec | None = None
    backbone: nn.BackboneSpec = field(default_factory=nn.BackboneSpec)
    target_seq_len: int = 16
    checkpoint: str | None = None
    pretrain_budget: int = 0
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    freeze: FreezeConfig = field(default_factory=FreezeConfig)
    seed: int = 0
    dtype: str = "float64"

    @property
    def runs_stage2(self) -> bool:
        return self.proxy is not None and self.stage2.epochs > 0

    def effective(self) -> "PipelineConfig":
        """Normalised copy: without a proxy or stage-2 epochs, stage 2 is absent."""
        cfg = PipelineConfig.from_dict(self.to_dict())
        if not cfg.runs_stage2:
            cfg.proxy = None
            cfg.stage2 = Stage2Config()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "task" not in d:
            raise ValueError("config needs a 'task'")
        sections = {"task": D.TaskSpec, "proxy": D.ProxySpec, "backbone": nn.BackboneSpec,
                    "pretrain": PretrainConfig, "stage2": Stage2Config, "stage3": Stage3Config,
                    "freeze": FreezeConfig}
        for key, typ in sections.items():
            v = d.get(key)
            if v is None or isinstance(v, typ):
                continue
            if not isinstance(v, dict):
                raise ValueError(f"config section {key!r} must be an object, got {type(v).__name__}")
            v = dict(v)
            if key == "stage2" and isinstance(v.get("approx"), dict):
                v["approx"] = ApproxConfig(**v["approx"])
            try:
                d[key] = typ(**v)
            except TypeError as exc:
                raise ValueError(f"config section {key!r}: {exc}") from exc
        if d["task"] is None:
            raise ValueError("config needs a 'task'")
        return cls(**d)

    def run_id(self) -> str:
        return hashlib.sha1(self.effective().to_json().encode()).hexdigest()[:12]


@dataclass
class Bundle:
    embedder: nn.Embedder
    backbone: nn.Backbone
    predictor: nn.Predictor

    def components(self) -> dict:
        return {"embedder": self.embedder, "backbone": self.backbone, "predictor": self.predictor}

    def parameters(self) -> list:
        return [p for m in self.components().values() for p in m.parameters()]

    def named_parameters(self) -> dict:
        out = {}
        for m in self.components().values():
            out.update(m.named_parameters())
        return out

    def checksums(self) -> dict:
        out = {}
        for name, m in self.components().items():
            h = hashlib.sha256()
            for p in m.parameters():
                h.update(p.name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
            out[name] = h.hexdigest()
        return out

    def forward(self, x):
        return self.predictor(self.backbone(self.embedder(x)))


@dataclass
class RunRecord:
    run_id: str
    config: dict
    metric: str
    otdd_initial: float | None = None
    otdd: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    test_metric: list = field(default_factory=list)
    checksums: dict = field(default_factory=dict)
    complete: bool = False
    error: str | None = None
    wall_clock: dict = field(default_factory=dict)

    def to_dict(self, wall_clock=True) -> dict:
        d = asdict(self)
        if not wall_clock:
            d.pop("wall_clock")
        return d

    def to_json(self, wall_clock=True) -> str:
        return json.dumps(self.to_dict(wall_clock), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def rows(self) -> list:
        out = []
        for e, v in enumerate(self.otdd):
            out.append((self.run_id, "stage2", e, "otdd", v))
        for name in ("train_loss", "val_metric", "test_metric"):
            for e, v in enumerate(getattr(self, name)):
                out.append((self.run_id, "stage3", e, name, v))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows():
            w.writerow(r[:4] + (repr(float(r[4])),))
        return buf.getvalue()

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "series.csv"), "w") as fh:
            fh.write(self.to_csv())
        # record last: its presence marks the run as persisted
        tmp = os.path.join(out_dir, "record.json.tmp")
        with open(tmp, "w") as fh:
            fh.write(self.to_json())
        os.replace(tmp, os.path.join(out_dir, "record.json"))


# -- stage 1 -------------------------------------------------------------------------
def load_or_init_backbone(cfg: PipelineConfig) -> nn.Backbone:
    if cfg.checkpoint:
        bb, header = nn.load_checkpoint(cfg.checkpoint)
        if bb.spec.hidden != cfg.backbone.hidden:
            raise ValueError(
                f"checkpoint hidden size {bb.spec.hidden} incompatible with configured {cfg.backbone.hidden}"
            )
        return bb
    bb = nn.init_backbone(cfg.backbone, cfg.seed)
    if cfg.pretrain_budget > 0:
        p = cfg.pretrain
        nn.pretrain_mlm(bb, cfg.pretrain_budget, p.mask_rate, p.seq_len, p.batch, p.lr, cfg.seed)
    return bb


def stage1_build(cfg: PipelineConfig) -> Bundle:
    task = cfg.task
    bb = load_or_init_backbone(cfg)
    seq = cfg.target_seq_len if task.spatial_rank == 1 else None
    emb = nn.build_embedder(task.in_channels, task.input_extents, bb.spec, seq, seed=cfg.seed)
    num = task.num_classes if task.task_type != "dense" else None
    pred = nn.build_predictor(task.task_type, bb.spec.hidden, emb.spec.target_seq_len, num,
                              task.out_shape, seed=cfg.seed)
    return Bundle(emb, bb, pred)


# -- stage 2 -------------------------------------------------------------------------
def build_proxy(cfg: PipelineConfig, bundle: Bundle):
    spec = cfg.proxy
    if spec.kind == "fake_noise":
        noise_emb = nn.Embedder(bundle.embedder.spec, rng_for(cfg.seed, "proxy-embedder"))
        shape = (cfg.task.in_channels,) + cfg.task.input_extents
        cloud = D.gen_proxy(spec, bundle.backbone, noise_emb, shape)
    else:
        cloud = D.gen_proxy(spec, bundle.backbone)
    return subsample_cloud(cloud, cfg.stage2.approx.source_sample_size, cfg.seed)


def _embed_mean(embedder, x, batch=128):
    out = []
    with T.no_grad():
        for s in range(0, len(x), batch):
            out.append(embedder(x[s : s + batch]).data.mean(axis=1))
    return np.concatenate(out)


def stage2_train_embedder(bundle: Bundle, cfg: PipelineConfig, train: D.LabeledDataset, record: RunRecord):
    """Align the embedder to the proxy; only embedder parameters change."""
    if cfg.proxy is None:
        raise ValueError("stage 2 needs a proxy dataset")
    s2 = cfg.stage2
    proxy = build_proxy(cfg, bundle)
    n = len(train)
    eval_idx = np.sort(rng_for(cfg.seed, "stage2-eval").choice(n, min(s2.eval_size, n), replace=False))
    eval_x = train.x[eval_idx]
    # classes absent from the subsample carry zero weight; drop them
    present, eval_cls = np.unique(train.classes[eval_idx], return_inverse=True)
    eval_cfg = ApproxConfig(s2.approx.subsample_size, s2.approx.rounds, s2.approx.source_sample_size,
                            seed=cfg.seed)

    def measure():
        cloud = D.FeatureCloud(_embed_mean(bundle.embedder, eval_x), eval_cls, len(present))
        return otdd_classwise_approx(cloud, proxy, eval_cfg, "exact").total

    record.otdd_initial = measure()
    opt = T.AdamW(bundle.embedder.parameters(), lr=s2.lr)
    loss_rng = rng_for(cfg.seed, "stage2-subsample")
    for epoch in range(s2.epochs):
        perm = rng_for(cfg.seed, "stage2-shuffle", epoch).permutation(n)
        for s in range(0, n, s2.batch):
            idx = perm[s : s + s2.batch]
            feats = bundle.embedder(train.x[idx]).mean(axis=1)
            loss = otdd_classwise_loss(feats, train.classes[idx], train.num_classes, proxy, s2.approx,
                                       s2.eps_rel, rng=loss_rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
        opt.zero_grad()
        record.otdd.append(measure())
        log.info("stage2 epoch %d otdd %.6g", epoch, record.otdd[-1])


# -- stage 3 -------------------------------------------------------------------------
def task_loss(task_type, out, y):
    if task_type == "point":
        return T.softmax_ce(out, np.asarray(y, dtype=np.int64))
    if task_type == "point_multilabel":
        return T.softmax_ce(out, np.asarray(y, dtype=np.float64))
    if task_type == "dense":
        return T.mse(out, y)
    raise ValueError(f"unknown task type {task_type!r}")


def predict(bundle: Bundle, x, batch=128) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([bundle.forward(x[s : s + batch]).data for s in range(0, len(x), batch)])


def stage3_finetune(bundle: Bundle, cfg: PipelineConfig, splits: dict, record: RunRecord):
    """Supervised fine-tuning; frozen components are excluded from the optimizer."""
    s3, task = cfg.stage3, cfg.task
    bundle.embedder.set_frozen(cfg.freeze.embedder)
    bundle.backbone.set_frozen(cfg.freeze.backbone)
    bundle.predictor.set_frozen(False)
    train, val, test = splits["train"], splits["val"], splits["test"]
    opt = T.AdamW(bundle.parameters(), lr=s3.lr, weight_decay=s3.weight_decay)
    n = len(train)
    try:
        for epoch in range(s3.epochs):
            bundle.backbone.dropout_rng = rng_for(cfg.seed, "dropout", epoch)
            perm = rng_for(cfg.seed, "stage3-shuffle", epoch).permutation(n)
            total, count = 0.0, 0
            for s in range(0, n, s3.batch):
                idx = perm[s : s + s3.batch]
                loss = task_loss(task.task_type, bundle.forward(train.x[idx]), train.y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            opt.zero_grad()
            bundle.backbone.dropout_rng = None
            record.train_loss.append(total / count)
            record.val_metric.append(evaluate(task.metric, predict(bundle, val.x), val.y, task.num_classes).value)
            record.test_metric.append(evaluate(task.metric, predict(bundle, test.x), test.y, task.num_classes).value)
            log.info("stage3 epoch %d loss %.4f val %.4f", epoch, record.train_loss[-1], record.val_metric[-1])
    finally:
        bundle.backbone.dropout_rng = None
        for m in bundle.components().values():
            m.set_frozen(False)


# -- whole run -----------------------------------------------------------------------
def run_pipeline(cfg: PipelineConfig, out_dir=None, run_id=None, splits=None) -> RunRecord:
    """stage 1 -> (stage 2 if a proxy is set) -> stage 3.

    Errors abort the run; the partial record is returned with
    ``complete=False`` and the error message.
    """
    cfg = cfg.effective()
    prev = T.get_default_dtype()
    T.set_default_dtype(cfg.dtype)
    record = RunRecord(run_id or cfg.run_id(), cfg.to_dict(), cfg.task.metric)
    try:
        t0 = time.perf_counter()
        if splits is None:
            splits = D.gen_splits(cfg.task)
        bundle = stage1_build(cfg)
        record.checksums["stage1"] = bundle.checksums()
        record.wall_clock["stage1"] = time.perf_counter() - t0
        if cfg.runs_stage2:
            t0 = time.perf_counter()
            stage2_train_embedder(bundle, cfg, splits["train"], record)
            record.checksums["stage2"] = bundle.checksums()
            record.wall_clock["stage2"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        stage3_finetune(bundle, cfg, splits, record)
        record.checksums["stage3"] = bundle.checksums()
        record.wall_clock["stage3"] = time.perf_counter() - t0
        record.complete = True
    except Exception as exc:  # noqa: BLE001
        log.exception("run %s failed", record.run_id)
        record.error = f"{type(exc).__name__}: {exc}"
    finally:
        T.set_default_dtype(prev)
    if out_dir is not None:
        record.save(out_dir)
    return record
