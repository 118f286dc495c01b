"""Deterministic synthetic target tasks, proxy datasets and pretraining corpus.

Target families (one per task shape):

* ``texture2d``  2D point classification of oriented textures
* ``darcy2d``    2D dense regression from a smooth field to a smoothed, squashed field
* ``sines1d``    1D point classification of class-specific sinusoid mixtures
* ``motif1d``    1D multi-label detection of planted motifs in one-hot sequences
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from ._rng import rng_for
from .archive import read_tensor_archive, write_tensor_archive
from .otdd import FeatureCloud

SPLITS = ("train", "val", "test")
FAMILIES = ("texture2d", "darcy2d", "sines1d", "motif1d")
DENSE_CLASSES = 10
OPEN_TOKEN, CLOSE_TOKEN = 1, 2
FIRST_REGULAR_TOKEN = 3
GRAMMAR_SEED = 0


@dataclass
class TaskSpec:
    name: str
    family: str
    num_classes: int = 4
    length: int = 96
    image_size: int = 32
    train_size: int = 512
    val_size: int = 128
    test_size: int = 256
    noise: float = 0.5
    separation: float = 1.0
    metric: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        if min(self.train_size, self.val_size, self.test_size) < 1:
            raise ValueError("split sizes must be >= 1")
        if self.metric is None:
            self.metric = {"texture2d": "zero_one", "darcy2d": "relative_l2",
                           "sines1d": "zero_one", "motif1d": "auroc"}[self.family]

    @property
    def spatial_rank(self) -> int:
        return 2 if self.family in ("texture2d", "darcy2d") else 1

    @property
    def in_channels(self) -> int:
        return {"texture2d": 3, "darcy2d": 1, "sines1d": 1, "motif1d": 4}[self.family]

    @property
    def input_extents(self) -> tuple:
        if self.spatial_rank == 2:
            return (self.image_size, self.image_size)
        return (self.length,)

    @property
    def task_type(self) -> str:
        return {"texture2d": "point", "darcy2d": "dense", "sines1d": "point",
                "motif1d": "point_multilabel"}[self.family]

    @property
    def out_shape(self):
        return (self.image_size, self.image_size) if self.family == "darcy2d" else None

    @property
    def otdd_classes(self) -> int:
        """Number of class labels used for OTDD (stage 2)."""
        if self.family == "darcy2d":
            return DENSE_CLASSES
        if self.family == "motif1d":
            return self.num_classes + 1
        return self.num_classes

    def size(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}[split]

    def to_dict(self) -> dict:
        return asdict(self)


TASK_PRESETS = {
    "texture2d": dict(family="texture2d", num_classes=10, noise=0.5),
    "darcy2d": dict(family="darcy2d", noise=0.05),
    "sines1d": dict(family="sines1d", num_classes=4, noise=0.5),
    "ecg1d": dict(family="sines1d", num_classes=4, noise=1.0, metric="f1"),
    "motif1d": dict(family="motif1d", num_classes=6, noise=0.0),
}


def task_preset(name: str, **overrides) -> TaskSpec:
    return TaskSpec(name=name, **{**TASK_PRESETS[name], **overrides})


@dataclass
class LabeledDataset:
    """Inputs plus task targets; ``classes`` are the class labels OTDD sees."""

    x: np.ndarray
    y: np.ndarray
    classes: np.ndarray
    task_type: str
    num_classes: int
    name: str = ""
    split: str = ""

    def __len__(self):
        return self.x.shape[0]

    def feature_cloud(self, features) -> FeatureCloud:
        return FeatureCloud(features, self.classes, self.num_classes)


def _balanced_labels(rng, n, K):
    return rng.permutation(np.arange(n) % K)


# -- target families -------------------------------------------------------------
def _texture2d(spec: TaskSpec, split, rng):
    prm = rng_for(spec.seed, spec.name, "task-params")
    K, S = spec.num_classes, spec.image_size
    theta = np.pi * np.arange(K) / K + prm.uniform(-0.1, 0.1, K)
    freq = prm.uniform(2.0, 6.0, K)
    chan = prm.normal(size=(K, 3))
    chan /= np.linalg.norm(chan, axis=1, keepdims=True)
    n = spec.size(split)
    y = _balanced_labels(rng, n, K)
    yy, xx = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, n)
    coord = (xx[None] * np.cos(theta[y])[:, None, None] + yy[None] * np.sin(theta[y])[:, None, None])
    wave = np.cos(2 * np.pi * freq[y][:, None, None] * coord / S + phase[:, None, None])
    x = spec.separation * chan[y][:, :, None, None] * wave[:, None] * np.sqrt(3)
    x = x + spec.noise * rng.normal(size=x.shape)
    return x, y, y.copy(), K


def _smooth_field(rng, n, S, modes=4):
    grid = np.arange(S) / S
    field = np.zeros((n, S, S))
    for k in range(modes):
        for l in range(modes):
            c = rng.normal(size=(n, 2)) / (1.0 + k * k + l * l)
            basis_c = np.cos(np.pi * k * grid)[:, None] * np.cos(np.pi * l * grid)[None, :]
            basis_s = np.sin(np.pi * (k + 1) * grid)[:, None] * np.sin(np.pi * (l + 1) * grid)[None, :]
            field += c[:, 0, None, None] * basis_c + c[:, 1, None, None] * basis_s
    return field


def _gaussian_blur(a, sigma=2.0):
    r = int(3 * sigma)
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(a, [(0, 0), (r, r), (r, r)], mode="reflect")
    tmp = sum(k[i] * pad[:, i : i + a.shape[1], :] for i in range(2 * r + 1))
    return sum(k[i] * tmp[:, :, i : i + a.shape[2]] for i in range(2 * r + 1))


def darcy_target(field):
    """Grid-to-grid map learned by the dense task: blur, then a soft threshold.

    Offset keeps every target's norm well away from zero (relative l2 metric).
    """
    return 1.5 + np.tanh(2.0 * _gaussian_blur(field))


def bucket_classes(values, K=DENSE_CLASSES):
    """Quantile buckets of per-sample values into K near-balanced classes."""
    order = np.argsort(values, kind="stable")
    classes = np.empty(len(values), dtype=np.int64)
    classes[order] = np.arange(len(values)) * K // len(values)
    return classes


def _darcy2d(spec: TaskSpec, split, rng):
    n, S = spec.size(split), spec.image_size
    field = spec.separation * _smooth_field(rng, n, S)
    target = darcy_target(field)
    x = (field + spec.noise * rng.normal(size=field.shape))[:, None]
    return x, target, bucket_classes(target.mean(axis=(1, 2))), DENSE_CLASSES


def sines_frequencies(spec: TaskSpec):
    """Per-class (primary, secondary) integer frequencies; primaries distinct."""
    prm = rng_for(spec.seed, spec.name, "task-params")
    K = spec.num_classes
    hi = spec.length // 4
    primary = prm.choice(np.arange(2, hi), size=K, replace=False)
    secondary = prm.integers(2, hi, size=K)
    return primary, secondary


def _sines1d(spec: TaskSpec, split, rng):
    K, L, n = spec.num_classes, spec.length, spec.size(split)
    f1, f2 = sines_frequencies(spec)
    y = _balanced_labels(rng, n, K)
    t = np.arange(L)
    ph = rng.uniform(0, 2 * np.pi, (n, 2))
    amp = spec.separation * rng.uniform(0.8, 1.2, (n, 2))
    x = (amp[:, :1] * np.sin(2 * np.pi * f1[y][:, None] * t / L + ph[:, :1])
         + 0.5 * amp[:, 1:] * np.sin(2 * np.pi * f2[y][:, None] * t / L + ph[:, 1:]))
    x = x + spec.noise * rng.normal(size=x.shape)
    return x[:, None], y, y.copy(), K


MOTIF_LEN = 8


def motifs(spec: TaskSpec):
    prm = rng_for(spec.seed, spec.name, "task-params")
    return prm.integers(0, 4, size=(spec.num_classes, MOTIF_LEN))


def _motif1d(spec: TaskSpec, split, rng):
    L, n, nl = spec.length, spec.size(split), spec.num_classes
    slots = L // MOTIF_LEN
    if nl > slots:
        raise ValueError(f"{nl} motifs do not fit in length {L}")
    mot = motifs(spec)
    seq = rng.integers(0, 4, size=(n, L))
    labels = np.zeros((n, nl))
    for j in range(nl):
        labels[rng.permutation(n)[: (n + rng.integers(0, 2)) // 2], j] = 1.0
    for s in range(n):
        order = rng.permutation(slots)
        for j in np.flatnonzero(labels[s]):
            start = order[j] * MOTIF_LEN
            seq[s, start : start + MOTIF_LEN] = mot[j]
    if spec.noise > 0:
        flip = rng.random((n, L)) < spec.noise
        seq = np.where(flip, rng.integers(0, 4, size=(n, L)), seq)
    x = np.eye(4)[seq].transpose(0, 2, 1)
    has = labels > 0
    classes = np.where(has.any(axis=1), has.argmax(axis=1), nl)
    return x, labels, classes.astype(np.int64), nl + 1


_GENERATORS = {"texture2d": _texture2d, "darcy2d": _darcy2d, "sines1d": _sines1d, "motif1d": _motif1d}


def gen_target(spec: TaskSpec, split: str = "train") -> LabeledDataset:
    """One split of a target task; a pure function of (spec, split)."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rng = rng_for(spec.seed, spec.name, spec.family, "split", split)
    x, y, classes, K = _GENERATORS[spec.family](spec, split, rng)
    return LabeledDataset(np.ascontiguousarray(x, dtype=np.float64), y, classes, spec.task_type, K,
                          spec.name, split)


def gen_splits(spec: TaskSpec) -> dict:
    return {s: gen_target(spec, s) for s in SPLITS}


def fourier_probe_error(train: LabeledDataset, test: LabeledDataset | None = None) -> float:
    """0-1 error of a least-squares linear probe on rFFT magnitudes (1D point tasks)."""
    test = test or train

    def feats(ds):
        mag = np.abs(np.fft.rfft(ds.x[:, 0], axis=-1))
        return np.hstack([mag, np.ones((len(ds), 1))])

    K = int(train.y.max()) + 1
    W, *_ = np.linalg.lstsq(feats(train), np.eye(K)[train.y], rcond=None)
    pred = (feats(test) @ W).argmax(axis=1)
    return float(np.mean(pred != test.y))


# -- pretraining corpus ------------------------------------------------------------------
def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def markov_transition(vocab: int, exponent: float = 1.1, mix: float = 0.1, grammar_seed=GRAMMAR_SEED):
    """Transition matrix over regular tokens with Zipfian stationary law.

    Metropolis-Hastings over ranks with a symmetric, sparse proposal (four
    fixed cyclic offsets), mixed with an independent Zipf draw. Both parts
    leave the Zipf law stationary.
    """
    n = vocab - FIRST_REGULAR_TOKEN
    pi = zipf_weights(n, exponent)
    prm = rng_for(grammar_seed, "grammar", vocab)
    offs = prm.choice(np.arange(1, max(n // 2, 2)), size=2, replace=False)
    P = np.zeros((n, n))
    r = np.arange(n)
    for o in (offs[0], -offs[0], offs[1], -offs[1]):
        s = (r + o) % n
        P[r, s] += 0.25 * np.minimum(1.0, pi[s] / pi[r])
    P[r, r] += 1.0 - P.sum(axis=1)
    return (1.0 - mix) * P + mix * pi[None, :], pi


def gen_pretrain_corpus(vocab: int, length: int, token_budget: int, seed: int, exponent: float = 1.1,
                        stream: str = "train", bracket_rate: float = 0.5) -> np.ndarray:
    """Token stream of exactly ``token_budget`` tokens, in sequences of ``length``.

    Regular tokens follow a first-order Markov chain with Zipfian marginals.
    Each sequence contains, with probability ``bracket_rate``, an OPEN token
    whose matching CLOSE sits at a distance fixed by the token following it.
    """
    if vocab < 16:
        raise ValueError("vocab must be >= 16")
    if token_budget <= 0:
        return np.zeros(0, dtype=np.int64)
    P, pi = markov_transition(vocab, exponent)
    cum = np.cumsum(P, axis=1)
    rng = rng_for(seed, "corpus", stream, vocab)
    start = int(rng.choice(len(pi), p=pi))
    tokens = kernels.markov_sample(cum, start, rng.random(token_budget)) + FIRST_REGULAR_TOKEN
    if length >= 10:
        n_seq = token_budget // length
        put = np.flatnonzero(rng.random(n_seq) < bracket_rate)
        pos = rng.integers(0, length - 8, size=len(put))
        for s, p in zip(put, pos):
            base = s * length + p
            tokens[base] = OPEN_TOKEN
            tokens[base + bracket_gap(tokens[base + 1])] = CLOSE_TOKEN
    return tokens


def bracket_gap(next_token: int) -> int:
    return 2 + int(next_token) % 5


# -- proxies ---------------------------------------------------------------------
@dataclass
class ProxySpec:
    kind: str = "structured"
    num_classes: int = 7
    sample_count: int = 200
    seq_len: int = 32
    topic_rate: float = 0.3
    feature_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("structured", "fake_features", "fake_noise"):
            raise ValueError(f"unknown proxy kind {self.kind!r}")
        if self.sample_count < self.num_classes:
            raise ValueError("sample_count must be >= num_classes")


def gen_proxy(spec: ProxySpec, backbone=None, embedder=None, image_shape=None) -> FeatureCloud:
    """Proxy feature cloud in the backbone's embedding width.

    ``structured`` needs the backbone (token-embedding table); ``fake_noise``
    needs an embedder and the image shape (channels, H, W) it consumes.
    """
    rng = rng_for(spec.seed, "proxy", spec.kind)
    K, n = spec.num_classes, spec.sample_count
    if spec.kind == "fake_features":
        if backbone is None:
            raise ValueError("fake_features needs the backbone width")
        d = backbone.spec.hidden
        feats = spec.feature_scale * rng.normal(size=(n, d))
        return FeatureCloud(feats, rng.integers(0, K, size=n), K)

    if spec.kind == "structured":
        if backbone is None:
            raise ValueError("structured proxy needs a backbone")
        vocab = backbone.spec.vocab
        toks = gen_pretrain_corpus(vocab, spec.seq_len, n * spec.seq_len, spec.seed,
                                   stream="proxy").reshape(n, spec.seq_len)
        regular = np.arange(FIRST_REGULAR_TOKEN, vocab)
        topics = rng_for(GRAMMAR_SEED, "proxy-topics", vocab).permutation(regular)[: K * 8].reshape(K, 8)
        y = _balanced_labels(rng, n, K)
        swap = rng.random(toks.shape) < spec.topic_rate
        pick = topics[y][np.arange(n)[:, None], rng.integers(0, 8, size=toks.shape)]
        toks = np.where(swap, pick, toks)
        table = np.asarray(backbone["token_embed"].data, dtype=np.float64)
        return FeatureCloud(table[toks].mean(axis=1), y, K)

    if embedder is None or image_shape is None:
        raise ValueError("fake_noise needs an embedder and image_shape")
    from . import tensor as T

    x = rng.normal(size=(n,) + tuple(image_shape))
    y = rng.integers(0, K, size=n)
    with T.no_grad():
        feats = embedder(x).data.mean(axis=1)
    return FeatureCloud(np.asarray(feats, dtype=np.float64), y, K)


# -- archives ------------------------------------------------------------------------
def save_dataset(path, ds: LabeledDataset, spec: TaskSpec) -> None:
    header = {"kind": "dataset", "task": spec.name, "spec": spec.to_dict(), "split": ds.split,
              "task_type": ds.task_type, "num_classes": ds.num_classes}
    write_tensor_archive(path, {"x": ds.x, "y": ds.y, "classes": ds.classes}, header)


def load_dataset(path) -> tuple[LabeledDataset, dict]:
    tensors, header = read_tensor_archive(path)
    if header.get("kind") != "dataset":
        raise ValueError(f"{path} is not a dataset archive")
    ds = LabeledDataset(tensors["x"], tensors["y"], tensors["classes"], header["task_type"],
                        header["num_classes"], header.get("task", ""), header.get("split", ""))
    return ds, header


def spec_from_json(text: str) -> TaskSpec:
    return TaskSpec(**json.loads(text))
