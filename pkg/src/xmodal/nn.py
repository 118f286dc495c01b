"""Task-specific embedder, transformer encoder backbone, and predictor heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from ._rng import rng_for
from .archive import read_tensor_archive, write_tensor_archive
from .tensor import Parameter, Tensor

MASK_TOKEN = 0
INIT_STD = 0.02


class Module:
    """Holds named Parameters; names are fully qualified (``"backbone.final_ln.gain"``)."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self._params: dict[str, Parameter] = {}

    def _param(self, local: str, data) -> Parameter:
        name = f"{self.prefix}.{local}"
        p = Parameter(np.asarray(data, dtype=T.get_default_dtype()), name)
        self._params[local] = p
        return p

    def __getitem__(self, local: str) -> Parameter:
        return self._params[local]

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self._params.values()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self._params.values()}

    def load_state_dict(self, state: dict) -> None:
        for p in self._params.values():
            arr = np.asarray(state[p.name])
            if arr.shape != p.shape:
                raise ValueError(f"{p.name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def set_frozen(self, frozen: bool) -> None:
        for p in self._params.values():
            p.frozen = frozen

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None


def _normal(rng, shape):
    return rng.normal(0.0, INIT_STD, size=shape)


def linear(x, w, b):
    return T.matmul(x, w) + b


# -- specs ---------------------------------------------------------------------
@dataclass
class BackboneSpec:
    layers: int = 4
    heads: int = 4
    hidden: int = 64
    ffn_mult: int = 4
    max_seq: int = 128
    vocab: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.layers < 1 or self.max_seq < 1 or self.vocab < 4:
            raise ValueError("invalid backbone sizes")


@dataclass
class EmbedderSpec:
    in_channels: int
    spatial_rank: int
    input_extents: tuple
    kernel: int
    stride: int
    embed_dim: int
    target_seq_len: int
    pad_right: int = 0

    def __post_init__(self):
        self.input_extents = tuple(self.input_extents)


@dataclass
class PredictorSpec:
    task_type: str
    in_dim: int
    seq_len: int
    num_classes: int | None = None
    out_shape: tuple | None = None
    width: int = field(init=False, default=0)

    def __post_init__(self):
        if self.task_type in ("point", "point_multilabel"):
            if not self.num_classes or self.num_classes < 1:
                raise ValueError("point predictors need num_classes")
            self.width = self.num_classes
        elif self.task_type == "dense":
            self.out_shape = tuple(self.out_shape)
            total = int(np.prod(self.out_shape))
            if total % self.seq_len:
                raise ValueError(
                    f"dense output {self.out_shape} ({total} values) not divisible by seq_len {self.seq_len}"
                )
            self.width = total // self.seq_len
        else:
            raise ValueError(f"unknown task_type {self.task_type!r}")


# -- embedder ------------------------------------------------------------------
def embedder_geometry(in_channels, input_extents, backbone: BackboneSpec, target_seq_len=None):
    """Kernel/stride/padding so the conv yields exactly ``target_seq_len`` positions.

    2D inputs use kernel = stride = 4. 1D inputs use kernel = stride =
    ceil(length / target_seq_len) with right zero-padding up to kernel * target.
    """
    extents = tuple(int(e) for e in input_extents)
    rank = len(extents)
    if rank == 2:
        k = 4
        if min(extents) < k:
            raise ValueError(f"input {extents} smaller than one {k}x{k} kernel window")
        seq = (extents[0] // k) * (extents[1] // k)
        if target_seq_len is not None and target_seq_len != seq:
            raise ValueError(f"2D input {extents} gives {seq} positions, not {target_seq_len}")
        spec = EmbedderSpec(in_channels, 2, extents, k, k, backbone.hidden, seq, 0)
    elif rank == 1:
        if target_seq_len is None:
            raise ValueError("1D embedder needs target_seq_len")
        length = extents[0]
        k = math.ceil(length / target_seq_len)
        if length < k or length < 1:
            raise ValueError(f"input length {length} smaller than kernel {k}")
        pad = k * target_seq_len - length
        spec = EmbedderSpec(in_channels, 1, extents, k, k, backbone.hidden, target_seq_len, pad)
        padded = length + pad
        assert T.conv_output_extent(padded, k, k) == target_seq_len
    else:
        raise ValueError(f"spatial rank {rank} unsupported (1 or 2)")
    if spec.target_seq_len > backbone.max_seq:
        raise ValueError(f"sequence length {spec.target_seq_len} exceeds backbone max_seq {backbone.max_seq}")
    return spec


class Embedder(Module):
    """conv -> flatten positions -> layer norm -> learned positional table."""

    def __init__(self, spec: EmbedderSpec, rng, prefix="embedder"):
        super().__init__(prefix)
        self.spec = spec
        H, c, k = spec.embed_dim, spec.in_channels, spec.kernel
        self._param("conv.weight", _normal(rng, (H, c) + (k,) * spec.spatial_rank))
        self._param("conv.bias", np.zeros(H))
        self._param("ln.gain", np.ones(H))
        self._param("ln.shift", np.zeros(H))
        self._param("pos", _normal(rng, (spec.target_seq_len, H)))

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        sp = self.spec
        want = (sp.in_channels,) + sp.input_extents
        if x.shape[1:] != want:
            raise T.ShapeError(f"embedder expects [batch, {want}], got {x.shape}")
        if sp.pad_right:
            x = T.pad(x, [(0, 0), (0, 0), (0, sp.pad_right)])
        h = T.conv(x, self["conv.weight"], self["conv.bias"], sp.stride)
        B = h.shape[0]
        h = h.reshape(B, sp.embed_dim, sp.target_seq_len).transpose(0, 2, 1)
        h = T.layer_norm(h, self["ln.gain"], self["ln.shift"])
        return h + self["pos"]


def build_embedder(in_channels, input_extents, backbone: BackboneSpec, target_seq_len=None, seed=0):
    spec = embedder_geometry(in_channels, input_extents, backbone, target_seq_len)
    return Embedder(spec, rng_for(seed, "embedder-init"))


# -- backbone ------------------------------------------------------------------
class Backbone(Module):
    """Pre-LayerNorm bidirectional transformer encoder with an MLM head."""

    def __init__(self, spec: BackboneSpec, rng, prefix="backbone"):
        super().__init__(prefix)
        self.spec = spec
        H, V, F = spec.hidden, spec.vocab, spec.hidden * spec.ffn_mult
        self.dropout_rng = None
        self._param("token_embed", _normal(rng, (V, H)))
        self._param("pos_embed", _normal(rng, (spec.max_seq, H)))
        self._param("embed_ln.gain", np.ones(H))
        self._param("embed_ln.shift", np.zeros(H))
        for i in range(spec.layers):
            p = f"layers.{i}."
            self._param(p + "ln1.gain", np.ones(H))
            self._param(p + "ln1.shift", np.zeros(H))
            self._param(p + "attn.qkv.weight", _normal(rng, (H, 3 * H)))
            self._param(p + "attn.qkv.bias", np.zeros(3 * H))
            self._param(p + "attn.out.weight", _normal(rng, (H, H)))
            self._param(p + "attn.out.bias", np.zeros(H))
            self._param(p + "ln2.gain", np.ones(H))
            self._param(p + "ln2.shift", np.zeros(H))
            self._param(p + "ffn.in.weight", _normal(rng, (H, F)))
            self._param(p + "ffn.in.bias", np.zeros(F))
            self._param(p + "ffn.out.weight", _normal(rng, (F, H)))
            self._param(p + "ffn.out.bias", np.zeros(H))
        self._param("final_ln.gain", np.ones(H))
        self._param("final_ln.shift", np.zeros(H))
        self._param("mlm_head.weight", _normal(rng, (H, V)))
        self._param("mlm_head.bias", np.zeros(V))

    def _drop(self, x):
        return T.dropout(x, self.spec.dropout, self.dropout_rng)

    def attention(self, i, h, keep=None):
        B, S, H = h.shape
        nh = self.spec.heads
        dh = H // nh
        p = f"layers.{i}.attn."
        qkv = linear(h, self[p + "qkv.weight"], self[p + "qkv.bias"])
        qkv = qkv.reshape(B, S, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        if keep is not None:
            keep.append(attn.data)
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, S, H)
        return linear(ctx, self[p + "out.weight"], self[p + "out.bias"])

    def __call__(self, h, keep_attention=None) -> Tensor:
        h = T.as_tensor(h)
        if h.ndim != 3 or h.shape[2] != self.spec.hidden:
            raise T.ShapeError(f"backbone expects [batch, seq, {self.spec.hidden}], got {h.shape}")
        if h.shape[1] > self.spec.max_seq:
            raise T.ShapeError(f"sequence length {h.shape[1]} exceeds max_seq {self.spec.max_seq}")
        for i in range(self.spec.layers):
            p = f"layers.{i}."
            a = T.layer_norm(h, self[p + "ln1.gain"], self[p + "ln1.shift"])
            h = h + self._drop(self.attention(i, a, keep_attention))
            a = T.layer_norm(h, self[p + "ln2.gain"], self[p + "ln2.shift"])
            a = T.gelu(linear(a, self[p + "ffn.in.weight"], self[p + "ffn.in.bias"]))
            h = h + self._drop(linear(a, self[p + "ffn.out.weight"], self[p + "ffn.out.bias"]))
        return T.layer_norm(h, self["final_ln.gain"], self["final_ln.shift"])

    def embed_tokens(self, tokens) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        S = tokens.shape[1]
        if S > self.spec.max_seq:
            raise T.ShapeError(f"sequence length {S} exceeds max_seq {self.spec.max_seq}")
        h = T.take_rows(self["token_embed"], tokens) + self["pos_embed"][:S]
        return self._drop(T.layer_norm(h, self["embed_ln.gain"], self["embed_ln.shift"]))

    def mlm_logits(self, h) -> Tensor:
        return linear(h, self["mlm_head.weight"], self["mlm_head.bias"])


def init_backbone(spec: BackboneSpec, seed: int) -> Backbone:
    return Backbone(spec, rng_for(seed, "backbone-init"))


# -- predictor -----------------------------------------------------------------
class Predictor(Module):
    """Mean-pool + linear for point tasks; per-token linear + reshape for dense."""

    def __init__(self, spec: PredictorSpec, rng, prefix="predictor"):
        super().__init__(prefix)
        self.spec = spec
        self._param("weight", _normal(rng, (spec.in_dim, spec.width)))
        self._param("bias", np.zeros(spec.width))

    def __call__(self, h) -> Tensor:
        h = T.as_tensor(h)
        if self.spec.task_type == "dense":
            out = linear(h, self["weight"], self["bias"])
            return out.reshape((h.shape[0],) + self.spec.out_shape)
        return linear(h.mean(axis=1), self["weight"], self["bias"])


def build_predictor(task_type, hidden, seq_len, num_classes=None, out_shape=None, seed=0):
    spec = PredictorSpec(task_type, hidden, seq_len, num_classes, out_shape)
    return Predictor(spec, rng_for(seed, "predictor-init"))


# -- masked-language-model pretraining ---------------------------------------------
def mask_tokens(tokens, mask_rate, rng):
    """Returns (masked input, boolean mask). Masked positions become MASK_TOKEN."""
    mask = rng.random(tokens.shape) < mask_rate
    inp = np.where(mask, MASK_TOKEN, tokens)
    return inp, mask


def mlm_loss(backbone: Backbone, inp, targets, mask) -> Tensor:
    h = backbone(backbone.embed_tokens(inp))
    rows = np.nonzero(mask)
    logits = backbone.mlm_logits(h[rows])
    return T.softmax_ce(logits, targets[rows].astype(np.int64))


@dataclass
class PretrainResult:
    token_budget: int
    tokens_seen: int
    steps: int
    train_losses: list


def pretrain_mlm(
    backbone: Backbone,
    token_budget: int,
    mask_rate: float = 0.15,
    seq_len: int = 64,
    batch: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    corpus=None,
) -> PretrainResult:
    """Masked-token training on the synthetic corpus until ``token_budget`` tokens are seen.

    A zero budget leaves the backbone untouched.
    """
    from .data import gen_pretrain_corpus

    if token_budget < 0:
        raise ValueError("token_budget must be non-negative")
    if token_budget == 0:
        return PretrainResult(0, 0, 0, [])
    if corpus is None:
        n_seq = math.ceil(token_budget / seq_len)
        corpus = gen_pretrain_corpus(backbone.spec.vocab, seq_len, n_seq * seq_len, seed)
    seqs = np.asarray(corpus).reshape(-1, seq_len)
    rng = rng_for(seed, "mlm-mask")
    opt = T.AdamW(backbone.parameters(), lr=lr, weight_decay=0.01)
    seen = 0
    losses = []
    steps = 0
    for start in range(0, len(seqs), batch):
        if seen >= token_budget:
            break
        tokens = seqs[start : start + batch]
        inp, mask = mask_tokens(tokens, mask_rate, rng)
        seen += tokens.size
        if not mask.any():
            continue
        opt.zero_grad()
        loss = mlm_loss(backbone, inp, tokens, mask)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        steps += 1
    opt.zero_grad()
    return PretrainResult(token_budget, seen, steps, losses)


def mlm_eval_loss(backbone: Backbone, n_seq=64, seq_len=None, mask_rate=0.15, seed=12345) -> float:
    """Held-out MLM loss on a fixed corpus and mask (independent of training streams).

    ``seq_len`` defaults to min(64, max_seq).
    """
    from .data import gen_pretrain_corpus

    if seq_len is None:
        seq_len = min(64, backbone.spec.max_seq)

    tokens = gen_pretrain_corpus(backbone.spec.vocab, seq_len, n_seq * seq_len, seed, stream="heldout")
    tokens = tokens.reshape(n_seq, seq_len)
    inp, mask = mask_tokens(tokens, mask_rate, rng_for(seed, "heldout-mask"))
    total = 0.0
    count = 0
    with T.no_grad():
        for s in range(0, n_seq, 16):
            m = mask[s : s + 16]
            if not m.any():
                continue
            loss = mlm_loss(backbone, inp[s : s + 16], tokens[s : s + 16], m)
            total += loss.item() * int(m.sum())
            count += int(m.sum())
    return total / count


# -- checkpoints ---------------------------------------------------------------------
def save_checkpoint(path, backbone: Backbone, token_budget: int, extra: dict | None = None) -> None:
    header = {"kind": "backbone", "spec": asdict(backbone.spec), "token_budget": int(token_budget)}
    header.update(extra or {})
    write_tensor_archive(path, backbone.state_dict(), header)


def load_checkpoint(path) -> tuple[Backbone, dict]:
    tensors, header = read_tensor_archive(path)
    if header.get("kind") != "backbone":
        raise ValueError(f"{path} is not a backbone checkpoint")
    spec = BackboneSpec(**header["spec"])
    bb = Backbone(spec, np.random.default_rng(0))
    bb.load_state_dict(tensors)
    return bb, header
