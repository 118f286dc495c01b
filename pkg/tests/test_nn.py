import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _stack import check_stack_gradients
from xmodal import nn
from xmodal import tensor as T
from xmodal.data import gen_pretrain_corpus

SMALL = nn.BackboneSpec(layers=2, heads=2, hidden=16, ffn_mult=2, max_seq=32, vocab=32)


def test_backbone_spec_validation():
    with pytest.raises(ValueError):
        nn.BackboneSpec(hidden=30, heads=4)
    with pytest.raises(ValueError):
        nn.BackboneSpec(dropout=1.0)


def test_embedder_geometry_2d():
    spec = nn.embedder_geometry(3, (32, 32), nn.BackboneSpec())
    assert (spec.kernel, spec.stride, spec.target_seq_len, spec.embed_dim) == (4, 4, 64, 64)
    emb = nn.build_embedder(3, (32, 32), nn.BackboneSpec())
    assert emb["conv.weight"].shape == (64, 3, 4, 4)
    assert emb(np.zeros((2, 3, 32, 32))).shape == (2, 64, 64)


@pytest.mark.parametrize("length, k, pad", [(96, 4, 0), (100, 5, 20)])
def test_embedder_geometry_1d(length, k, pad):
    spec = nn.embedder_geometry(1, (length,), nn.BackboneSpec(), target_seq_len=24)
    assert (spec.kernel, spec.stride, spec.pad_right, spec.target_seq_len) == (k, k, pad, 24)


def test_embedder_errors():
    with pytest.raises(ValueError):
        nn.embedder_geometry(1, (2, 2), nn.BackboneSpec())
    with pytest.raises(ValueError):
        nn.embedder_geometry(1, (4, 4, 4), nn.BackboneSpec())
    with pytest.raises(ValueError):
        nn.embedder_geometry(1, (500,), SMALL, target_seq_len=64)
    emb = nn.build_embedder(1, (20,), SMALL, target_seq_len=5)
    with pytest.raises(T.ShapeError):
        emb(np.zeros((1, 2, 20)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(1, 32))
def test_embedder_always_hits_target_length(length, seq):
    emb = nn.build_embedder(1, (length,), SMALL, target_seq_len=seq)
    assert emb(np.ones((1, 1, length))).shape == (1, seq, SMALL.hidden)


def test_embedder_zero_weights_constant_output():
    emb = nn.build_embedder(1, (12,), SMALL, target_seq_len=4)
    emb["conv.weight"].data[...] = 0
    emb["pos"].data[...] = 0
    emb["conv.bias"].data[...] = np.linspace(-1, 1, SMALL.hidden)
    out = emb(np.random.default_rng(0).normal(size=(3, 1, 12))).data
    assert np.allclose(out, out[0, 0])


def test_backbone_residual_identity():
    bb = nn.init_backbone(SMALL, 0)
    for i in range(SMALL.layers):
        for name in ("attn.out.weight", "attn.out.bias", "ffn.out.weight", "ffn.out.bias"):
            bb[f"layers.{i}.{name}"].data[...] = 0
    h = np.random.default_rng(1).normal(size=(2, 6, 16))
    gain, shift = bb["final_ln.gain"], bb["final_ln.shift"]
    want = T.layer_norm(T.Tensor(h), gain, shift).data
    np.testing.assert_allclose(bb(h).data, want, atol=1e-12)


def test_backbone_shapes_attention_and_overflow():
    bb = nn.init_backbone(SMALL, 0)
    keep = []
    h = np.random.default_rng(2).normal(size=(2, 7, 16))
    assert bb(h, keep_attention=keep).shape == (2, 7, 16)
    for a in keep:
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)
    with pytest.raises(T.ShapeError):
        bb(np.zeros((1, 33, 16)))


def test_backbone_permutation_equivariance():
    bb = nn.init_backbone(SMALL, 3)
    h = np.random.default_rng(3).normal(size=(1, 8, 16))
    perm = np.random.default_rng(4).permutation(8)
    np.testing.assert_allclose(bb(h[:, perm]).data, bb(h).data[:, perm], atol=1e-12)


def test_predictor_point_and_dense():
    pred = nn.build_predictor("point", 16, 6, num_classes=5)
    h = np.tile(np.random.default_rng(5).normal(size=(2, 1, 16)), (1, 6, 1))
    out = pred(h).data
    assert out.shape == (2, 5)
    np.testing.assert_allclose(out, pred(h[:, :1]).data, atol=1e-12)
    dense = nn.build_predictor("dense", 16, 64, out_shape=(32, 32))
    assert dense.spec.width == 16
    assert dense(np.zeros((2, 64, 16))).shape == (2, 32, 32)
    with pytest.raises(ValueError):
        nn.build_predictor("dense", 16, 60, out_shape=(32, 32))


def test_parameter_names_unique_with_component_prefixes():
    emb = nn.build_embedder(1, (12,), SMALL, target_seq_len=4)
    bb = nn.init_backbone(SMALL, 0)
    pred = nn.build_predictor("point", 16, 4, num_classes=3)
    names = [p.name for m in (emb, bb, pred) for p in m.parameters()]
    assert len(names) == len(set(names))
    assert {n.split(".")[0] for n in names} == {"embedder", "backbone", "predictor"}


@pytest.mark.parametrize("task_type", ["point", "point_multilabel", "dense"])
def test_end_to_end_gradients(task_type):
    results = check_stack_gradients(task_type)
    bad = {k: v[1] for k, v in results.items() if not v[0]}
    assert not bad, bad


def test_mask_rate():
    tokens = gen_pretrain_corpus(64, 64, 64 * 400, seed=0).reshape(-1, 64)
    _, mask = nn.mask_tokens(tokens, 0.15, np.random.default_rng(0))
    assert abs(mask.mean() - 0.15) < 0.02


def test_pretrain_budget_zero_and_negative():
    bb = nn.init_backbone(SMALL, 7)
    before = {k: v.copy() for k, v in bb.state_dict().items()}
    res = nn.pretrain_mlm(bb, 0)
    assert res.steps == 0
    fresh = nn.init_backbone(SMALL, 7).state_dict()
    for k, v in bb.state_dict().items():
        assert v.tobytes() == before[k].tobytes() == fresh[k].tobytes()
    with pytest.raises(ValueError):
        nn.pretrain_mlm(bb, -1)


def test_pretrain_reduces_heldout_loss_and_stops_at_budget():
    bb = nn.init_backbone(SMALL, 0)
    base = nn.mlm_eval_loss(bb, n_seq=16, seq_len=32)
    res = nn.pretrain_mlm(bb, 20_000, seq_len=32, batch=8, lr=3e-3)
    assert res.tokens_seen >= 20_000 and res.tokens_seen - 20_000 < 8 * 32
    assert nn.mlm_eval_loss(bb, n_seq=16, seq_len=32) < base


def test_checkpoint_roundtrip(tmp_path):
    bb = nn.init_backbone(SMALL, 1)
    nn.pretrain_mlm(bb, 2048, seq_len=32, batch=8)
    path = tmp_path / "bb.xmta"
    nn.save_checkpoint(path, bb, 2048)
    loaded, header = nn.load_checkpoint(path)
    assert header["token_budget"] == 2048 and loaded.spec == bb.spec
    h = np.random.default_rng(0).normal(size=(2, 5, 16))
    assert bb(h).data.tobytes() == loaded(h).data.tobytes()


def test_dropout_only_with_rng():
    spec = nn.BackboneSpec(layers=1, heads=2, hidden=16, max_seq=8, vocab=32, dropout=0.5)
    bb = nn.init_backbone(spec, 0)
    h = np.random.default_rng(0).normal(size=(1, 4, 16))
    a = bb(h).data
    assert np.array_equal(a, bb(h).data)
    bb.dropout_rng = np.random.default_rng(1)
    assert not np.array_equal(a, bb(h).data)
