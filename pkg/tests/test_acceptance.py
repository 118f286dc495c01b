"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the
terminal summary) or directly with ``python tests/test_acceptance.py``.
"""
import json
import os
import tempfile
import time
import warnings

import numpy as np
import pytest

from _oracles import confusion_macro_f1, pairwise_auroc, shifted_pair
from _stack import check_stack_gradients
from conftest import ACCEPTANCE_LINES
from xmodal import data as D
from xmodal import harness as H
from xmodal import nn
from xmodal.archive import read_tensor_archive, write_tensor_archive
from xmodal.metrics import auroc, one_minus_f1, relative_l2
from xmodal.otdd import ApproxConfig, FeatureCloud, ot_entropic, ot_exact, otdd, otdd_classwise_approx
from xmodal.pipeline import FreezeConfig, PipelineConfig, Stage2Config, Stage3Config, run_pipeline

# compact backbone shared by the training-heavy criteria (1-CPU budget)
DESK = nn.BackboneSpec(layers=2, heads=4, hidden=32, ffn_mult=4, max_seq=64, vocab=512)
SEEDS = (0, 1, 2)


def report(num, title, ok, detail, elapsed):
    line = f"AC{num:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{elapsed:.1f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def sines_cfg(**kw):
    base = dict(task=D.task_preset("sines1d"), backbone=DESK, target_seq_len=16)
    base.update(kw)
    return PipelineConfig(**base)


# -- 1 ---------------------------------------------------------------------------------
def ac1():
    t0 = time.perf_counter()
    worst, bad, n = 0.0, [], 0
    for task_type in ("point", "point_multilabel", "dense"):
        for name, (ok, ratio) in check_stack_gradients(task_type).items():
            n += 1
            worst = max(worst, ratio)
            if not ok:
                bad.append(f"{task_type}:{name}")
    dt = time.perf_counter() - t0
    ok = not bad and dt < 30
    detail = f"{n} parameter tensors, worst err/bound {worst:.3f}" + (f", failing {bad}" if bad else "")
    return report(1, "gradient integrity (hidden 8, 2 layers, float64)", ok, detail, dt)


# -- 2 ---------------------------------------------------------------------------------
def ac2():
    t0 = time.perf_counter()
    ident = []
    for s in range(10):
        rng = np.random.default_rng(s)
        n = int(rng.integers(4, 13))
        cloud = FeatureCloud(rng.normal(size=(n, 3)), np.arange(n) % 2, 2)
        ident.append(otdd(cloud, cloud).total)
    book = 0.0
    for s in range(5):
        rng = np.random.default_rng(100 + s)
        t = FeatureCloud(rng.normal(size=(12, 3)), np.arange(12) % 3, 3)
        src = FeatureCloud(rng.normal(size=(10, 3)) + 1, np.arange(10) % 2, 2)
        rep = otdd_classwise_approx(t, src, ApproxConfig(subsample_size=100, rounds=1))
        for i in range(3):
            sub = t.features[t.labels == i]
            full_i = otdd(FeatureCloud(sub, np.zeros(len(sub), dtype=int), 1), src).total
            book = max(book, abs(rep.per_class[i] - full_i))
        book = max(book, abs(rep.total - sum(w * d for w, d in zip(rep.weights, rep.per_class))))
    rel = []
    for s in range(5):
        (xt, yt), (xs, ys) = shifted_pair(s)
        t, src = FeatureCloud(xt, yt, 2), FeatureCloud(xs, ys, 2)
        full = otdd(t, src).total
        approx = otdd_classwise_approx(t, src, ApproxConfig(10, 8, 40, seed=s)).total
        rel.append(abs(approx - full) / full)
    dt = time.perf_counter() - t0
    ok = max(ident) < 1e-9 and book <= 1e-12 and np.median(rel) <= 0.15 and dt < 60
    detail = (f"max otdd(D,D) {max(ident):.1e}; bookkeeping gap {book:.1e}; "
              f"approx rel. error median {np.median(rel):.3f} (seeds {np.round(rel, 3).tolist()})")
    return report(2, "OTDD identity and oracle equivalence", ok, detail, dt)


# -- 3 ---------------------------------------------------------------------------------
def ac3():
    t0 = time.perf_counter()
    worst, count, unconverged = 0.0, 0, 0
    sizes = (2, 4, 8, 16, 32)
    for n in sizes:
        for m in sizes:
            for s in range(2):
                rng = np.random.default_rng(1000 * n + 10 * m + s)
                C = rng.random((n, m)) * rng.uniform(0.5, 10)
                mu = rng.random(n) + 0.2
                nu = rng.random(m) + 0.2
                mu, nu = mu / mu.sum(), nu / nu.sum()
                exact, _ = ot_exact(C, mu, nu)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    res = ot_entropic(C, mu, nu, 1e-3 * float(np.median(C)))
                unconverged += not res.converged
                worst = max(worst, abs(res.cost - exact) / exact)
                count += 1
    dt = time.perf_counter() - t0
    ok = worst <= 0.02 and dt < 30
    detail = f"{count} instances up to 32x32, worst relative gap {worst:.2e} ({unconverged} hit max_iter)"
    return report(3, "Sinkhorn vs exact at eps = 1e-3 median(C)", ok, detail, dt)


# -- 4 ---------------------------------------------------------------------------------
def ac4():
    t0 = time.perf_counter()
    lines, ok = [], True
    for label, (fe, fb) in (("both", (True, True)), ("backbone", (False, True)), ("embedder", (True, False))):
        rec = run_pipeline(sines_cfg(proxy=D.ProxySpec(), stage2=Stage2Config(epochs=1),
                                     stage3=Stage3Config(epochs=2), freeze=FreezeConfig(fe, fb)))
        before, after = rec.checksums["stage2"], rec.checksums["stage3"]
        frozen = {"embedder": fe, "backbone": fb, "predictor": False}
        good = rec.complete and all((before[c] == after[c]) == frozen[c] for c in frozen)
        ok &= good
        lines.append(f"{label}:{'ok' if good else 'BROKEN'}")
    dt = time.perf_counter() - t0
    ok &= dt < 120
    return report(4, "freezing contract", ok, ", ".join(lines), dt)


# -- 5 ---------------------------------------------------------------------------------
def ac5():
    t0 = time.perf_counter()
    a = run_pipeline(sines_cfg(proxy=None, stage3=Stage3Config(epochs=2)))
    b = run_pipeline(sines_cfg(proxy=D.ProxySpec(), stage2=Stage2Config(epochs=0), stage3=Stage3Config(epochs=2)))
    same = a.to_json(wall_clock=False) == b.to_json(wall_clock=False)
    dt = time.perf_counter() - t0
    return report(5, "naive fine-tuning equals stage2.epochs=0", same and a.complete,
                  f"records identical: {same}, otdd series lengths {len(a.otdd)}/{len(b.otdd)}", dt)


# -- 6 ---------------------------------------------------------------------------------
def ac6():
    t0 = time.perf_counter()
    drops = []
    for seed in SEEDS:
        rec = run_pipeline(sines_cfg(proxy=D.ProxySpec(), stage2=Stage2Config(epochs=8),
                                     stage3=Stage3Config(epochs=1), seed=seed))
        drops.append((rec.otdd[0], rec.otdd[-1]))
    wins = sum(last < first for first, last in drops)
    dt = time.perf_counter() - t0
    detail = f"{wins}/3 seeds decrease; epoch0 -> epoch7: " + ", ".join(f"{a:.3f}->{b:.3f}" for a, b in drops)
    return report(6, "stage-2 efficacy (structured proxy, 8 epochs)", wins >= 2, detail, dt)


# -- 7 ---------------------------------------------------------------------------------
def ac7():
    t0 = time.perf_counter()
    splits = D.gen_splits(D.task_preset("sines1d"))
    probe = D.fourier_probe_error(splits["train"], splits["val"])
    rec = run_pipeline(sines_cfg(proxy=None, stage3=Stage3Config(epochs=20)), splits=splits)
    best = min(rec.val_metric)
    first = next((e for e, v in enumerate(rec.val_metric) if v < 0.10), None)
    dt = time.perf_counter() - t0
    ok = rec.complete and probe == 0.0 and best < 0.10 and dt < 180
    detail = f"oracle probe val error {probe:.3f}; model val error < 0.10 first at epoch {first} (best {best:.3f})"
    return report(7, "trainability floor on separable 1D point task", ok, detail, dt)


# -- 8 ---------------------------------------------------------------------------------
def ac8():
    t0 = time.perf_counter()
    losses = {b: [] for b in H.LADDER}
    identical = True
    with tempfile.TemporaryDirectory() as tmp:
        for seed in SEEDS:
            for budget in H.LADDER:
                bb = nn.init_backbone(DESK, seed)
                nn.pretrain_mlm(bb, budget, seed=seed)
                path = os.path.join(tmp, f"b{budget}-s{seed}.xmta")
                nn.save_checkpoint(path, bb, budget)
                loaded, _ = nn.load_checkpoint(path)
                losses[budget].append(nn.mlm_eval_loss(loaded))
                if budget == 0:
                    fresh = nn.init_backbone(DESK, seed).state_dict()
                    identical &= all(v.tobytes() == fresh[k].tobytes() for k, v in loaded.state_dict().items())
    med = [float(np.median(losses[b])) for b in H.LADDER]
    decreasing = all(b < a for a, b in zip(med, med[1:]))
    dt = time.perf_counter() - t0
    detail = ("median held-out MLM loss " + " > ".join(f"{b}:{m:.3f}" for b, m in zip(H.LADDER, med))
              + f"; budget-0 checkpoint equals init: {identical}")
    return report(8, "pretraining ladder mechanics", decreasing and identical, detail, dt)


# -- 9 ---------------------------------------------------------------------------------
def ac9():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    auroc_ok = True
    for _ in range(100):
        n = int(rng.integers(2, 60))
        scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        labels = rng.random(n) < rng.uniform(0.2, 0.8)
        labels[0], labels[-1] = True, False
        auroc_ok &= auroc(scores, labels) == pairwise_auroc(scores, labels)
    f1_gap = 0.0
    for _ in range(100):
        K = int(rng.integers(2, 7))
        true, pred = rng.integers(0, K, 40), rng.integers(0, K, 40)
        f1_gap = max(f1_gap, abs((1 - one_minus_f1(pred, true, K).value) - confusion_macro_f1(pred, true, K)))
    t = rng.normal(size=(5, 3, 3))
    r0, r1 = relative_l2(t, t).value, relative_l2(2 * t, t).value
    dt = time.perf_counter() - t0
    ok = auroc_ok and f1_gap < 1e-12 and r0 == 0.0 and r1 == 1.0
    detail = f"AUROC exact on 100: {auroc_ok}; F1 max gap {f1_gap:.1e}; rel-l2 {r0} and {r1}"
    return report(9, "metric oracles", ok, detail, dt)


# -- 10 --------------------------------------------------------------------------------
def ac10():
    t0 = time.perf_counter()
    cfg = sines_cfg(proxy=D.ProxySpec(), stage2=Stage2Config(epochs=1), stage3=Stage3Config(epochs=2),
                    task=D.task_preset("sines1d", train_size=128, val_size=64, test_size=64))
    with tempfile.TemporaryDirectory() as tmp:
        run_pipeline(cfg, os.path.join(tmp, "a"), run_id="r")
        run_pipeline(cfg, os.path.join(tmp, "b"), run_id="r")
        csv_a, csv_b = (open(os.path.join(tmp, d, "series.csv")).read() for d in ("a", "b"))
        csv_same = csv_a == csv_b
        rng = np.random.default_rng(10)
        tensors = {"f64": rng.normal(size=(3, 4)), "f32": rng.normal(size=7).astype(np.float32),
                   "i64": rng.integers(-9, 9, size=(2, 2)), "u8": rng.integers(0, 255, 5).astype(np.uint8),
                   "b": rng.random(4) < 0.5, "empty": np.zeros((0, 3))}
        path = os.path.join(tmp, "t.xmta")
        write_tensor_archive(path, tensors, {"k": "v"})
        back, meta = read_tensor_archive(path)
        arch_same = meta == {"k": "v"} and all(
            back[k].dtype == v.dtype and back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
            for k, v in tensors.items())
        spec = H.SweepSpec("ac10", cfg, {"proxy": ["structured", "none"]}, [0])
        first = H.run_sweep(spec, os.path.join(tmp, "sweep"))
        table = open(first["table"]).read()
        second = H.run_sweep(spec, os.path.join(tmp, "sweep"))
        resume_ok = second["executed"] == 0 and open(second["table"]).read() == table
    dt = time.perf_counter() - t0
    ok = csv_same and arch_same and resume_ok
    detail = (f"CSV identical: {csv_same}; archive bit-exact: {arch_same}; "
              f"resume executed {second['executed']} of {second['executed'] + second['skipped']}")
    return report(10, "determinism and persistence", ok, detail, dt)


CRITERIA = [ac1, ac2, ac3, ac4, ac5, ac6, ac7, ac8, ac9, ac10]


@pytest.mark.slow
@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"AC{i + 1:02d}" for i in range(10)])
def test_acceptance(criterion):
    assert criterion()


if __name__ == "__main__":
    start = time.perf_counter()
    results = [c() for c in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed in {time.perf_counter() - start:.0f}s")
    raise SystemExit(0 if all(results) else 1)
