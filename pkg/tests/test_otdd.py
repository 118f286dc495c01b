import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import brute_otdd, central_diff, gaussian_w2_diag, grads_close, lp_ot, shifted_pair
from xmodal import tensor as T
from xmodal.otdd import (
    ApproxConfig,
    ClassPartition,
    EmptyClassError,
    ExactSolverCapError,
    FeatureCloud,
    ground_cost,
    label_distance_matrix,
    ot_entropic,
    ot_exact,
    otdd,
    otdd_classwise_approx,
    otdd_classwise_loss,
)


def cloud(seed, n=12, d=3, K=2):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % K
    return FeatureCloud(rng.normal(size=(n, d)) + y[:, None], y, K)


def test_feature_cloud_validation():
    with pytest.raises(ValueError):
        FeatureCloud(np.zeros((3, 2)), [0, 1, 2], 2)
    with pytest.raises(ValueError):
        FeatureCloud(np.zeros((0, 2)), [], 2)


def test_label_distance_identity_and_point_masses():
    a = cloud(0)
    M = label_distance_matrix(a, a)
    assert np.allclose(np.diag(M), 0) and np.allclose(M, M.T)
    x, y = np.array([[1.0, 2.0]]), np.array([[4.0, -2.0]])
    M = label_distance_matrix(FeatureCloud(x, [0], 1), FeatureCloud(y, [0], 1))
    assert M[0, 0] == pytest.approx(25.0, abs=1e-12)


def test_label_distance_matches_closed_form_oracle():
    a, b = cloud(1), cloud(2, n=10)
    M = label_distance_matrix(a, b)
    for i in range(2):
        for j in range(2):
            ref = gaussian_w2_diag(a.features[a.labels == i], b.features[b.labels == j])
            assert abs(M[i, j] - ref) < 1e-10


def test_label_distance_empty_class_raises():
    a = FeatureCloud(np.zeros((2, 2)), [0, 0], 2)
    with pytest.raises(EmptyClassError, match="class 1"):
        label_distance_matrix(a, a)


def test_ground_cost_hand_case():
    a = FeatureCloud(np.array([[0.0, 0], [1, 0], [0, 2]]), [0, 1, 1], 2)
    b = FeatureCloud(np.array([[0.0, 0], [1, 1]]), [0, 1], 2)
    M = np.array([[0.0, 10.0], [20.0, 30.0]])
    want = np.array([[0 + 0, 2 + 10], [1 + 20, 1 + 30], [4 + 20, 2 + 30]])
    np.testing.assert_allclose(ground_cost(a, b, M), want)
    np.testing.assert_allclose(ground_cost(a, a, np.zeros((2, 2))).diagonal(), 0)


def test_ot_exact_examples_and_cap():
    u = np.full(2, 0.5)
    assert ot_exact(np.array([[0.0, 1], [1, 0]]), u, u)[0] == 0.0
    C = np.ones((4, 4)) - np.eye(4)[[2, 0, 3, 1]]
    assert ot_exact(C, np.full(4, 0.25), np.full(4, 0.25))[0] == 0.0
    rng = np.random.default_rng(0)
    C = rng.random((5, 7))
    cost, plan = ot_exact(C, np.full(5, 0.2), np.full(7, 1 / 7))
    assert abs(cost - lp_ot(C, np.full(5, 0.2), np.full(7, 1 / 7))) < 1e-9
    np.testing.assert_allclose(plan.sum(0), 1 / 7, atol=1e-9)
    with pytest.raises(ExactSolverCapError, match="entropic"):
        ot_exact(np.zeros((65, 64)), np.full(65, 1 / 65), np.full(64, 1 / 64))
    with pytest.raises(ValueError):
        ot_exact(np.zeros((2, 2)), np.array([0.7, 0.7]), u)


def test_entropic_examples():
    rng = np.random.default_rng(1)
    C = rng.random((4, 4))
    u = np.full(4, 0.25)
    res = ot_entropic(C, u, u, 1e-3 * np.median(C))
    exact = ot_exact(C, u, u)[0]
    assert abs(res.cost - exact) <= 0.02 * exact
    const = ot_entropic(np.full((3, 5), 2.5), np.full(3, 1 / 3), np.full(5, 0.2), 0.1)
    assert const.cost == pytest.approx(2.5, abs=1e-9)
    assert np.abs(res.plan.sum(1) - u).sum() < 1e-9
    with pytest.raises(ValueError):
        ot_entropic(C, u, u, 0.0)


def test_entropic_nonconvergence_warns():
    rng = np.random.default_rng(2)
    C = rng.random((8, 8))
    u = np.full(8, 1 / 8)
    with pytest.warns(RuntimeWarning):
        res = ot_entropic(C, u, u, 1e-4, max_iter=3)
    assert not res.converged


def test_otdd_identity_symmetry_and_oracle():
    a, b = cloud(3, n=6), cloud(4, n=6)
    assert otdd(a, a).total < 1e-9
    assert otdd(a, b).total == pytest.approx(otdd(b, a).total, abs=1e-9)
    ref = brute_otdd(a.features, a.labels, 2, b.features, b.labels, 2)
    assert abs(otdd(a, b).total - ref) < 1e-9


def test_otdd_monotone_in_translation():
    x = np.array([[0.0, 0.0], [0.0, 1.0]])
    a = FeatureCloud(x, [0, 1], 2)
    vals = [otdd(a, FeatureCloud(x + s, [0, 1], 2)).total for s in (0.5, 1.0, 2.0, 4.0)]
    assert all(v2 > v1 for v1, v2 in zip(vals, vals[1:]))


def test_partition_weights():
    p = ClassPartition.of([0, 2, 2, 1, 2], 3)
    assert p.weights == [0.2, 0.2, 0.6]
    assert sorted(np.concatenate(p.indices).tolist()) == list(range(5))


def test_classwise_bookkeeping():
    t, s = cloud(5, n=15, K=3), cloud(6, n=9)
    rep = otdd_classwise_approx(t, s, ApproxConfig(subsample_size=3, rounds=4, seed=1))
    assert rep.total == pytest.approx(sum(w * d for w, d in zip(rep.weights, rep.per_class)), abs=1e-12)
    for d_i, rounds in zip(rep.per_class, rep.per_round):
        assert len(rounds) == 4 and d_i == pytest.approx(np.mean(rounds), abs=1e-12)
        assert min(rounds) >= 0
    assert sum(rep.weights) == 1.0
    again = otdd_classwise_approx(t, s, ApproxConfig(subsample_size=3, rounds=4, seed=1))
    assert again.to_dict() == rep.to_dict()


def test_classwise_full_classes_equal_per_class_otdd():
    t, s = cloud(7, n=10), cloud(8, n=8)
    rep = otdd_classwise_approx(t, s, ApproxConfig(subsample_size=100, rounds=1))
    for i in range(2):
        sub = t.features[t.labels == i]
        direct = otdd(FeatureCloud(sub, np.zeros(len(sub), dtype=int), 1), s).total
        assert rep.per_class[i] == pytest.approx(direct, abs=1e-12)


def test_single_class_target():
    t = FeatureCloud(np.random.default_rng(9).normal(size=(6, 3)), np.zeros(6, dtype=int), 1)
    rep = otdd_classwise_approx(t, cloud(10), ApproxConfig(subsample_size=4, rounds=2))
    assert rep.weights == [1.0] and rep.total == pytest.approx(rep.per_class[0], abs=1e-15)


def test_classwise_empty_class_raises():
    t = FeatureCloud(np.zeros((3, 3)), [0, 0, 0], 2)
    with pytest.raises(EmptyClassError):
        otdd_classwise_approx(t, cloud(0))


def test_approximation_on_shifted_benchmark():
    rel = []
    for seed in range(5):
        (xt, yt), (xs, ys) = shifted_pair(seed)
        t, s = FeatureCloud(xt, yt, 2), FeatureCloud(xs, ys, 2)
        full = otdd(t, s).total
        approx = otdd_classwise_approx(t, s, ApproxConfig(10, 8, 40, seed=seed)).total
        rel.append(abs(approx - full) / full)
    assert np.median(rel) < 0.15


def test_classwise_loss_gradient_holds_plan_constant(monkeypatch):
    import xmodal.otdd as O

    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 2))
    labels = np.array([0, 0, 0, 1, 1, 1])
    src = cloud(12, n=5, d=2)
    cfg = ApproxConfig(subsample_size=10, rounds=2)

    def loss(xv):
        return otdd_classwise_loss(xv, labels, 2, src, cfg, eps_rel=0.05, rng=np.random.default_rng(0))

    # replay the plans of the first solve so the oracle differentiates <P0, C(x)>
    real, plans = O.ot_entropic, []

    def replay(C, mu, nu, eps, **kw):
        res = real(C, mu, nu, eps, **kw)
        if len(plans) < 4:
            plans.append(res.plan)
            return res
        res.plan = plans[replay.k % 4]
        replay.k += 1
        return res

    replay.k = 0
    monkeypatch.setattr(O, "ot_entropic", replay)
    xt = T.Tensor(x.copy(), requires_grad=True)
    loss(xt).backward()
    num = central_diff(lambda: float(loss(T.Tensor(x)).data), [x])[0]
    ok, worst = grads_close(xt.grad, num)
    assert ok, worst


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(2, 8), st.integers(1, 3))
def test_nonnegative_reports(seed, n, d):
    rng = np.random.default_rng(seed)
    a = FeatureCloud(rng.normal(size=(n, d)), np.arange(n) % 2, 2)
    b = FeatureCloud(rng.normal(size=(n + 1, d)), np.arange(n + 1) % 2, 2)
    assert otdd(a, b).total >= 0
    rep = otdd_classwise_approx(a, b, ApproxConfig(2, 2, seed=seed))
    assert rep.total >= 0 and min(rep.per_class) >= 0
