"""Optimal transport dataset distance (OTDD).

Ground cost between labelled samples is squared Euclidean feature distance
plus the squared 2-Wasserstein distance between diagonal-Gaussian fits of
the two samples' classes. Transport is solved exactly (transportation
simplex) or entropically (log-domain Sinkhorn with epsilon scaling). The
class-wise subsampling approximation averages per-class, per-round OTDD
values and weights them by class frequency.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from ._rng import rng_for
from .tensor import Tensor

VARIANCE_FLOOR = 1e-6
EXACT_CAP = 4096


class ExactSolverCapError(ValueError):
    """Instance too large for the exact solver; use the entropic solver."""


class EmptyClassError(ValueError):
    pass


@dataclass
class FeatureCloud:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2 or n < 1:
            raise ValueError(f"features must be [n>=1, d], got {self.features.shape}")
        if self.labels.shape != (n,):
            raise ValueError(f"labels shape {self.labels.shape} vs {n} samples")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx) -> "FeatureCloud":
        idx = np.asarray(idx, dtype=np.int64)
        feats = T.take_rows(self.features, idx) if isinstance(self.features, Tensor) else self.features[idx]
        return FeatureCloud(feats, self.labels[idx], self.num_classes)


def subsample_cloud(cloud: FeatureCloud, size: int, seed: int) -> FeatureCloud:
    """Uniform subsample without replacement (identity if already small enough)."""
    if len(cloud) <= size:
        return cloud
    idx = np.sort(rng_for(seed, "cloud-subsample").choice(len(cloud), size, replace=False))
    return cloud.subset(idx)


@dataclass
class ClassPartition:
    indices: list
    counts: list
    weights: list

    @classmethod
    def of(cls, labels, num_classes) -> "ClassPartition":
        labels = np.asarray(labels)
        n = labels.shape[0]
        idx = [np.flatnonzero(labels == i) for i in range(num_classes)]
        counts = [len(ix) for ix in idx]
        return cls(idx, counts, [c / n for c in counts])


@dataclass
class ApproxConfig:
    subsample_size: int = 20
    rounds: int = 4
    source_sample_size: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.subsample_size < 1 or self.rounds < 1 or self.source_sample_size < 1:
            raise ValueError("subsample size, rounds and source sample size must be >= 1")


@dataclass
class OtddReport:
    total: float
    solver: str
    per_class: list = field(default_factory=list)
    per_round: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    converged: bool = True
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# -- label metric and ground cost ------------------------------------------------
def _gaussian_moments(x: Tensor, labels, num_classes):
    """Per-class mean and (floored) std as Tensors [K, d]."""
    mus, sigmas = [], []
    for i in range(num_classes):
        idx = np.flatnonzero(labels == i)
        if idx.size == 0:
            raise EmptyClassError(f"class {i} has no samples")
        xi = T.take_rows(x, idx)
        mu = xi.mean(axis=0, keepdims=True)
        var = ((xi - mu) ** 2).mean(axis=0, keepdims=True)
        mus.append(mu.reshape(-1))
        sigmas.append(T.sqrt(T.maximum(var, VARIANCE_FLOOR)).reshape(-1))
    return T.stack(mus), T.stack(sigmas)


def _pairwise_sq(a: Tensor, b: Tensor) -> Tensor:
    diff = a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, b.shape[0], b.shape[1])
    return (diff * diff).sum(axis=2)


def _label_distance(xa, ya, Ka, xb, yb, Kb, covariance="diagonal") -> Tensor:
    if covariance != "diagonal":
        raise NotImplementedError("only the diagonal-covariance Gaussian label metric is implemented")
    mu_a, sd_a = _gaussian_moments(xa, ya, Ka)
    mu_b, sd_b = _gaussian_moments(xb, yb, Kb)
    return _pairwise_sq(mu_a, mu_b) + _pairwise_sq(sd_a, sd_b)


def _ground_cost(xa, ya, xb, yb, labelM: Tensor) -> Tensor:
    Ka, Kb = labelM.shape
    Ya = np.zeros((len(ya), Ka))
    Ya[np.arange(len(ya)), ya] = 1.0
    Yb = np.zeros((Kb, len(yb)))
    Yb[yb, np.arange(len(yb))] = 1.0
    lab = T.matmul(T.matmul(Tensor(Ya), labelM), Tensor(Yb))
    return _pairwise_sq(xa, xb) + lab


def _check_dims(a: FeatureCloud, b: FeatureCloud):
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")


def label_distance_matrix(a: FeatureCloud, b: FeatureCloud, covariance="diagonal") -> np.ndarray:
    """[Ka, Kb] squared W2 between diagonal-Gaussian class fits."""
    _check_dims(a, b)
    with T.no_grad():
        M = _label_distance(T.as_tensor(a.features), a.labels, a.num_classes,
                            T.as_tensor(b.features), b.labels, b.num_classes, covariance)
    return M.data


def ground_cost(a: FeatureCloud, b: FeatureCloud, labelM) -> np.ndarray:
    _check_dims(a, b)
    with T.no_grad():
        C = _ground_cost(T.as_tensor(a.features), a.labels, T.as_tensor(b.features), b.labels,
                         T.as_tensor(labelM))
    return C.data


# -- transport solvers --------------------------------------------------------------
def _check_marginals(mu, nu):
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    for name, w in (("mu", mu), ("nu", nu)):
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"{name} must be nonnegative and sum to 1")
    return mu, nu


def ot_exact(C, mu, nu, cap: int = EXACT_CAP):
    """Exact OT cost and plan. Raises ExactSolverCapError when n*m > cap."""
    C = np.ascontiguousarray(C, dtype=np.float64)
    mu, nu = _check_marginals(mu, nu)
    n, m = C.shape
    if (n, m) != (mu.shape[0], nu.shape[0]):
        raise T.ShapeError(f"cost {C.shape} vs marginals {mu.shape}, {nu.shape}")
    if n * m > cap:
        raise ExactSolverCapError(
            f"{n}x{m} instance exceeds exact-solver cap {cap}; use the entropic solver"
        )
    plan, _, status = kernels.transport_simplex(C, mu, nu, 100 * (n + m) * (n + m))
    if status != 0:
        raise RuntimeError("transportation simplex hit its iteration cap")
    return float((plan * C).sum()), plan


@dataclass
class EntropicResult:
    cost: float
    plan: np.ndarray
    converged: bool
    n_iter: int
    marginal_error: float


def ot_entropic(C, mu, nu, eps: float, max_iter: int = 5000, tol: float = 1e-9,
                scaling: float = 0.5) -> EntropicResult:
    """Log-domain Sinkhorn with epsilon scaling; returns the sharp cost <plan, C>.

    Starts at an epsilon on the order of the cost range and halves it
    (warm-starting the potentials) down to ``eps``. Non-convergence within
    ``max_iter`` total iterations sets ``converged=False`` and warns.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    C = np.ascontiguousarray(C, dtype=np.float64)
    mu, nu = _check_marginals(mu, nu)
    n, m = C.shape
    with np.errstate(divide="ignore"):
        log_mu, log_nu = np.log(mu), np.log(nu)
    f = np.zeros(n)
    g = np.zeros(m)
    cur = max(float(C.max() - C.min()), eps)
    used = 0
    err = np.inf
    while True:
        cur = max(cur * scaling, eps)
        last = cur == eps
        budget = max_iter - used if last else min(50, max(max_iter - used, 1))
        it, err = kernels.sinkhorn_log(C, log_mu, log_nu, cur, f, g, budget, tol)
        used += it
        if last or used >= max_iter:
            break
    if cur != eps:
        it, err = kernels.sinkhorn_log(C, log_mu, log_nu, eps, f, g, 1, tol)
    plan = np.exp((f[:, None] + g[None, :] - C) / eps)
    converged = bool(err < tol)
    if not converged:
        warnings.warn(f"Sinkhorn did not converge (marginal error {err:.2e})", RuntimeWarning)
    return EntropicResult(float((plan * C).sum()), plan, converged, used, float(err))


# -- OTDD -----------------------------------------------------------------------------
@dataclass
class _Solve:
    value: Tensor
    converged: bool


def _compact(labels):
    """Relabel to 0..k-1 over the classes actually present."""
    present, inv = np.unique(labels, return_inverse=True)
    return inv.astype(np.int64), len(present)


def _otdd_tensor(xa, ya, Ka, xb, yb, Kb, solver, eps_rel, cap=EXACT_CAP) -> _Solve:
    # only label pairs that occur enter the cost; absent classes need no moments
    ya, Ka = _compact(ya)
    yb, Kb = _compact(yb)
    labelM = _label_distance(xa, ya, Ka, xb, yb, Kb)
    C = _ground_cost(xa, ya, xb, yb, labelM)
    n, m = C.shape
    mu = np.full(n, 1.0 / n)
    nu = np.full(m, 1.0 / m)
    if abs(mu.sum() - 1.0) > 1e-12:
        mu = mu / mu.sum()
    if abs(nu.sum() - 1.0) > 1e-12:
        nu = nu / nu.sum()
    if solver == "exact":
        _, plan = ot_exact(C.data, mu, nu, cap)
        converged = True
    elif solver == "entropic":
        med = float(np.median(C.data))
        eps = eps_rel * med if med > 0 else eps_rel
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = ot_entropic(C.data, mu, nu, eps)
        plan, converged = res.plan, res.converged
    else:
        raise ValueError(f"unknown solver {solver!r}")
    # plan held constant: gradient w.r.t. C is the plan itself
    return _Solve((C * Tensor(plan)).sum(), converged)


def otdd(a: FeatureCloud, b: FeatureCloud, solver="exact", eps_rel=1e-3, cap=EXACT_CAP) -> OtddReport:
    """OTDD with uniform marginals over all samples (no subsampling)."""
    _check_dims(a, b)
    with T.no_grad():
        s = _otdd_tensor(T.as_tensor(a.features), a.labels, a.num_classes,
                         T.as_tensor(b.features), b.labels, b.num_classes, solver, eps_rel, cap)
    return OtddReport(max(float(s.value.data), 0.0), solver, converged=s.converged,
                      config={"eps_rel": eps_rel} if solver == "entropic" else {})


def _classwise(target: FeatureCloud, source: FeatureCloud, cfg: ApproxConfig, solver, eps_rel,
               allow_empty=False, rng=None):
    part = ClassPartition.of(target.labels, target.num_classes)
    for i, c in enumerate(part.counts):
        if c == 0 and not allow_empty:
            raise EmptyClassError(f"target class {i} has no samples")
    if rng is None:
        rng = rng_for(cfg.seed, "otdd-classwise")
    xt = T.as_tensor(target.features)
    xs = T.as_tensor(source.features)
    total = None
    per_class, per_round = [], []
    converged = True
    for i, idx in enumerate(part.indices):
        if len(idx) == 0:
            per_class.append(0.0)
            per_round.append([])
            continue
        size = min(cfg.subsample_size, len(idx))
        rounds = []
        for _ in range(cfg.rounds):
            pick = rng.choice(idx, size=size, replace=False)
            sub = T.take_rows(xt, pick)
            s = _otdd_tensor(sub, np.zeros(size, dtype=np.int64), 1, xs, source.labels,
                             source.num_classes, solver, eps_rel)
            converged &= s.converged
            rounds.append(s.value)
        d_i = rounds[0]
        for r in rounds[1:]:
            d_i = d_i + r
        d_i = d_i * (1.0 / cfg.rounds)
        per_round.append([float(r.data) for r in rounds])
        per_class.append(float(d_i.data))
        term = d_i * part.weights[i]
        total = term if total is None else total + term
    return total, part, per_class, per_round, converged


def otdd_classwise_approx(target: FeatureCloud, source: FeatureCloud, cfg: ApproxConfig | None = None,
                          solver="exact", eps_rel=1e-3) -> OtddReport:
    """Class-wise subsampling approximation of OTDD.

    For each target class, ``rounds`` uniform subsamples of size
    min(subsample_size, class size) are compared against the whole source;
    class values are round means, and the total is their class-weighted sum.
    ``source`` is expected to be pre-subsampled (see ``subsample_cloud``).
    """
    cfg = cfg or ApproxConfig()
    _check_dims(target, source)
    with T.no_grad():
        total, part, per_class, per_round, conv = _classwise(target, source, cfg, solver, eps_rel)
    return OtddReport(
        max(float(total.data), 0.0),
        solver,
        per_class=per_class,
        per_round=per_round,
        weights=list(part.weights),
        converged=conv,
        config={**asdict(cfg), **({"eps_rel": eps_rel} if solver == "entropic" else {})},
    )


def otdd_classwise_loss(features: Tensor, labels, num_classes, source: FeatureCloud,
                        cfg: ApproxConfig, eps_rel=0.05, rng=None) -> Tensor:
    """Differentiable class-wise OTDD (entropic solver, plan held constant).

    Gradients reach ``features`` through both the feature term of the
    ground cost and the target-side Gaussian moments; ``source`` is constant.
    Classes absent from the batch carry zero weight.
    """
    target = FeatureCloud(features, labels, num_classes)
    _check_dims(target, source)
    total, *_ = _classwise(target, source, cfg, "entropic", eps_rel, allow_empty=True, rng=rng)
    return total
