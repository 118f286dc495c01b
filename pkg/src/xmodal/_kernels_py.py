"""Pure-Python/numpy implementations of the hot kernels.

These mirror ``xmodal._kernels`` (Cython) function for function and are used
when the compiled extension is unavailable or ``XMODAL_PURE_PYTHON=1``.
"""
from collections import deque

import numpy as np


def _logsumexp_rows(a):
    amax = a.max(axis=1)
    finite = np.isfinite(amax)
    amax = np.where(finite, amax, 0.0)
    return amax + np.log(np.exp(a - amax[:, None]).sum(axis=1))


def sinkhorn_log(C, log_mu, log_nu, eps, f, g, max_iter, tol):
    """Log-domain Sinkhorn updates of the dual potentials ``f`` and ``g``.

    Iterates in place until the L1 row-marginal violation drops below ``tol``
    (columns are exact after each ``g`` update) or ``max_iter`` is reached.
    Returns ``(n_iter, err)``.
    """
    Ct = C.T
    err = np.inf
    it = 0
    while it < max_iter:
        f[:] = eps * log_mu - eps * _logsumexp_rows((g[None, :] - C) / eps)
        g[:] = eps * log_nu - eps * _logsumexp_rows((f[None, :] - Ct) / eps)
        it += 1
        log_p = (f[:, None] + g[None, :] - C) / eps
        row = np.exp(log_p).sum(axis=1)
        err = float(np.abs(row - np.exp(log_mu)).sum())
        if err < tol:
            break
    return it, err


def _northwest_corner(mu, nu):
    n, m = mu.shape[0], nu.shape[0]
    a = mu.copy()
    b = nu.copy()
    X = np.zeros((n, m))
    basis = []
    i = j = 0
    while True:
        x = min(a[i], b[j])
        X[i, j] = x
        a[i] -= x
        b[j] -= x
        basis.append((i, j))
        if i == n - 1 and j == m - 1:
            break
        if i == n - 1:
            j += 1
        elif j == m - 1:
            i += 1
        elif a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return X, basis


def _potentials(C, n, m, row_adj, col_adj):
    u = np.zeros(n)
    v = np.zeros(m)
    seen_r = [False] * n
    seen_c = [False] * m
    seen_r[0] = True
    queue = deque([(0, 0)])  # (is_col, index)
    while queue:
        is_col, k = queue.popleft()
        if not is_col:
            for j in row_adj[k]:
                if not seen_c[j]:
                    v[j] = C[k, j] - u[k]
                    seen_c[j] = True
                    queue.append((1, j))
        else:
            for i in col_adj[k]:
                if not seen_r[i]:
                    u[i] = C[i, k] - v[k]
                    seen_r[i] = True
                    queue.append((0, i))
    return u, v


def _tree_path(n, m, row_adj, col_adj, i0, j0):
    """Cells on the basis-tree path from column ``j0`` back to row ``i0``."""
    # nodes: rows 0..n-1, columns n..n+m-1
    parent = [-1] * (n + m)
    start = i0
    target = n + j0
    parent[start] = start
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == target:
            break
        if node < n:
            nbrs = [n + j for j in row_adj[node]]
        else:
            nbrs = col_adj[node - n]
        for nb in nbrs:
            if parent[nb] == -1:
                parent[nb] = node
                queue.append(nb)
    cells = []
    node = target
    while node != start:
        prev = parent[node]
        if node >= n:
            cells.append((prev, node - n))
        else:
            cells.append((node, prev - n))
        node = prev
    return cells


def transport_simplex(C, mu, nu, max_iter):
    """Exact discrete optimal transport by the transportation simplex method.

    Northwest-corner start, MODI potentials, Dantzig pricing with a switch to
    Bland's rule after a run of degenerate pivots. Returns
    ``(plan, n_iter, status)`` with status 0 = optimal, 1 = iteration cap.
    """
    n, m = C.shape
    X, basis = _northwest_corner(mu, nu)
    row_adj = [set() for _ in range(n)]
    col_adj = [set() for _ in range(m)]
    for i, j in basis:
        row_adj[i].add(j)
        col_adj[j].add(i)
    scale = max(float(np.abs(C).max()), 1.0)
    tol = 1e-12 * scale
    degenerate_run = 0
    it = 0
    while it < max_iter:
        u, v = _potentials(C, n, m, row_adj, col_adj)
        red = C - u[:, None] - v[None, :]
        if degenerate_run < 50:
            flat = int(np.argmin(red))
            if red.flat[flat] >= -tol:
                return X, it, 0
        else:
            neg = np.flatnonzero(red.ravel() < -tol)
            if neg.size == 0:
                return X, it, 0
            flat = int(neg[0])
        ie, je = divmod(flat, m)
        path = _tree_path(n, m, row_adj, col_adj, ie, je)
        # path runs column je -> ... -> row ie; cycle is (ie,je) + path,
        # the first path cell shares column je so it loses mass.
        minus = path[0::2]
        plus = path[1::2]
        theta = min(X[c] for c in minus)
        leave = None
        for c in minus:
            if X[c] <= theta and (leave is None or c < leave):
                leave = c
        for c in minus:
            X[c] -= theta
        for c in plus:
            X[c] += theta
        X[ie, je] += theta
        X[leave] = 0.0
        row_adj[leave[0]].discard(leave[1])
        col_adj[leave[1]].discard(leave[0])
        row_adj[ie].add(je)
        col_adj[je].add(ie)
        degenerate_run = degenerate_run + 1 if theta <= 0.0 else 0
        it += 1
    return X, it, 1


def markov_sample(cum_P, start, uniforms):
    """Sample a token chain: ``tokens[k+1] ~ cum_P[tokens[k]]`` by inversion."""
    out = np.empty(uniforms.shape[0], dtype=np.int64)
    state = int(start)
    for k in range(uniforms.shape[0]):
        state = int(np.searchsorted(cum_P[state], uniforms[k], side="right"))
        if state >= cum_P.shape[1]:
            state = cum_P.shape[1] - 1
        out[k] = state
    return out
