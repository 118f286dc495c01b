# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same contracts as ``xmodal._kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, INFINITY

cnp.import_array()


cdef inline double _lse_row(const double[:, ::1] C, Py_ssize_t i,
                            const double[::1] pot, double eps) nogil:
    # log sum_j exp((pot[j] - C[i, j]) / eps)
    cdef Py_ssize_t j, m = C.shape[1]
    cdef double mx = -INFINITY, s = 0.0, t
    for j in range(m):
        t = (pot[j] - C[i, j]) / eps
        if t > mx:
            mx = t
    if mx == -INFINITY:
        return mx
    for j in range(m):
        s += exp((pot[j] - C[i, j]) / eps - mx)
    return mx + log(s)


cdef inline double _lse_col(const double[:, ::1] C, Py_ssize_t j,
                            const double[::1] pot, double eps) nogil:
    cdef Py_ssize_t i, n = C.shape[0]
    cdef double mx = -INFINITY, s = 0.0, t
    for i in range(n):
        t = (pot[i] - C[i, j]) / eps
        if t > mx:
            mx = t
    if mx == -INFINITY:
        return mx
    for i in range(n):
        s += exp((pot[i] - C[i, j]) / eps - mx)
    return mx + log(s)


def sinkhorn_log(C_in, log_mu_in, log_nu_in, double eps, double[::1] f,
                 double[::1] g, long max_iter, double tol):
    cdef const double[:, ::1] C = np.ascontiguousarray(C_in, dtype=np.float64)
    cdef const double[::1] log_mu = np.ascontiguousarray(log_mu_in, dtype=np.float64)
    cdef const double[::1] log_nu = np.ascontiguousarray(log_nu_in, dtype=np.float64)
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1], i, j
    cdef long it = 0
    cdef double err = INFINITY, row
    with nogil:
        while it < max_iter:
            for i in range(n):
                f[i] = eps * log_mu[i] - eps * _lse_row(C, i, g, eps)
            for j in range(m):
                g[j] = eps * log_nu[j] - eps * _lse_col(C, j, f, eps)
            it += 1
            err = 0.0
            for i in range(n):
                row = 0.0
                for j in range(m):
                    row += exp((f[i] + g[j] - C[i, j]) / eps)
                err += fabs(row - exp(log_mu[i]))
            if err < tol:
                break
    return it, err


cdef class _Tree:
    # basis tree of the transportation problem as bipartite adjacency lists
    cdef long n, m
    cdef long[:, ::1] radj
    cdef long[::1] rdeg
    cdef long[:, ::1] cadj
    cdef long[::1] cdeg

    def __init__(self, long n, long m):
        self.n = n
        self.m = m
        self.radj = np.empty((n, m), dtype=np.int64)
        self.rdeg = np.zeros(n, dtype=np.int64)
        self.cadj = np.empty((m, n), dtype=np.int64)
        self.cdeg = np.zeros(m, dtype=np.int64)

    cdef void add(self, long i, long j) nogil:
        self.radj[i, self.rdeg[i]] = j
        self.rdeg[i] += 1
        self.cadj[j, self.cdeg[j]] = i
        self.cdeg[j] += 1

    cdef void remove(self, long i, long j) nogil:
        cdef long k
        for k in range(self.rdeg[i]):
            if self.radj[i, k] == j:
                self.radj[i, k] = self.radj[i, self.rdeg[i] - 1]
                self.rdeg[i] -= 1
                break
        for k in range(self.cdeg[j]):
            if self.cadj[j, k] == i:
                self.cadj[j, k] = self.cadj[j, self.cdeg[j] - 1]
                self.cdeg[j] -= 1
                break


def transport_simplex(C_in, mu_in, nu_in, long max_iter):
    cdef const double[:, ::1] C = np.ascontiguousarray(C_in, dtype=np.float64)
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1]
    cdef double[::1] a = np.array(mu_in, dtype=np.float64)
    cdef double[::1] b = np.array(nu_in, dtype=np.float64)
    Xarr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] X = Xarr
    cdef _Tree tree = _Tree(n, m)
    cdef double[::1] u = np.zeros(n)
    cdef double[::1] v = np.zeros(m)
    cdef long[::1] queue = np.empty(n + m, dtype=np.int64)
    cdef long[::1] parent = np.empty(n + m, dtype=np.int64)
    cdef long[::1] pr = np.empty(n + m, dtype=np.int64)
    cdef long[::1] pc = np.empty(n + m, dtype=np.int64)
    cdef Py_ssize_t i = 0, j = 0, k, head, tail, node, nb, plen
    cdef double x, scale = 1.0, tol, best, r, theta
    cdef long it = 0, ie = 0, je = 0, degenerate_run = 0, li, lj, status = 1
    cdef bint found

    with nogil:
        # northwest corner
        while True:
            x = a[i] if a[i] < b[j] else b[j]
            X[i, j] = x
            a[i] -= x
            b[j] -= x
            tree.add(i, j)
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
        for i in range(n):
            for j in range(m):
                if fabs(C[i, j]) > scale:
                    scale = fabs(C[i, j])
        tol = 1e-12 * scale

        while it < max_iter:
            # potentials by BFS from row 0 (nodes: rows 0..n-1, cols n..)
            for k in range(n + m):
                parent[k] = -1
            u[0] = 0.0
            parent[0] = 0
            head = 0
            tail = 1
            queue[0] = 0
            while head < tail:
                node = queue[head]
                head += 1
                if node < n:
                    for k in range(tree.rdeg[node]):
                        nb = tree.radj[node, k]
                        if parent[n + nb] == -1:
                            parent[n + nb] = node
                            v[nb] = C[node, nb] - u[node]
                            queue[tail] = n + nb
                            tail += 1
                else:
                    for k in range(tree.cdeg[node - n]):
                        nb = tree.cadj[node - n, k]
                        if parent[nb] == -1:
                            parent[nb] = node
                            u[nb] = C[nb, node - n] - v[node - n]
                            queue[tail] = nb
                            tail += 1

            # pricing
            found = False
            best = -tol
            for i in range(n):
                for j in range(m):
                    r = C[i, j] - u[i] - v[j]
                    if r < best:
                        best = r
                        ie = i
                        je = j
                        found = True
                        if degenerate_run >= 50:
                            break
                if found and degenerate_run >= 50:
                    break
            if not found:
                status = 0
                break

            # tree path from column je to row ie
            for k in range(n + m):
                parent[k] = -1
            parent[ie] = ie
            head = 0
            tail = 1
            queue[0] = ie
            while head < tail:
                node = queue[head]
                head += 1
                if node == n + je:
                    break
                if node < n:
                    for k in range(tree.rdeg[node]):
                        nb = n + tree.radj[node, k]
                        if parent[nb] == -1:
                            parent[nb] = node
                            queue[tail] = nb
                            tail += 1
                else:
                    for k in range(tree.cdeg[node - n]):
                        nb = tree.cadj[node - n, k]
                        if parent[nb] == -1:
                            parent[nb] = node
                            queue[tail] = nb
                            tail += 1
            plen = 0
            node = n + je
            while node != ie:
                nb = parent[node]
                if node >= n:
                    pr[plen] = nb
                    pc[plen] = node - n
                else:
                    pr[plen] = node
                    pc[plen] = nb - n
                plen += 1
                node = nb

            theta = INFINITY
            for k in range(0, plen, 2):
                if X[pr[k], pc[k]] < theta:
                    theta = X[pr[k], pc[k]]
            li = -1
            lj = -1
            for k in range(0, plen, 2):
                if X[pr[k], pc[k]] <= theta:
                    if li == -1 or pr[k] < li or (pr[k] == li and pc[k] < lj):
                        li = pr[k]
                        lj = pc[k]
            for k in range(plen):
                if k % 2 == 0:
                    X[pr[k], pc[k]] -= theta
                else:
                    X[pr[k], pc[k]] += theta
            X[ie, je] += theta
            X[li, lj] = 0.0
            tree.remove(li, lj)
            tree.add(ie, je)
            if theta <= 0.0:
                degenerate_run += 1
            else:
                degenerate_run = 0
            it += 1
    return Xarr, it, status


def markov_sample(cum_P_in, long start, uniforms_in):
    cdef const double[:, ::1] cum_P = np.ascontiguousarray(cum_P_in, dtype=np.float64)
    cdef const double[::1] uni = np.ascontiguousarray(uniforms_in, dtype=np.float64)
    cdef Py_ssize_t N = uni.shape[0], V = cum_P.shape[1], k, lo, hi, mid
    out = np.empty(N, dtype=np.int64)
    cdef long[::1] o = out
    cdef long state = start
    cdef double x
    with nogil:
        for k in range(N):
            x = uni[k]
            lo = 0
            hi = V
            # first index with cum_P[state, idx] > x
            while lo < hi:
                mid = (lo + hi) // 2
                if cum_P[state, mid] > x:
                    hi = mid
                else:
                    lo = mid + 1
            if lo >= V:
                lo = V - 1
            state = lo
            o[k] = state
    return out
