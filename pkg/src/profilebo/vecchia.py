"""Vecchia-approximated joint sampling for Matern Gaussian processes.

Prediction locations are put in maximin order and each one is drawn from its
univariate Gaussian conditional given its ``cond_size`` nearest neighbours
among the training inputs and the locations sampled before it. All routines
work on *scaled* coordinates (inputs divided by lengthscales) and on the
correlation scale; callers multiply by the process variance.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from profilebo.errors import NumericalFailure

__all__ = ["maximin_order", "ordered_neighbors", "vecchia_draws", "VecchiaPlan"]

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)


@njit(cache=True, inline="always")
def _matern(r, nu2):
    # nu2 = 2 * nu, restricted to 3 (nu = 1.5) or 5 (nu = 2.5)
    if nu2 == 3:
        a = _SQRT3 * r
        return (1.0 + a) * math.exp(-a)
    a = _SQRT5 * r
    return (1.0 + a + a * a / 3.0) * math.exp(-a)


@njit(cache=True)
def _maximin(Z, mind):
    n, d = Z.shape
    order = np.empty(n, dtype=np.int64)
    rem = np.arange(n)
    cnt = n
    j = 0
    for i in range(1, n):
        if mind[i] > mind[j]:
            j = i
    for k in range(n):
        order[k] = j
        best = -1.0
        nxt = -1
        p = 0
        while p < cnt:
            i = rem[p]
            if i == j:
                cnt -= 1
                rem[p] = rem[cnt]
                continue
            s = 0.0
            for c in range(d):
                t = Z[i, c] - Z[j, c]
                s += t * t
            if s < mind[i]:
                mind[i] = s
            if mind[i] > best or (mind[i] == best and i < nxt):
                best = mind[i]
                nxt = i
            p += 1
        j = nxt
    return order


def maximin_order(Z_pred: np.ndarray, Z_train: np.ndarray | None = None) -> np.ndarray:
    """Greedy maximin ordering of prediction points.

    Each next point maximises its distance to the training inputs and all
    previously ordered points. Without training inputs the first point is
    the one nearest the centroid. Ties resolve to the lowest index.
    """
    Z_pred = np.ascontiguousarray(Z_pred, dtype=float)
    if Z_train is not None and len(Z_train):
        mind = cKDTree(Z_train).query(Z_pred, k=1)[0] ** 2
    else:
        mind = np.sum((Z_pred - Z_pred.mean(axis=0)) ** 2, axis=1)
        mind = mind.max() + 1.0 - mind
    return _maximin(Z_pred, np.ascontiguousarray(mind, dtype=float))


def ordered_neighbors(P: np.ndarray, n_train: int, cond_size: int, block: int = 1024):
    """Nearest earlier points for each prediction row of ``P``.

    ``P`` stacks training rows first and ordered prediction rows after. Row
    ``n_train + k`` may condition on any row with a smaller index. Returns an
    ``(n_p, m)`` index array padded with -1 and the per-row neighbour counts.

    Rows are processed in blocks: a KD-tree over everything before the block
    supplies candidates, and a brute-force pass covers earlier rows inside
    the block.
    """
    P = np.asarray(P, dtype=float)
    N = P.shape[0]
    n_p = N - n_train
    m = max(0, min(cond_size, N - 1))
    nbr = np.full((n_p, max(m, 1)), -1, dtype=np.int64)
    counts = np.minimum(np.arange(n_train, N), m).astype(np.int64)
    if m == 0 or n_p == 0:
        return nbr, counts
    for s in range(n_train, N, block):
        e = min(N, s + block)
        Q = P[s:e]
        dists, idxs = [], []
        if s > 0:
            k = min(m, s)
            d1, i1 = cKDTree(P[:s]).query(Q, k=k)
            dists.append(np.reshape(d1, (e - s, k)) ** 2)
            idxs.append(np.reshape(i1, (e - s, k)))
        if e - s > 1:
            D = cdist(Q, Q, "sqeuclidean")
            D[np.triu_indices(e - s)] = np.inf
            k2 = min(m, e - s - 1)
            sel = np.argpartition(D, k2 - 1, axis=1)[:, :k2]
            dists.append(np.take_along_axis(D, sel, axis=1))
            idxs.append(sel + s)
        if not dists:
            continue
        dd = np.hstack(dists)
        ii = np.hstack(idxs)
        pick = np.argsort(dd, axis=1, kind="stable")[:, :m]
        chosen = np.take_along_axis(ii, pick, axis=1)
        for r in range(e - s):
            c = counts[s - n_train + r]
            nbr[s - n_train + r, :c] = chosen[r, :c]
    return nbr, counts


@njit(cache=True, fastmath=True)
def _weights(P, n_train, nbr, counts, nu2, nugget):
    n_p, m = nbr.shape
    B = np.zeros((n_p, m))
    var = np.empty(n_p)
    d = P.shape[1]
    C = np.empty((m, m))
    c = np.empty(m)
    v = np.empty(m)
    Q = np.empty((m, d))
    status = 0
    for k in range(n_p):
        q = counts[k]
        j = n_train + k
        # gather neighbour coordinates into a contiguous buffer
        for a in range(q):
            ia = nbr[k, a]
            for t in range(d):
                Q[a, t] = P[ia, t]
        for a in range(q):
            s = 0.0
            for t in range(d):
                u = Q[a, t] - P[j, t]
                s += u * u
            c[a] = _matern(math.sqrt(s), nu2)
            C[a, a] = 1.0 + nugget
            for b in range(a):
                s = 0.0
                for t in range(d):
                    u = Q[a, t] - Q[b, t]
                    s += u * u
                C[a, b] = _matern(math.sqrt(s), nu2)
        # in-place Cholesky of the leading q x q block (lower triangle)
        for a in range(q):
            s = C[a, a]
            for t in range(a):
                s -= C[a, t] * C[a, t]
            if s <= 0.0:
                status = 1
                s = 1e-300
            C[a, a] = math.sqrt(s)
            inv = 1.0 / C[a, a]
            for b in range(a + 1, q):
                s = C[b, a]
                for t in range(a):
                    s -= C[b, t] * C[a, t]
                C[b, a] = s * inv
        # forward solve L v = c, then back solve L^T b = v
        vv = 0.0
        for a in range(q):
            s = c[a]
            for t in range(a):
                s -= C[a, t] * v[t]
            v[a] = s / C[a, a]
            vv += v[a] * v[a]
        for a in range(q - 1, -1, -1):
            s = v[a]
            for t in range(a + 1, q):
                s -= C[t, a] * B[k, t]
            B[k, a] = s / C[a, a]
        var[k] = 1.0 + nugget - vv
    return B, var, status


@njit(cache=True)
def _draw(V, n_train, nbr, counts, B, sd, Z):
    n_p = nbr.shape[0]
    S = V.shape[1]
    for k in range(n_p):
        row = n_train + k
        for s in range(S):
            V[row, s] = sd[k] * Z[k, s]
        for a in range(counts[k]):
            w = B[k, a]
            src = nbr[k, a]
            for s in range(S):
                V[row, s] += w * V[src, s]


class VecchiaPlan:
    """Ordering, neighbour sets and conditional weights for one geometry.

    Parameters
    ----------
    Z_train, Z_pred : arrays
        Scaled training and prediction coordinates.
    cond_size : int
        Maximum conditioning-set size.
    nu : float
        Matern smoothness, 1.5 or 2.5.
    nugget : float
        Diagonal nugget on the correlation scale.
    order, neighbors : optional
        Reuse a precomputed ordering and neighbour structure (for instance
        across MCMC draws that share the same prediction set).
    """

    def __init__(self, Z_train, Z_pred, cond_size, nu=2.5, nugget=1e-6,
                 order=None, neighbors=None):
        Z_train = np.ascontiguousarray(np.atleast_2d(Z_train), dtype=float)
        Z_pred = np.ascontiguousarray(np.atleast_2d(Z_pred), dtype=float)
        self.n_train = Z_train.shape[0]
        self.n_pred = Z_pred.shape[0]
        self.order = maximin_order(Z_pred, Z_train) if order is None else order
        P = np.ascontiguousarray(np.vstack([Z_train, Z_pred[self.order]]))
        if neighbors is None:
            neighbors = ordered_neighbors(P, self.n_train, cond_size)
        self.nbr, self.counts = neighbors
        B, var, status = _weights(P, self.n_train, self.nbr, self.counts,
                                  int(round(2 * nu)), float(nugget))
        if status:
            raise NumericalFailure("conditioning-set covariance is not positive definite")
        if np.any(var < -1e-8):
            k = int(np.argmin(var))
            raise NumericalFailure(
                f"negative conditional variance {var[k]:.3e} at prediction point "
                f"{int(self.order[k])}"
            )
        self.weights = B
        self.cond_var = np.maximum(var, 0.0)

    @property
    def neighbors(self):
        return self.nbr, self.counts

    def draw(self, resid_train, scale, n_samples, rng) -> np.ndarray:
        """Joint draws of the zero-mean process, shape ``(n_samples, n_pred)``.

        ``resid_train`` holds training responses minus their prior mean, on
        the same scale as the returned draws; ``scale`` is the process
        standard deviation ``sqrt(tau2)``.
        """
        N = self.n_train + self.n_pred
        V = np.empty((N, n_samples))
        V[: self.n_train] = np.asarray(resid_train, dtype=float)[:, None]
        Z = rng.standard_normal((self.n_pred, n_samples))
        sd = scale * np.sqrt(self.cond_var)
        # weights are on the correlation scale; training residuals carry tau
        _draw(V, self.n_train, self.nbr, self.counts, self.weights, sd, Z)
        out = np.empty((n_samples, self.n_pred))
        out[:, self.order] = V[self.n_train:].T
        return out


def vecchia_draws(Z_train, resid_train, Z_pred, scale, n_samples, cond_size, rng,
                  nu=2.5, nugget=1e-6) -> np.ndarray:
    """One-shot convenience wrapper around :class:`VecchiaPlan`."""
    plan = VecchiaPlan(Z_train, Z_pred, cond_size, nu=nu, nugget=nugget)
    return plan.draw(resid_train, scale, n_samples, rng)
