"""Two-layer deep Gaussian process with elliptical slice sampling.

Model::

    y   ~ N(0, tau2 * (k(W / l_y) + g I))
    w_i ~ N(x_i, tau2_w * (k(X / l_i) + g I)),   i = 1..d

The latent columns ``w_i`` are updated by elliptical slice sampling; the
outer lengthscale ``l_y`` and inner lengthscales ``l_i`` by random-walk
Metropolis in log space with step sizes adapted during burn-in. ``tau2`` is
profiled out of the outer likelihood and ``tau2_w`` is fixed. Both layers
use isotropic Matern kernels.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from numba import njit
from scipy.spatial.distance import cdist

from profilebo.errors import InvalidArgument, NumericalFailure
from profilebo.gp import DEFAULT_NUGGET, Hyperparameters, JointSamples, matern_corr
from profilebo.testbed import Dataset
from profilebo.vecchia import VecchiaPlan, _matern, maximin_order, ordered_neighbors

__all__ = ["DGPPriors", "DGPState", "ess_update", "fit_dgp", "dgp_sample_joint"]

log = logging.getLogger(__name__)

MAX_SHRINKS = 100
MAX_BAD_ITERS = 50
LS_BOUNDS = (1e-2, 10.0)
INIT_INNER_LS = math.sqrt(0.1)
INIT_OUTER_LS = math.sqrt(0.1)


def ess_update(current, prior_chol, loglik, seed=None, mean=None, cur_loglik=None,
               initial_angle=None):
    """One elliptical slice sampling step.

    Parameters
    ----------
    current : array of shape (n,)
        Current state.
    prior_chol : array of shape (n, n)
        Lower Cholesky factor of the Gaussian prior covariance.
    loglik : callable
        Log-likelihood of a full state vector.
    seed : int or Generator, optional
    mean : array, optional
        Prior mean (zero if omitted).
    cur_loglik : float, optional
        ``loglik(current)`` if already known.
    initial_angle : float, optional
        First proposal angle; drawn uniformly on ``[0, 2 pi)`` if omitted.

    Returns
    -------
    (new_state, new_loglik)
    """
    rng = np.random.default_rng(seed)
    current = np.asarray(current, dtype=float)
    mu = np.zeros_like(current) if mean is None else np.asarray(mean, dtype=float)
    ll0 = loglik(current) if cur_loglik is None else cur_loglik
    if np.isnan(ll0):
        raise NumericalFailure("log-likelihood is NaN at the current state")
    nu = prior_chol @ rng.standard_normal(current.shape[0])
    log_y = ll0 + math.log(rng.random())
    theta = rng.uniform(0.0, 2.0 * math.pi) if initial_angle is None else float(initial_angle)
    lo, hi = theta - 2.0 * math.pi, theta
    f0 = current - mu
    for _ in range(MAX_SHRINKS):
        prop = f0 * math.cos(theta) + nu * math.sin(theta) + mu
        ll = loglik(prop)
        if np.isnan(ll):
            raise NumericalFailure("log-likelihood returned NaN during slice sampling")
        if ll > log_y:
            return prop, ll
        if theta < 0.0:
            lo = theta
        else:
            hi = theta
        theta = rng.uniform(lo, hi)
    raise NumericalFailure(f"elliptical slice sampler did not accept within {MAX_SHRINKS} shrinks")


@dataclass(frozen=True)
class DGPPriors:
    """Gamma priors on squared lengthscales plus the fixed inner-layer scale."""

    outer_shape: float = 1.5
    outer_rate: float = 3.9 / 1.5
    inner_shape: float = 1.5
    inner_rate: float = 3.9 / 4.0
    inner_tau2: float = 0.1


def _log_gamma_sq(ls, shape, rate):
    # log density of theta = ls^2 ~ Gamma(shape, rate), expressed in log ls
    theta = ls * ls
    return (shape - 1.0) * math.log(theta) - rate * theta + math.log(2.0 * theta)


def _corr(Z, nu, nugget):
    R = matern_corr(cdist(Z, Z), 1.0, nu)
    R[np.diag_indices_from(R)] = 1.0 + nugget
    return R


@njit(cache=True)
def _chol_corr(Z, inv_ls, nu2, nugget):
    """Lower Cholesky factor of ``k(Z * inv_ls) + g I``; NaN-filled on failure."""
    n, d = Z.shape
    L = np.zeros((n, n))
    for a in range(n):
        for b in range(a):
            s = 0.0
            for t in range(d):
                u = (Z[a, t] - Z[b, t]) * inv_ls
                s += u * u
            L[a, b] = _matern(math.sqrt(s), nu2)
        L[a, a] = 1.0 + nugget
    for a in range(n):
        s = L[a, a]
        for t in range(a):
            s -= L[a, t] * L[a, t]
        if not s > 0.0:
            L[:, :] = np.nan
            return L
        L[a, a] = math.sqrt(s)
        for b in range(a + 1, n):
            s = L[b, a]
            for t in range(a):
                s -= L[b, t] * L[a, t]
            L[b, a] = s / L[a, a]
    return L


@njit(cache=True)
def _quad_logdet(L, r):
    """``r' (L L')^-1 r`` and ``sum(log(diag(L)))``."""
    n = r.shape[0]
    v = np.empty(n)
    q = 0.0
    ld = 0.0
    for a in range(n):
        s = r[a]
        for t in range(a):
            s -= L[a, t] * v[t]
        v[a] = s / L[a, a]
        q += v[a] * v[a]
        ld += math.log(L[a, a])
    return q, ld


@njit(cache=True)
def _outer_loglik_nb(W, ls, y, nu2, nugget):
    n = y.shape[0]
    L = _chol_corr(W, 1.0 / ls, nu2, nugget)
    if np.isnan(L[0, 0]):
        return -np.inf, np.nan
    q, ld = _quad_logdet(L, y)
    tau2 = max(q / n, 1e-10)
    return -0.5 * n * math.log(2.0 * math.pi * tau2) - ld - 0.5 * n, tau2


def _outer_loglik(W, ls, y, nu, nugget):
    return _outer_loglik_nb(W, float(ls), y, int(round(2 * nu)), float(nugget))


def _inner_chol(X, ls, nu, nugget):
    L = _chol_corr(X, 1.0 / float(ls), int(round(2 * nu)), float(nugget))
    return None if np.isnan(L[0, 0]) else L


def _inner_prior(w, x, L, tau2w):
    q, ld = _quad_logdet(L, w - x)
    return -0.5 * q / tau2w - ld


@dataclass
class DGPState:
    """Retained MCMC draws of a two-layer deep GP.

    Attributes
    ----------
    data : Dataset
    W_draws : array (T, n, d)
        Retained latent layers.
    inner_ls : array (T, d)
        Inner-node lengthscales per retained draw.
    outer_ls : array (T,)
        Outer lengthscale per retained draw.
    outer_tau2 : array (T,)
        Profiled outer scale per retained draw.
    mcmc_log : dict
        ``loglik`` trace over all iterations and Metropolis acceptance rates.
    last : dict
        Final chain state (``W``, ``inner_ls``, ``outer_ls``, ``steps``) used
        for warm restarts.
    """

    data: Dataset
    W_draws: np.ndarray
    inner_ls: np.ndarray
    outer_ls: np.ndarray
    outer_tau2: np.ndarray
    priors: DGPPriors = field(default_factory=DGPPriors)
    nugget: float = DEFAULT_NUGGET
    smoothness: float = 2.5
    mcmc_log: dict = field(default_factory=dict, repr=False)
    last: dict = field(default_factory=dict, repr=False)

    @property
    def mu_w(self) -> np.ndarray:
        return self.data.X

    @property
    def n_draws(self) -> int:
        return self.W_draws.shape[0]

    @property
    def inner_hyp(self) -> list[Hyperparameters]:
        """Inner-layer hyperparameters of the final retained draw, per node."""
        return [
            Hyperparameters(self.priors.inner_tau2, [ls], self.nugget, self.smoothness)
            for ls in self.inner_ls[-1]
        ]

    @property
    def outer_hyp(self) -> Hyperparameters:
        return Hyperparameters(
            float(self.outer_tau2[-1]), [self.outer_ls[-1]], self.nugget, self.smoothness
        )

    def _inner_mean(self, t, Xp):
        X = self.data.X
        out = np.empty((Xp.shape[0], X.shape[1]))
        for i in range(X.shape[1]):
            ls = self.inner_ls[t, i]
            R = _corr(X / ls, self.smoothness, self.nugget)
            Rpn = matern_corr(cdist(Xp / ls, X / ls), 1.0, self.smoothness)
            resid = self.W_draws[t, :, i] - X[:, i]
            out[:, i] = Xp[:, i] + Rpn @ linalg.solve(R, resid, assume_a="pos")
        return out

    def predict(self, Xp):
        """Pointwise mean and sd (standardized units) mixed over retained draws.

        Each draw warps ``Xp`` by the inner layer's posterior mean.
        """
        Xp = np.atleast_2d(np.asarray(Xp, dtype=float))
        y = self.data.y_std
        means, variances = [], []
        for t in range(self.n_draws):
            Wp = self._inner_mean(t, Xp)
            ls = self.outer_ls[t]
            Wn = self.W_draws[t]
            L = linalg.cholesky(_corr(Wn / ls, self.smoothness, self.nugget), lower=True)
            Rpn = matern_corr(cdist(Wp / ls, Wn / ls), 1.0, self.smoothness)
            V = linalg.solve_triangular(L, Rpn.T, lower=True)
            alpha = linalg.cho_solve((L, True), y)
            means.append(Rpn @ alpha)
            variances.append(
                self.outer_tau2[t] * np.maximum(1.0 + self.nugget - np.sum(V * V, axis=0), 0.0)
            )
        means = np.array(means)
        var = np.mean(variances, axis=0) + np.var(means, axis=0)
        return means.mean(axis=0), np.sqrt(var)

    def sample_joint(self, Xp, n_samples, cond_size=40, seed=None):
        per_draw = max(1, n_samples // self.n_draws)
        return dgp_sample_joint(self, Xp, per_draw, cond_size, seed)

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "dgp",
                "X": self.data.X.tolist(),
                "y": self.data.y.tolist(),
                "control_index": self.data.control_index,
                "W_draws": self.W_draws.tolist(),
                "inner_ls": self.inner_ls.tolist(),
                "outer_ls": self.outer_ls.tolist(),
                "outer_tau2": self.outer_tau2.tolist(),
                "priors": vars(self.priors),
                "nugget": self.nugget,
                "smoothness": self.smoothness,
                "last": {
                    "W": self.last["W"].tolist(),
                    "inner_ls": self.last["inner_ls"].tolist(),
                    "outer_ls": self.last["outer_ls"],
                    "steps": self.last["steps"].tolist(),
                },
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DGPState":
        d = json.loads(text)
        data = Dataset.from_arrays(d["X"], d["y"], d["control_index"])
        last = d["last"]
        return cls(
            data,
            np.asarray(d["W_draws"]),
            np.asarray(d["inner_ls"]),
            np.asarray(d["outer_ls"]),
            np.asarray(d["outer_tau2"]),
            DGPPriors(**d["priors"]),
            d["nugget"],
            d["smoothness"],
            {},
            {
                "W": np.asarray(last["W"]),
                "inner_ls": np.asarray(last["inner_ls"]),
                "outer_ls": float(last["outer_ls"]),
                "steps": np.asarray(last["steps"]),
            },
        )


def _extend_latent(prev: DGPState, X):
    """Warm-start latent values for an enlarged design."""
    W_old = prev.last["W"]
    n_old = W_old.shape[0]
    if X.shape[0] == n_old:
        return W_old.copy()
    Xo = prev.data.X
    Xn = X[n_old:]
    W_new = np.empty((Xn.shape[0], X.shape[1]))
    for i in range(X.shape[1]):
        ls = prev.last["inner_ls"][i]
        R = _corr(Xo / ls, prev.smoothness, prev.nugget)
        Rpn = matern_corr(cdist(Xn / ls, Xo / ls), 1.0, prev.smoothness)
        W_new[:, i] = Xn[:, i] + Rpn @ linalg.solve(R, W_old[:, i] - Xo[:, i], assume_a="pos")
    return np.vstack([W_old, W_new])


def fit_dgp(
    data: Dataset,
    iters: int = 10_000,
    seed=None,
    retained: int = 100,
    previous: DGPState | None = None,
    priors: DGPPriors | None = None,
    nugget: float = DEFAULT_NUGGET,
    smoothness: float = 2.5,
) -> DGPState:
    """Run the deep GP sampler.

    The first half of the ``iters`` iterations is burn-in (Metropolis steps
    adapt toward 40% acceptance there); the second half is thinned to
    ``retained`` evenly spaced draws. With ``previous`` the chain starts
    from that fit's final latent layer and hyperparameters, with new rows
    initialised at the inner layer's posterior mean.
    """
    if data.n < 5:
        raise InvalidArgument(f"fit_dgp needs at least 5 points, got {data.n}")
    if iters < 2:
        raise InvalidArgument("iters must be at least 2")
    rng = np.random.default_rng(seed)
    priors = priors or (previous.priors if previous is not None else DGPPriors())
    X, y = data.X, data.y_std
    n, d = X.shape
    if previous is not None:
        W = _extend_latent(previous, X)
        inner_ls = previous.last["inner_ls"].copy()
        outer_ls = float(previous.last["outer_ls"])
        steps = previous.last["steps"].copy()
    else:
        W = X.copy()
        inner_ls = np.full(d, INIT_INNER_LS)
        outer_ls = INIT_OUTER_LS
        steps = np.full(d + 1, 0.3)

    tau2w = priors.inner_tau2
    X = np.ascontiguousarray(X)
    inner_L = [_inner_chol(X, inner_ls[i], smoothness, nugget) for i in range(d)]
    ll, tau2 = _outer_loglik(W, outer_ls, y, smoothness, nugget)

    burn = iters // 2
    keep = set(np.unique(np.linspace(burn, iters - 1, min(retained, iters - burn)).round().astype(int)).tolist())
    W_keep, inner_keep, outer_keep, tau2_keep = [], [], [], []
    trace = np.empty(iters)
    accepts = np.zeros(d + 1)
    batch_acc = np.zeros(d + 1)
    bad = 0
    lo, hi = np.log(LS_BOUNDS[0]), np.log(LS_BOUNDS[1])

    for it in range(iters):
        # outer lengthscale
        prop = math.log(outer_ls) + steps[d] * rng.standard_normal()
        if lo <= prop <= hi:
            ls_p = math.exp(prop)
            ll_p, tau2_p = _outer_loglik(W, ls_p, y, smoothness, nugget)
            log_r = (ll_p + _log_gamma_sq(ls_p, priors.outer_shape, priors.outer_rate)
                     - ll - _log_gamma_sq(outer_ls, priors.outer_shape, priors.outer_rate))
            if np.isfinite(ll_p) and math.log(rng.random()) < log_r:
                outer_ls, ll, tau2 = ls_p, ll_p, tau2_p
                accepts[d] += 1
                batch_acc[d] += 1

        for i in range(d):
            # inner lengthscale given w_i
            prop = math.log(inner_ls[i]) + steps[i] * rng.standard_normal()
            if lo <= prop <= hi:
                ls_p = math.exp(prop)
                L_p = _inner_chol(X, ls_p, smoothness, nugget)
                if L_p is not None:
                    log_r = (_inner_prior(W[:, i], X[:, i], L_p, tau2w)
                             + _log_gamma_sq(ls_p, priors.inner_shape, priors.inner_rate)
                             - _inner_prior(W[:, i], X[:, i], inner_L[i], tau2w)
                             - _log_gamma_sq(inner_ls[i], priors.inner_shape, priors.inner_rate))
                    if math.log(rng.random()) < log_r:
                        inner_ls[i], inner_L[i] = ls_p, L_p
                        accepts[i] += 1
                        batch_acc[i] += 1

            # latent column by elliptical slice sampling
            def col_loglik(w, i=i):
                Wt = W.copy()
                Wt[:, i] = w
                return _outer_loglik(Wt, outer_ls, y, smoothness, nugget)[0]

            w_new, ll = ess_update(W[:, i], math.sqrt(tau2w) * inner_L[i], col_loglik,
                                   rng, mean=X[:, i], cur_loglik=ll)
            W[:, i] = w_new

        trace[it] = ll
        bad = bad + 1 if not np.isfinite(ll) else 0
        if bad >= MAX_BAD_ITERS:
            raise NumericalFailure(
                f"deep GP chain diverged at iteration {it}; last log-likelihoods "
                f"{trace[max(0, it - 9): it + 1].tolist()}"
            )
        if it < burn and (it + 1) % 50 == 0:
            rate = batch_acc / 50.0
            steps *= np.exp(rate - 0.4)
            batch_acc[:] = 0.0
        if it in keep:
            tau2 = _outer_loglik(W, outer_ls, y, smoothness, nugget)[1]
            W_keep.append(W.copy())
            inner_keep.append(inner_ls.copy())
            outer_keep.append(outer_ls)
            tau2_keep.append(tau2)

    return DGPState(
        data,
        np.array(W_keep),
        np.array(inner_keep),
        np.array(outer_keep),
        np.array(tau2_keep),
        priors,
        nugget,
        smoothness,
        {"loglik": trace, "acceptance": accepts / iters, "burn_in": burn},
        {"W": W.copy(), "inner_ls": inner_ls.copy(), "outer_ls": outer_ls, "steps": steps.copy()},
    )


def dgp_sample_joint(state: DGPState, Xp, samples_per_draw: int = 10, cond_size: int = 40,
                     seed=None) -> JointSamples:
    """Joint posterior draws from a fitted deep GP.

    For every retained draw the warped prediction inputs are sampled from
    the inner layer (one Vecchia draw per node, prior mean ``Xp``), then
    ``samples_per_draw`` outer-layer draws are taken on the warped inputs.
    Maximin ordering and neighbour sets are computed once in the original
    input space and shared by every layer and draw.
    """
    if state.n_draws < 1:
        raise InvalidArgument("state holds no retained draws")
    if samples_per_draw < 1:
        raise InvalidArgument("samples_per_draw must be positive")
    Xp = np.atleast_2d(np.asarray(Xp, dtype=float))
    X = state.data.X
    if Xp.shape[1] != X.shape[1]:
        raise InvalidArgument(f"prediction inputs need {X.shape[1]} columns")
    rng = np.random.default_rng(seed)
    nu, g = state.smoothness, state.nugget
    order = maximin_order(Xp, X)
    neighbors = ordered_neighbors(np.vstack([X, Xp[order]]), X.shape[0], cond_size)
    y = state.data.y_std
    d = X.shape[1]
    out = []
    for t in range(state.n_draws):
        Wp = np.empty_like(Xp)
        for i in range(d):
            ls = state.inner_ls[t, i]
            plan = VecchiaPlan(X / ls, Xp / ls, cond_size, nu, g, order, neighbors)
            resid = state.W_draws[t, :, i] - X[:, i]
            Wp[:, i] = Xp[:, i] + plan.draw(resid, math.sqrt(state.priors.inner_tau2), 1, rng)[0]
        ls = state.outer_ls[t]
        plan = VecchiaPlan(state.W_draws[t] / ls, Wp / ls, cond_size, nu, g, order, neighbors)
        out.append(plan.draw(y, math.sqrt(state.outer_tau2[t]), samples_per_draw, rng))
    return JointSamples(Xp, np.vstack(out), cond_size)
