"""Stationary Gaussian process surrogate with Matern kernels.

Covariances follow ``K(X)_ij = tau2 * (k(||x_i - x_j||) + g * 1[i == j])``
with a fixed nugget ``g``. Separable lengthscales are fit by maximising the
log marginal likelihood of standardized responses with ``tau2`` profiled
out. Joint posterior draws use the Vecchia sampler in
:mod:`profilebo.vecchia`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

from profilebo.errors import InvalidArgument, NumericalFailure
from profilebo.testbed import Dataset
from profilebo.vecchia import VecchiaPlan

__all__ = [
    "Hyperparameters",
    "GPFit",
    "JointSamples",
    "matern_corr",
    "correlation",
    "kernel_matrix",
    "fit_gp",
    "posterior",
    "sample_joint",
    "closest_pair",
]

log = logging.getLogger(__name__)

DEFAULT_NUGGET = 1e-6
MAX_NUGGET = 1e-4
TAU2_FLOOR = 1e-10


def matern_corr(dist, lengthscale=1.0, nu=2.5):
    """Matern correlation for smoothness 1.5 or 2.5.

    Parameters
    ----------
    dist : float or array
        Non-negative distances.
    lengthscale : float
        Positive lengthscale dividing ``dist``.
    nu : {1.5, 2.5}

    Returns
    -------
    float or array
        Correlations in ``(0, 1]``; exactly 1 at zero distance.
    """
    if not np.all(np.asarray(lengthscale) > 0):
        raise InvalidArgument(f"lengthscale must be positive, got {lengthscale}")
    r = np.asarray(dist, dtype=float) / lengthscale
    if np.any(r < 0):
        raise InvalidArgument("distances must be non-negative")
    if nu == 2.5:
        a = math.sqrt(5.0) * r
        out = (1.0 + a + a * a / 3.0) * np.exp(-a)
    elif nu == 1.5:
        a = math.sqrt(3.0) * r
        out = (1.0 + a) * np.exp(-a)
    else:
        raise InvalidArgument(f"smoothness must be 1.5 or 2.5, got {nu}")
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Hyperparameters:
    """Kernel hyperparameters.

    ``lengthscales`` has one entry per input (separable) or a single entry
    applied to every input (isotropic).
    """

    tau2: float
    lengthscales: np.ndarray
    nugget: float = DEFAULT_NUGGET
    smoothness: float = 2.5

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if not self.tau2 > 0:
            raise InvalidArgument(f"tau2 must be positive, got {self.tau2}")
        if np.any(ls <= 0):
            raise InvalidArgument(f"lengthscales must be positive, got {ls}")
        if self.nugget < 0:
            raise InvalidArgument("nugget must be non-negative")
        if self.smoothness not in (1.5, 2.5):
            raise InvalidArgument(f"smoothness must be 1.5 or 2.5, got {self.smoothness}")
        object.__setattr__(self, "lengthscales", ls)

    def scale(self, X):
        return np.asarray(X, dtype=float) / self.lengthscales

    def to_dict(self) -> dict:
        return {
            "tau2": self.tau2,
            "lengthscales": self.lengthscales.tolist(),
            "nugget": self.nugget,
            "smoothness": self.smoothness,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        return cls(d["tau2"], np.asarray(d["lengthscales"]), d["nugget"], d["smoothness"])


def correlation(A, B, hyp: Hyperparameters) -> np.ndarray:
    """Cross-correlation matrix ``k(A, B)`` without nugget."""
    D = cdist(hyp.scale(A), hyp.scale(B))
    return matern_corr(D, 1.0, hyp.smoothness)


def kernel_matrix(X, hyp: Hyperparameters) -> np.ndarray:
    """``K(X) = tau2 * (k(X, X) + g I)``."""
    R = correlation(X, X, hyp)
    R[np.diag_indices_from(R)] = 1.0 + hyp.nugget
    return hyp.tau2 * R


def closest_pair(X) -> tuple[int, int, float]:
    X = np.atleast_2d(X)
    D = cdist(X, X)
    D[np.diag_indices_from(D)] = np.inf
    i, j = np.unravel_index(np.argmin(D), D.shape)
    return int(min(i, j)), int(max(i, j)), float(D[i, j])


def _check_duplicates(X, tol=1e-12):
    if X.shape[0] < 2:
        return
    i, j, dmin = closest_pair(X)
    if dmin <= tol:
        raise InvalidArgument(f"duplicate training rows {i} and {j}: {X[i].tolist()}")


def _cholesky_escalating(R_offdiag, X, nugget):
    """Cholesky of ``R + g I`` raising ``g`` tenfold up to ``MAX_NUGGET``."""
    g = nugget
    while True:
        C = R_offdiag.copy()
        C[np.diag_indices_from(C)] = 1.0 + g
        try:
            return linalg.cholesky(C, lower=True), g
        except linalg.LinAlgError:
            if g >= MAX_NUGGET * (1.0 - 1e-9):
                i, j, dmin = closest_pair(X)
                raise NumericalFailure(
                    f"covariance not positive definite with nugget {g:g}; nearest "
                    f"points are rows {i} and {j} at distance {dmin:.3e}"
                ) from None
            g = min(max(g * 10.0, 1e-12), MAX_NUGGET)
            log.warning("Cholesky failed; nugget raised to %g", g)


def _dR_dlogls(X, ls, nu):
    """Correlation and its derivatives with respect to log lengthscales."""
    Z = X / ls
    diff2 = (Z[:, None, :] - Z[None, :, :]) ** 2
    r = np.sqrt(diff2.sum(axis=-1))
    if nu == 2.5:
        a = math.sqrt(5.0) * r
        e = np.exp(-a)
        R = (1.0 + a + a * a / 3.0) * e
        fac = (5.0 / 3.0) * (1.0 + a) * e
    else:
        a = math.sqrt(3.0) * r
        e = np.exp(-a)
        R = (1.0 + a) * e
        fac = 3.0 * e
    return R, fac[..., None] * diff2


def _profile_loglik(log_ls, X, y, nugget, nu, isotropic, with_grad=True):
    d = X.shape[1]
    ls = np.exp(np.repeat(log_ls, d) if isotropic else log_ls)
    n = y.shape[0]
    R, dR = _dR_dlogls(X, ls, nu)
    R[np.diag_indices(n)] = 1.0 + nugget
    try:
        cf = linalg.cho_factor(R, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return -np.inf, np.zeros_like(log_ls)
    alpha = linalg.cho_solve(cf, y, check_finite=False)
    quad = max(float(y @ alpha), n * TAU2_FLOOR)
    tau2 = quad / n
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    ll = -0.5 * n * math.log(2.0 * math.pi * tau2) - 0.5 * logdet - 0.5 * n
    if not with_grad:
        return ll, None
    Cinv = linalg.cho_solve(cf, np.eye(n), check_finite=False)
    # d ll = 0.5 a' dC a / tau2 - 0.5 tr(C^-1 dC)
    grad = 0.5 * np.einsum("i,ijk,j->k", alpha, dR, alpha) / tau2 - 0.5 * np.einsum(
        "ij,jik->k", Cinv, dR
    )
    if isotropic:
        grad = np.array([grad.sum()])
    return ll, grad


@dataclass(frozen=True)
class GPFit:
    """A trained GP: standardized data, hyperparameters and cached factor."""

    data: Dataset
    hyp: Hyperparameters
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    loglik: float = float("nan")
    start_logliks: tuple = ()

    @classmethod
    def build(cls, data: Dataset, hyp: Hyperparameters, loglik=float("nan"), start_logliks=()):
        R = correlation(data.X, data.X, hyp)
        L, g = _cholesky_escalating(R, data.X, hyp.nugget)
        if g != hyp.nugget:
            hyp = Hyperparameters(hyp.tau2, hyp.lengthscales, g, hyp.smoothness)
        alpha = linalg.cho_solve((L, True), data.y_std)
        return cls(data, hyp, L, alpha, loglik, tuple(start_logliks))

    def _cross(self, Xp):
        Xp = np.atleast_2d(np.asarray(Xp, dtype=float))
        if Xp.shape[1] != self.data.d:
            raise InvalidArgument(
                f"prediction inputs have {Xp.shape[1]} columns, expected {self.data.d}"
            )
        return Xp, correlation(Xp, self.data.X, self.hyp)

    def posterior(self, Xp):
        """Exact posterior mean and covariance in standardized units."""
        Xp, Rpn = self._cross(Xp)
        mean = Rpn @ self.alpha
        V = linalg.solve_triangular(self.chol, Rpn.T, lower=True)
        Rpp = correlation(Xp, Xp, self.hyp)
        Rpp[np.diag_indices_from(Rpp)] = 1.0 + self.hyp.nugget
        cov = self.hyp.tau2 * (Rpp - V.T @ V)
        return mean, 0.5 * (cov + cov.T)

    def predict(self, Xp):
        """Pointwise posterior mean and standard deviation (standardized units)."""
        Xp, Rpn = self._cross(Xp)
        mean = Rpn @ self.alpha
        V = linalg.solve_triangular(self.chol, Rpn.T, lower=True)
        var = self.hyp.tau2 * (1.0 + self.hyp.nugget - np.sum(V * V, axis=0))
        return mean, np.sqrt(np.maximum(var, 0.0))

    def sample_joint(self, Xp, n_samples, cond_size=40, seed=None):
        return sample_joint(self, Xp, n_samples, cond_size, seed)

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "gp",
                "hyperparameters": self.hyp.to_dict(),
                "loglik": self.loglik,
                "control_index": self.data.control_index,
                "X": self.data.X.tolist(),
                "y": self.data.y.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GPFit":
        d = json.loads(text)
        data = Dataset.from_arrays(d["X"], d["y"], d["control_index"])
        return cls.build(data, Hyperparameters.from_dict(d["hyperparameters"]), d["loglik"])


def _default_starts(n_starts):
    return np.log(0.1 * 2.0 ** np.arange(n_starts))


def fit_gp(
    data: Dataset,
    nugget: float = DEFAULT_NUGGET,
    smoothness: float = 2.5,
    lengthscale_bounds: tuple[float, float] = (1e-2, 5.0),
    n_starts: int = 5,
    isotropic: bool = False,
) -> GPFit:
    """Maximum likelihood fit of a Matern GP to standardized responses.

    Lengthscales are optimised in log space by L-BFGS-B from ``n_starts``
    fixed starting values; ``tau2`` is profiled out analytically and floored
    at ``1e-10`` so constant responses still fit.
    """
    if data.n < 2:
        raise InvalidArgument(f"fit_gp needs at least 2 points, got {data.n}")
    _check_duplicates(data.X)
    X, y = data.X, data.y_std
    d = X.shape[1]
    lo, hi = np.log(lengthscale_bounds[0]), np.log(lengthscale_bounds[1])
    k = 1 if isotropic else d
    bounds = [(lo, hi)] * k

    def negll(theta):
        ll, g = _profile_loglik(theta, X, y, nugget, smoothness, isotropic)
        if not np.isfinite(ll):
            return 1e25, np.zeros_like(theta)
        return -ll, -g

    best_ll, best_theta, start_lls = -np.inf, None, []
    for s in np.clip(_default_starts(n_starts), lo, hi):
        theta0 = np.full(k, s)
        ll0 = _profile_loglik(theta0, X, y, nugget, smoothness, isotropic, False)[0]
        start_lls.append(ll0)
        if ll0 > best_ll:
            best_ll, best_theta = ll0, theta0
        res = optimize.minimize(negll, theta0, jac=True, method="L-BFGS-B", bounds=bounds)
        ll = _profile_loglik(res.x, X, y, nugget, smoothness, isotropic, False)[0]
        if ll > best_ll:
            best_ll, best_theta = ll, np.clip(res.x, lo, hi)
    if best_theta is None:
        i, j, dmin = closest_pair(X)
        raise NumericalFailure(
            f"likelihood not finite at any start; nearest rows {i} and {j} "
            f"at distance {dmin:.3e}"
        )
    ls = np.exp(np.repeat(best_theta, d) if isotropic else best_theta)
    R = correlation(X, X, Hyperparameters(1.0, ls, nugget, smoothness))
    L, g = _cholesky_escalating(R, X, nugget)
    alpha = linalg.cho_solve((L, True), y)
    tau2 = max(float(y @ alpha) / data.n, TAU2_FLOOR)
    hyp = Hyperparameters(tau2, ls, g, smoothness)
    return GPFit(data, hyp, L, alpha, best_ll, tuple(start_lls))


def posterior(fit: GPFit, Xp):
    """Exact GP posterior at ``Xp`` (standardized units)."""
    return fit.posterior(Xp)


@dataclass(frozen=True)
class JointSamples:
    """Joint posterior draws: row ``s`` is one realisation over ``locations``.

    Draws are in standardized response units.
    """

    locations: np.ndarray
    draws: np.ndarray
    conditioning_size: int

    def __post_init__(self):
        if self.draws.ndim != 2 or self.draws.shape[0] < 1:
            raise InvalidArgument("draws must be a non-empty (S, n_p) matrix")
        if self.draws.shape[1] != self.locations.shape[0]:
            raise InvalidArgument("draws and locations disagree in size")

    @property
    def n_samples(self) -> int:
        return self.draws.shape[0]


def sample_joint(fit: GPFit, Xp, n_samples: int, cond_size: int = 40, seed=None) -> JointSamples:
    """Vecchia-approximated joint posterior draws at ``Xp``.

    Conditioning sets are the ``cond_size`` nearest (in lengthscale-scaled
    distance) among the training inputs and earlier prediction points in
    maximin order. With ``cond_size >= n + n_p - 1`` the draws are exact.
    """
    if n_samples < 1 or cond_size < 1:
        raise InvalidArgument("n_samples and cond_size must be positive")
    Xp = np.atleast_2d(np.asarray(Xp, dtype=float))
    if Xp.shape[1] != fit.data.d:
        raise InvalidArgument(
            f"prediction inputs have {Xp.shape[1]} columns, expected {fit.data.d}"
        )
    rng = np.random.default_rng(seed)
    hyp = fit.hyp
    plan = VecchiaPlan(hyp.scale(fit.data.X), hyp.scale(Xp), cond_size,
                       nu=hyp.smoothness, nugget=hyp.nugget)
    draws = plan.draw(fit.data.y_std, math.sqrt(hyp.tau2), n_samples, rng)
    return JointSamples(Xp, draws, cond_size)
