"""Profile estimation, EI/PEI and the sequential acquisition loops.

A profile estimate is built from joint posterior draws over a candidate set
made of control-axis values crossed with nuisance candidates: each draw is
minimised within every control slice and the slice minima summarise into a
mean curve with empirical 95% bands.

All acquisition criteria are in minimisation form and are evaluated on
standardized responses.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.spatial import cKDTree
from scipy.special import ndtr

from profilebo.candidates import CandidateSet, tricands_plus
from profilebo.dgp import DGPPriors, fit_dgp
from profilebo.errors import InvalidArgument, NumericalFailure
from profilebo.gp import DEFAULT_NUGGET, JointSamples, fit_gp
from profilebo.testbed import BlackBox, Dataset, eval_function, lhs_sample

__all__ = [
    "ProfileEstimate",
    "AcquisitionRecord",
    "LoopConfig",
    "LoopResult",
    "LoopAborted",
    "estimate_profile",
    "expected_improvement",
    "profile_expected_improvement",
    "select_xstar",
    "select_nuisance",
    "fit_surrogate",
    "final_estimate",
    "pbo_loop",
    "bo_ei_loop",
    "pei_loop",
    "lhs_loop",
    "METHODS",
    "write_profile_csv",
    "write_trace_jsonl",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
DUPLICATE_TOL = 1e-9


# --------------------------------------------------------------------------
# Profile estimates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProfileEstimate:
    """Empirical distribution of slice minima along the control axis.

    ``per_slice_minima`` has one row per control value and one column per
    posterior draw. ``ci_lo``/``ci_hi`` are the 2.5% and 97.5% empirical
    quantiles, widened if needed so they always bracket ``mu_T``.
    """

    xstar_values: np.ndarray
    mu_T: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    per_slice_minima: np.ndarray = field(repr=False)

    @property
    def ci_width(self) -> np.ndarray:
        return self.ci_hi - self.ci_lo

    @classmethod
    def from_minima(cls, xstar_values, minima) -> "ProfileEstimate":
        minima = np.atleast_2d(np.asarray(minima, dtype=float))
        mu = minima.mean(axis=1)
        lo, hi = np.quantile(minima, [0.025, 0.975], axis=1)
        return cls(
            np.asarray(xstar_values, dtype=float),
            mu,
            np.minimum(lo, mu),
            np.maximum(hi, mu),
            minima,
        )

    def to_raw(self, data: Dataset) -> "ProfileEstimate":
        """Map a standardized estimate back to raw response units."""
        return ProfileEstimate.from_minima(
            self.xstar_values, data.destandardize(self.per_slice_minima)
        )


def estimate_profile(samples: JointSamples, candidates: CandidateSet) -> ProfileEstimate:
    """Slice-wise minima of joint draws over a modified tricands set.

    Parameters
    ----------
    samples : JointSamples
        Draws at ``candidates.full`` (same row order).
    candidates : CandidateSet
    """
    c = candidates.n_per_slice
    if c == 0:
        raise InvalidArgument("candidate set has no nuisance candidates")
    g = candidates.xstar_axis.shape[0]
    if samples.draws.shape[1] != g * c:
        raise InvalidArgument(
            f"samples cover {samples.draws.shape[1]} locations, candidate set has {g * c}"
        )
    if samples.locations.shape == candidates.full.shape and not np.array_equal(
        samples.locations, candidates.full
    ):
        raise InvalidArgument("sample locations differ from the candidate set")
    minima = samples.draws.reshape(samples.n_samples, g, c).min(axis=2).T
    return ProfileEstimate.from_minima(candidates.xstar_axis, minima)


# --------------------------------------------------------------------------
# Improvement criteria
# --------------------------------------------------------------------------


def expected_improvement(mu, sigma, y_min):
    """Expected improvement below ``y_min`` of ``N(mu, sigma^2)``.

    Vectorised over array inputs; ``sigma == 0`` gives ``max(y_min - mu, 0)``.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    diff = y_min - mu
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = diff / sigma
        ei = diff * ndtr(z) + sigma * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    ei = np.where(sigma > 0, ei, np.maximum(diff, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def profile_expected_improvement(mu, sigma, y_min, mu_T_at_xstar):
    """EI with threshold ``max(y_min, mu_T_at_xstar)``."""
    threshold = np.maximum(y_min, mu_T_at_xstar)
    if np.ndim(threshold) == 0:
        threshold = float(threshold)
    return expected_improvement(mu, sigma, threshold)


def select_xstar(estimate: ProfileEstimate) -> tuple[int, float, float]:
    """Index, control value and CI width of the widest band (first on ties)."""
    w = estimate.ci_width
    if w.size == 0:
        raise InvalidArgument("profile estimate is empty")
    j = int(np.argmax(w))
    return j, float(estimate.xstar_values[j]), float(w[j])


def _exclude_existing(rows, X, tol=DUPLICATE_TOL):
    d, _ = cKDTree(X).query(rows, k=1, p=np.inf)
    return d <= tol


def select_nuisance(model, rows, y_min: float, mu_T: float, exclude=None):
    """Maximise PEI over the candidate rows of one control slice.

    Parameters
    ----------
    model
        Fitted surrogate with ``predict(X) -> (mean, sd)`` in standardized units.
    rows : array (c, d)
        Full input rows of the chosen slice.
    y_min, mu_T : float
        Best standardized response so far and the slice's profile mean.
    exclude : array (n, d), optional
        Existing design; rows within ``1e-9`` of it are never selected.

    Returns
    -------
    x : array (d,)
    value : float
        PEI at ``x``.
    zero_utility : bool
        True when every admissible PEI value is zero.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[0] == 0:
        raise InvalidArgument("no nuisance candidates to choose from")
    mu, sd = model.predict(rows)
    pei = np.atleast_1d(profile_expected_improvement(mu, sd, y_min, mu_T))
    if exclude is not None:
        pei = np.where(_exclude_existing(rows, exclude), -np.inf, pei)
    k = int(np.argmax(pei))
    if not np.isfinite(pei[k]):
        raise NumericalFailure("every candidate in the slice duplicates an existing point")
    return rows[k].copy(), float(pei[k]), bool(pei[k] <= 0.0)


# --------------------------------------------------------------------------
# Loops
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AcquisitionRecord:
    iteration: int
    x_next: np.ndarray
    xstar_next: float
    criterion_value: float
    method: str
    zero_utility: bool = False

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "x_next": [float(v) for v in self.x_next],
            "xstar_next": float(self.xstar_next),
            "criterion_value": float(self.criterion_value),
            "method": self.method,
            "zero_utility": self.zero_utility,
        }


@dataclass(frozen=True)
class LoopConfig:
    """Settings shared by all acquisition loops.

    ``axis_size`` is the LHS control axis drawn at every iteration and
    ``final_grid`` the evenly spaced axis of the reported estimate.
    """

    surrogate: str = "gp"
    axis_size: int = 50
    final_grid: int = 100
    n_samples: int = 1000
    cond_size: int = 40
    fringe_frac: float = 0.9
    ei_starts: int = 20
    dgp_iters_initial: int = 10_000
    dgp_iters_update: int = 2_000
    dgp_retained: int = 100
    dgp_inner_tau2: float = DGPPriors.inner_tau2
    nugget: float = DEFAULT_NUGGET
    smoothness: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.surrogate not in ("gp", "dgp"):
            raise InvalidArgument(f"unknown surrogate {self.surrogate!r}")
        for name in ("axis_size", "final_grid", "n_samples", "cond_size", "ei_starts",
                     "dgp_iters_initial", "dgp_iters_update", "dgp_retained"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")

    def with_seed(self, seed: int) -> "LoopConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)


class LoopAborted(RuntimeError):
    """A loop stopped early; ``partial`` holds the data and records so far."""

    def __init__(self, message, partial: "LoopResult"):
        super().__init__(message)
        self.partial = partial


@dataclass
class LoopResult:
    data: Dataset
    estimate: ProfileEstimate | None
    records: list
    initial_estimate: ProfileEstimate | None = None
    method: str = ""


def fit_surrogate(data: Dataset, cfg: LoopConfig, seed=None, previous=None):
    """GP or DGP fit; DGP refits warm-start from ``previous`` when given."""
    if cfg.surrogate == "gp":
        return fit_gp(data, nugget=cfg.nugget, smoothness=cfg.smoothness)
    iters = cfg.dgp_iters_initial if previous is None else cfg.dgp_iters_update
    return fit_dgp(
        data,
        iters,
        seed=seed,
        retained=cfg.dgp_retained,
        previous=previous,
        priors=DGPPriors(inner_tau2=cfg.dgp_inner_tau2),
        nugget=cfg.nugget,
        smoothness=cfg.smoothness,
    )


def _sample_estimate(model, data, axis, cfg, seed):
    cands = tricands_plus(data.X, data.control_index, axis, cfg.fringe_frac)
    samples = model.sample_joint(cands.full, cfg.n_samples, cfg.cond_size, seed)
    return cands, estimate_profile(samples, cands)


def final_estimate(model, data: Dataset, cfg: LoopConfig, seed=None) -> ProfileEstimate:
    """Raw-unit estimate on an evenly spaced control grid including 0 and 1."""
    axis = np.linspace(0.0, 1.0, cfg.final_grid)
    return _sample_estimate(model, data, axis, cfg, seed)[1].to_raw(data)


def _seed(rng):
    return int(rng.integers(2**63 - 1))


def _run(fn: BlackBox, init: Dataset, m: int, cfg: LoopConfig, method: str,
         acquire: Callable, initial_estimate=True) -> LoopResult:
    if m < init.n:
        raise InvalidArgument(f"budget m={m} is below the initial design size {init.n}")
    if fn.dim != init.d or fn.control_index != init.control_index:
        raise InvalidArgument("black box and initial design disagree in dimension or control")
    rng = np.random.default_rng(cfg.seed)
    data = init
    model = fit_surrogate(data, cfg, seed=_seed(rng))
    result = LoopResult(data, None, [], None, method)
    if initial_estimate:
        result.initial_estimate = final_estimate(model, data, cfg, _seed(rng))
    for it in range(m - init.n):
        try:
            x, value, zero = acquire(model, data, rng)
            if np.any(_exclude_existing(x[None, :], data.X)):
                raise NumericalFailure(f"acquisition {it} proposed an existing design point")
            y = eval_function(fn, x)
            if not np.isfinite(y):
                raise NumericalFailure(f"black box returned {y} at {x.tolist()}")
            data = data.append(x, y)
            result.records.append(AcquisitionRecord(
                it, x, float(x[data.control_index]), value, method, zero))
            result.data = data
            model = fit_surrogate(data, cfg, seed=_seed(rng), previous=model)
        except (NumericalFailure, np.linalg.LinAlgError) as err:
            raise LoopAborted(f"{method} loop stopped at acquisition {it}: {err}", result) from err
    if not result.records and result.initial_estimate is not None:
        result.estimate = result.initial_estimate
    else:
        result.estimate = final_estimate(model, data, cfg, _seed(rng))
    return result


def _loop_axis(cfg, rng):
    return np.sort(lhs_sample(cfg.axis_size, 1, _seed(rng))[:, 0])


def pbo_loop(fn: BlackBox, init: Dataset, m: int, cfg: LoopConfig = LoopConfig()) -> LoopResult:
    """Two-stage profile acquisition.

    Each iteration draws a fresh LHS control axis, estimates the profile
    from joint posterior draws over the modified tricands, picks the control
    value with the widest band and then the nuisance candidate maximising
    PEI on that slice.
    """

    def acquire(model, data, rng):
        axis = _loop_axis(cfg, rng)
        cands, est = _sample_estimate(model, data, axis, cfg, _seed(rng))
        j, _, _ = select_xstar(est)
        rows = cands.full[cands.slice_rows(j)]
        y_min = float(np.min(data.y_std))
        return select_nuisance(model, rows, y_min, float(est.mu_T[j]), exclude=data.X)

    return _run(fn, init, m, cfg, "PBO", acquire)


def pei_loop(fn: BlackBox, init: Dataset, m: int, cfg: LoopConfig = LoopConfig()) -> LoopResult:
    """Single-stage comparator: maximise PEI over the whole modified tricands set."""

    def acquire(model, data, rng):
        axis = _loop_axis(cfg, rng)
        cands, est = _sample_estimate(model, data, axis, cfg, _seed(rng))
        y_min = float(np.min(data.y_std))
        mu_T = np.repeat(est.mu_T, cands.n_per_slice)
        return select_nuisance(model, cands.full, y_min, mu_T, exclude=data.X)

    return _run(fn, init, m, cfg, "PEI", acquire)


def _maximize_ei(model, y_min, d, n_starts, rng, exclude):
    def neg(x):
        mu, sd = model.predict(x[None, :])
        return -float(expected_improvement(mu[0], sd[0], y_min))

    # screen a space-filling pool so starts land where EI is not flat zero
    pool = lhs_sample(n_starts * 50, d, _seed(rng))
    mu, sd = model.predict(pool)
    ei = expected_improvement(mu, sd, y_min)
    starts = pool[np.argsort(-ei, kind="stable")[:n_starts]]
    best_x, best_v = None, -np.inf
    for x0 in starts:
        res = optimize.minimize(neg, x0, method="L-BFGS-B", bounds=[(0.0, 1.0)] * d)
        x = np.clip(res.x, 0.0, 1.0)
        v = -neg(x)
        if v > best_v and not _exclude_existing(x[None, :], exclude)[0]:
            best_x, best_v = x, v
    if best_x is None:
        raise NumericalFailure("every EI optimum duplicates an existing point")
    return best_x, best_v


def bo_ei_loop(fn: BlackBox, init: Dataset, m: int, cfg: LoopConfig = LoopConfig()) -> LoopResult:
    """Classic BO comparator: multistart L-BFGS-B maximisation of EI on the cube."""

    def acquire(model, data, rng):
        y_min = float(np.min(data.y_std))
        x, v = _maximize_ei(model, y_min, data.d, cfg.ei_starts, rng, data.X)
        return x, v, v <= 0.0

    return _run(fn, init, m, cfg, "BO_EI", acquire)


def lhs_loop(fn: BlackBox, init: Dataset, m: int, cfg: LoopConfig = LoopConfig()) -> LoopResult:
    """Space-filling baseline: a single size-``m`` LHS replaces the sequential design.

    The initial estimate is still computed from ``init`` so every method
    reports a comparable starting point.
    """
    if m < init.n:
        raise InvalidArgument(f"budget m={m} is below the initial design size {init.n}")
    rng = np.random.default_rng(cfg.seed)
    model = fit_surrogate(init, cfg, seed=_seed(rng))
    initial = final_estimate(model, init, cfg, _seed(rng))
    if m == init.n:
        return LoopResult(init, initial, [], initial, "LHS")
    X = lhs_sample(m, fn.dim, _seed(rng))
    y = fn(X)
    if not np.all(np.isfinite(y)):
        raise NumericalFailure("black box returned non-finite values on the LHS design")
    data = Dataset.from_arrays(X, y, init.control_index)
    records = [
        AcquisitionRecord(i, X[i], float(X[i, init.control_index]), float("nan"), "LHS")
        for i in range(m)
    ]
    model = fit_surrogate(data, cfg, seed=_seed(rng))
    return LoopResult(data, final_estimate(model, data, cfg, _seed(rng)), records, initial, "LHS")


METHODS = {"pbo": pbo_loop, "pei": pei_loop, "bo_ei": bo_ei_loop, "lhs": lhs_loop}


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def write_profile_csv(path, estimate: ProfileEstimate) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("xstar,mu_T,ci_lo,ci_hi\n")
        for row in zip(estimate.xstar_values, estimate.mu_T, estimate.ci_lo, estimate.ci_hi):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_trace_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")
