"""Benchmark functions, designs, data scaling, profile oracles and metrics.

All benchmarks are exposed through :class:`BlackBox`, which evaluates on the
unit hypercube and maps affinely onto the function's native domain. The
ground-truth profile ``T(x*) = min over nuisance inputs of f(x*, .)`` is
computed by :func:`true_profile`.
"""

from __future__ import annotations

import csv
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize
from scipy.stats import norm

from profilebo.errors import ConfigError, InvalidArgument

__all__ = [
    "BlackBox",
    "Dataset",
    "MetricsReport",
    "BENCHMARKS",
    "get_function",
    "subprocess_blackbox",
    "lhs_sample",
    "to_native",
    "to_unit",
    "eval_function",
    "slice_minimum",
    "true_profile",
    "compute_metrics",
    "write_truth_csv",
]


# --------------------------------------------------------------------------
# Black boxes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BlackBox:
    """A deterministic scalar function on a box-shaped native domain.

    Parameters
    ----------
    name : str
        Registry identifier.
    dim : int
        Input dimension ``d``.
    control_index : int
        Column holding the control parameter.
    native_bounds : array of shape (d, 2)
        Lower and upper bound per input.
    func : callable
        Maps an ``(..., d)`` array of native inputs to an ``(...)`` array.
        Must accept a batch of rows unless ``vectorized`` is False.
    vectorized : bool
        Whether ``func`` accepts stacked rows.
    """

    name: str
    dim: int
    control_index: int
    native_bounds: np.ndarray
    func: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    vectorized: bool = True

    def __post_init__(self):
        bounds = np.asarray(self.native_bounds, dtype=float)
        if bounds.shape != (self.dim, 2):
            raise InvalidArgument(
                f"native_bounds must have shape ({self.dim}, 2), got {bounds.shape}"
            )
        if not 0 <= self.control_index < self.dim:
            raise InvalidArgument(
                f"control_index {self.control_index} outside [0, {self.dim - 1}]"
            )
        object.__setattr__(self, "native_bounds", bounds)

    def __call__(self, X_unit: np.ndarray) -> np.ndarray:
        """Evaluate on unit-cube rows; returns one value per row."""
        X_unit = np.atleast_2d(np.asarray(X_unit, dtype=float))
        if X_unit.shape[-1] != self.dim:
            raise InvalidArgument(
                f"{self.name} expects {self.dim} inputs, got {X_unit.shape[-1]}"
            )
        Xn = to_native(X_unit, self.native_bounds)
        if self.vectorized:
            return np.asarray(self.func(Xn), dtype=float).reshape(X_unit.shape[:-1])
        return np.array([float(self.func(row)) for row in Xn])

    def with_control(self, control_index: int) -> "BlackBox":
        return BlackBox(
            self.name,
            self.dim,
            control_index,
            self.native_bounds,
            self.func,
            self.vectorized,
        )


def _branin(x):
    a = 1.0
    b = 5.1 / (4.0 * np.pi**2)
    c = 5.0 / np.pi
    r, s, t = 6.0, 10.0, 1.0 / (8.0 * np.pi)
    x1, x2 = x[..., 0], x[..., 1]
    return a * (x2 - b * x1**2 + c * x1 - r) ** 2 + s * (1 - t) * np.cos(x1) + s


def _kyger3d(x):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    two_pi = 2.0 * np.pi
    return (
        np.exp(-x1 - np.cos(two_pi * x1))
        + np.sin(two_pi * x3)
        + np.exp(-x3 * np.sin(two_pi * x1))
        + np.cos(two_pi * x2)
        - np.exp(-x2 * np.cos(two_pi * x1))
    )


def _kyger2d(x):
    x1, x2 = x[..., 0], x[..., 1]
    sq_dev = (x1 - 0.5) ** 2 + (x2 - 0.5) ** 2
    sq = x1**2 + x2**2
    return (np.sin(x1**2) + 1.0 + sq_dev) * (np.cos(x2) + 1.5) * np.exp(
        4.0 - x1 / 3.0
    ) - (x1 - 0.1) * sq


def _squiggle(x, sigma=0.2):
    x1 = x[..., 0]
    radius2 = np.sum(x[..., 1:4] ** 2, axis=-1)
    center = np.sin(2.0 * np.pi * x1**2) / 4.0 - x1 / 10.0 + 0.5
    return x1 * norm.pdf((radius2 - center) / sigma)


BENCHMARKS = {
    "branin": (2, [(-5.0, 10.0), (0.0, 15.0)], _branin),
    "kyger3d": (3, [(0.0, 1.0)] * 3, _kyger3d),
    "kyger2d": (2, [(0.0, 2.0 * np.pi), (0.0, 2.5 * np.pi)], _kyger2d),
    "squiggle": (4, [(0.1, 1.0)] * 4, _squiggle),
}


def get_function(name: str, control_index: int = 0) -> BlackBox:
    """Look up a benchmark by name."""
    try:
        dim, bounds, func = BENCHMARKS[name.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown function {name!r}; available: {sorted(BENCHMARKS)}"
        ) from None
    return BlackBox(name.lower(), dim, control_index, np.array(bounds), func)


def subprocess_blackbox(
    command: str | Sequence[str],
    native_bounds,
    control_index: int = 0,
    name: str = "external",
    timeout: float | None = None,
) -> BlackBox:
    """Wrap an external simulator as a :class:`BlackBox`.

    Each evaluation launches ``command``, writes the native input vector as
    one whitespace-separated line to its stdin, and parses one scalar from
    the first non-empty line of its stdout.
    """
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    bounds = np.asarray(native_bounds, dtype=float)

    def call(x):
        line = " ".join(repr(float(v)) for v in x) + "\n"
        proc = subprocess.run(
            argv, input=line, capture_output=True, text=True, timeout=timeout
        )
        if proc.returncode != 0:
            raise RuntimeError(
                f"simulator exited with code {proc.returncode}: {proc.stderr.strip()}"
            )
        for out in proc.stdout.splitlines():
            if out.strip():
                return float(out.split()[0])
        raise RuntimeError("simulator produced no output")

    return BlackBox(name, bounds.shape[0], control_index, bounds, call, vectorized=False)


def to_native(X_unit, bounds) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=float)
    return bounds[:, 0] + np.asarray(X_unit, dtype=float) * (bounds[:, 1] - bounds[:, 0])


def to_unit(X_native, bounds) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=float)
    return (np.asarray(X_native, dtype=float) - bounds[:, 0]) / (bounds[:, 1] - bounds[:, 0])


def eval_function(fn: BlackBox, x_unit) -> float:
    """Evaluate ``fn`` at a single unit-cube point."""
    x_unit = np.asarray(x_unit, dtype=float)
    if x_unit.ndim != 1 or x_unit.shape[0] != fn.dim:
        raise InvalidArgument(
            f"{fn.name} expects a vector of length {fn.dim}, got shape {x_unit.shape}"
        )
    return float(fn(x_unit[None, :])[0])


# --------------------------------------------------------------------------
# Designs and data
# --------------------------------------------------------------------------


def lhs_sample(n: int, d: int, seed=None) -> np.ndarray:
    """Random Latin hypercube sample of ``n`` points in ``[0, 1]^d``.

    Every column places exactly one point in each stratum ``[k/n, (k+1)/n)``,
    uniformly at random within the stratum.
    """
    if n < 1 or d < 1:
        raise InvalidArgument(f"lhs_sample needs n >= 1 and d >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    strata = np.argsort(rng.random((d, n)), axis=1).T
    X = (strata + rng.random((n, d))) / n
    # guard against (k + u) / n rounding up to the next stratum edge
    return np.minimum(X, np.nextafter((strata + 1) / n, 0.0))


@dataclass(frozen=True)
class Dataset:
    """Unit-cube inputs with raw responses and their standardization.

    Build with :meth:`from_arrays`; ``y_mean`` and ``y_sd`` are the sample
    mean and (ddof=1) standard deviation of ``y``. A constant response keeps
    ``y_sd = 1`` so that standardization stays defined.
    """

    X: np.ndarray
    y: np.ndarray
    y_mean: float
    y_sd: float
    control_index: int = 0

    @classmethod
    def from_arrays(cls, X, y, control_index: int = 0) -> "Dataset":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise InvalidArgument(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if np.any(X < 0.0) or np.any(X > 1.0):
            raise InvalidArgument("dataset inputs must lie in the unit hypercube")
        if not 0 <= control_index < X.shape[1]:
            raise InvalidArgument(f"control_index {control_index} out of range")
        y_mean = float(np.mean(y))
        y_sd = float(np.std(y, ddof=1)) if y.size > 1 else 0.0
        if not y_sd > 0.0:
            y_sd = 1.0
        X.setflags(write=False)
        y.setflags(write=False)
        return cls(X, y, y_mean, y_sd, control_index)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def y_std(self) -> np.ndarray:
        return (self.y - self.y_mean) / self.y_sd

    def standardize(self, values):
        return (np.asarray(values, dtype=float) - self.y_mean) / self.y_sd

    def destandardize(self, values):
        return self.y_mean + self.y_sd * np.asarray(values, dtype=float)

    def append(self, x, y) -> "Dataset":
        """Return a new dataset with extra rows; standardization is refreshed."""
        X = np.vstack([self.X, np.atleast_2d(x)])
        yy = np.concatenate([self.y, np.atleast_1d(np.asarray(y, dtype=float))])
        return Dataset.from_arrays(X, yy, self.control_index)


# --------------------------------------------------------------------------
# Profile oracle
# --------------------------------------------------------------------------


def _assemble(xstar: float, nuis: np.ndarray, control_index: int) -> np.ndarray:
    nuis = np.atleast_2d(nuis)
    return np.insert(nuis, control_index, xstar, axis=1)


def slice_minimum(fn: BlackBox, xstar: float, nuisance_points) -> float:
    """Minimum of ``fn`` over the given nuisance rows at control value ``xstar``."""
    return float(np.min(fn(_assemble(xstar, nuisance_points, fn.control_index))))


def _grid(resolution: int, k: int) -> np.ndarray:
    axes = np.meshgrid(*([np.linspace(0.0, 1.0, resolution)] * k), indexing="ij")
    return np.column_stack([a.ravel() for a in axes])


def _polish(fn: BlackBox, xstar: float, start: np.ndarray) -> tuple[float, np.ndarray]:
    k = start.shape[0]

    def obj(z):
        return float(fn(_assemble(xstar, z, fn.control_index))[0])

    res = optimize.minimize(
        obj, start, method="L-BFGS-B", bounds=[(0.0, 1.0)] * k,
        options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 500},
    )
    return float(res.fun), np.clip(res.x, 0.0, 1.0)


def true_profile(
    fn: BlackBox,
    xstar_grid,
    oracle_resolution: int = 201,
    n_starts: int = 50,
    seed: int = 0,
) -> np.ndarray:
    """Ground-truth profile optima ``T(x*)`` on unit-scale control values.

    With one or two nuisance inputs the nuisance cube is scanned on a dense
    grid of ``oracle_resolution`` points per axis and the best few grid
    points are then polished by bounded L-BFGS-B. With three or more,
    ``n_starts`` bounded Nelder-Mead searches are run per slice from random
    starts (shared across slices) and the best value is kept.
    """
    xs = np.atleast_1d(np.asarray(xstar_grid, dtype=float))
    k = fn.dim - 1
    out = np.empty(xs.shape[0])
    if k <= 2:
        grid = _grid(oracle_resolution, k)
        for i, xstar in enumerate(xs):
            vals = fn(_assemble(xstar, grid, fn.control_index))
            best = float(vals.min())
            for j in np.argsort(vals)[:3]:
                val, _ = _polish(fn, xstar, grid[j])
                best = min(best, val)
            out[i] = best
        return out

    rng = np.random.default_rng(seed)
    starts = rng.random((n_starts, k))
    for i, xstar in enumerate(xs):

        def obj(z, xstar=xstar):
            return float(fn(_assemble(xstar, np.clip(z, 0.0, 1.0), fn.control_index))[0])

        best = np.inf
        for z0 in starts:
            res = optimize.minimize(
                obj, z0, method="Nelder-Mead", bounds=[(0.0, 1.0)] * k,
                options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 4000},
            )
            best = min(best, float(res.fun))
        out[i] = best
    return out


def write_truth_csv(path, xstar, T) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["xstar", "T"])
        for a, b in zip(xstar, T):
            w.writerow([repr(float(a)), repr(float(b))])


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    maxad: float
    avgci: float
    coverage: float
    grid_size: int

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "maxad": self.maxad,
            "avgci": self.avgci,
            "coverage": self.coverage,
            "grid_size": self.grid_size,
        }


def compute_metrics(estimate, truth, xstar=None, atol: float = 1e-12) -> MetricsReport:
    """RMSE, MaxAD, AvgCI and Coverage of a profile estimate.

    ``estimate`` is a :class:`~profilebo.profile.ProfileEstimate` (raw
    response units). If ``xstar`` is given it must match the estimate's
    control values.
    """
    truth = np.asarray(truth, dtype=float).ravel()
    if truth.shape[0] != estimate.mu_T.shape[0]:
        raise InvalidArgument(
            f"truth has {truth.shape[0]} points but estimate has {estimate.mu_T.shape[0]}"
        )
    if xstar is not None and not np.allclose(xstar, estimate.xstar_values, atol=atol, rtol=0):
        raise InvalidArgument("estimate grid does not match truth grid")
    err = estimate.mu_T - truth
    covered = (truth >= estimate.ci_lo) & (truth <= estimate.ci_hi)
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        maxad=float(np.max(np.abs(err))),
        avgci=float(np.mean(estimate.ci_hi - estimate.ci_lo)),
        coverage=float(np.count_nonzero(covered) / truth.shape[0]),
        grid_size=int(truth.shape[0]),
    )
