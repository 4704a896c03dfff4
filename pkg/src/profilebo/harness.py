"""Experiment driver: configuration, repetitions, persistence and export.

An experiment directory looks like::

    config.json          the resolved configuration
    truth.csv            oracle profile on the final grid (benchmarks only)
    metrics.csv          one row per repetition
    summary.csv          mean/min/max of every metric
    rep_000/             per-repetition files
        result.json      metrics row (used to resume interrupted runs)
        design.csv       final design in unit coordinates plus response
        trace.jsonl      acquisition records
        profile.csv      final estimate
        initial_profile.csv
        error.json       only when the repetition failed

Per-repetition seeds are ``seed + rep``. Nothing in the metrics files
depends on wall-clock time, so identical configurations reproduce them
byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from profilebo.errors import ConfigError
from profilebo.profile import (
    METHODS,
    LoopAborted,
    LoopConfig,
    write_profile_csv,
    write_trace_jsonl,
)
from profilebo.testbed import (
    BENCHMARKS,
    Dataset,
    compute_metrics,
    get_function,
    lhs_sample,
    subprocess_blackbox,
    true_profile,
    write_truth_csv,
)

__all__ = ["ExperimentConfig", "run_experiment", "export_plotdata", "METRIC_FIELDS"]

log = logging.getLogger(__name__)

METRIC_FIELDS = ("rmse", "maxad", "avgci", "coverage")
SURROGATES = ("gp", "dgp")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun an experiment.

    ``function`` names a built-in benchmark unless ``command`` is set, in
    which case the black box is an external program speaking the
    line-oriented stdin/stdout protocol and ``native_bounds`` is required.
    """

    function: str = "branin"
    surrogate: str = "gp"
    method: str = "pbo"
    n_init: int = 10
    m_total: int = 30
    repetitions: int = 1
    seed: int = 0
    control_index: int = 0
    axis_size: int = 50
    final_grid: int = 100
    n_samples: int = 1000
    cond_size: int = 40
    fringe_frac: float = 0.9
    ei_starts: int = 20
    dgp_iters_initial: int = 10_000
    dgp_iters_update: int = 2_000
    dgp_retained: int = 100
    dgp_inner_tau2: float = LoopConfig.dgp_inner_tau2
    truth_resolution: int = 201
    output_dir: str = "results"
    command: list | None = None
    native_bounds: list | None = None

    def __post_init__(self):
        errs = []
        if self.command is None and self.function not in BENCHMARKS:
            errs.append(f"unknown function {self.function!r}; known: {sorted(BENCHMARKS)}")
        if self.command is not None and self.native_bounds is None:
            errs.append("an external command needs native_bounds")
        if self.surrogate not in SURROGATES:
            errs.append(f"unknown surrogate {self.surrogate!r}; known: {list(SURROGATES)}")
        if self.method not in METHODS:
            errs.append(f"unknown method {self.method!r}; known: {sorted(METHODS)}")
        if not 0 < self.n_init <= self.m_total:
            errs.append(f"need 0 < n_init <= m_total, got {self.n_init} and {self.m_total}")
        if self.repetitions < 1:
            errs.append("repetitions must be at least 1")
        if not 0 <= self.control_index < self.dim:
            errs.append(f"control_index {self.control_index} out of range for d={self.dim}")
        if errs:
            raise ConfigError("; ".join(errs))

    @property
    def dim(self) -> int:
        if self.command is not None:
            return len(self.native_bounds or [])
        return BENCHMARKS[self.function][0] if self.function in BENCHMARKS else 0

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def override(self, **changes) -> "ExperimentConfig":
        """Copy with the non-None ``changes`` applied (unknown names rejected)."""
        changes = {k: v for k, v in changes.items() if v is not None}
        unknown = sorted(set(changes) - {f.name for f in dataclasses.fields(self)})
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        return dataclasses.replace(self, **changes)

    # -- derived objects ---------------------------------------------------

    def blackbox(self):
        if self.command is not None:
            return subprocess_blackbox(
                self.command, self.native_bounds, self.control_index, name=self.function
            )
        return get_function(self.function, self.control_index)

    def loop_config(self, seed: int) -> LoopConfig:
        return LoopConfig(
            surrogate=self.surrogate,
            axis_size=self.axis_size,
            final_grid=self.final_grid,
            n_samples=self.n_samples,
            cond_size=self.cond_size,
            fringe_frac=self.fringe_frac,
            ei_starts=self.ei_starts,
            dgp_iters_initial=self.dgp_iters_initial,
            dgp_iters_update=self.dgp_iters_update,
            dgp_retained=self.dgp_retained,
            dgp_inner_tau2=self.dgp_inner_tau2,
            seed=seed,
        )


# --------------------------------------------------------------------------
# Running
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _metrics_dict(estimate, truth, prefix=""):
    if estimate is None or truth is None:
        return {prefix + k: float("nan") for k in METRIC_FIELDS}
    rep = compute_metrics(estimate, truth, estimate.xstar_values)
    return {prefix + k: getattr(rep, k) for k in METRIC_FIELDS}


def _run_rep(cfg: ExperimentConfig, rep: int, truth, out: Path) -> dict:
    seed = cfg.seed + rep
    rep_dir = out / f"rep_{rep:03d}"
    rep_dir.mkdir(exist_ok=True)
    done = rep_dir / "result.json"
    if done.exists():
        return json.loads(done.read_text())
    row = {"rep": rep, "seed": seed, "method": cfg.method, "surrogate": cfg.surrogate}
    fn = cfg.blackbox()
    try:
        X0 = lhs_sample(cfg.n_init, fn.dim, seed)
        init = Dataset.from_arrays(X0, fn(X0), cfg.control_index)
        result = METHODS[cfg.method](fn, init, cfg.m_total, cfg.loop_config(seed))
        status = "ok"
    except LoopAborted as err:
        result, status = err.partial, "error"
        _write_error(rep_dir, err)
    except Exception as err:  # noqa: BLE001 - recorded per repetition
        result, status = None, "error"
        _write_error(rep_dir, err)
    row.update(_metrics_dict(result.estimate if result else None, truth))
    row.update(_metrics_dict(result.initial_estimate if result else None, truth, "init_"))
    row["n_final"] = result.data.n if result else 0
    row["status"] = status
    if result is not None:
        d = result.data
        _write_csv(rep_dir / "design.csv",
                   [f"x{j + 1}" for j in range(d.d)] + ["y"],
                   np.column_stack([d.X, d.y]).tolist())
        write_trace_jsonl(rep_dir / "trace.jsonl", result.records)
        if result.estimate is not None:
            write_profile_csv(rep_dir / "profile.csv", result.estimate)
        if result.initial_estimate is not None:
            write_profile_csv(rep_dir / "initial_profile.csv", result.initial_estimate)
    if status == "ok":
        done.write_text(json.dumps(row, sort_keys=True) + "\n")
    return row


def _write_error(rep_dir: Path, err: Exception):
    log.warning("repetition in %s failed: %s", rep_dir, err)
    (rep_dir / "error.json").write_text(
        json.dumps({"error": type(err).__name__, "message": str(err)}, sort_keys=True) + "\n"
    )


def _rep_worker(args):
    cfg_json, rep, truth, out = args
    return _run_rep(ExperimentConfig.from_json(cfg_json), rep, truth, Path(out))


METRICS_HEADER = (["rep", "seed", "method", "surrogate"] + list(METRIC_FIELDS)
                  + [f"init_{k}" for k in METRIC_FIELDS] + ["n_final", "status"])


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, output_dir=None) -> dict:
    """Run every repetition and write the experiment directory.

    Completed repetitions found in an existing directory with the same
    configuration are reused rather than recomputed.

    Returns
    -------
    dict
        ``rows`` (per-repetition metrics dicts), ``summary`` (metric ->
        mean/min/max over successful repetitions) and ``output_dir``.
    """
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    if cfg_path.exists():
        previous = ExperimentConfig.load(cfg_path)
        if dataclasses.replace(previous, output_dir="") != dataclasses.replace(cfg, output_dir=""):
            raise ConfigError(f"{out} already holds results for a different configuration")
    cfg_path.write_text(cfg.to_json())

    truth = None
    if cfg.command is None:
        fn = cfg.blackbox()
        xs = np.linspace(0.0, 1.0, cfg.final_grid)
        truth_path = out / "truth.csv"
        truth = true_profile(fn, xs, oracle_resolution=cfg.truth_resolution)
        write_truth_csv(truth_path, xs, truth)

    tasks = [(cfg.to_json(), r, truth, str(out)) for r in range(cfg.repetitions)]
    if jobs > 1 and cfg.repetitions > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_rep_worker, tasks))
    else:
        rows = [_rep_worker(t) for t in tasks]

    _write_csv(out / "metrics.csv", METRICS_HEADER, [[r[k] for k in METRICS_HEADER] for r in rows])
    summary = summarize(rows)
    _write_csv(out / "summary.csv", ["metric", "mean", "min", "max", "n_ok"],
               [[k, *summary[k]] for k in summary])
    return {"rows": rows, "summary": summary, "output_dir": str(out)}


def summarize(rows) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    out = {}
    for k in list(METRIC_FIELDS) + [f"init_{k}" for k in METRIC_FIELDS]:
        v = np.array([r[k] for r in ok], dtype=float)
        v = v[np.isfinite(v)]
        if v.size:
            out[k] = (float(np.mean(v)), float(np.min(v)), float(np.max(v)), int(v.size))
        else:
            out[k] = (math.nan, math.nan, math.nan, 0)
    return out


def read_metrics(path) -> list[dict]:
    """Parse a metrics.csv back into typed rows."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            for k in ("rep", "seed", "n_final"):
                r[k] = int(r[k])
            for k in METRIC_FIELDS:
                r[k] = float(r[k])
                r["init_" + k] = float(r["init_" + k])
            rows.append(r)
    return rows


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------

EXPECTED_FILES = ("config.json", "metrics.csv", "rep_NNN/profile.csv")


def _experiment_dirs(root: Path) -> list[Path]:
    if (root / "metrics.csv").exists():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "metrics.csv").exists())


def export_plotdata(results_dir, out_dir=None) -> dict:
    """Flatten one or more experiment directories into plotting tables.

    ``results_dir`` is either an experiment directory or a directory whose
    subdirectories are experiments (e.g. one per method). Writes

    * ``curves/<experiment>_rep<NNN>.csv``: xstar, mu_T, ci_lo, ci_hi, truth
    * ``metrics_table.csv``: every repetition of every experiment, with a
      method column
    * ``coverage_avgci.csv``: one (avgci, coverage) point per repetition

    Returns a dict of the written paths.
    """
    root = Path(results_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory; expected an experiment directory "
                                f"containing {', '.join(EXPECTED_FILES)}")
    exps = _experiment_dirs(root)
    if not exps:
        raise FileNotFoundError(
            f"no experiment found under {root}; expected {', '.join(EXPECTED_FILES)} "
            "in the directory or in its subdirectories"
        )
    out = Path(out_dir) if out_dir else root / "plotdata"
    (out / "curves").mkdir(parents=True, exist_ok=True)
    table, scatter, curves = [], [], []
    for exp in exps:
        if not (exp / "config.json").exists():
            raise FileNotFoundError(f"{exp} is missing config.json")
        cfg = json.loads((exp / "config.json").read_text())
        name = exp.name if exp != root else root.name
        truth = {}
        if (exp / "truth.csv").exists():
            with open(exp / "truth.csv", newline="") as fh:
                for r in csv.DictReader(fh):
                    truth[float(r["xstar"])] = float(r["T"])
        for r in read_metrics(exp / "metrics.csv"):
            table.append([name, cfg["function"], r["method"], r["surrogate"], r["rep"], r["seed"]]
                         + [r[k] for k in METRIC_FIELDS] + [r["status"]])
            scatter.append([name, r["method"], r["surrogate"], r["rep"], r["avgci"], r["coverage"]])
            prof = exp / f"rep_{r['rep']:03d}" / "profile.csv"
            if not prof.exists():
                if r["status"] == "ok":
                    raise FileNotFoundError(f"missing {prof}")
                continue
            rows = []
            with open(prof, newline="") as fh:
                for p in csv.DictReader(fh):
                    xs = float(p["xstar"])
                    rows.append([xs, float(p["mu_T"]), float(p["ci_lo"]), float(p["ci_hi"]),
                                 truth.get(xs, float("nan"))])
            path = out / "curves" / f"{name}_rep{r['rep']:03d}.csv"
            _write_csv(path, ["xstar", "mu_T", "ci_lo", "ci_hi", "truth"], rows)
            curves.append(str(path))
    _write_csv(out / "metrics_table.csv",
               ["experiment", "function", "method", "surrogate", "rep", "seed"]
               + list(METRIC_FIELDS) + ["status"], table)
    _write_csv(out / "coverage_avgci.csv",
               ["experiment", "method", "surrogate", "rep", "avgci", "coverage"], scatter)
    return {
        "curves": curves,
        "metrics_table": str(out / "metrics_table.csv"),
        "coverage_avgci": str(out / "coverage_avgci.csv"),
    }
