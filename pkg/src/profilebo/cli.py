"""Command-line entry point.

Subcommands::

    profilebo run CONFIG.json [--jobs N] [--<field> VALUE ...]
    profilebo export RESULTS_DIR [--out DIR]
    profilebo truth FUNCTION --grid G [--control-index K] [--resolution R]
    profilebo candidates DESIGN.csv [--control-index K] [--axis-size G]

Failures print a one-line JSON object ``{"error": ..., "message": ...}`` to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from profilebo import errors
from profilebo.candidates import tricands, tricands_plus, write_candidates_csv
from profilebo.harness import ExperimentConfig, export_plotdata, run_experiment
from profilebo.testbed import get_function, true_profile

EXIT_CODES = {
    errors.ConfigError: 2,
    errors.InvalidArgument: 2,
    errors.DegeneracyError: 2,
    errors.NumericalFailure: 3,
    OSError: 4,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in ("command", "native_bounds"):
            continue
        kind = {int: int, float: float}.get(type(f.default), str)
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None,
                       help=f"override config field {f.name} (default {f.default!r})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="profilebo", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run an experiment described by a JSON config")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1, help="parallel repetitions")
    _add_config_flags(p)

    p = sub.add_parser("export", help="flatten experiment results into plotting tables")
    p.add_argument("results_dir")
    p.add_argument("--out", default=None)

    p = sub.add_parser("truth", help="print the oracle profile of a benchmark as CSV")
    p.add_argument("function")
    p.add_argument("--grid", type=int, required=True)
    p.add_argument("--control-index", type=int, default=0)
    p.add_argument("--resolution", type=int, default=201)

    p = sub.add_parser("candidates", help="print tricands for a design CSV")
    p.add_argument("design")
    p.add_argument("--control-index", type=int, default=None,
                   help="drop this column before triangulating")
    p.add_argument("--axis-size", type=int, default=None,
                   help="cross with an evenly spaced control axis of this size")
    p.add_argument("--fringe-frac", type=float, default=0.9)
    return parser


def _read_design(path) -> tuple[np.ndarray, list[str] | None]:
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",")]
        header, skip = None, 0
    except ValueError:
        header, skip = [h.strip() for h in first.strip().split(",")], 1
    X = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2))
    if header is not None and header[-1] == "y":
        # harness design files carry the response in a trailing column
        X, header = X[:, :-1], header[:-1]
    return X, header


def _cmd_run(args) -> None:
    cfg = ExperimentConfig.load(args.config)
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    cfg = cfg.override(**{k: v for k, v in vars(args).items() if k in fields})
    res = run_experiment(cfg, jobs=args.jobs)
    summary = {k: dict(zip(("mean", "min", "max", "n_ok"), v)) for k, v in res["summary"].items()}
    print(json.dumps({"output_dir": res["output_dir"], "summary": summary}, indent=2))


def _cmd_export(args) -> None:
    print(json.dumps(export_plotdata(args.results_dir, args.out), indent=2))


def _cmd_truth(args) -> None:
    if args.grid < 2:
        raise errors.InvalidArgument("--grid must be at least 2")
    fn = get_function(args.function, args.control_index)
    xs = np.linspace(0.0, 1.0, args.grid)
    T = true_profile(fn, xs, oracle_resolution=args.resolution)
    out = sys.stdout
    out.write("xstar,T\n")
    for a, b in zip(xs, T):
        out.write(f"{float(a)!r},{float(b)!r}\n")


def _cmd_candidates(args) -> None:
    X, header = _read_design(args.design)
    if np.any(X < 0) or np.any(X > 1):
        raise errors.InvalidArgument("design rows must lie in the unit hypercube")
    k = args.control_index
    if args.axis_size is not None:
        if k is None:
            raise errors.InvalidArgument("--axis-size needs --control-index")
        cs = tricands_plus(X, k, np.linspace(0, 1, args.axis_size), args.fringe_frac)
        write_candidates_csv(sys.stdout, cs.full, np.tile(cs.tags, args.axis_size), header)
        return
    if k is not None:
        X = np.delete(X, k, axis=1)
        if header is not None:
            header = header[:k] + header[k + 1:]
    tc = tricands(X, args.fringe_frac)
    write_candidates_csv(sys.stdout, tc.points, tc.tags, header)


COMMANDS = {"run": _cmd_run, "export": _cmd_export, "truth": _cmd_truth,
            "candidates": _cmd_candidates}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.cmd](args)
    except Exception as err:  # noqa: BLE001 - reported as JSON
        code = next((c for t, c in EXIT_CODES.items() if isinstance(err, t)), 1)
        sys.stderr.write(json.dumps({"error": type(err).__name__, "message": str(err)}) + "\n")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
