"""Command-line interface: ``fit``, ``bootstrap`` and ``simulate``.

Exit codes: 0 success, 2 input validation, 3 numerical failure
(including non-convergence), 4 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import io
from .exceptions import NumericalError, ValidationError
from .inference import summarize
from .model import FitOptions, fit_reml, parameter_names
from .resampling import run_bootstrap
from .study import run_study

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_USAGE = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multilevel-boot", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=io.__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="REML fit of a two-level model")
    f.add_argument("--data", required=True)
    f.add_argument("--schema", required=True, help="JSON file or inline JSON object")
    f.add_argument("--out", help="write the fit report (JSON) and manifest here")

    b = sub.add_parser("bootstrap", help="bootstrap percentile intervals")
    b.add_argument("--data", required=True)
    b.add_argument("--schema", required=True)
    b.add_argument("--scheme", required=True, choices=["parametric", "residual", "cases", "wild"])
    b.add_argument("--cases-mode", default="both", choices=["both", "level2", "level1", "level2-only", "level1-only"])
    b.add_argument("--hccme", default="hc2", choices=["hc2", "hc3"])
    b.add_argument("--aux", default="f1", choices=["f1", "f2"])
    b.add_argument("--B", type=int, default=999)
    b.add_argument("--alpha", type=float, default=0.05)
    b.add_argument("--seed", type=int, required=True)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", help="directory for intervals.csv, replicates.csv and manifest.json")

    s = sub.add_parser("simulate", help="Monte Carlo coverage study")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--reps", type=int)
    s.add_argument("--B", type=int)
    s.add_argument("--full-scale", action="store_true", help="reps=500, B=999")
    return p


def _fit_report(fit, ds) -> dict:
    vc = fit.varcomps
    return {
        "beta": dict(zip(parameter_names(ds.k, ds.q)[: ds.k], map(float, fit.beta))),
        "sigma2_eps": vc.sigma2_eps,
        "Sigma": vc.Sigma.tolist(),
        "reml_loglik": fit.reml_loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "boundary_flag": fit.boundary_flag,
        "J": ds.J,
        "N": ds.N,
    }


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    ds = io.load_dataset(args.data, io.Schema.parse(args.schema))
    fit = fit_reml(ds)
    report = _fit_report(fit, ds)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "fit.json").write_text(text + "\n")
        io.RunManifest(args.argv, io.config_hash(args.data, args.schema), None,
                       duration_seconds=time.perf_counter() - t0,
                       failures={"converged": fit.converged}).write(out / "manifest.json")
    if not fit.converged:
        print("REML optimisation did not converge", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    t0 = time.perf_counter()
    scheme = io.make_scheme(args.scheme, args.cases_mode, args.hccme, args.aux)
    ds = io.load_dataset(args.data, io.Schema.parse(args.schema))
    fit = fit_reml(ds)
    if not fit.converged:
        print("REML fit of the original data did not converge", file=sys.stderr)
        return EXIT_NUMERICAL
    reps = run_bootstrap(scheme, ds, fit, args.B, args.seed, opts=FitOptions(), workers=args.workers)
    summary = summarize(reps, args.alpha)
    sys.stdout.write(f"# scheme={scheme.label} B={args.B} alpha={args.alpha} seed={args.seed}\n")
    sys.stdout.write(io.format_intervals(summary))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_intervals(summary, out / "intervals.csv")
        summary.export_replicates(out / "replicates.csv")
        io.RunManifest(
            args.argv,
            io.config_hash(args.data, args.schema, scheme.label, args.B, args.alpha),
            args.seed,
            duration_seconds=time.perf_counter() - t0,
            failures={"attempted": reps.attempted, "failed": reps.failed, "flags": list(reps.flags)},
        ).write(out / "manifest.json")
    return EXIT_OK


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    scenarios = io.load_config(args.config, args.seed, full_scale=args.full_scale, reps=args.reps, B=args.B)
    out = Path(args.out)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    chash = io.config_hash(args.config, args.full_scale, args.reps, args.B)
    reports, failures = [], {}
    for sc in scenarios:
        rep = run_study(sc, parallelism=args.workers)
        reports.append(rep)
        tag = f"{sc.name}_n{sc.n}_J{sc.J}"
        (out / "tables" / f"{tag}.txt").write_text(io.format_table(rep, f"../manifest.json config_hash={chash}"))
        failures[tag] = {
            "dataset_redraws": rep.dataset_redraws,
            "dataset_failures": rep.dataset_failures,
            "replicate_redraws": rep.replicate_redraws,
        }
        print(f"finished {tag}", file=sys.stderr)
    io.write_flat(reports, out / "results.csv")
    io.RunManifest(args.argv, chash, args.seed, duration_seconds=time.perf_counter() - t0,
                   failures=failures).write(out / "manifest.json")
    return EXIT_OK


_COMMANDS = {"fit": cmd_fit, "bootstrap": cmd_bootstrap, "simulate": cmd_simulate}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = ["multilevel-boot", *argv]
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
