"""Command-line driver: simulate, fit, compare, diagnose, list-presets.

``dhglm fit --preset poisson-sim --method both --scale desk --out runs/p``
writes, into ``--out``:

* ``summary_<method>.csv`` / ``.txt``: parameter, true, mean, sd, lower, upper
* ``comparison.csv`` / ``.txt`` (method ``both``): AMIS against MCMC
* ``marginals_<method>/<parameter>.csv``: columns ``x,density``
* ``ess_log.csv``: per-stage sample counts, ESS and log ML at the proposal mean
* ``diagnostics/<component>.csv``: columns ``p,cumulative_weight``
* ``ensemble.csv``: stage, sampled scalars, ``log_target``, ``log_weight``
* ``mcmc_draws.csv``: one column per parameter
* ``run_summary.json``: settings, seeds, flags, and timings
"""

import argparse
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from scipy import stats

from . import report
from .amis import (AmisError, LowEssWarning, WeightedEnsemble, effective_sample_size, run_amis,
                   weight_diagnostic_curve)
from .data import DataError, write_dataset
from .fitter import FitError
from .marginals import MarginalGrid
from .mcmc import McmcError, run_mcmc
from .model import PlanError, SpecError
from .presets import (PRESETS, PresetError, build_experiment, get_preset, marginal_grids_amis, summarize_amis,
                      summarize_mcmc)

WORKERS_ENV = "DHGLM_WORKERS"
ENSEMBLE_FIXED = ("stage", "log_target", "log_weight")
GRID_POINTS = 201

log = logging.getLogger("dhglm")


class CliError(Exception):
    pass


def _output_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write to output directory {out}: {exc.strerror or exc}") from None
    return out


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _grid_csv(grid):
    return pd.DataFrame({"x": grid.x, "density": grid.density}).to_csv(index=False, float_format="%.10g")


def _safe_name(name):
    return name.replace("[", "_").replace("]", "").replace("/", "_")


def _draws_grid(x):
    x = np.asarray(x, dtype=float)
    if np.ptp(x) == 0:
        t = np.linspace(x[0] - 1e-3, x[0] + 1e-3, GRID_POINTS)
        return MarginalGrid(t, stats.norm.pdf(t, x[0], 1e-4)).normalized()
    kde = stats.gaussian_kde(x)
    bw = float(np.sqrt(kde.covariance[0, 0]))
    t = np.linspace(x.min() - 3 * bw, x.max() + 3 * bw, GRID_POINTS)
    return MarginalGrid(t, kde(t)).normalized()


def _load_overrides(path):
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise CliError(f"{path}: override file must be a mapping")
    return data


def ensemble_frame(ensemble):
    frame = {"stage": ensemble.stage}
    for j, name in enumerate(ensemble.names):
        frame[name] = ensemble.samples[:, j]
    frame["log_target"] = ensemble.log_target
    frame["log_weight"] = ensemble.log_weights
    return pd.DataFrame(frame)


def ensemble_from_frame(frame):
    """Rebuild the parts of an ensemble that diagnostics need from ``ensemble.csv``."""
    missing = [c for c in ENSEMBLE_FIXED if c not in frame.columns]
    if missing:
        raise CliError(f"ensemble table lacks columns {missing}")
    names = tuple(c for c in frame.columns if c not in ENSEMBLE_FIXED)
    lt = frame["log_target"].to_numpy(dtype=float)
    lw = frame["log_weight"].to_numpy(dtype=float)
    return WeightedEnsemble(frame[list(names)].to_numpy(dtype=float), lt, lw, None,
                            frame["stage"].to_numpy(dtype=np.int64), names)


def write_diagnostics(ensemble, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for j, name in enumerate(ensemble.names):
        p, cum = weight_diagnostic_curve(ensemble, j)
        frame = pd.DataFrame({"p": p, "cumulative_weight": cum})
        frame.to_csv(directory / f"{_safe_name(name)}.csv", index=False, float_format="%.10g")


def _ess_log_frame(stage_log):
    rows = [{k: e.get(k) for k in ("stage", "n", "n_total", "ess", "failed_fits", "log_ml_at_mean")}
            for e in stage_log]
    return pd.DataFrame(rows)


def run_fit(preset, method="both", scale="desk", seed=0, workers=1, out="runs", overrides=None):
    """Run one preset and write every artifact; returns the run summary dict."""
    if method not in ("amis", "mcmc", "both"):
        raise CliError(f"unknown method {method!r}")
    get_preset(preset)
    out = _output_dir(out)
    timings = {}
    t0 = time.perf_counter()
    exp = build_experiment(preset, scale, seed, overrides)
    timings["setup"] = time.perf_counter() - t0
    summary = {
        "preset": preset, "method": method, "scale": scale, "seed": seed, "workers": workers,
        "parameters": list(exp.parameters), "truth": exp.truth, "init": exp.init_info,
        "data": {"n": exp.data.n, "groups": exp.data.n_groups, "provenance": exp.data.provenance},
        "flags": [],
    }
    results = {}
    if method in ("amis", "both"):
        t = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", LowEssWarning)
            ens = run_amis(exp.target, exp.amis, workers=workers)
        timings["amis"] = time.perf_counter() - t
        low_stages = sum(issubclass(w.category, LowEssWarning) for w in caught)
        ess = ens.ess
        summary["amis"] = {
            "config": {"n_initial": exp.amis.n_initial, "n_stages": exp.amis.n_stages,
                       "n_per_stage": exp.amis.n_per_stage, "seed": exp.amis.seed,
                       "initial_mean": exp.amis.proposal.mean.tolist() if exp.amis.proposal is not None else None},
            "ess": ess, "n_total": len(ens), "stage_ess": [e["ess"] for e in ens.stage_log],
            "low_ess_adaptations": low_stages, "failed_fits": int(np.sum(~np.isfinite(ens.log_target))),
        }
        if ess < exp.low_ess_threshold:
            msg = (f"AMIS ESS {ess:.2f} is below {exp.low_ess_threshold:g}; estimates from this run are "
                   "unreliable (see diagnostics/)")
            summary["flags"].append(msg)
            log.info(msg)
        try:
            rows = summarize_amis(exp, ens)
        except AmisError:
            rows = summarize_amis(exp, ens, min_ess=0.0)
            summary["flags"].append("sampled-scalar summaries computed despite ESS <= 10")
        results["amis"] = rows
        for name, grid in marginal_grids_amis(exp, ens).items():
            _write(out / "marginals_amis" / f"{_safe_name(name)}.csv", _grid_csv(grid))
        _write(out / "ess_log.csv", _ess_log_frame(ens.stage_log).to_csv(index=False, float_format="%.10g"))
        _write(out / "ensemble.csv", ensemble_frame(ens).to_csv(index=False, float_format="%.17g"))
        write_diagnostics(ens, out / "diagnostics")
    if method in ("mcmc", "both"):
        t = time.perf_counter()
        chain = run_mcmc(exp.spec, exp.mcmc)
        timings["mcmc"] = time.perf_counter() - t
        summary["mcmc"] = {"config": asdict(exp.mcmc), "draws": chain.n_draws, "acceptance": chain.acceptance}
        results["mcmc"] = summarize_mcmc(exp, chain)
        for name in exp.parameters:
            _write(out / "marginals_mcmc" / f"{_safe_name(name)}.csv", _grid_csv(_draws_grid(chain.draws[name])))
        _write(out / "mcmc_draws.csv", chain.to_frame().to_csv(index=False, float_format="%.17g"))
    for m, rows in results.items():
        _write(out / f"summary_{m}.csv", report.summary_csv(rows))
        _write(out / f"summary_{m}.txt", report.summary_text(rows, f"{preset} ({m}, {scale} scale, seed {seed})"))
    if len(results) == 2:
        comp = report.compare(results["amis"], results["mcmc"])
        _write(out / "comparison.csv", report.comparison_csv(comp))
        _write(out / "comparison.txt", report.comparison_text(comp, ("amis", "mcmc")))
        summary["comparison_passed"] = report.all_passed(comp)
    summary["timings"] = timings
    _write(out / "run_summary.json", json.dumps(summary, indent=2, default=_json_default) + "\n")
    return summary, results


def cmd_list_presets(args):
    width = max(len(n) for n in PRESETS)
    for name, p in PRESETS.items():
        print(f"{name.ljust(width)}  {p.description}")
    return 0


def cmd_simulate(args):
    get_preset(args.preset)
    out = _output_dir(args.out)
    exp = build_experiment(args.preset, args.scale, args.seed, _load_overrides(args.config))
    path = write_dataset(exp.data, out)
    meta = {"preset": args.preset, "scale": args.scale, "seed": args.seed, "provenance": exp.data.provenance}
    _write(out / "recipe.yaml", yaml.safe_dump(json.loads(json.dumps(meta, default=_json_default)), sort_keys=False))
    print(f"wrote {path} ({exp.data.n} rows)")
    return 0


def cmd_fit(args):
    summary, results = run_fit(args.preset, args.method, args.scale, args.seed, args.workers, args.out,
                               _load_overrides(args.config))
    for m, rows in results.items():
        print(report.summary_text(rows, f"{args.preset}: {m.upper()}"))
    if "amis" in summary:
        print(f"AMIS ESS {summary['amis']['ess']:.2f} of {summary['amis']['n_total']}")
    if "comparison_passed" in summary:
        print((Path(args.out) / "comparison.txt").read_text())
    for flag in summary["flags"]:
        print(f"WARNING: {flag}", file=sys.stderr)
    return 0


def cmd_compare(args):
    a = report.read_summary_csv(args.first)
    b = report.read_summary_csv(args.second)
    rows = report.compare(a, b, args.tolerance)
    text = report.comparison_text(rows, (args.labels[0], args.labels[1]))
    print(text, end="")
    if args.out:
        out = _output_dir(args.out)
        _write(out / "comparison.csv", report.comparison_csv(rows))
        _write(out / "comparison.txt", text)
    return 0 if report.all_passed(rows) else 1


def cmd_diagnose(args):
    run = Path(args.run)
    path = run / "ensemble.csv"
    if not path.exists():
        raise CliError(f"{path}: no ensemble table; run 'dhglm fit' with --method amis or both first")
    ens = ensemble_from_frame(pd.read_csv(path))
    write_diagnostics(ens, run / "diagnostics")
    w = np.exp(ens.log_weights - np.max(ens.log_weights))
    print(f"draws {len(ens)}  ESS {effective_sample_size(w):.2f}")
    stages = run / "ess_log.csv"
    if stages.exists():
        for row in pd.read_csv(stages).itertuples(index=False):
            print(f"  stage {row.stage}: {row.n_total} draws, ESS {row.ess:.2f}")
    width = max(len(n) for n in ens.names)
    for j, name in enumerate(ens.names):
        p, cum = weight_diagnostic_curve(ens, j)
        print(f"  {name.ljust(width)}  max |cumulative weight - p| = {np.max(np.abs(cum - p)):.4f}")
    print(f"curves written to {run / 'diagnostics'}")
    return 0


def _default_workers():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="dhglm", description="DHGLM inference by AMIS over conditional fits, "
                                     "with an MCMC reference sampler.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--preset", required=True, help="experiment id (see list-presets)")
        p.add_argument("--scale", choices=("paper", "desk"), default="desk")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=out_default, help="output directory (created if missing)")
        p.add_argument("--config", help="YAML file overriding amis/mcmc/recipe settings")

    p = sub.add_parser("list-presets", help="list experiment presets")
    p.set_defaults(func=cmd_list_presets)
    p = sub.add_parser("simulate", help="write a preset's dataset as CSV")
    common(p, "data")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("fit", help="fit a preset with AMIS, MCMC or both")
    common(p, "runs")
    p.add_argument("--method", choices=("amis", "mcmc", "both"), default="both")
    p.add_argument("--workers", type=int, default=None,
                   help=f"processes for the conditional fits (default ${WORKERS_ENV} or 1)")
    p.set_defaults(func=cmd_fit)
    p = sub.add_parser("compare", help="compare two summary CSVs")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--tolerance", type=float, default=None,
                   help="absolute tolerance on means (default max(0.05, 0.5 * pooled sd))")
    p.add_argument("--labels", nargs=2, default=("a", "b"))
    p.add_argument("--out", help="directory for comparison.csv/.txt")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("diagnose", help="weight diagnostics for a finished AMIS run")
    p.add_argument("--run", required=True, help="output directory of a previous fit")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "workers", 1) is None:
            args.workers = _default_workers()
        return args.func(args)
    except (CliError, PresetError, DataError, SpecError, PlanError, report.ReportError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dhglm: error: {msg}", file=sys.stderr)
        return 2
    except (AmisError, McmcError, FitError) as exc:
        print(f"dhglm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
