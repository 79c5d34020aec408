"""Command-line entry point.

Examples
--------
Simulate the coherence surface described by a config file::

    epscpmg simulate --config run.yaml --out out/surface.csv

Generate a synthetic dataset and invert it back to densities::

    epscpmg synth-data --config run.yaml --out out/data.csv
    epscpmg fit-density --config run.yaml --data out/data.csv --out out/fit.json

Every output gets a JSON sidecar (same stem) holding the resolved config;
passing that sidecar back as ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import (AnalyticFitParams, analytic_coherence, fit_coherence_curve,
                       fit_stretched_exponential)
from .config import RunConfig, load_config
from .errors import ContractError, EpsCpmgError, FitError, SchemaError
from .fitting import (ExperimentalDataset, SurfaceCache, compute_surfaces,
                      generate_synthetic_dataset, grid_search)

log = logging.getLogger("epscpmg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_FIT = 4


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer)) else _fmt(v) for v in row])


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sidecar(path, command, config, outputs, extra=None):
    doc = {
        "tool": "epscpmg",
        "version": __version__,
        "command": command,
        "master_seed": config.seed,
        "config_hash": config.digest(),
        "outputs": [Path(o).name for o in outputs],
        "config": config.canonical(),
    }
    if extra:
        doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    sim = {}
    if getattr(args, "realizations", None) is not None:
        sim["realizations"] = args.realizations
    if getattr(args, "threads", None) is not None:
        sim["threads"] = args.threads
    fit = {}
    if getattr(args, "smoothing_deg", None) is not None:
        fit["smoothing_deg"] = args.smoothing_deg
    if not (updates or sim or fit):
        return cfg
    raw = cfg.canonical()
    raw.update(updates)
    raw["simulation"].update(sim)
    raw["fit"].update(fit)
    from .config import parse_config

    return parse_config(json.dumps(raw), "<command line>")


def _out_path(args, cfg, default):
    return Path(args.out) if args.out else Path(cfg.output.dir) / default


def cmd_simulate(args):
    cfg = _resolve_config(args)
    out = _out_path(args, cfg, "surface.csv")
    cache = SurfaceCache(cfg.output.cache_dir)
    settings = cfg.surface_settings()
    log.info("simulating %s with %d realizations", cfg.densities(), settings.realizations)
    surf = compute_surfaces([(cfg.densities(), settings)], threads=cfg.simulation.threads,
                            cache=cache)[0]
    _write_csv(out, ("epsilon_deg", "n_pulses", "coherence", "stderr"), surf.rows())
    _sidecar(out.with_suffix(".json"), "simulate", cfg, [out],
             {"densities": list(cfg.densities().as_tuple()),
              "realization_count": surf.realization_count})
    print(out)
    return EXIT_OK


def cmd_synth_data(args):
    cfg = _resolve_config(args)
    out = _out_path(args, cfg, "synthetic.csv")
    settings = cfg.surface_settings()
    data = generate_synthetic_dataset(
        cfg.densities(), settings.spec, cfg.fit.noise_sigma, cfg.fit.noise_seed, settings,
        smoothing_sigma=float(np.deg2rad(cfg.fit.smoothing_deg)), threads=cfg.simulation.threads,
        cache=SurfaceCache(cfg.output.cache_dir),
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    data.to_csv(out)
    _sidecar(out.with_suffix(".json"), "synth-data", cfg, [out],
             {"densities": list(cfg.densities().as_tuple()), "noise_seed": cfg.fit.noise_seed})
    print(out)
    return EXIT_OK


def cmd_fit_density(args):
    cfg = _resolve_config(args)
    data = ExperimentalDataset.from_csv(args.data)
    out = _out_path(args, cfg, "density_fit.json")
    result = grid_search(data, cfg.fit.n_system_values(), cfg.fit.n_bath_values(),
                         cfg.fit_settings())
    contour = out.with_name(out.stem + "_chi2.csv")
    _write_csv(contour, ("n_system_ppm", "n_bath_ppm", "chi2"), result.contour_rows())
    doc = result.to_dict()
    doc.update({"tool": "epscpmg", "version": __version__, "master_seed": cfg.seed,
                "config_hash": cfg.digest(), "data_sha256": _file_digest(args.data)})
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _sidecar(out.with_name(out.stem + "_run.json"), "fit-density", cfg, [out, contour],
             {"data": str(args.data), "data_sha256": _file_digest(args.data)})
    if result.best is None:
        raise FitError("every grid cell failed", best_residual=None)
    print(f"best n_system={result.best.n_system:.4g} ppm n_bath={result.best.n_bath:.4g} ppm")
    return EXIT_OK


def _read_decay_csv(path):
    """``time_us,coherence[,sigma]`` rows for echo-decay fits."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if not rows:
        raise SchemaError(f"{path}: empty file", [f"{path}: no header row"])
    header = tuple(c.strip() for c in rows[0])
    if header[:2] != ("time_us", "coherence"):
        raise SchemaError(f"{path}: header must be time_us,coherence[,sigma]",
                          [f"line 1: got {','.join(header)}"])
    t, c, s, problems = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            t.append(float(row[0]))
            c.append(float(row[1]))
            s.append(float(row[2]) if len(row) > 2 and row[2].strip() else np.nan)
        except (ValueError, IndexError):
            problems.append(f"line {lineno}: bad row {row}")
    if problems:
        raise SchemaError(f"{path}: {len(problems)} invalid row(s)", problems)
    s = np.array(s)
    return np.array(t), np.array(c), None if np.all(np.isnan(s)) else s


def cmd_fit_analytic(args):
    cfg = _resolve_config(args)
    out = _out_path(args, cfg, "analytic_fit.json")
    curve_path = out.with_name(out.stem + "_curve.csv")
    if args.stretched_exp:
        t, c, s = _read_decay_csv(args.data)
        fit = fit_stretched_exponential(t, c, s, fix_n=args.fix_n)
        report = {"model": "stretched_exponential", "T2_us": fit.T2, "n": fit.n,
                  "amplitude": fit.amplitude, "chi2": fit.chi2}
        grid = np.linspace(t.min(), t.max(), 200)
        _write_csv(curve_path, ("time_us", "model"), zip(grid, fit(grid)))
    else:
        data = ExperimentalDataset.from_csv(args.data)
        ns = np.unique(data.n_pulses)
        if ns.size != 1:
            raise ContractError(f"analytic fits take one curve; found N = {ns.tolist()}")
        sigma = None if np.all(np.isnan(data.sigma)) else data.sigma
        smoothing = float(np.deg2rad(cfg.fit.smoothing_deg))
        fit = fit_coherence_curve(data.epsilon, data.coherence, sigma, smoothing_sigma=smoothing,
                                  tau=cfg.sequence.tau)
        report = {"model": "effective_hamiltonian", "n_pulses": int(ns[0]), **fit.records()}
        p = fit.params
        grid = np.deg2rad(np.linspace(np.rad2deg(data.epsilon.min()),
                                      np.rad2deg(data.epsilon.max()), 181))
        smooth = analytic_coherence(grid, p, smooth=True)
        raw = analytic_coherence(grid, AnalyticFitParams(p.amplitude, p.j_over_d1, p.d2_over_d1,
                                                         p.d3_over_d1, 0.0))
        _write_csv(curve_path, ("epsilon_deg", "model_smoothed", "model_raw"),
                   zip(np.rad2deg(grid), smooth, raw))
    report.update({"tool": "epscpmg", "version": __version__, "master_seed": cfg.seed,
                   "config_hash": cfg.digest(), "data_sha256": _file_digest(args.data)})
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True, default=float) + "\n")
    _sidecar(out.with_name(out.stem + "_run.json"), "fit-analytic", cfg, [out, curve_path],
             {"data": str(args.data), "stretched_exp": bool(args.stretched_exp)})
    print(out)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="epscpmg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", help="YAML config or a previous run's JSON sidecar")
        p.add_argument("--out", help="output file (sidecars are written next to it)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--realizations", type=int, help="override the realization count")
        p.add_argument("--threads", type=int, help="worker processes")
        p.add_argument("--smoothing-deg", type=float, help="Gaussian eps smoothing, degrees")
        if data:
            p.add_argument("--data", required=True, help="input CSV")

    p = sub.add_parser("simulate", help="Monte-Carlo coherence surface C(eps, N)")
    common(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("synth-data", help="synthetic dataset in the ingestion schema")
    common(p)
    p.set_defaults(func=cmd_synth_data)
    p = sub.add_parser("fit-density", help="chi^2 grid search over spin densities")
    common(p, data=True)
    p.set_defaults(func=cmd_fit_density)
    p = sub.add_parser("fit-analytic", help="closed-form fit of one C(eps) curve")
    common(p, data=True)
    p.add_argument("--stretched-exp", action="store_true",
                   help="fit A exp(-(t/T2)^n) to a time_us,coherence[,sigma] file instead")
    p.add_argument("--fix-n", type=float, default=None, help="hold the stretch exponent fixed")
    p.set_defaults(func=cmd_fit_analytic)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FitError as exc:
        print(f"fit failed: {exc} (best residual {exc.best_residual})", file=sys.stderr)
        return EXIT_FIT
    except EpsCpmgError as exc:
        seed = getattr(exc, "seed", None)
        tail = f" [seed {seed}]" if seed is not None else ""
        print(f"numerical failure: {exc}{tail}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
