"""Command-line interface: ``qbmm fit | test | simulate | validate | bootstrap``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .error_model import fit_with_error
from .exceptions import QBMMError
from .inference import (
    SCHEMA_VERSION,
    _jsonable,
    analyze_region,
    bootstrap_pvalue,
    write_curves_tsv,
)
from .region_data import ModelSpec, load_regions, write_region
from .simulate import SimScenario, n_settings, replicate_seed, scenario_curves, simulate_region

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_VALIDATION = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    command: str
    inputs: list = field(default_factory=list)
    covariates: list | None = None
    p0: float = 0.0
    p1: float = 1.0
    ranks: list | None = None
    rank_rule: str = "simulation"
    tol: float = 1e-6
    threads: int = 1
    seed: int = 0
    out: str = "qbmm_out"
    bootstrap: int = 0
    level: float = 0.95
    test_covariates: list | None = None
    no_random_effect: bool = False
    resume: bool = False

    def spec(self):
        return ModelSpec(
            basis_ranks=tuple(self.ranks) if self.ranks else None,
            rank_rule=self.rank_rule,
            error_rates=(self.p0, self.p1),
            tol=self.tol,
            random_effect=not self.no_random_effect,
        )


def _threads(value):
    if value is not None:
        return value
    env = os.environ.get("QBMM_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise SystemExit(f"QBMM_THREADS must be an integer, got {env!r}") from None
    return 1


def _common(p, inputs=True):
    if inputs:
        p.add_argument("--input", nargs="+", required=True, help="region TSV file(s)")
        p.add_argument("--covariates", nargs="+", help="covariate column names (default: all extra columns)")
        p.add_argument("--ranks", nargs="+", type=int, help="basis rank per smooth term, intercept first")
        p.add_argument("--rank-rule", choices=["real_data", "simulation"], default="simulation")
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--no-random-effect", action="store_true",
                       help="fit the multiplicative-dispersion-only submodel")
        p.add_argument("--resume", action="store_true", help="skip regions with existing results")
    p.add_argument("--p0", type=float, default=0.0)
    p.add_argument("--p1", type=float, default=1.0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="qbmm_out")


def build_parser():
    parser = _Parser(prog="qbmm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit every region")
    _common(p)

    p = sub.add_parser("test", help="fit and test every region")
    _common(p)
    p.add_argument("--covariate", nargs="+", dest="test_covariates", help="restrict tests to these terms")
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap replicates (0 = none)")
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("bootstrap", help="bootstrap-calibrated tests")
    _common(p)
    p.add_argument("--covariate", nargs="+", dest="test_covariates")
    p.add_argument("--bootstrap", type=int, default=199)
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("simulate", help="write simulated regions")
    _common(p, inputs=False)
    p.add_argument("--scenario", type=int, default=1, choices=[1, 2])
    p.add_argument("--setting", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=100)
    p.add_argument("--n-sites", type=int, default=123)
    p.add_argument("--phi", type=float, default=1.0)
    p.add_argument("--sigma0-sq", type=float, default=0.0)
    p.add_argument("--depth", type=int, default=30)
    p.add_argument("--replicates", type=int, default=1)

    p = sub.add_parser("validate", help="run numerical self-checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="qbmm_out")
    p.add_argument("--quick", action="store_true")
    return parser


def _config(args):
    cfg = RunConfig(command=args.command)
    for k in vars(cfg):
        if hasattr(args, k) and getattr(args, k) is not None and k != "command":
            setattr(cfg, k, getattr(args, k))
    if hasattr(args, "input"):
        cfg.inputs = list(args.input)
    cfg.threads = _threads(getattr(args, "threads", None))
    if cfg.threads < 1:
        raise ValueError("--threads must be >= 1")
    return cfg


def _region_job(job):
    """Worker: fit/test one region, returning a picklable record."""
    region, spec, cfg = job
    rec = {"region": region.name, "status": "ok", "error": None}
    try:
        if cfg.command == "fit":
            f = fit_with_error(region, spec)
            res = analyze_region(region, spec, fit=f, covariates=[], level=cfg.level)
            res.tests = []
        else:
            res = analyze_region(region, spec, covariates=cfg.test_covariates, level=cfg.level)
            if cfg.bootstrap:
                for k, t in enumerate(res.tests):
                    b = bootstrap_pvalue(region, spec, t.index, cfg.bootstrap,
                                         seed=[cfg.seed, k], t_obs=t.statistic)
                    t.bootstrap_p = b["p_value"]
                    t.bootstrap_failures = b["failures"]
        rec["result"] = res.to_dict()
        rec["curves"] = res.curves
    except (QBMMError, ValueError, np.linalg.LinAlgError) as exc:
        rec["status"] = "failed"
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


def _map(fn, jobs, threads):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            yield from ex.map(fn, jobs)
    else:
        for j in jobs:
            yield fn(j)


def _read_inputs(cfg):
    regions, reports = [], []
    for path in cfg.inputs:
        for r in load_regions(path, cfg.covariates).values():
            regions.append(r)
            if r.report is not None:
                reports.append(r.report.to_dict())
    names = [r.name for r in regions]
    if len(set(names)) != len(names):
        # multiple single-region files without a Region column
        regions = [replace(r, name=f"{r.name}_{k + 1}") if names.count(r.name) > 1 else r
                   for k, r in enumerate(regions)]
    return regions, reports


def cmd_regions(cfg):
    try:
        regions, reports = _read_inputs(cfg)
        spec = cfg.spec()
    except OSError as exc:
        print(f"qbmm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (QBMMError, ValueError) as exc:
        print(f"qbmm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = cfg.out
    os.makedirs(os.path.join(out, "results"), exist_ok=True)
    os.makedirs(os.path.join(out, "curves"), exist_ok=True)
    with open(os.path.join(out, "load_report.json"), "w", encoding="utf-8") as fh:
        json.dump(reports, fh, indent=2)
    todo = []
    for r in regions:
        if cfg.resume and os.path.exists(os.path.join(out, "results", f"{r.name}.json")):
            continue
        todo.append((r, spec, cfg))
    records = []
    for rec in _map(_region_job, todo, cfg.threads):
        name = rec["region"]
        if rec["status"] == "ok":
            res = rec["result"]
            path = os.path.join(out, "results", f"{name}.json")
            tmp = f"{path}.tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(res, fh, indent=2)
            os.replace(tmp, path)
            write_curves_tsv(rec["curves"], os.path.join(out, "curves", f"{name}.tsv"))
        else:
            print(f"qbmm: region {name} failed: {rec['error']}", file=sys.stderr)
        records.append(rec)
    _write_summary(out, records)
    if cfg.command in ("test", "bootstrap"):
        _write_tests(out, records)
    failed = sum(r["status"] != "ok" for r in records)
    return EXIT_PARTIAL if failed else EXIT_OK


def _write_summary(out, records):
    path = os.path.join(out, "summary.tsv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["region", "status", "phi_fletcher", "phi_used", "sigma0_sq", "lambda", "tau",
                    "converged", "n_outer", "n_es", "error"])
        for rec in records:
            if rec["status"] == "ok":
                f = rec["result"]["fit"]
                w.writerow([rec["region"], "ok", _fmt(f["phi_fletcher"]), _fmt(f["phi"]),
                            _fmt(f["sigma0_sq"]), ",".join(_fmt(v) for v in f["lambda"]),
                            _fmt(f["edf_total"]), f["converged"], f["n_outer"],
                            "" if f["n_es"] is None else f["n_es"], ""])
            else:
                w.writerow([rec["region"], "failed"] + [""] * 8 + [rec["error"]])


def _write_tests(out, records):
    path = os.path.join(out, "tests.tsv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["region", "covariate", "T", "tau_p", "resid_df", "p_value", "rank", "bootstrap_p"])
        for rec in records:
            if rec["status"] != "ok":
                continue
            for t in rec["result"]["tests"]:
                w.writerow([rec["region"], t["name"], _fmt(t["statistic"]), _fmt(t["df_num"]),
                            _fmt(t["df_den"]), _fmt(t["p_value"]), t["rank"],
                            "" if t["bootstrap_p"] is None else _fmt(t["bootstrap_p"])])


def _fmt(v):
    return "" if v is None else f"{v:.8g}"


def cmd_simulate(args, cfg):
    try:
        if not 0 <= args.setting < n_settings(args.scenario):
            raise ValueError(f"setting must be in 0..{n_settings(args.scenario) - 1}")
        sc = SimScenario(
            scenario_curves(args.scenario, args.setting), n_samples=args.n_samples,
            n_sites=args.n_sites, rates=(cfg.p0, cfg.p1), phi=args.phi,
            sigma0_sq=args.sigma0_sq, depth=args.depth,
        )
    except (QBMMError, ValueError) as exc:
        print(f"qbmm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(cfg.out, exist_ok=True)
    files = []
    for k in range(args.replicates):
        name = f"sim_s{args.scenario}_{args.setting}_{k + 1:04d}"
        reg, _ = simulate_region(sc.with_(name=name), seed=replicate_seed(cfg.seed, k))
        path = os.path.join(cfg.out, f"{name}.tsv")
        write_region(reg, path)
        files.append(os.path.basename(path))
    manifest = sc.manifest(cfg.seed)
    manifest.update({"scenario": args.scenario, "setting": args.setting,
                     "replicates": args.replicates, "files": files,
                     "schema_version": SCHEMA_VERSION})
    with open(os.path.join(cfg.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(_jsonable(manifest), fh, indent=2)
    return EXIT_OK


def cmd_validate(args):
    from .validation import run_validation

    report, ok = run_validation(seed=args.seed, quick=args.quick)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "validate_report.json"), "w", encoding="utf-8") as fh:
        json.dump(_jsonable(report), fh, indent=2)
    for c in report["checks"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {c['name']}  {c['value']:.6g}")
    return EXIT_OK if ok else EXIT_VALIDATION


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args)
    try:
        cfg = _config(args)
    except ValueError as exc:
        print(f"qbmm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "simulate":
        return cmd_simulate(args, cfg)
    if cfg.command in ("test", "bootstrap") and 0 < cfg.bootstrap < 99 or (
        cfg.command == "bootstrap" and cfg.bootstrap < 99
    ):
        print("qbmm: --bootstrap must be >= 99", file=sys.stderr)
        return EXIT_USAGE
    return cmd_regions(cfg)


if __name__ == "__main__":
    sys.exit(main())
