"""Command-line entry point: ``lvmi fit | impute | analyze | select-dim | simulate``.

Every command writes its outputs plus ``manifest.json`` (the fully resolved
configuration and seed) into ``--out``.  Exit codes: 0 success, 2 invalid
input or model, 3 numeric failure, 4 file I/O.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (builtin_conditional_mean, builtin_correlation, builtin_linear_regression,
                       builtin_mean, analyze)
from .fit import NumericError, SAConfig, fit
from .impute import ImputationOutput, ImputeConfig, impute
from .io import (load_model_file, load_psi, read_dataset, read_table, save_psi, spec_from_dict,
                 write_rows_csv)
from .model import ModelError
from .selection import select_dimensions
from .simulate import RAW_COLUMNS, SCALES, STUDIES, SUMMARY_COLUMNS, run_replication

log = logging.getLogger("lvmi")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
WORKERS_ENV = "LVMI_WORKERS"


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ModelError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict, outputs) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": config,
        "outputs": sorted(str(Path(p).name) for p in outputs),
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, default=str))


def _load(data_path, model_path):
    doc = load_model_file(model_path)
    dataset = read_dataset(data_path, doc)
    return doc, spec_from_dict(doc), dataset


def _workers(args) -> int:
    return args.workers if args.workers is not None else default_workers()


# -- commands -----------------------------------------------------------------


def cmd_fit(args) -> int:
    doc, spec, dataset = _load(args.data, args.model)
    cfg = SAConfig(T=args.iters, T0=args.burnin, A=args.step_scale, c=args.step_exponent,
                   seed=args.seed, workers=_workers(args), keep_trace=True)
    res = fit(dataset, spec, cfg)
    out = _out_dir(args)
    names = [v["name"] for v in doc["variables"]]
    save_psi(out / "psi.json", res.psi_hat, names)
    res.write_trace(out / "trace.csv")
    (out / "diagnostics.json").write_text(json.dumps(res.diagnostics, indent=1))
    _write_manifest(out, "fit", {"data": args.data, "model": args.model, **cfg.__dict__},
                    ["psi.json", "trace.csv", "diagnostics.json"])
    print(f"fitted {spec.layout.size} parameters on {dataset.N} units -> {out / 'psi.json'}")
    return EXIT_OK


def cmd_impute(args) -> int:
    doc, spec, dataset = _load(args.data, args.model)
    psi = load_psi(args.psi)
    if psi.spec != spec:
        raise ModelError(f"{args.psi} was fitted under a different model than {args.model}")
    T0 = args.burnin
    cfg = ImputeConfig(T=args.iters, T0=T0, k=args.thin, seed=args.seed, workers=_workers(args))
    imp = impute(dataset, psi, cfg)
    imp.config["covariates"] = list(doc.get("covariates", []))
    out = _out_dir(args)
    paths = imp.write_csvs(out)
    imp.save(out / "aux.json")
    _write_manifest(out, "impute", {"data": args.data, "model": args.model, "psi": args.psi,
                                    **cfg.__dict__, "M": cfg.M},
                    [*paths, "mask.csv", "aux.json"])
    print(f"wrote {cfg.M} imputed datasets to {out}")
    return EXIT_OK


def _column_index(imp: ImputationOutput, name: str) -> int:
    if name in imp.columns:
        return imp.columns.index(name)
    raise ModelError(f"unknown response column {name!r}; have {', '.join(imp.columns)}")


def _read_imputed(imp: ImputationOutput, pattern: str) -> np.ndarray:
    paths = sorted(glob.glob(pattern), key=lambda p: (len(p), p))
    if len(paths) != imp.M:
        raise ModelError(f"{pattern!r} matched {len(paths)} files, the container holds M={imp.M}")
    out = np.empty_like(imp.datasets)
    for m, path in enumerate(paths):
        header, body = read_table(path)
        if tuple(header) != imp.columns:
            raise ModelError(f"{path}: header does not match the imputed columns")
        out[m] = np.array(body, dtype=float)
    if not np.array_equal(out[:, imp.mask], imp.datasets[:, imp.mask]):
        raise ModelError(f"{pattern!r}: observed cells differ from the imputation container")
    return out


def _estimating_function(args, imp: ImputationOutput):
    kinds = imp.psi_hat.spec.kinds
    cols = [_column_index(imp, c) for c in args.columns] if args.columns else \
        list(range(len(imp.columns)))
    if args.analysis == "mean":
        return builtin_mean(cols, names=[f"mean[{imp.columns[j]}]" for j in cols])
    if args.analysis == "condmean":
        if args.given is None or args.value is None:
            raise ModelError("condmean needs --given and --value")
        g = _column_index(imp, args.given)
        cols = [j for j in cols if j != g]
        return builtin_conditional_mean(
            g, args.value, cols, kinds,
            names=[f"mean[{imp.columns[j]}|{args.given}={args.value:g}]" for j in cols])
    if args.analysis == "corr":
        if len(args.columns or []) != 2:
            raise ModelError("corr needs exactly two --columns")
        return builtin_correlation(cols[0], cols[1])
    if args.response is None:
        raise ModelError("ols needs --response")
    covs = imp.config.get("covariates", [])
    cov_idx = []
    for c in args.covariates or []:
        if c not in covs:
            raise ModelError(f"unknown covariate {c!r}; the data had {covs}")
        cov_idx.append(covs.index(c))
    return builtin_linear_regression(_column_index(imp, args.response), cols if args.columns else
                                     [], cov_idx, intercept=not args.no_intercept)


def cmd_analyze(args) -> int:
    imp = ImputationOutput.load(args.aux)
    if args.imputed:
        imp.datasets = _read_imputed(imp, args.imputed)
    weights = None
    if args.weights:
        if not args.data:
            raise ModelError("--weights needs --data to read the weight column from")
        header, body = read_table(args.data)
        if args.weights not in header:
            raise ModelError(f"{args.data}: no column {args.weights!r}")
        c = header.index(args.weights)
        try:
            weights = np.array([float(r[c]) for r in body])
        except ValueError:
            raise ModelError(f"{args.data}: weight column {args.weights!r} must be complete "
                             "and numeric") from None
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise ModelError(f"{args.data}: weights must be finite and positive")
        if weights.size != imp.N:
            raise ModelError(f"{args.data} has {weights.size} rows, the imputations have {imp.N}")
    ef = _estimating_function(args, imp)
    res = analyze(imp, ef, weights, args.level)
    out = _out_dir(args)
    (out / "result.json").write_text(json.dumps(res.to_dict(), indent=1))
    write_rows_csv(out / "table.csv", ["estimand", "estimate", "se", "ci_lower", "ci_upper"],
                   res.rows())
    _write_manifest(out, "analyze", vars(args) | {"func": None}, ["result.json", "table.csv"])
    for r in res.rows():
        print(f"{r['estimand']}\t{r['estimate']:.6g}\t(se {r['se']:.4g})")
    return EXIT_OK


def parse_grid(text: str) -> list[tuple[int, int]]:
    """``"1x1,2x1"`` -> ``[(1, 1), (2, 1)]``."""
    grid = []
    for cell in text.split(","):
        cell = cell.strip()
        try:
            a, b = cell.lower().split("x")
            grid.append((int(a), int(b)))
        except ValueError:
            raise ModelError(f"bad grid cell {cell!r}; expected K1xK2 such as 2x1") from None
    if not grid:
        raise ModelError("the grid is empty")
    return grid


def cmd_select_dim(args) -> int:
    doc, spec, dataset = _load(args.data, args.model)
    cfg = SAConfig(T=args.iters, T0=args.burnin, A=args.step_scale, c=args.step_exponent,
                   seed=args.seed, workers=_workers(args))
    table, best = select_dimensions(dataset, spec, parse_grid(args.grid), cfg, args.draws,
                                    args.seed)
    out = _out_dir(args)
    write_rows_csv(out / "bic.csv", ["K1", "K2", "loglik", "se", "nparams", "bic", "error"],
                   [r.as_dict() for r in table])
    _write_manifest(out, "select-dim", {"data": args.data, "model": args.model,
                                        "grid": args.grid, "draws": args.draws,
                                        **cfg.__dict__}, ["bic.csv"])
    if best is None:
        print("every grid cell failed; see bic.csv", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"BIC minimized at K1={best.K1}, K2={best.K2} (BIC {best.bic:.2f})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    overrides = {}
    for flag, field in (("n", "N"), ("iters", "T_fit"), ("burnin", "T0_fit"),
                        ("impute_iters", "T_imp"), ("impute_burnin", "T0_imp"), ("thin", "k")):
        v = getattr(args, flag)
        if v is not None:
            overrides[field] = v
    summary = run_replication(args.study, args.replicates, args.scale, args.seed,
                              _workers(args), args.conditional, **overrides)
    out = _out_dir(args)
    write_rows_csv(out / "raw.csv", RAW_COLUMNS, summary.raw)
    write_rows_csv(out / "summary.csv", SUMMARY_COLUMNS, summary.rows)
    scale = {**SCALES[args.scale].__dict__, **overrides}
    if args.replicates is not None:
        scale["R"] = args.replicates
    _write_manifest(out, "simulate", {"study": args.study, "seed": args.seed,
                                      "scale": args.scale, "resolved_scale": scale,
                                      "conditional": args.conditional,
                                      "failures": summary.failures}, ["raw.csv", "summary.csv"])
    print(f"{args.study}: coverage {summary.coverage:.3f}, max |bias| "
          f"{summary.max_abs_bias:.4f}, {len(summary.failures)} failed replicate(s)")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _common(p, iters, burnin):
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None,
                   help=f"worker threads or processes (default: ${WORKERS_ENV} or all cores)")
    p.add_argument("--iters", type=int, default=iters)
    p.add_argument("--burnin", type=int, default=burnin)


def _sa_flags(p):
    p.add_argument("--step-scale", type=float, default=SAConfig.A, help="gain constant A")
    p.add_argument("--step-exponent", type=float, default=SAConfig.c, help="gain decay c")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lvmi", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="estimate the imputation model")
    p.add_argument("data", help="CSV with header; missing cells are NA")
    p.add_argument("model", help="JSON model file")
    _common(p, SAConfig.T, SAConfig.T0)
    _sa_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("impute", help="draw imputations at fitted parameters")
    p.add_argument("data")
    p.add_argument("model")
    p.add_argument("psi", help="psi.json written by fit")
    _common(p, ImputeConfig.T, ImputeConfig.T0)
    p.add_argument("--thin", type=int, default=ImputeConfig.k)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("analyze", help="pooled estimates with sandwich standard errors")
    p.add_argument("aux", help="aux.json written by impute")
    p.add_argument("--imputed", help="glob of imputed CSVs to analyze instead of the stored ones")
    p.add_argument("--analysis", choices=("mean", "condmean", "corr", "ols"), default="mean")
    p.add_argument("--columns", nargs="+", help="response columns (regressors for ols)")
    p.add_argument("--given", help="binary conditioning column for condmean")
    p.add_argument("--value", type=float, help="conditioning value for condmean")
    p.add_argument("--response", help="response column for ols")
    p.add_argument("--covariates", nargs="+", help="covariate columns for ols")
    p.add_argument("--no-intercept", action="store_true")
    p.add_argument("--weights", help="weight column to read from --data")
    p.add_argument("--data", help="CSV holding the weight column")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("select-dim", help="BIC over a grid of factor dimensions")
    p.add_argument("data")
    p.add_argument("model")
    p.add_argument("--grid", required=True, help="cells K1xK2, comma separated, e.g. 1x1,2x1")
    p.add_argument("--draws", type=int, default=5000, help="importance draws per unit")
    _common(p, SAConfig.T, SAConfig.T0)
    _sa_flags(p)
    p.set_defaults(func=cmd_select_dim)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--study", choices=STUDIES, required=True)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--scale", choices=sorted(SCALES), default="desk")
    p.add_argument("--conditional", action="store_true",
                   help="also estimate means conditional on the last variable")
    p.add_argument("--n", type=int, default=None, help="override the sample size")
    p.add_argument("--out", default=".")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--iters", type=int, default=None, help="override fitting iterations")
    p.add_argument("--burnin", type=int, default=None, help="override fitting burn-in")
    p.add_argument("--impute-iters", type=int, default=None)
    p.add_argument("--impute-burnin", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ModelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        print(f"error: malformed input ({e})", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
