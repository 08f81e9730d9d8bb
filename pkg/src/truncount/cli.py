"""Command-line interface: ``truncount <command> [options]``.

Exit codes: 0 success, 2 input or validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataset import (
    DataError,
    Dataset,
    append_outlier_records,
    bundled_path,
    impute_missing_proportion,
    load_csv,
    outlier_bounds,
    to_csv,
)
from .estimators import (
    EstimatorError,
    PopulationEstimate,
    estimate_all,
    generalised_chao,
    generalised_zelterman,
    horvitz_thompson,
    wald_ci,
)
from .glm import FitError, canonical_family, fit, fit_all_specs, select_ht_model, select_model
from .simulation import (
    ESTIMATOR_KEYS,
    ConfigError,
    PerformanceReport,
    SimConfig,
    load_config,
    load_sweep_proportions,
    robustness_sweep,
    write_replicates_csv,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
LABELS = {"ht": "Horvitz-Thompson", "gc": "Generalised Chao", "gz": "Generalised Zelterman"}
DEFAULT_PROPORTIONS = (0.0, 0.001, 0.005, 0.01, 0.02)


class CommandError(Exception):
    def __init__(self, message: str, code: int, stage: str):
        self.code = code
        self.stage = stage
        super().__init__(message)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _integer(x: float) -> str:
    """Rounded for display; scientific notation beyond eight digits."""
    if not math.isfinite(x):
        return "n/a"
    return f"{x:.3e}" if abs(x) >= 1e8 else str(round_half_up(x))


def _digest(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _timestamp() -> str | None:
    # Fixed by SOURCE_DATE_EPOCH so that repeated runs produce identical files.
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    import datetime as dt

    return dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc).isoformat()


def report_document(command: str, inputs: Sequence[Path], results: dict, seed: int | None = None) -> dict:
    return {
        "command": command,
        "version": __version__,
        "seed": seed,
        "timestamp": _timestamp(),
        "input_digest": _digest(inputs) if inputs else None,
        "results": results,
    }


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return _finite(obj.item())
    return _finite(obj)


def write_json(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _stage(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (FitError, OverflowError, EstimatorError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise CommandError(str(exc), EXIT_NUMERIC, stage) from exc
    except (DataError, ConfigError, OSError, ValueError) as exc:
        raise CommandError(str(exc), EXIT_INPUT, stage) from exc


def _load(paths: Sequence[str] | None) -> tuple[Dataset, list[Path]]:
    files = [Path(p) for p in paths] if paths else [bundled_path("case_study.csv")]
    d = _stage("load", load_csv, files[0])
    for extra in files[1:]:
        more = _stage("load", load_csv, extra)
        d = _stage("load", append_outlier_records, d, more.records)
    return d, files


def model_summary(m) -> dict:
    return {
        "family": m.family,
        "predictor": m.spec.index,
        "beta": m.beta,
        "cov_beta": m.cov_beta,
        "dispersion": m.dispersion,
        "boundary": m.boundary,
        "loglik": m.loglik,
        "bic": m.bic,
        "n_used": m.n_used,
        "converged": m.converged,
        "iterations": m.iterations,
    }


def estimate_summary(e: PopulationEstimate) -> dict:
    return {
        "estimator": e.estimator,
        "n_hat": e.n_hat,
        "variance": e.variance,
        "ci_lower": e.ci_lower,
        "ci_upper": e.ci_upper,
        "level": e.level,
        "n_observed": e.n_observed,
        "model": model_summary(e.model) if e.model is not None else None,
    }


# -- estimate ------------------------------------------------------------------

def _estimates(d: Dataset, which: str, family: str, predictor: int | None, level: float):
    if which == "all" and family == "auto":
        return estimate_all(d, level=level, predictor=predictor)
    out = {}
    if which in ("ht", "all"):
        if family == "auto":
            m = select_ht_model(d, predictor)
        elif predictor is None:
            m = select_model(d, family)
        else:
            m = fit(d, family, predictor)
        if not m.converged:
            raise FitError(f"{m.family} fit did not converge")
        out["ht"] = wald_ci(horvitz_thompson(d, m), level)
    if which in ("gc", "gz", "all"):
        m = select_model(d, "trunc-binomial") if predictor is None else fit(d, "trunc-binomial", predictor)
        if not m.converged:
            raise FitError("truncated binomial fit did not converge")
        if which in ("gc", "all"):
            out["gc"] = wald_ci(generalised_chao(d, m), level)
        if which in ("gz", "all"):
            out["gz"] = wald_ci(generalised_zelterman(d, m), level)
    return out


def cmd_estimate(args) -> dict:
    d, files = _load(args.data)
    if d.has_missing:
        d = _stage("impute", impute_missing_proportion, d)
    family = args.family if args.family == "auto" else canonical_family(args.family)
    ests = _stage("estimate", _estimates, d, args.estimator, family, args.predictor, args.level)
    lines = [f"{'estimator':<24}{'model':<20}{'N_hat':>12}{'variance':>14}{'CI':>26}"]
    for key, e in ests.items():
        model = f"{e.model.family} h{e.model.spec.index}"
        ci = f"({_integer(e.ci_lower)}, {_integer(e.ci_upper)})"
        lines.append(
            f"{LABELS[key]:<24}{model:<20}{_integer(e.n_hat):>12}{_integer(e.variance):>14}{ci:>26}"
        )
    print("\n".join(lines))
    return report_document("estimate", files, {"n_observed": len(d),
                                               "estimates": {k: estimate_summary(v) for k, v in ests.items()}})


# -- select --------------------------------------------------------------------

def cmd_select(args) -> dict:
    d, files = _load(args.data)
    if d.has_missing:
        d = _stage("impute", impute_missing_proportion, d)
    family = canonical_family(args.family)
    fits = _stage("fit", fit_all_specs, d, family)
    best = _stage("select", select_model, d, family)
    rows = []
    print(f"{'predictor':>9}{'loglik':>10}{'BIC':>10}  family={family}")
    for index, m in enumerate(fits, start=1):
        if isinstance(m, Exception) or not m.converged:
            reason = str(m) if isinstance(m, Exception) else "did not converge"
            print(f"{index:>9}{'-':>10}{'-':>10}  ({reason})")
            rows.append({"predictor": index, "loglik": None, "bic": None, "selected": False,
                         "error": reason})
            continue
        chosen = m.spec.index == best.spec.index
        mark = " *" if chosen else ""
        print(f"{index:>9}{m.loglik:>10.1f}{m.bic:>10.1f}{mark}")
        rows.append({"predictor": index, "loglik": m.loglik, "bic": m.bic, "selected": chosen,
                     "dispersion": m.dispersion, "boundary": m.boundary, "n_used": m.n_used})
    return report_document("select", files, {"family": family, "rows": rows,
                                             "selected": best.spec.index})


# -- impute / outlier-bounds -------------------------------------------------------

def cmd_impute(args) -> dict:
    d, files = _load(args.data)
    if not d.has_missing:
        print("no missing prop_women values; nothing to impute")
        return report_document("impute", files, {"imputed": []})
    filled = _stage("impute", impute_missing_proportion, d)
    imputed = [{"id": new.id, "prop_women": new.prop_women}
               for old, new in zip(d.records, filled.records) if old.prop_women is None]
    text = to_csv(filled)
    if args.out:
        _stage("write", Path(args.out).write_text, text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    for row in imputed:
        print(f"imputed {row['id']}: prop_women = {row['prop_women']:.3f}", file=sys.stderr)
    return report_document("impute", files, {"imputed": imputed})


def cmd_outlier_bounds(args) -> dict:
    d, files = _load(args.data)
    b = _stage("bounds", outlier_bounds, d)
    print(f"lower = {b.lower:.6g}\nupper = {b.upper:.6g}\nratio = {b.upper / b.lower:.6g}")
    return report_document("outlier-bounds", files, {"lower": b.lower, "upper": b.upper})


# -- simulate ------------------------------------------------------------------

MEASURES = ("accuracy", "precision", "coverage")


def performance_table(columns: dict[float, PerformanceReport | None]) -> list[list[str]]:
    header = ["measure", "estimator"] + [repr(p) for p in columns]
    rows = [header]
    for measure in MEASURES:
        for key in ESTIMATOR_KEYS:
            row = [measure, key]
            for rep in columns.values():
                row.append("-" if rep is None else repr(getattr(rep.metrics[key], measure)))
            rows.append(row)
    return rows


def _display(measure: str, cell: str) -> str:
    if cell == "-":
        return cell
    x = float(cell)
    if measure == "coverage":
        return f"{x:.1f}%"
    if abs(x) >= 1e5:
        return f"{x:.1e}"
    return str(round_half_up(x))


BUNDLED_CONFIGS = {"n1000": "n1000.yaml", "n500": "n500.yaml"}


def _config_path(name: str) -> Path:
    """A file path, or one of the bundled names ``n1000`` / ``n500``."""
    if name in BUNDLED_CONFIGS and not Path(name).exists():
        return bundled_path(BUNDLED_CONFIGS[name])
    return Path(name)


def cmd_simulate(args) -> dict:
    if args.config:
        args.config = _config_path(args.config)
        cfg = _stage("config", load_config, args.config)
        props = _stage("config", load_sweep_proportions, args.config)
        inputs = [Path(args.config)]
    else:
        cfg, props, inputs = SimConfig(), None, []
    if args.seed is not None:
        cfg = _stage("config", replace, cfg, seed=args.seed)
    if args.replicates is not None:
        cfg = _stage("config", replace, cfg, replicates=args.replicates)
    props = list(props if props is not None else DEFAULT_PROPORTIONS)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    columns = _stage("simulate", robustness_sweep, cfg, props)
    table = performance_table(columns)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(table)
    (out / "performance.csv").write_text(buf.getvalue(), encoding="utf-8")
    write_replicates_csv([r for r in columns.values() if r is not None], out / "replicates.csv")

    widths = [11, 24] + [10] * len(props)
    head = ["Measure", "Estimator"] + [f"{100 * p:.1f}%" for p in props]
    print("".join(f"{h:<{w}}" for h, w in zip(head, widths)))
    for row in table[1:]:
        cells = [row[0].capitalize(), LABELS[row[1]]] + [_display(row[0], c) for c in row[2:]]
        print("".join(f"{c:<{w}}" for c, w in zip(cells, widths)))
    results = {
        "config": {k: v for k, v in vars(cfg).items() if k != "outlier_proportion"},
        "columns": [
            {"outlier_proportion": p, "skipped": rep is None,
             "metrics": None if rep is None else rep.to_dict()["metrics"]}
            for p, rep in columns.items()
        ],
    }
    doc = report_document("simulate", inputs, results, seed=cfg.seed)
    write_json(doc, out / "performance.json")
    return doc


# -- plot ----------------------------------------------------------------------

def read_replicates(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no replicate rows")
    need = {"estimator", "n_hat", "ci_lower", "ci_upper", "converged"}
    missing = need - set(rows[0])
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    return rows


def _group(rows, value):
    """``{proportion: {estimator: values}}`` over converged rows."""
    groups: dict[float, dict[str, list[float]]] = {}
    for r in rows:
        if r["converged"] not in ("1", "True", "true"):
            continue
        p = float(r.get("outlier_proportion") or 0.0)
        groups.setdefault(p, {}).setdefault(r["estimator"], []).append(value(r))
    return dict(sorted(groups.items()))


def cmd_plot(args) -> dict:
    from .plotting import boxplot_figure

    if not args.data:
        raise CommandError("plot needs --data <replicates.csv>", EXIT_INPUT, "load")
    path = Path(args.data[0])
    rows = _stage("load", read_replicates, path)
    n_true = float(rows[0].get("n_total") or "nan")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    est = _group(rows, lambda r: float(r["n_hat"]))
    width = _group(rows, lambda r: float(r["ci_upper"]) - float(r["ci_lower"]))
    if not est:
        raise CommandError("no converged replicates to plot", EXIT_INPUT, "plot")
    first = next(iter(est))
    figures = {
        "estimates_and_precision.svg": [
            (f"Estimates, {100 * first:.1f}% outliers", {first: est[first]}, n_true),
            (f"CI width, {100 * first:.1f}% outliers", {first: width[first]}, None),
        ],
        "estimates_by_outliers.svg": [("Estimates by outlier proportion", est, n_true)],
        "precision_by_outliers.svg": [("CI width by outlier proportion", width, None)],
    }
    stats = {}
    for name, panels in figures.items():
        svg, panel_stats = boxplot_figure(panels)
        (out / name).write_text(svg, encoding="utf-8")
        stats[name] = panel_stats
        print(out / name)
    return report_document("plot", [path], {"figures": stats})


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", action="append", metavar="CSV",
                        help="input CSV; repeat to append further studies (default: bundled case study)")
    common.add_argument("--config", help="simulation configuration (YAML or JSON), or n1000 / n500")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int, help="override the simulation seed")
    common.add_argument("--json", metavar="PATH", help="write the JSON report here")

    p = argparse.ArgumentParser(prog="truncount", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", parents=[common], help="population size estimates")
    e.add_argument("--estimator", choices=("ht", "gc", "gz", "all"), default="all")
    e.add_argument("--family", default="auto",
                   help="Horvitz-Thompson family: auto (BIC), poisson or negbin")
    e.add_argument("--predictor", type=int, choices=range(1, 6),
                   help="linear predictor 1..5 (default: chosen by BIC)")
    e.add_argument("--level", type=float, default=0.95)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("select", parents=[common], help="log-likelihood and BIC per predictor")
    s.add_argument("--family", default="poisson", help="poisson, negbin or binomial")
    s.set_defaults(func=cmd_select)

    i = sub.add_parser("impute", parents=[common], help="fill missing proportion of women")
    i.set_defaults(func=cmd_impute)

    o = sub.add_parser("outlier-bounds", parents=[common], help="outlier rate bounds")
    o.set_defaults(func=cmd_outlier_bounds)

    m = sub.add_parser("simulate", parents=[common], help="Monte Carlo robustness sweep")
    m.add_argument("--replicates", type=int, help="override the number of replicates")
    m.set_defaults(func=cmd_simulate)

    b = sub.add_parser("plot", parents=[common], help="box plots from a replicate CSV")
    b.set_defaults(func=cmd_plot)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = args.func(args)
    except CommandError as exc:
        print(f"truncount {args.command}: {exc.stage} failed: {exc}", file=sys.stderr)
        return exc.code
    if args.json:
        write_json(doc, args.json)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
