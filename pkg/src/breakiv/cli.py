"""Command-line interface: ``breakiv <command> [options]``.

Commands: ``estimate``, ``breaktest``, ``commontest``, ``pipeline``, ``mc``
and ``critvals``. Reports go to stdout in the ``--format`` of choice
(Markdown by default); with ``--output-dir`` the CSV, JSON and Markdown
renderings are also written there. Exit status is 2 for invalid input and
3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .changepoint import common_change_wald, estimate_break_2sls, sup_wald_scan
from .covariance import AUTO, HacConfig, Kernel
from .critvals import DEFAULT_LEVELS, hardcoded_table, simulate_sup_wald_critvals
from .data import Dataset, default_names, load_csv
from .errors import BreakIVError, ValidationError
from .estimators import Kind, confidence_interval, efficiency_gap, estimate
from .montecarlo import (ErrScheme, McConfig, Scenario, detection_csv, detection_experiment,
                         detection_markdown, run_mc, table_preset)
from .pipeline import PipelineConfig, run_four_stage

FORMATS = ("md", "csv", "json")


@dataclass
class Output:
    """One command's result in every rendering."""

    name: str
    markdown: str
    tables: dict[str, str] = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return json.dumps(self.data, indent=2, default=_json_default) + "\n"
        if fmt == "csv":
            return "".join(self.tables.values())
        return self.markdown

    def write(self, folder: Path) -> None:
        folder.mkdir(parents=True, exist_ok=True)
        for stem, text in self.tables.items():
            (folder / f"{stem}.csv").write_text(text, encoding="utf-8")
        (folder / f"{self.name}.json").write_text(self.render("json"), encoding="utf-8")
        (folder / f"{self.name}.md").write_text(self.markdown, encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _md_table(header: list[str], rows: list[list]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|---" * len(header) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(_cell(v) for v in r) + " |")
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _bandwidth(text: str) -> int | str:
    if text == AUTO:
        return AUTO
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bandwidth must be an integer or 'auto', got {text!r}")


def _hac(args) -> HacConfig:
    return HacConfig(kernel=args.hac, bandwidth=args.bw)


def _load(args) -> Dataset:
    path = Path(args.data)
    if not path.is_file():
        raise ValidationError(f"data file {path} not found")
    return load_csv(path, args.schema, add_intercept=args.add_intercept)


def _sim(args) -> dict:
    return {"n_paths": args.paths, "grid_size": args.grid, "seed": args.seed, "n_jobs": args.threads}


# estimate -------------------------------------------------------------------

def _coef_names(data: Dataset) -> list[str]:
    n = default_names(data)
    return [*n["z1"], *n["x"]]


def _resolve_break(args, data: Dataset) -> int:
    if args.scan:
        return estimate_break_2sls(data, args.trim).break_idx
    return args.break_idx


def cmd_estimate(args) -> Output:
    data = _load(args)
    k = _resolve_break(args, data)
    cfg = _hac(args)
    kinds = list(Kind) if args.estimator == "all" else [Kind(args.estimator)]
    results = {kind: estimate(kind, data, k, cfg) for kind in kinds}
    names = _coef_names(data)
    rows = []
    for kind, res in results.items():
        ci = confidence_interval(res)
        for i, (t, s) in enumerate(zip(res.theta, res.std_errors)):
            regime, coef = divmod(i, data.p)
            rows.append([kind.value, regime + 1, names[coef], float(t), float(s),
                         float(ci[i, 0]), float(ci[i, 1])])
    header = ["estimator", "regime", "coefficient", "estimate", "std_error", "ci95_lo", "ci95_hi"]
    md = [f"Break after row {k} of {data.T}", ""]
    for kind in kinds:
        md.append(f"### {kind.value}")
        md.append(_md_table(header[1:], [r[1:] for r in rows if r[0] == kind.value]))
    tables = {"estimates": _csv([header, *rows])}
    gaps = {}
    if args.estimator == "all":
        gmm = results[Kind.SPLIT_GMM]
        for kind in (Kind.TS2SLS, Kind.TSGMM):
            gaps[f"gmm_minus_{kind.value}"] = efficiency_gap(gmm, results[kind]).tolist()
        md.append("### eigenvalues of the variance differences")
        md.append(_md_table(["difference", "min", "max", "all"],
                            [[d, min(e), max(e), " ".join(f"{x:.3g}" for x in e)]
                             for d, e in gaps.items()]))
        tables["efficiency"] = _csv([["difference", "eigenvalues"],
                                     *[[d, " ".join(repr(x) for x in e)] for d, e in gaps.items()]])
    data_out = {"break": k, "T": data.T, "coefficients": names, "hac": cfg.to_dict(),
                "estimates": {kind.value: res.to_dict() for kind, res in results.items()},
                "efficiency_eigenvalues": gaps}
    return Output("estimate", "\n".join(md), tables, data_out)


# breaktest / commontest -----------------------------------------------------

def _levels(args) -> tuple[float, ...]:
    return tuple(args.levels)


def cmd_breaktest(args) -> Output:
    data = _load(args)
    scan = sup_wald_scan(data, args.trim, _hac(args))
    levels = _levels(args)
    hard = hardcoded_table(data.p, args.trim)
    if hard is not None and all(hard.has(lv) for lv in levels):
        cvs = {lv: hard.value(lv) for lv in levels}
        source = hard.source
    else:
        table = simulate_sup_wald_critvals(data.p, args.trim, levels=levels, **_sim(args))
        cvs = {lv: table.value(lv) for lv in levels}
        source = table.source
    k = estimate_break_2sls(data, args.trim).break_idx
    rows = [[lv, cvs[lv], bool(scan.sup_stat > cvs[lv])] for lv in levels]
    md = (f"sup-Wald statistic {scan.sup_stat:.4f} (maximized at {scan.argmax_idx}); "
          f"least-squares break estimate {k}\n\n"
          + _md_table(["level", "critical_value", "reject"], rows))
    tables = {
        "breaktest": _csv([["statistic", "argmax", "break_estimate", "level", "critical_value",
                            "reject"], *[[scan.sup_stat, scan.argmax_idx, k, *r] for r in rows]]),
        "wald_profile": _csv([["candidate", "wald"],
                              *zip(scan.candidates.tolist(), scan.wald_values.tolist())]),
    }
    out = {"statistic": scan.sup_stat, "argmax": scan.argmax_idx, "estimated_break": k,
           "critical_values": {str(lv): cvs[lv] for lv in levels},
           "reject": {str(lv): r[2] for lv, r in zip(levels, rows)},
           "critical_value_source": source, "skipped_candidates": list(scan.skipped)}
    return Output("breaktest", md, tables, out)


def cmd_commontest(args) -> Output:
    data = _load(args)
    if args.break_idx is None:
        raise ValidationError("commontest needs --break (the first-stage break)")
    rep = common_change_wald(data, args.break_idx, _hac(args), levels=_levels(args))
    rows = [[lv, rep.critical_values[lv], rep.decision_at[lv]] for lv in rep.critical_values]
    md = (f"common-change Wald statistic {rep.statistic:.4f} at break {rep.estimated_break}, "
          f"{rep.reference} p-value {rep.p_value:.4g}\n\n"
          + _md_table(["level", "critical_value", "reject"], rows))
    table = _csv([["statistic", "break", "p_value", "level", "critical_value", "reject"],
                  *[[rep.statistic, rep.estimated_break, rep.p_value, *r] for r in rows]])
    return Output("commontest", md, {"commontest": table}, rep.to_dict())


# pipeline -------------------------------------------------------------------

def cmd_pipeline(args) -> Output:
    data = _load(args)
    cfg = PipelineConfig(trimming=args.trim, rf_trimming=args.rf_trim, level=args.level,
                         max_breaks=args.max_breaks, hac=_hac(args), bonferroni=args.bonferroni,
                         rf_critvals=args.rf_critvals, n_paths=args.paths, grid_size=args.grid,
                         seed=args.seed, n_jobs=args.threads)
    rep = run_four_stage(data, cfg)
    names = _coef_names(data)
    rows = []
    for f in rep.final_estimates:
        for i, (t, s) in enumerate(zip(f.result.theta, f.result.std_errors)):
            regime, coef = divmod(i, data.p)
            rows.append([f.segment[0], f.segment[1], f.estimator, "" if f.break_idx is None
                         else f.break_idx, regime + 1, names[coef], float(t), float(s)])
    header = ["seg_start", "seg_stop", "estimator", "break", "regime", "coefficient",
              "estimate", "std_error"]
    breaks = _csv([["stage", "break"],
                   *[["first_stage", b] for b in rep.first_stage_breaks],
                   *[["structural", b] for b in rep.second_stage_breaks],
                   *[["common", b] for b in rep.common_breaks]])
    md = rep.summary() + "\n"
    return Output("pipeline", md, {"pipeline_breaks": breaks, "pipeline_estimates": _csv([header, *rows])},
                  json.loads(rep.to_json()))


# mc -------------------------------------------------------------------------

def _mc_configs(args) -> list[McConfig]:
    if args.table is not None:
        return table_preset(args.table, n_reps=args.reps, seed=args.seed, n_jobs=args.threads)
    lam = None if args.no_break else args.lambda0
    scenario = Scenario.NO_BREAK_ESTIMATED if args.no_break else Scenario(args.scenario)
    return [McConfig(T=args.T, n_iv=args.n_iv, rho=args.rho, lambda0=lam,
                     change_size=args.change_size, err_scheme=ErrScheme(args.scheme),
                     n_reps=args.reps, seed=args.seed, scenario=scenario, trimming=args.trim,
                     hac=_hac(args), n_jobs=args.threads)]


def cmd_mc(args) -> Output:
    cfgs = _mc_configs(args)
    md, tables, cells = [], {}, []
    for i, cfg in enumerate(cfgs):
        if args.table == 8:
            rows = detection_experiment(cfg)
            md.append(detection_markdown(cfg, rows))
            tables[f"mc_cell{i + 1}"] = detection_csv(cfg, rows)
            cells.append({"config": cfg.to_dict(),
                          "rows": [r.__dict__ for r in rows]})
        else:
            rep = run_mc(cfg)
            md.append(rep.to_markdown())
            tables[f"mc_cell{i + 1}"] = rep.to_csv()
            cells.append(rep.to_dict())
    title = f"Table {args.table}\n\n" if args.table is not None else ""
    return Output("mc", title + "\n".join(md), tables, {"table": args.table, "cells": cells})


# critvals -------------------------------------------------------------------

def cmd_critvals(args) -> Output:
    table = simulate_sup_wald_critvals(args.p, args.trim, levels=_levels(args), **_sim(args))
    levels = sorted(table.values, reverse=True)
    rows = [[lv, table.value(lv)] for lv in levels]
    hard = hardcoded_table(args.p, args.trim)
    if hard is not None:
        rows = [r + [hard.value(r[0]) if hard.has(r[0]) else ""] for r in rows]
    header = ["level", "simulated"] + (["published"] if hard is not None else [])
    src = table.source
    head = (f"p={args.p}, trimming={args.trim}, paths={src['n_paths']}, "
             f"grid={src['grid_size']}, seed={src['seed']}\n\n")
    md = head + _md_table(header, rows)
    return Output("critvals", md, {"critvals": _csv([header, *rows])}, table.to_dict())


COMMANDS = {
    "estimate": cmd_estimate,
    "breaktest": cmd_breaktest,
    "commontest": cmd_commontest,
    "pipeline": cmd_pipeline,
    "mc": cmd_mc,
    "critvals": cmd_critvals,
}


# argument parsing -----------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("output and execution")
    g.add_argument("--format", choices=FORMATS, default="md", help="stdout format")
    g.add_argument("--output-dir", default=None, help="also write CSV/JSON/Markdown files here")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="parallel workers; results do not depend on it")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", default=None, help="JSON file whose keys override flags")


def _data_opts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", required=True, help="CSV file")
    g.add_argument("--schema", default=None, help="JSON column-role map (default: sidecar or headers)")
    g.add_argument("--add-intercept", action="store_true", help="prepend a ones column to Z1")


def _hac_opts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("long-run variance")
    g.add_argument("--hac", choices=[k.value for k in Kernel], default=Kernel.TRUNCATED.value)
    g.add_argument("--bw", type=_bandwidth, default=0, help="lags or 'auto'")


def _sim_opts(p: argparse.ArgumentParser, paths: int = 20_000) -> None:
    g = p.add_argument_group("critical-value simulation")
    g.add_argument("--paths", type=int, default=paths)
    g.add_argument("--grid", type=int, default=1000)


def _level_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--levels", type=float, nargs="+", default=list(DEFAULT_LEVELS))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="breakiv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="coefficients and standard errors at a break")
    _data_opts(p)
    p.add_argument("--break", dest="break_idx", type=int, default=None,
                   help="last row of the first regime (1-based)")
    p.add_argument("--scan", action="store_true", help="estimate the break by least squares")
    p.add_argument("--estimator", choices=[*(k.value for k in Kind), "all"], default="tsgmm")
    p.add_argument("--trim", type=float, default=0.15)
    _hac_opts(p)
    _common(p)

    p = sub.add_parser("breaktest", help="sup-Wald test for a structural break")
    _data_opts(p)
    p.add_argument("--trim", type=float, default=0.15)
    _level_opts(p)
    _hac_opts(p)
    _sim_opts(p)
    _common(p)

    p = sub.add_parser("commontest", help="Wald test for a change at a first-stage break")
    _data_opts(p)
    p.add_argument("--break", dest="break_idx", type=int, default=None)
    _level_opts(p)
    _hac_opts(p)
    _common(p)

    p = sub.add_parser("pipeline", help="four-stage detection and estimation")
    _data_opts(p)
    p.add_argument("--trim", type=float, default=0.15)
    p.add_argument("--rf-trim", type=float, default=0.2)
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--max-breaks", type=int, default=2)
    p.add_argument("--bonferroni", action="store_true")
    p.add_argument("--rf-critvals", choices=("simulated", "published"), default="simulated")
    _hac_opts(p)
    _sim_opts(p)
    _common(p)

    p = sub.add_parser("mc", help="Monte Carlo experiments")
    p.add_argument("--table", type=int, default=None, help="preset for simulation table 1-9")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--T", type=int, default=400)
    p.add_argument("--n-iv", type=int, default=1)
    p.add_argument("--rho", type=float, default=-0.5)
    p.add_argument("--lambda0", type=float, default=0.4)
    p.add_argument("--no-break", action="store_true")
    p.add_argument("--change-size", type=float, default=1.0)
    p.add_argument("--scheme", choices=[e.value for e in ErrScheme], default="HOM")
    p.add_argument("--scenario", choices=[s.value for s in Scenario], default="KnownBreak")
    p.add_argument("--trim", type=float, default=0.15)
    _hac_opts(p)
    _common(p)

    p = sub.add_parser("critvals", help="simulated sup-Wald critical values")
    p.add_argument("--p", type=int, required=True, help="number of tested coefficients")
    p.add_argument("--trim", type=float, default=0.15)
    _level_opts(p)
    _sim_opts(p, paths=100_000)
    _common(p)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _convert(key: str, kind, value):
    if isinstance(value, str):
        try:
            return kind(value)
        except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
            raise ValidationError(f"config key {key!r}: {exc}") from None
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ValidationError(f"config key {key!r} must be an integer, got {value!r}")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ValidationError(f"config key {key!r} must be a number, got {value!r}")
    return float(value) if kind is float else value


def apply_config(args: argparse.Namespace, sub: argparse.ArgumentParser, path: str) -> None:
    """Override ``args`` with the keys of a JSON object, validated first."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    aliases = {"break": "break_idx"}
    updates = {}
    for key, value in doc.items():
        dest = aliases.get(key, key.replace("-", "_"))
        action = actions.get(dest)
        if action is None:
            raise ValidationError(f"unknown config key {key!r}")
        if action.type is not None and value is not None:
            items = value if isinstance(value, list) and action.nargs else [value]
            value = [_convert(key, action.type, v) for v in items]
            value = value if isinstance(doc[key], list) and action.nargs else value[0]
        if action.choices is not None and value not in action.choices:
            raise ValidationError(f"config key {key!r} must be one of {list(action.choices)}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)) \
                and not isinstance(value, bool):
            raise ValidationError(f"config key {key!r} must be true or false")
        updates[dest] = value
    for dest, value in updates.items():
        setattr(args, dest, value)


def _check(args) -> None:
    if args.command == "estimate" and args.break_idx is None and not args.scan:
        raise ValidationError("estimate needs --break or --scan")
    if getattr(args, "threads", 1) < 1:
        raise ValidationError("--threads must be positive")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config:
            apply_config(args, _subparser(parser, args.command), args.config)
        _check(args)
        out = COMMANDS[args.command](args)
        sys.stdout.write(out.render(args.format))
        if args.output_dir:
            out.write(Path(args.output_dir))
    except ValidationError as exc:
        print(f"breakiv {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except BreakIVError as exc:
        print(f"breakiv {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
