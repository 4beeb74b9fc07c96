"""Convergence studies, report files and the command-line interface.

A convergence study computes one fine Galerkin reference per configuration
and compares every (scheme, H) trajectory against it on the same fine space.
Reports are written deterministically: rows are ordered by (scheme, -H),
floats use the shortest round-trip decimal form, and wall-clock times are
only emitted on request.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import fem, mms
from .fem import ElementKind
from .linsolve import SingularMatrix
from .mesh import MeshFamily, mesh_stats
from .schemes import (
    FlowSystem,
    GalerkinStepper,
    NLGMStepper,
    PicardDiverged,
    Scheme,
    SchemeConfig,
    StepError,
    advance,
    continue_nlgm,
    initial_state,
    run,
)
from .twogrid import NonConverged, TwoGridHierarchy, probe_complement_poincare, probe_strengthened_cs

log = logging.getLogger(__name__)

CSV_HEADER = ("scheme", "H", "h", "dt", "t_end", "gap_l2", "gap_h1", "err_l2", "err_h1", "rate_l2", "rate_h1", "wall_s")
SCHEME_ORDER = [s.value for s in Scheme]
NUMERICAL_ERRORS = (StepError, PicardDiverged, SingularMatrix, NonConverged, ArithmeticError, np.linalg.LinAlgError)


class InsufficientData(ValueError):
    pass


class NonpositiveValue(ValueError):
    pass


def estimate_rate(pairs: Iterable[tuple[float, float]]) -> float:
    """Least-squares slope of log(error) against log(H).

    >>> round(estimate_rate([(0.25, 1e-2), (0.125, 1.25e-3)]), 12)
    3.0
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise InsufficientData("need at least two (H, error) pairs")
    H = np.array([p[0] for p in pairs], dtype=float)
    e = np.array([p[1] for p in pairs], dtype=float)
    if not (np.all(H > 0) and np.all(e > 0)):
        raise NonpositiveValue("H and errors must be positive")
    x, y = np.log(H), np.log(e)
    dx = x - x.mean()
    sxx = dx @ dx
    if sxx == 0:
        raise InsufficientData("all H values coincide")
    return float(dx @ (y - y.mean()) / sxx)


# ------------------------------------------------------------------ reports


@dataclass
class ReportRow:
    scheme: str
    H: float
    h: float
    dt: float
    t_end: float
    gap_l2: float = math.nan
    gap_h1: float = math.nan
    err_l2: float = math.nan
    err_h1: float = math.nan
    wall_s: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ConvergenceReport:
    rows: list = field(default_factory=list)
    rates: dict = field(default_factory=dict)  # scheme -> (rate_l2, rate_h1)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=_row_key)
        if not self.rates:
            self.rates = fit_rates(self.rows)

    def for_scheme(self, scheme) -> list:
        scheme = Scheme(scheme).value
        return [r for r in self.rows if r.scheme == scheme]

    @property
    def failed(self) -> list:
        return [r for r in self.rows if not r.ok]


def _row_key(r: ReportRow):
    order = SCHEME_ORDER.index(r.scheme) if r.scheme in SCHEME_ORDER else len(SCHEME_ORDER)
    return (order, r.scheme, -r.H)


def fit_rates(rows: Sequence[ReportRow]) -> dict:
    """Gap rates per scheme from the successful rows; absent with fewer than two."""
    rates = {}
    for scheme in dict.fromkeys(r.scheme for r in rows):
        good = [r for r in rows if r.scheme == scheme and r.ok]
        try:
            rates[scheme] = (
                estimate_rate((r.H, r.gap_l2) for r in good),
                estimate_rate((r.H, r.gap_h1) for r in good),
            )
        except (InsufficientData, NonpositiveValue):
            continue
    return rates


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _parse(s: str):
    return None if s == "" else float(s)


def report_to_csv(report: ConvergenceReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in report.rows:
        rl2, rh1 = report.rates.get(r.scheme, (None, None))
        w.writerow([r.scheme] + [_fmt(v) for v in (r.H, r.h, r.dt, r.t_end, r.gap_l2, r.gap_h1,
                                                  r.err_l2, r.err_h1, rl2, rh1, r.wall_s)])
    return buf.getvalue()


def _write_text(text: str, path) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_csv(report: ConvergenceReport, path=None) -> None:
    """CSV with the fixed header; ``path`` None or '-' means stdout."""
    _write_text(report_to_csv(report), path)


def read_csv(path_or_text: str, is_text: bool = False) -> ConvergenceReport:
    text = path_or_text if is_text else open(path_or_text, encoding="utf-8").read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CSV_HEADER:
        raise ValueError("unexpected CSV header")
    rows, rates = [], {}
    for rec in reader:
        vals = [_parse(s) for s in rec[1:]]
        H, h, dt, t_end, gl2, gh1, el2, eh1, rl2, rh1, wall = vals
        failed = math.isnan(gl2)
        rows.append(ReportRow(rec[0], H, h, dt, t_end, gl2, gh1, el2, eh1, wall, "failed" if failed else None))
        if rl2 is not None:
            rates[rec[0]] = (rl2, rh1)
    return ConvergenceReport(rows, rates)


def _json_float(v):
    return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v


def report_to_json(report: ConvergenceReport, config: Optional[dict] = None) -> str:
    doc = {
        "config": config or {},
        "rows": [{k: _json_float(v) for k, v in asdict(r).items()} for r in report.rows],
        "rates": {s: {"rate_l2": a, "rate_h1": b} for s, (a, b) in report.rates.items()},
    }
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(report: ConvergenceReport, path=None, config: Optional[dict] = None) -> None:
    _write_text(report_to_json(report, config), path)


def read_json(text: str) -> ConvergenceReport:
    doc = json.loads(text)
    rows = []
    for d in doc["rows"]:
        d = {k: (math.nan if v is None and k.startswith(("gap", "err_")) else v) for k, v in d.items()}
        rows.append(ReportRow(**d))
    rates = {s: (v["rate_l2"], v["rate_h1"]) for s, v in doc["rates"].items()}
    return ConvergenceReport(rows, rates)


# ------------------------------------------------------------ experiments


@dataclass(frozen=True)
class StudyConfig:
    """Grid of a convergence study; ``base`` carries the time-stepping settings."""

    schemes: tuple = ("nlgm1", "nlgm2", "nlgm-lin")
    coarse_levels: tuple = (2, 3, 4)
    fine_level: int = 6
    problem: str = "mms1"
    element: str = "p1isop2"
    base: SchemeConfig = SchemeConfig()
    timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(Scheme(s).value for s in self.schemes))
        object.__setattr__(self, "coarse_levels", tuple(int(k) for k in self.coarse_levels))
        ElementKind(self.element)
        if not self.coarse_levels:
            raise ValueError("need at least one coarse level")
        if any(k >= self.fine_level for k in self.coarse_levels):
            raise ValueError("fine level must be strictly finer than every coarse level")
        if min(self.coarse_levels) < _min_level(self.element):
            raise ValueError(f"coarse levels must be >= {_min_level(self.element)} for {self.element}")


def _min_level(element) -> int:
    return 1 if ElementKind(element) is ElementKind.P1ISOP2 else 0


class _Reference:
    """Fine Galerkin trajectory, computed once: state at t0 and at t_end."""

    def __init__(self, system: FlowSystem, problem, cfg: SchemeConfig):
        t = time.perf_counter()
        gcfg = replace(cfg, scheme=Scheme.GALERKIN_FINE)
        gal = GalerkinStepper(system, gcfg, problem.forcing)
        first = advance(gal, initial_state(system, problem), gcfg.n0, 0, gcfg)
        self.at_t0 = first.final
        self.at_end = advance(gal, self.at_t0, gcfg.n_steps - gcfg.n0, gcfg.n0, gcfg).final
        self.wall = time.perf_counter() - t


def run_convergence(study: StudyConfig) -> ConvergenceReport:
    """Run every (scheme, coarse level) pair against one fine Galerkin reference.

    Failing rows are recorded with their error message and NaN values; the
    other rows still run.
    """
    cfg = study.base
    kind = ElementKind(study.element)
    family = MeshFamily()
    problem = mms.get_problem(study.problem, cfg.nu)
    fine = FlowSystem.build(family, study.fine_level, kind)
    h = float(fine.V.mesh.spacing)
    log.info("fine reference: level %d, %d velocity dofs", study.fine_level, fine.n)
    ref = _Reference(fine, problem, cfg)
    err_ref = mms.evaluate_errors(fine.V, ref.at_end, problem, cfg.t_end)

    rows = []
    for scheme in study.schemes:
        # the fine reference does not depend on H: one row
        levels = study.coarse_levels[:1] if scheme == Scheme.GALERKIN_FINE.value else study.coarse_levels
        for level in levels:
            t = time.perf_counter()
            H = h if scheme == Scheme.GALERKIN_FINE.value else float(family[level].spacing)
            row = ReportRow(scheme, H, h, cfg.dt, cfg.t_end)
            try:
                row = _run_row(Scheme(scheme), level, family, kind, fine, ref, err_ref, problem, cfg, row)
            except NUMERICAL_ERRORS as exc:
                log.warning("%s at coarse level %d failed: %s", scheme, level, exc)
                row.error = f"{type(exc).__name__}: {exc}"
            wall = time.perf_counter() - t
            if scheme == Scheme.GALERKIN_FINE.value:
                wall += ref.wall
            row.wall_s = wall if study.timing else None
            log.info("%s H=%g gap=(%.3e, %.3e) %.1fs", scheme, row.H, row.gap_l2, row.gap_h1, wall)
            rows.append(row)
    return ConvergenceReport(rows)


def _run_row(scheme, level, family, kind, fine, ref, err_ref, problem, cfg, row):
    if scheme is Scheme.GALERKIN_FINE:
        row.gap_l2 = row.gap_h1 = 0.0
        row.err_l2, row.err_h1 = err_ref
        return row
    if scheme is Scheme.GALERKIN_COARSE:
        coarse = FlowSystem.build(family, level, kind)
        end = run(replace(cfg, scheme=scheme), problem, coarse).final
        row.err_l2, row.err_h1 = mms.evaluate_errors(coarse.V, end, problem, cfg.t_end)
        hier = TwoGridHierarchy(coarse.V, fine.V, fine.M, fine.A)
        e = ref.at_end.u - hier.P_full @ end.u
        row.gap_l2 = float(np.sqrt(max(e @ (fine.M_full @ e), 0.0)))
        row.gap_h1 = float(np.sqrt(max(e @ (fine.A_full @ e), 0.0)))
        return row
    coarse_V = fem.build_velocity_space(family, level, kind)
    hier = TwoGridHierarchy(coarse_V, fine.V, fine.M, fine.A)
    scfg = replace(cfg, scheme=scheme)
    stepper = NLGMStepper(fine, hier, scfg, problem.forcing)
    end = continue_nlgm(stepper, ref.at_t0, scfg).final
    row.gap_l2, row.gap_h1 = mms.scheme_gap(fine.V, ref.at_end, end, fine.M_full, fine.A_full)
    row.err_l2, row.err_h1 = mms.evaluate_errors(fine.V, end, problem, cfg.t_end)
    return row


def probe(coarse_level: int, fine_level: int, element: str = "p1isop2") -> dict:
    kind = ElementKind(element)
    if coarse_level > fine_level:
        raise ValueError("coarse level must not exceed the fine level")
    family = MeshFamily()
    hier = TwoGridHierarchy(fem.build_velocity_space(family, coarse_level, kind),
                            fem.build_velocity_space(family, fine_level, kind))
    c = probe_complement_poincare(hier)
    omr = probe_strengthened_cs(hier)
    return {"H": hier.H, "h": hier.h, "c_poincare": c, "c_over_H": c / hier.H,
            "one_minus_rho": omr, "rho": 1.0 - omr}


# --------------------------------------------------------------------- CLI

STEP_COLUMNS = ("step", "t", "energy", "grad_norm", "z_norm", "y_norm", "div_residual",
                "complement_residual", "picard_iters")

# config-file key -> (argparse dest, type)
CONFIG_KEYS = {
    "level": int, "scheme": str, "schemes": str, "coarse_level": int, "coarse_levels": str,
    "fine_level": int, "nu": float, "dt": float, "t0": float, "t_end": float, "problem": str,
    "element": str, "time_rule": str, "picard_tol": float, "picard_max": int, "handoff": str,
    "out": str, "format": str, "timing": bool,
}
DEFAULTS = {
    "level": 3, "scheme": "nlgm1", "schemes": "nlgm1,nlgm2,nlgm-lin", "coarse_level": 3,
    "coarse_levels": "2,3,4", "fine_level": 6, "nu": 1.0, "dt": 1.0 / 512, "t0": 1.0 / 16,
    "t_end": 0.25, "problem": "mms1", "element": "p1isop2", "time_rule": "be", "picard_tol": 1e-10,
    "picard_max": 50, "handoff": "static", "out": None, "format": "csv", "timing": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser, names: Sequence[str]):
    S = argparse.SUPPRESS
    spec = {
        "level": lambda: p.add_argument("--level", type=int, default=S, help="mesh level (spacing 2^-level)"),
        "scheme": lambda: p.add_argument("--scheme", choices=SCHEME_ORDER, default=S),
        "schemes": lambda: p.add_argument("--schemes", default=S, help="comma-separated scheme names"),
        "coarse_level": lambda: p.add_argument("--coarse-level", type=int, default=S),
        "coarse_levels": lambda: p.add_argument("--coarse-levels", default=S, help="comma-separated levels"),
        "fine_level": lambda: p.add_argument("--fine-level", type=int, default=S),
        "nu": lambda: p.add_argument("--nu", type=float, default=S),
        "dt": lambda: p.add_argument("--dt", type=float, default=S),
        "t0": lambda: p.add_argument("--t0", type=float, default=S),
        "t_end": lambda: p.add_argument("--t-end", type=float, default=S),
        "problem": lambda: p.add_argument("--problem", choices=sorted(mms.PROBLEMS), default=S),
        "element": lambda: p.add_argument("--element", choices=[k.value for k in ElementKind], default=S),
        "time_rule": lambda: p.add_argument("--time-rule", choices=["be", "cn"], default=S),
        "picard_tol": lambda: p.add_argument("--picard-tol", type=float, default=S),
        "picard_max": lambda: p.add_argument("--picard-max", type=int, default=S),
        "handoff": lambda: p.add_argument("--handoff", choices=["static", "projection"], default=S),
        "format": lambda: p.add_argument("--format", choices=["csv", "json"], default=S),
        "timing": lambda: p.add_argument("--timing", action="store_true", default=S,
                                         help="fill the wall_s column (output is then not reproducible)"),
    }
    for n in names:
        spec[n]()
    p.add_argument("--out", default=argparse.SUPPRESS, help="output file (default stdout)")
    p.add_argument("--config", default=None, help="JSON file whose keys mirror the flags")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nlgfem", description="Two-grid nonlinear Galerkin Navier-Stokes experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    time_flags = ["nu", "dt", "t0", "t_end", "problem", "element", "time_rule", "picard_tol", "picard_max", "handoff"]
    _add_common(sub.add_parser("mesh-info", help="mesh statistics as JSON"), ["level"])
    _add_common(sub.add_parser("probe", help="splitting-inequality probes as JSON"),
                ["coarse_level", "fine_level", "element"])
    _add_common(sub.add_parser("run", help="one trajectory; per-step diagnostics"),
                ["scheme", "coarse_level", "fine_level", "format"] + time_flags)
    _add_common(sub.add_parser("convergence", help="gap-rate study over schemes and coarse levels"),
                ["schemes", "coarse_levels", "fine_level", "format", "timing"] + time_flags)
    return parser


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    out = {}
    for k, v in doc.items():
        key = k.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown config key {k!r}")
        if key in ("schemes", "coarse_levels") and isinstance(v, list):
            v = ",".join(str(x) for x in v)
        out[key] = v
    return out


def _options(ns: argparse.Namespace) -> dict:
    opts = dict(DEFAULTS)
    if ns.config:
        opts.update(_load_config(ns.config))
    opts.update({k: v for k, v in vars(ns).items() if k in CONFIG_KEYS})
    for k, typ in CONFIG_KEYS.items():
        if opts[k] is not None:
            try:
                opts[k] = typ(opts[k]) if typ is not bool else bool(opts[k])
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {k}: {opts[k]!r}") from exc
    return opts


def _scheme_config(o: dict, scheme) -> SchemeConfig:
    try:
        return SchemeConfig(nu=o["nu"], dt=o["dt"], t0=o["t0"], t_end=o["t_end"], scheme=scheme,
                            time_rule=o["time_rule"], picard_tol=o["picard_tol"], picard_max=o["picard_max"],
                            handoff=o["handoff"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _split_list(s: str, typ):
    try:
        return tuple(typ(x.strip()) for x in s.split(",") if x.strip())
    except ValueError as exc:
        raise UsageError(f"bad list {s!r}: {exc}") from exc


def _cmd_mesh_info(o):
    if o["level"] < 0:
        raise UsageError("level must be >= 0")
    st = mesh_stats(MeshFamily()[o["level"]])
    keys = ("level", "h_max", "n_vertices", "n_triangles")
    _write_text(json.dumps({k: st[k] for k in keys}) + "\n", o["out"])


def _cmd_probe(o):
    if not _min_level(o["element"]) <= o["coarse_level"] <= o["fine_level"]:
        raise UsageError("need a valid coarse level not exceeding the fine level")
    _write_text(json.dumps(probe(o["coarse_level"], o["fine_level"], o["element"])) + "\n", o["out"])


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _cmd_run(o):
    cfg = _scheme_config(o, o["scheme"])
    kind = ElementKind(o["element"])
    fam = MeshFamily()
    problem = mms.get_problem(o["problem"], cfg.nu)
    level = o["coarse_level"] if cfg.scheme is Scheme.GALERKIN_COARSE else o["fine_level"]
    if level < _min_level(kind):
        raise UsageError(f"level must be >= {_min_level(kind)} for {kind.value}")
    system = FlowSystem.build(fam, level, kind)
    hier = None
    if cfg.scheme.is_nlgm:
        if not _min_level(kind) <= o["coarse_level"] < o["fine_level"]:
            raise UsageError("coarse level must be valid and below the fine level")
        hier = TwoGridHierarchy(fem.build_velocity_space(fam, o["coarse_level"], kind), system.V, system.M, system.A)
    traj = run(cfg, problem, system, hier)
    final = traj.final
    summary = {"scheme": cfg.scheme.value, "t": final.t, "h": system.V.mesh.spacing,
               "H": hier.H if hier is not None else system.V.mesh.spacing, "n_steps": len(traj.diagnostics)}
    if problem.name != "decay1":
        summary["err_l2"], summary["err_h1"] = mms.evaluate_errors(system.V, final, problem, final.t)
    if o["format"] == "json":
        text = json.dumps({"summary": summary, "steps": traj.diagnostics}, indent=2, sort_keys=True) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        for d in traj.diagnostics:
            w.writerow([_csv_cell(d.get(c)) for c in STEP_COLUMNS])
        text = buf.getvalue()
    _write_text(text, o["out"])
    print(json.dumps(summary), file=sys.stderr)


def _cmd_convergence(o):
    cfg = _scheme_config(o, Scheme.NLGM1)
    try:
        study = StudyConfig(schemes=_split_list(o["schemes"], Scheme), coarse_levels=_split_list(o["coarse_levels"], int),
                            fine_level=o["fine_level"], problem=o["problem"], element=o["element"], base=cfg,
                            timing=o["timing"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = run_convergence(study)
    if o["format"] == "json":
        write_json(report, o["out"], config=_study_dict(study))
    else:
        write_csv(report, o["out"])
    if report.failed:
        for r in report.failed:
            print(f"failed: {r.scheme} H={r.H!r}: {r.error}", file=sys.stderr)
        return 2
    return 0


def _study_dict(study: StudyConfig) -> dict:
    b = study.base
    return {"schemes": list(study.schemes), "coarse_levels": list(study.coarse_levels),
            "fine_level": study.fine_level, "problem": study.problem, "element": study.element,
            "nu": b.nu, "dt": b.dt, "t0": b.t0, "t_end": b.t_end, "time_rule": b.time_rule.value,
            "picard_tol": b.picard_tol, "picard_max": b.picard_max, "handoff": b.handoff}


COMMANDS = {"mesh-info": _cmd_mesh_info, "probe": _cmd_probe, "run": _cmd_run, "convergence": _cmd_convergence}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns 0 on success, 1 on usage errors, 2 on numerical failure."""
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        return COMMANDS[ns.command](_options(ns)) or 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(exc, file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
