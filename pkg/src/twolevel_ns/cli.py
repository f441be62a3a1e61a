"""Command-line experiment runner.

Subcommands::

    run        run the mode named in the config
    study      convergence or singularity study over mesh levels
    compare    one-level Galerkin next to the two-level method
    dump-mesh  write the mesh hierarchy

Exit codes: 0 all rate checks pass, 1 a rate check failed, 2 a solver or
configuration failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import (ConfigError, Coupling, ExperimentConfig, Fixture, Forcing, Mode,
                     parse_config)
from .femspace import MINI, TAYLOR_HOOD, FieldPair, build_space
from .mesh import MeshError, build_hierarchy, write_mesh
from .saddle import SingularSystemError, SolveError
from .stepper import DIVERGENCE_TOL, NewtonError, SolverConfig, TimeGrid, run_one_level
from .twolevel import FineLevelRule, TwoLevelConfig, TwoLevelError, run_comparison, run_two_level
from .verification import (ErrorReport, compute_errors, compute_self_errors,
                           make_nonsmooth_initial_solution, make_smooth_solution,
                           weighted_error_trace, _fmt)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_RATES, EXIT_FAILURE = 0, 1, 2

# expected orders (u_L2, u_H1, p_L2); the band is [order - 0.2, order + 0.3]
EXPECTED_ORDERS = {"MINI": (2.0, 1.0, 1.0), "TAYLOR_HOOD": (3.0, 2.0, 2.0)}
RATIO_BAND = (0.5, 2.0)
WEIGHT_BAND = 2.0

SOLVER_ERRORS = (SingularSystemError, SolveError, NewtonError, TwoLevelError, MeshError,
                 FloatingPointError)


@dataclass
class Check:
    name: str
    value: float
    lo: float | None = None
    hi: float | None = None

    @property
    def passed(self) -> bool:
        if not math.isfinite(self.value):
            return False
        return ((self.lo is None or self.value >= self.lo)
                and (self.hi is None or self.value <= self.hi))

    def line(self) -> str:
        band = f"[{'-inf' if self.lo is None else f'{self.lo:g}'}, " \
               f"{'inf' if self.hi is None else f'{self.hi:g}'}]"
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name} = {self.value:.4g} in {band}"


@dataclass
class Outcome:
    """Everything :func:`run_experiment` writes, kept for callers and tests."""

    config: ExperimentConfig
    checks: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    sections: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK
    error: str | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


# ---------------------------------------------------------------------------
# fixtures and levels

def _pair(config):
    return MINI if config.element == "MINI" else TAYLOR_HOOD


def _data(config):
    """``(exact or None, u0, f)`` for the configured fixture."""
    if config.fixture is Fixture.SMOOTH:
        ex = make_smooth_solution(config.nu)
        return ex, ex.initial, ex.forcing
    forcing = "steady" if config.forcing is Forcing.STEADY else "zero"
    ex = make_nonsmooth_initial_solution(config.nu, config.modes, config.delta, forcing)
    return None, ex.initial, ex.forcing


def _solver(config):
    return SolverConfig(nu=config.nu, newton_tol=config.newton_tol,
                        newton_max_iters=config.newton_max_iters)


def _cell_width(config, level):
    return 1.0 / (config.n_coarse * 2 ** level)


def _grid(config, level):
    return TimeGrid.uniform(config.t_final, config.auto_dt(_cell_width(config, level)))


@dataclass
class _Cell:
    level: int
    dt: float
    n_steps: int
    samples: dict
    max_divergence: float
    newton_iterations: int
    wall_time: float


def _run_cell(config, level, dt):
    """One-level run on hierarchy level ``level`` (executed in a worker)."""
    hier = build_hierarchy(config.n_coarse, level)
    space = build_space(hier.levels[level], _pair(config))
    _, u0, f = _data(config)
    grid = TimeGrid.uniform(config.t_final, dt)
    try:
        traj = run_one_level(u0, f, space, grid, _solver(config), sample_times=config.times)
    except SOLVER_ERRORS as exc:
        raise RuntimeError(f"level {level} (n={config.n_coarse * 2 ** level}): {exc}") from exc
    samples = {t: (fp.velocity_coeffs, fp.pressure_coeffs)
               for t, fp in zip(traj.sample_times, traj.fields)}
    return _Cell(level, grid.dt, grid.n_steps, samples, traj.max_divergence,
                 traj.newton_iterations, traj.wall_time)


def _run_cells(config, jobs_dt):
    jobs = 1 if config.deterministic else config.jobs
    if jobs > 1 and len(jobs_dt) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, config, k, dt) for k, dt in jobs_dt]
            return [fut.result() for fut in futures]
    return [_run_cell(config, k, dt) for k, dt in jobs_dt]


def _field(space, cell, t):
    u, p = cell.samples[t]
    return FieldPair(u, p, space, t)


# ---------------------------------------------------------------------------
# modes

def _divergence_check(name, value):
    return Check(f"max |B u| ({name})", value, None, DIVERGENCE_TOL)


def _rate_checks(config, report, t):
    table = report.eoc_table(t)
    expected = EXPECTED_ORDERS[config.element]
    hs = [report.mesh_sizes[i] for i in report.at_time(t)]
    ns = [round(math.sqrt(2.0) / h) for h in hs]
    checks = []
    for key, order in zip(("u_L2", "u_H1", "p_L2"), expected):
        for i, v in enumerate(table.get(key, [])):
            checks.append(Check(f"EOC {key} t={t:g} n={ns[i]}->{ns[i + 1]}", v,
                                order - 0.2, order + 0.3))
    return checks


def _mesh_lines(hier, levels, dts, steps):
    out = ["level  n     h(max edge)       dt                 steps"]
    for k, dt, n in zip(levels, dts, steps):
        m = hier.levels[k]
        out.append(f"{k:<6d} {round(math.sqrt(2) / m.mesh_size_h):<5d} "
                   f"{m.mesh_size_h:<17.10g} {dt:<18.10g} {n}")
    return out


def _study(config, out: Outcome):
    levels = list(range(config.fine_levels + 1))
    hier = build_hierarchy(config.n_coarse, config.fine_levels)
    if config.fixture is Fixture.SMOOTH:
        dts = [config.auto_dt(_cell_width(config, k)) for k in levels]
    else:
        # self-convergence compares at common time nodes
        dts = [config.auto_dt(_cell_width(config, levels[-1]))] * len(levels)
    cells = _run_cells(config, list(zip(levels, dts)))
    spaces = [build_space(m, _pair(config)) for m in hier.levels]
    out.sections.append(("meshes", _mesh_lines(hier, levels, [c.dt for c in cells],
                                               [c.n_steps for c in cells])))
    for c in cells:
        out.checks.append(_divergence_check(f"level {c.level}", c.max_divergence))

    report = ErrorReport(label="study")
    exact, _, _ = _data(config)
    if exact is not None:
        compared = cells
        for c in compared:
            for t in config.times:
                report.add(t, hier.levels[c.level].mesh_size_h, None,
                           compute_errors(_field(spaces[c.level], c, t), exact, t))
    else:
        ref = cells[-1]
        compared = cells[:-1]
        for c in compared:
            for t in config.times:
                report.add(t, hier.levels[c.level].mesh_size_h, None,
                           compute_self_errors(_field(spaces[c.level], c, t),
                                               _field(spaces[ref.level], ref, t), t))
    out.reports["errors"] = report

    t_last = max(config.times)
    if config.mode is Mode.CONVERGENCE_STUDY and exact is not None and config.check_rates \
            and t_last > 0:
        out.checks.extend(_rate_checks(config, report, t_last))
    if config.mode is Mode.SINGULARITY_STUDY:
        out.sections.append(("singular-weight traces (t^1/2 |u_ref - u_h|)",
                             _trace_lines(config, report)))
        if config.check_rates:
            out.checks.extend(_singularity_checks(config, report))
    lines = []
    for t in config.times:
        for key, orders in report.eoc_table(t).items():
            lines.append(f"t={t:g} {key}: " + ", ".join(f"{o:.4f}" for o in orders))
    out.sections.append(("EOC (log2 of successive error ratios)", lines or ["(none)"]))
    out.tables["eoc_times"] = list(config.times)
    if config.dump_fields:
        for c in cells:
            for t in config.times:
                out.tables.setdefault("fields", []).append(
                    (f"level{c.level}", _field(spaces[c.level], c, t)))


def _trace(report, h):
    idx = [i for i, s in enumerate(report.mesh_sizes) if s == h]
    idx.sort(key=lambda i: report.sample_times[i])
    ts = [report.sample_times[i] for i in idx]
    e = [report.velocity_L2_errors[i] for i in idx]
    return ts, e, list(weighted_error_trace(ts, e, 0.5))


def _trace_lines(config, report):
    lines = []
    for h in sorted(set(report.mesh_sizes), reverse=True):
        ts, e, w = _trace(report, h)
        lines.append(f"h={h:.6g}: " + "; ".join(
            f"t={t:g} e={a:.4e} w={b:.4e}" for t, a, b in zip(ts, e, w)))
    return lines


def _singularity_checks(config, report):
    """Weighted trace bounded toward t -> 0 (each step down in t at most
    doubles it) while the unweighted error at the first time exceeds the
    one at the last time."""
    checks = []
    for h in sorted(set(report.mesh_sizes), reverse=True):
        ts, e, w = _trace(report, h)
        for i in range(len(ts) - 1):
            checks.append(Check(f"h={h:.4g} w(t={ts[i]:g})/w(t={ts[i + 1]:g})",
                                w[i] / w[i + 1], None, WEIGHT_BAND))
        checks.append(Check(f"h={h:.4g} e(t={ts[0]:g})/e(t={ts[-1]:g})",
                            e[0] / e[-1], 1.0, None))
    return checks


def _galerkin(config, out: Outcome):
    hier = build_hierarchy(config.n_coarse, config.fine_levels)
    k = config.fine_levels
    space = build_space(hier.levels[k], _pair(config))
    grid = _grid(config, k)
    exact, u0, f = _data(config)
    times = (0.0,) if config.t_final == 0 else config.times
    traj = run_one_level(u0, f, space, grid, _solver(config), sample_times=times)
    out.sections.append(("meshes", _mesh_lines(hier, [k], [grid.dt], [grid.n_steps])))
    out.checks.append(_divergence_check("galerkin", traj.max_divergence))
    report = ErrorReport(label="galerkin")
    if exact is not None:
        for t, fp in zip(traj.sample_times, traj.fields):
            report.add(t, space.mesh.mesh_size_h, None, compute_errors(fp, exact, t))
    out.reports["errors"] = report
    out.sections.append(("solver", [f"newton iterations: {traj.newton_iterations}",
                                    f"factorizations: {traj.n_factorizations}"]))
    if config.dump_fields:
        out.tables["fields"] = [("galerkin", fp) for fp in traj.fields]


def _two_level_config(config, grid):
    if config.coupling is Coupling.H_SQUARED:
        return TwoLevelConfig(config.n_coarse, grid, FineLevelRule.H_SQUARED,
                              element_pair=_pair(config), solver_config=_solver(config),
                              sample_times=config.times)
    return TwoLevelConfig(config.n_coarse, grid, FineLevelRule.EXPLICIT, config.coupling_level,
                          _pair(config), _solver(config), config.times)


def _fine_level(config, hier):
    return _two_level_config(config, TimeGrid.uniform(1.0, 1.0)).resolve_fine_level(hier)


def _two_level(config, out: Outcome):
    hier = build_hierarchy(config.n_coarse, config.fine_levels)
    k = _fine_level(config, hier)
    grid = _grid(config, k)
    exact, u0, f = _data(config)
    res = run_two_level(u0, f, hier, _two_level_config(config, grid))
    out.sections.append(("meshes", _mesh_lines(hier, [0, k], [grid.dt] * 2, [grid.n_steps] * 2)))
    out.checks.append(_divergence_check("coarse", res.coarse_trajectory.max_divergence))
    out.checks.append(_divergence_check("fine", res.fine_trajectory.max_divergence))
    out.checks.append(Check("fine-level Newton iterations",
                            res.fine_trajectory.newton_iterations, 0, 0))
    report = ErrorReport(label="two_level")
    if exact is not None:
        for t, fp in zip(res.fine_trajectory.sample_times, res.fine_trajectory.fields):
            report.add(t, res.actual_h, res.actual_H, compute_errors(fp, exact, t))
    out.reports["errors"] = report
    out.sections.append(("two-level", [
        f"H = {res.actual_H:.10g}, h = {res.actual_h:.10g} (fine level {k})",
        f"prolongation defect at t_final (L2): {_defect(res):.4e}",
        f"fine factorizations: {res.fine_trajectory.n_factorizations}",
    ] + [f"time {key}: {v:.3f} s" for key, v in res.timings.items()]))
    if config.dump_fields:
        out.tables["fields"] = [("two_level", fp) for fp in res.fine_trajectory.fields]


def _defect(res):
    return res.prolongation_defects[-1] if res.prolongation_defects else 0.0


def _comparison(config, out: Outcome):
    hier = build_hierarchy(config.n_coarse, config.fine_levels)
    k = _fine_level(config, hier)
    grid = _grid(config, k)
    exact, u0, f = _data(config)
    res = run_comparison(u0, f, hier, _two_level_config(config, grid), exact=exact)
    two = res.two_level
    out.sections.append(("meshes", _mesh_lines(hier, [0, k], [grid.dt] * 2, [grid.n_steps] * 2)))
    out.checks.append(_divergence_check("one-level", res.one_level.max_divergence))
    out.checks.append(_divergence_check("two-level fine", two.fine_trajectory.max_divergence))
    out.checks.append(Check("two-level fine-phase Newton iterations",
                            res.fine_newton_iterations, 0, 0))
    one_rep, two_rep = res.one_level_report, res.two_level_report
    out.reports["one_level"] = one_rep
    out.reports["two_level"] = two_rep
    combined = ErrorReport(label="errors")
    for rep in (one_rep, two_rep):
        for row in rep.rows():
            combined.add(row[0], row[1], None if math.isnan(row[2]) else row[2], row[3:6])
    out.reports["errors"] = combined
    ratios = []
    for i, t in enumerate(one_rep.sample_times):
        r = [t] + [b / a if a > 0 else float("nan") for a, b in
                   zip((one_rep.velocity_L2_errors[i], one_rep.velocity_H1_errors[i],
                        one_rep.pressure_L2_errors[i]),
                       (two_rep.velocity_L2_errors[i], two_rep.velocity_H1_errors[i],
                        two_rep.pressure_L2_errors[i]))]
        ratios.append(r)
    out.tables["ratios"] = ratios
    if config.check_rates and ratios and ratios[-1][0] > 0:
        t = ratios[-1][0]
        out.checks.append(Check(f"ratio u_H1 two/one t={t:g}", ratios[-1][2], *RATIO_BAND))
        out.checks.append(Check(f"ratio p_L2 two/one t={t:g}", ratios[-1][3], *RATIO_BAND))
    out.sections.append(("comparison", [
        f"H = {two.actual_H:.10g}, h = {two.actual_h:.10g}",
        f"one-level wall time: {res.one_level.wall_time:.3f} s",
        f"two-level wall time: {sum(two.timings.values()):.3f} s "
        + "(" + ", ".join(f"{key} {v:.3f} s" for key, v in two.timings.items()) + ")",
        f"timing ratio two-level/one-level: {res.timing_ratio:.3f}",
        f"one-level Newton iterations: {res.one_level.newton_iterations}",
    ]))


_MODES = {
    Mode.GALERKIN: _galerkin,
    Mode.TWO_LEVEL: _two_level,
    Mode.CONVERGENCE_STUDY: _study,
    Mode.SINGULARITY_STUDY: _study,
    Mode.COMPARISON: _comparison,
}


# ---------------------------------------------------------------------------
# output

def write_field(fp: FieldPair, path) -> None:
    """Node-value dump: a ``velocity t N`` header and N lines ``x y u v`` (one
    per scalar velocity DOF), then ``pressure t N`` and N lines ``x y p``."""
    space = fp.space
    ns = space.n_scalar
    u = fp.velocity_coeffs
    t = _fmt(fp.time_stamp)
    with open(path, "w") as fh:
        fh.write(f"velocity {t} {ns}\n")
        for i, (x, y) in enumerate(space.nodes):
            fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(u[i])} {_fmt(u[ns + i])}\n")
        verts = space.mesh.vertices
        fh.write(f"pressure {t} {len(verts)}\n")
        for (x, y), p in zip(verts, fp.pressure_coeffs):
            fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(p)}\n")


def _write_fields(outdir: Path, fields):
    d = outdir / "fields"
    d.mkdir(parents=True, exist_ok=True)
    for label, fp in fields:
        write_field(fp, d / f"{label}_t{fp.time_stamp:.6f}.txt")


def _write_outputs(out: Outcome, outdir: Path, elapsed: float):
    outdir.mkdir(parents=True, exist_ok=True)
    eoc_times = out.tables.get("eoc_times", ())
    for name, rep in out.reports.items():
        if rep is not None:
            rep.write_csv(outdir / f"{name}.csv", eoc_times if name == "errors" else ())
    if "ratios" in out.tables:
        with open(outdir / "ratios.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t", "ratio_u_L2", "ratio_u_H1", "ratio_p_L2"])
            for row in out.tables["ratios"]:
                wr.writerow([_fmt(v) for v in row])
    if "fields" in out.tables:
        _write_fields(outdir, out.tables["fields"])
    (outdir / "report.txt").write_text(_report_text(out, elapsed))


def _report_text(out: Outcome, elapsed: float) -> str:
    c = out.config
    status = {EXIT_OK: "PASS", EXIT_RATES: "FAIL (rate checks)",
              EXIT_FAILURE: "ERROR (solver failure)"}[out.exit_code]
    lines = ["twolevel_ns experiment report", f"mode: {c.mode.value}", f"status: {status}", ""]
    lines += ["[config]", c.echo().rstrip(), ""]
    if c.fixture is Fixture.NONSMOOTH:
        lines += ["note: the NONSMOOTH fixture truncates its sine series at "
                  f"{c.modes} modes; it is a finite-mode proxy for H1-only initial "
                  "data, so errors are measured against the finest level", ""]
    for title, body in out.sections:
        lines += [f"[{title}]"] + list(body) + [""]
    rep = out.reports.get("errors")
    if rep is not None and rep.sample_times:
        lines.append("[errors]")
        lines.append(f"{'t':>10} {'h':>12} {'u_L2':>12} {'u_H1':>12} {'p_L2':>12}")
        for row in rep.rows():
            lines.append(f"{row[0]:>10.6g} {row[1]:>12.6g} {row[3]:>12.5e} "
                         f"{row[4]:>12.5e} {row[5]:>12.5e}")
        lines.append("")
    elif c.fixture is Fixture.NONSMOOTH and c.mode in (Mode.GALERKIN, Mode.TWO_LEVEL):
        lines += ["[errors]", "no closed-form solution for this fixture; "
                  "run a study for self-convergence errors", ""]
    if out.error:
        lines += ["[failure]", out.error, ""]
    lines.append("[checks]")
    lines += [chk.line() for chk in out.checks] or ["(none)"]
    lines += ["", f"wall time: {elapsed:.2f} s", ""]
    return "\n".join(lines)


def run_experiment(config: ExperimentConfig, output_dir=None) -> Outcome:
    """Run ``config`` and write its artifacts; the exit code is in the result."""
    outdir = Path(output_dir or config.output_dir)
    out = Outcome(config)
    t0 = time.perf_counter()
    try:
        _MODES[config.mode](config, out)
    except (RuntimeError, ValueError, ArithmeticError) as exc:
        if isinstance(exc, ConfigError):
            raise
        log.error("solver failure: %s", exc)
        out.error = f"{type(exc).__name__}: {exc}"
        out.exit_code = EXIT_FAILURE
    else:
        out.exit_code = EXIT_OK if out.passed else EXIT_RATES
    _write_outputs(out, outdir, time.perf_counter() - t0)
    return out


def dump_meshes(config: ExperimentConfig, output_dir=None) -> list:
    outdir = Path(output_dir or config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    hier = build_hierarchy(config.n_coarse, config.fine_levels)
    paths = []
    for k, m in enumerate(hier.levels):
        p = outdir / f"mesh_level{k}.txt"
        write_mesh(m, p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config entry (repeatable)")
    common.add_argument("--jobs", type=int, metavar="N", help="concurrent study cells")
    common.add_argument("--output", metavar="DIR", help="output directory")
    common.add_argument("--deterministic", action="store_true",
                        help="serial execution for reproducible outputs")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--dump-mesh", action="store_true",
                        help="also write the mesh hierarchy")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="twolevel-ns",
                                description="Two-level Navier-Stokes experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run the configured mode")
    sub.add_parser("study", parents=[common], help="convergence or singularity study")
    sub.add_parser("compare", parents=[common], help="one-level vs two-level comparison")
    sub.add_parser("dump-mesh", parents=[common], help="write the mesh hierarchy")
    return p


def _load(args):
    overrides = list(args.set)
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    if args.output is not None:
        overrides.append(f"output_dir={args.output}")
    if args.deterministic:
        overrides.append("deterministic=true")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    default = {"study": Mode.CONVERGENCE_STUDY, "compare": Mode.COMPARISON,
               "dump-mesh": Mode.GALERKIN}.get(args.command)
    config = parse_config(args.config, overrides, default_mode=default)
    if args.command == "study" and config.mode not in (Mode.CONVERGENCE_STUDY,
                                                       Mode.SINGULARITY_STUDY):
        raise ConfigError("the study subcommand needs CONVERGENCE_STUDY or "
                          "SINGULARITY_STUDY", key="mode")
    if args.command == "compare" and config.mode is not Mode.COMPARISON:
        config = replace(config, mode=Mode.COMPARISON)
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    if args.command == "dump-mesh" or args.dump_mesh:
        for p in dump_meshes(config):
            print(p)
        if args.command == "dump-mesh":
            return EXIT_OK
    out = run_experiment(config)
    outdir = Path(config.output_dir)
    for chk in out.checks:
        print(chk.line())
    if out.error:
        print(f"solver failure: {out.error}", file=sys.stderr)
    print(f"report: {outdir / 'report.txt'}")
    return out.exit_code


if __name__ == "__main__":
    sys.exit(main())
