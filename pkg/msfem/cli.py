import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional

import typer

from . import __version__
from .cell import cell_summary, save_cell_solution, solve_cell_problems
from .coefficients import parse_coefficient
from .config import (
    StudyConfig,
    apply_defaults,
    config_from_dict,
    load_config_file,
    parse_rational,
    problem_spec,
    resolution,
    try_load_default,
    validate,
)
from .doctor import diagnose_environment
from .errors import ConfigError, MeshError, NumericalError
from .expansion import NormContext, analytic_field, error_norms
from .problems import normalize_backend, solve_problem
from .reports import emit_reports, read_rows_csv, summarize
from .study import fit_groups, lemma_triangle_experiment, run_sweep

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"

app = typer.Typer(
    help=(
        "msfem: multiscale finite element studies for elliptic problems with periodic oscillating coefficients. "
        "Solves cell problems, runs fine/homogenized/MsFEM backends, sweeps (epsilon, h) grids, "
        "fits convergence rates and writes CSV/JSON/SVG reports."
    )
)


@app.callback()
def _configure(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log progress to stderr"),
    debug: bool = typer.Option(False, "--debug", help="Log solver details to stderr"),
) -> None:
    level = logging.DEBUG if debug else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(stream=sys.stderr, level=level, format=LOG_FORMAT, force=True)


def _guarded(fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except (ConfigError, MeshError) as exc:
        typer.echo(f"Error: {exc}", err=True)
        raise typer.Exit(code=1)
    except NumericalError as exc:
        typer.echo(f"Numerical failure: {exc}", err=True)
        raise typer.Exit(code=2)


def _write_json(payload: Dict[str, Any], out: Optional[str]) -> None:
    text = json.dumps(payload, ensure_ascii=False, indent=2) + "\n"
    if not out:
        sys.stdout.write(text)
        return
    try:
        os.makedirs(os.path.dirname(os.path.abspath(out)) or ".", exist_ok=True)
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {out}: {exc}") from exc
    typer.echo(out)


def _rationals(text: str) -> List[float]:
    values = [parse_rational(t) for t in text.replace(";", ",").split(",") if t.strip()]
    if not values:
        raise ConfigError("expected a comma-separated list such as 1/16,1/32")
    return values


@app.command()
def version() -> None:
    """Show version."""
    typer.echo(__version__)


@app.command()
def doctor(verbose: bool = typer.Option(False, "--verbose", help="Show more detail")) -> None:
    """Report the numerical stack this installation runs on."""
    res = diagnose_environment()
    if verbose:
        sys.stdout.write(json.dumps(res, ensure_ascii=False, indent=2) + "\n")
        return
    for key, info in res.items():
        status = info.get("present")
        typer.echo(f"{key}: {'OK' if status == 'True' else 'MISSING'} {info.get('version', '')}".rstrip())


@app.command()
def cell(
    coef: str = typer.Option("layered:2,1.8", "--coef", help="identity | layered:p,q[,axis] | separable:p,q | grid:<path>"),
    n: int = typer.Option(64, "--n", help="Cells per side of the periodic cell mesh"),
    quad_order: int = typer.Option(2, "--quad-order"),
    out: Optional[str] = typer.Option(None, "--out", help="Write the cell solution JSON here"),
) -> None:
    """Solve the two periodic cell problems and print the homogenized tensor."""

    def run() -> None:
        field = parse_coefficient(coef)
        solution = solve_cell_problems(field, n, quad_order)
        summary = cell_summary(solution, field)
        if out:
            summary["path"] = save_cell_solution(solution, out)
        sys.stdout.write(json.dumps(summary, ensure_ascii=False, indent=2) + "\n")

    _guarded(run)


@app.command()
def solve(
    problem: str = typer.Option("mixed", "--problem", help="mixed | robin | hemivariational"),
    eps: str = typer.Option("1/32", "--eps", help="Period epsilon, e.g. 1/32"),
    coarse: int = typer.Option(8, "--coarse", help="Coarse cells per side"),
    fine_ratio: Optional[str] = typer.Option(
        None, "--fine-ratio", help="Fine mesh size as a fraction of epsilon (default: config value, else 1/16)"
    ),
    backend: str = typer.Option("msfem", "--backend", help="fine | homog | msfem"),
    coef: Optional[str] = typer.Option(None, "--coef", help="Coefficient id; overrides the config file"),
    config_file: Optional[str] = typer.Option(None, "--config", help="Study config supplying the problem data"),
    compare: bool = typer.Option(False, "--compare", help="Also solve the fine reference and report error norms"),
    out: Optional[str] = typer.Option(None, "--out", help="Write the JSON summary here instead of stdout"),
) -> None:
    """Solve one boundary problem with one backend."""

    def run() -> None:
        cfg = load_config_file(config_file) if config_file else StudyConfig(problem=problem)
        if not config_file:
            cfg.problem = problem
        if fine_ratio is not None:
            cfg.fine_ratio = fine_ratio
        if coef:
            cfg.coefficient = coef
        cfg = validate(apply_defaults(cfg))
        epsilon = parse_rational(eps)
        spec = problem_spec(cfg, epsilon)
        name = normalize_backend(backend)
        cell_solution = None
        if name == "homogenized":
            cell_solution = solve_cell_problems(spec.coefficient, cfg.cell_resolution, cfg.quad_order)
        res = resolution(cfg, coarse)
        result = solve_problem(spec, name, res, cell=cell_solution, tol=cfg.fixed_point_tol, max_iter=cfg.max_iter)
        payload: Dict[str, Any] = {"problem": spec.describe(), "result": result.summary()}
        if compare:
            fine_n = res.fine_cells(spec.domain, epsilon)
            reference = solve_problem(
                spec, "fine", resolution(cfg, fine_n, fine_n), tol=cfg.fixed_point_tol, max_iter=cfg.max_iter
            )
            alpha = spec.alpha.value if spec.alpha is not None else None
            context = NormContext(spec.coefficient, epsilon, alpha, cfg.quad_order, spec.domain.side / coarse, (name, "fine"))
            payload["errors"] = error_norms(result.field, reference.field, context).as_dict()
        _write_json(payload, out)

    _guarded(run)


@app.command()
def sweep(
    config_file: Optional[str] = typer.Option(None, "--config", help="Study config (.json, .yaml or .yml)"),
    out_dir: Optional[str] = typer.Option(None, "--out-dir", help="Directory for rows.csv, summary.json and plots"),
    workers: Optional[int] = typer.Option(None, "--workers", help="Concurrent sweep tasks"),
    cache_dir: Optional[str] = typer.Option(None, "--cache-dir", help="Cache cell solutions and fine references here"),
) -> None:
    """Run an (epsilon, h) sweep and write reports."""

    def run() -> int:
        cfg = load_config_file(config_file) if config_file else try_load_default(os.getcwd())
        if cfg is None:
            cfg = config_from_dict({})
        if out_dir:
            cfg.out_dir = out_dir
        if workers is not None:
            cfg.workers = workers
        if cache_dir:
            cfg.cache_dir = cache_dir
        cfg = validate(cfg)
        result = run_sweep(cfg)
        fits = fit_groups(result.rows)
        config = cfg.as_dict()
        config.pop("cache_dir", None)
        config.pop("workers", None)
        extra: Dict[str, Any] = {"config": config}
        if result.cell is not None:
            extra["cell"] = cell_summary(result.cell)
        written = emit_reports(result.rows, fits, cfg.out_dir, result.failures, extra)
        typer.echo(written["csv"])
        typer.echo(written["summary"])
        for path in written["plots"]:
            typer.echo(path)
        return len(result.failures)

    failures = _guarded(run)
    if failures:
        typer.echo(f"{failures} sweep task(s) failed; see summary.json", err=True)
        raise typer.Exit(code=2)


@app.command()
def rates(
    in_path: str = typer.Option(..., "--in", help="rows.csv from a sweep"),
    out: Optional[str] = typer.Option(None, "--out", help="Write fits JSON here instead of stdout"),
) -> None:
    """Fit log-log convergence rates to sweep rows."""

    def run() -> None:
        rows = read_rows_csv(in_path)
        if not rows:
            raise ConfigError(f"{in_path} has no rows")
        summary = summarize(rows, fit_groups(rows))
        summary.pop("environment", None)
        _write_json(summary, out)

    _guarded(run)


@app.command()
def lemma(
    coef: str = typer.Option("layered:2,1.8", "--coef", help="Coefficient id"),
    eps_list: str = typer.Option(
        "1/16,1/32,1/64", "--eps-list", help="Comma-separated epsilons; 1/128 at 16 points per epsilon needs several GB"
    ),
    w0: str = typer.Option("x", "--w0", help="Linear boundary data: x | y | one"),
    m: Optional[int] = typer.Option(None, "--m", help="Fixed lattice subdivisions (default: scaled with 1/epsilon)"),
    points_per_epsilon: int = typer.Option(16, "--points-per-epsilon"),
    out: Optional[str] = typer.Option(None, "--out", help="Write results JSON here instead of stdout"),
) -> None:
    """Single-triangle experiment: relative H1 error of the first-order expansion."""

    def run() -> None:
        result = lemma_triangle_experiment(
            parse_coefficient(coef),
            _rationals(eps_list),
            analytic_field(w0),
            m=m,
            points_per_epsilon=points_per_epsilon,
        )
        payload = result.as_dict()
        payload["coefficient"] = coef
        _write_json(payload, out)

    _guarded(run)


if __name__ == "__main__":  # pragma: no cover
    app()


def main() -> None:  # console_scripts entrypoint
    app()
