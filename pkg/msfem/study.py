"""Convergence studies: (epsilon, h) sweeps, log-log rate fits and the single-triangle experiment."""

from __future__ import annotations

import concurrent.futures as futures
import functools
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .cell import CellSolution, cell_from_dict, cell_to_dict, eval_correctors, solve_cell_problems
from .coefficients import CoefficientField
from .config import PER_EPSILON, StudyConfig, coefficient, problem_spec, resolution
from .errors import ConfigError, MsfemError
from .expansion import AnalyticField, ErrorReport, FeField, NormContext, analytic_field, error_norms, first_order_expansion
from .fem import sample
from .mesh import barycentric_gradients, build_structured_mesh, reference_lattice
from .multiscale import harmonic_extension
from .problems import ProblemSpec, SolveResult, solve_problem

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("problem", "comparison", "norm", "epsilon", "h", "error", "backend_meta")
VARIABLES = ("h", "epsilon", "sqrt(eps/h)")
ZERO_ERROR = 1e-10
LEMMA_TRIANGLE = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0))
# lattice subdivisions above which the local LU needs on the order of gigabytes
LARGE_LATTICE = 1024
REGIMES = {
    "fixed_h": "epsilon varies at fixed h; slope vs epsilon and vs sqrt(eps/h)",
    "fixed_eps": "h varies at fixed epsilon; resonance growth as h approaches epsilon",
    "fixed_ratio": "epsilon/h fixed while both shrink; plateau at the resonance level",
    "per_epsilon": "comparisons against the fine reference that do not depend on h",
}


@dataclass(frozen=True)
class SweepRow:
    problem: str
    comparison: str
    norm: str
    epsilon: float
    h: float
    error: float
    backend_meta: str = ""

    def csv_values(self) -> List[str]:
        return [
            self.problem,
            self.comparison,
            self.norm,
            repr(float(self.epsilon)),
            repr(float(self.h)),
            repr(float(self.error)),
            self.backend_meta,
        ]


@dataclass
class SweepResult:
    rows: List[SweepRow]
    failures: List[Dict[str, Any]] = field(default_factory=list)
    cell: Optional[CellSolution] = None
    reports: List[Tuple[str, float, float, ErrorReport]] = field(default_factory=list)


@dataclass(frozen=True)
class RateFit:
    variable: str
    points: Tuple[Tuple[float, float], ...]
    slope: float
    intercept: float
    r_squared: float
    problem: str = ""
    comparison: str = ""
    norm: str = ""
    regime: str = ""

    def as_dict(self) -> Dict[str, Any]:
        return {
            "problem": self.problem,
            "comparison": self.comparison,
            "norm": self.norm,
            "regime": self.regime,
            "variable": self.variable,
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "points": [list(p) for p in self.points],
        }


def fit_rate(points: Iterable[Tuple[float, float]], variable: str = "h", **labels: str) -> RateFit:
    """Least-squares line through (log value, log error)."""
    if variable not in VARIABLES:
        raise ConfigError(f"unknown rate variable {variable!r}; expected one of {VARIABLES}")
    pts = tuple((float(x), float(e)) for x, e in points)
    if len(pts) < 3:
        raise ConfigError(f"a rate fit needs at least 3 points, got {len(pts)}")
    if any(not (x > 0 and e > 0) or not (math.isfinite(x) and math.isfinite(e)) for x, e in pts):
        raise ConfigError("rate fits need finite positive values and errors")
    lx = np.log([x for x, _ in pts])
    le = np.log([e for _, e in pts])
    if np.ptp(lx) == 0:
        raise ConfigError("rate fit needs at least two distinct values")
    slope, intercept = np.polyfit(lx, le, 1)
    residual = le - (slope * lx + intercept)
    total = float(np.sum((le - le.mean()) ** 2))
    r2 = 1.0 - float(np.sum(residual ** 2)) / total if total > 0 else 1.0
    return RateFit(
        variable=variable,
        points=pts,
        slope=float(slope),
        intercept=float(intercept),
        r_squared=float(min(1.0, max(0.0, r2))),
        **labels,
    )


def _try_fit(points: Sequence[Tuple[float, float]], variable: str, **labels: str) -> Optional[RateFit]:
    try:
        return fit_rate(points, variable, **labels)
    except ConfigError as exc:
        logger.debug("skipping fit %s: %s", labels, exc)
        return None


def fit_groups(rows: Iterable[SweepRow]) -> List[RateFit]:
    """Fit every (problem, comparison, norm) group in each regime with at least three points."""
    groups: Dict[Tuple[str, str, str], List[SweepRow]] = {}
    for row in rows:
        if math.isfinite(row.error) and row.error > 0:
            groups.setdefault((row.problem, row.comparison, row.norm), []).append(row)
    fits: List[RateFit] = []
    for (problem, comparison, norm), members in groups.items():
        labels = {"problem": problem, "comparison": comparison, "norm": norm}
        candidates: List[Optional[RateFit]] = []
        if comparison in PER_EPSILON:
            pts = sorted({r.epsilon: r.error for r in members}.items())
            candidates.append(_try_fit(pts, "epsilon", regime="per_epsilon", **labels))
        else:
            for h in sorted({r.h for r in members}):
                sub = [r for r in members if r.h == h]
                if len({r.epsilon for r in sub}) >= 3:
                    pts = sorted((r.epsilon, r.error) for r in sub)
                    candidates.append(_try_fit(pts, "epsilon", regime=f"fixed_h={h!r}", **labels))
                    root = sorted((math.sqrt(r.epsilon / h), r.error) for r in sub)
                    candidates.append(_try_fit(root, "sqrt(eps/h)", regime=f"fixed_h={h!r}", **labels))
            for eps in sorted({r.epsilon for r in members}):
                sub = [r for r in members if r.epsilon == eps]
                if len({r.h for r in sub}) >= 3:
                    pts = sorted((r.h, r.error) for r in sub)
                    candidates.append(_try_fit(pts, "h", regime=f"fixed_eps={eps!r}", **labels))
            ratios: Dict[float, List[SweepRow]] = {}
            for r in members:
                ratios.setdefault(round(r.epsilon / r.h, 12), []).append(r)
            for ratio in sorted(ratios):
                sub = ratios[ratio]
                if len({r.h for r in sub}) >= 3:
                    pts = sorted((r.h, r.error) for r in sub)
                    candidates.append(_try_fit(pts, "h", regime=f"fixed_ratio={ratio!r}", **labels))
        fits.extend(f for f in candidates if f is not None)
    return fits


def r_eps_fit(fits: Iterable[RateFit]) -> Optional[RateFit]:
    """Slope of ||u_eps - u_0|| on the contact boundary against epsilon, when measured."""
    for fit in fits:
        if fit.comparison == "homog_vs_fine" and fit.norm == "boundary_C":
            return fit
    return None


# -- caching -----------------------------------------------------------------


class ArtifactCache:
    """Content-addressed store for cell solutions and fine reference fields."""

    def __init__(self, root: Optional[str]) -> None:
        self.root = root
        if root:
            os.makedirs(root, exist_ok=True)

    @property
    def enabled(self) -> bool:
        return bool(self.root)

    @staticmethod
    def key(fragment: Dict[str, Any]) -> str:
        text = json.dumps(fragment, sort_keys=True, default=repr)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:24]

    def _path(self, kind: str, key: str, ext: str) -> str:
        return os.path.join(self.root or ".", f"{kind}-{key}{ext}")

    def _write(self, path: str, writer: Callable[[str], None]) -> None:
        tmp = f"{path}.{os.getpid()}.tmp"
        writer(tmp)
        os.replace(tmp, path)

    def load_cell(self, key: str) -> Optional[CellSolution]:
        if not self.enabled:
            return None
        path = self._path("cell", key, ".json")
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as f:
            return cell_from_dict(json.load(f))

    def save_cell(self, key: str, cell: CellSolution) -> None:
        if not self.enabled:
            return

        def write(tmp: str) -> None:
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(cell_to_dict(cell), f)

        self._write(self._path("cell", key, ".json"), write)

    def load_array(self, kind: str, key: str) -> Optional[np.ndarray]:
        if not self.enabled:
            return None
        path = self._path(kind, key, ".npy")
        return np.load(path) if os.path.exists(path) else None

    def save_array(self, kind: str, key: str, values: np.ndarray) -> None:
        if not self.enabled:
            return

        def write(tmp: str) -> None:
            with open(tmp, "wb") as f:
                np.save(f, np.asarray(values))

        self._write(self._path(kind, key, ".npy"), write)


# -- sweep ---------------------------------------------------------------------


def _fragment(cfg: StudyConfig, coef: CoefficientField) -> Dict[str, Any]:
    return {
        "problem": cfg.problem,
        "domain": cfg.domain,
        "tagging": cfg.tagging,
        "coefficient": coef.fingerprint(),
        "source": cfg.source,
        "flux": cfg.flux,
        "robin": cfg.robin,
        "beta": cfg.beta,
        "quad_order": cfg.quad_order,
        "solver": cfg.solver,
        "tol": cfg.tol,
        "fixed_point_tol": cfg.fixed_point_tol,
        "max_iter": cfg.max_iter,
    }


def _cell_for(cfg: StudyConfig, coef: CoefficientField, cache: ArtifactCache) -> CellSolution:
    key = cache.key({"cell": coef.fingerprint(), "n": cfg.cell_resolution, "quad_order": cfg.quad_order})
    cell = cache.load_cell(key)
    if cell is None:
        cell = solve_cell_problems(coef, cfg.cell_resolution, cfg.quad_order)
        cache.save_cell(key, cell)
    else:
        logger.info("cell solution loaded from cache (%s)", key)
    return cell


def _fine_cells(cfg: StudyConfig, epsilon: float) -> int:
    domain_side = max(cfg.domain[2] - cfg.domain[0], cfg.domain[3] - cfg.domain[1])
    target = domain_side / (epsilon * cfg.fine_ratio_value)
    n = 2 ** max(0, math.ceil(math.log2(target) - 1e-12))
    step = functools.reduce(math.lcm, [int(c) for c in cfg.coarse])
    n = max(n, step)
    return step * math.ceil(n / step) if n % step else n


def _solve(cfg: StudyConfig, spec: ProblemSpec, backend: str, coarse_n: int, cell: Optional[CellSolution], fine_n: Optional[int] = None) -> SolveResult:
    return solve_problem(
        spec,
        backend,
        resolution(cfg, coarse_n, fine_n),
        cell=cell,
        tol=cfg.fixed_point_tol,
        max_iter=cfg.max_iter,
    )


def _fine_reference(cfg: StudyConfig, spec: ProblemSpec, coef: CoefficientField, n_f: int, cache: ArtifactCache) -> FeField:
    mesh = build_structured_mesh(spec.domain, n_f, spec.tagging)
    key = cache.key({"fine": _fragment(cfg, coef), "epsilon": repr(spec.epsilon), "n": n_f})
    values = cache.load_array("fine", key)
    if values is not None and values.shape == (mesh.n_vertices,):
        logger.info("fine reference eps=%g loaded from cache", spec.epsilon)
        return FeField(mesh, values, "u_eps")
    result = _solve(cfg, spec, "fine", n_f, None, fine_n=n_f)
    cache.save_array("fine", key, result.field.values)
    return FeField(mesh, result.field.values, "u_eps")


def _context(spec: ProblemSpec, cfg: StudyConfig, h: float, backends: Tuple[str, str]) -> NormContext:
    alpha = spec.alpha.value if spec.alpha is not None else None
    return NormContext(spec.coefficient, spec.epsilon, alpha, cfg.quad_order, h, backends)


def _rows(
    cfg: StudyConfig, comparison: str, epsilon: float, h: float, report: Optional[ErrorReport], meta: str
) -> List[SweepRow]:
    rows: List[SweepRow] = []
    for norm in cfg.norms:
        if report is None:
            rows.append(SweepRow(cfg.problem, comparison, norm, epsilon, h, float("nan"), meta))
            continue
        try:
            value = report.norm(norm)
        except ConfigError:
            continue
        rows.append(SweepRow(cfg.problem, comparison, norm, epsilon, h, value, meta))
    return rows


@dataclass
class _EpsilonStage:
    epsilon: float
    n_f: int
    fine: Optional[FeField] = None
    rows: Dict[str, List[SweepRow]] = field(default_factory=dict)
    failures: List[Dict[str, Any]] = field(default_factory=list)


def _failure(epsilon: float, h: float, comparison: str, exc: BaseException) -> Dict[str, Any]:
    return {"epsilon": epsilon, "h": h, "comparison": comparison, "error": f"{type(exc).__name__}: {exc}"}


def _epsilon_stage(cfg: StudyConfig, coef: CoefficientField, cell: Optional[CellSolution], epsilon: float, cache: ArtifactCache) -> _EpsilonStage:
    spec = problem_spec(cfg, epsilon, coef)
    stage = _EpsilonStage(epsilon, _fine_cells(cfg, epsilon))
    h_f = (spec.domain.side) / stage.n_f
    needs_fine = any(c in cfg.comparisons for c in ("msfem_vs_fine", "expansion_vs_fine", "homog_vs_fine"))
    per_eps = [c for c in cfg.comparisons if c in PER_EPSILON]
    meta = f"fine_n={stage.n_f};cell_n={cfg.cell_resolution}"
    if needs_fine:
        try:
            stage.fine = _fine_reference(cfg, spec, coef, stage.n_f, cache)
        except MsfemError as exc:
            logger.error("fine reference failed for eps=%g: %s", epsilon, exc)
            for comparison in per_eps:
                stage.failures.append(_failure(epsilon, h_f, comparison, exc))
                stage.rows[comparison] = _rows(cfg, comparison, epsilon, h_f, None, f"{meta};error={type(exc).__name__}")
            return stage
    if not per_eps:
        return stage
    try:
        u0 = _solve(cfg, spec, "homogenized", stage.n_f, cell, fine_n=stage.n_f).field
        for comparison in per_eps:
            if comparison == "expansion_vs_fine":
                approx = first_order_expansion(u0, cell, epsilon)  # type: ignore[arg-type]
                backends = ("expansion", "fine")
            else:
                approx = u0
                backends = ("homogenized", "fine")
            report = error_norms(stage.fine, approx, _context(spec, cfg, h_f, backends))  # type: ignore[arg-type]
            stage.rows[comparison] = _rows(cfg, comparison, epsilon, h_f, report, meta)
    except MsfemError as exc:
        logger.error("homogenized reference failed for eps=%g: %s", epsilon, exc)
        for comparison in per_eps:
            stage.failures.append(_failure(epsilon, h_f, comparison, exc))
            stage.rows[comparison] = _rows(cfg, comparison, epsilon, h_f, None, f"{meta};error={type(exc).__name__}")
    return stage


def _coarse_task(
    cfg: StudyConfig, coef: CoefficientField, cell: Optional[CellSolution], stage: _EpsilonStage, n: int
) -> Tuple[Dict[str, List[SweepRow]], List[Dict[str, Any]]]:
    spec = problem_spec(cfg, stage.epsilon, coef)
    h = spec.domain.side / n
    m = stage.n_f // n
    meta = f"fine_n={stage.n_f};m={m};cell_n={cfg.cell_resolution}"
    comparisons = [c for c in cfg.comparisons if c not in PER_EPSILON]
    rows: Dict[str, List[SweepRow]] = {}
    failures: List[Dict[str, Any]] = []
    if not comparisons:
        return rows, failures
    try:
        ms = _solve(cfg, spec, "msfem", n, cell, fine_n=stage.n_f)
        homog = _solve(cfg, spec, "homogenized", n, cell) if "homog_vs_msfem" in comparisons else None
    except MsfemError as exc:
        logger.error("coarse solves failed for eps=%g, n=%d: %s", stage.epsilon, n, exc)
        for comparison in comparisons:
            failures.append(_failure(stage.epsilon, h, comparison, exc))
            rows[comparison] = _rows(cfg, comparison, stage.epsilon, h, None, f"{meta};error={type(exc).__name__}")
        return rows, failures
    for comparison in comparisons:
        if comparison == "msfem_vs_fine":
            if stage.fine is None:
                exc = ConfigError("fine reference unavailable")
                failures.append(_failure(stage.epsilon, h, comparison, exc))
                rows[comparison] = _rows(cfg, comparison, stage.epsilon, h, None, f"{meta};error=ConfigError")
                continue
            report = error_norms(ms.field, stage.fine, _context(spec, cfg, h, ("msfem", "fine")))
        else:
            report = error_norms(homog.field, ms.field, _context(spec, cfg, h, ("homogenized", "msfem")))  # type: ignore[union-attr]
        rows[comparison] = _rows(cfg, comparison, stage.epsilon, h, report, meta)
    return rows, failures


def run_sweep(cfg: StudyConfig) -> SweepResult:
    """Error rows for every (epsilon, h, comparison, norm), in configuration order."""
    coef = coefficient(cfg)
    cache = ArtifactCache(cfg.cache_dir)
    needs_cell = any(c != "msfem_vs_fine" for c in cfg.comparisons)
    cell = _cell_for(cfg, coef, cache) if needs_cell else None
    epsilons = cfg.epsilon_values
    coarse = [int(n) for n in cfg.coarse]
    logger.info("sweep: %d epsilon(s) x %d coarse size(s), %d worker(s)", len(epsilons), len(coarse), cfg.workers)

    with futures.ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        stages = list(pool.map(lambda e: _epsilon_stage(cfg, coef, cell, e, cache), epsilons))
        tasks = [(i, n) for i in range(len(stages)) for n in coarse]
        coarse_results = list(pool.map(lambda t: _coarse_task(cfg, coef, cell, stages[t[0]], t[1]), tasks))

    rows: List[SweepRow] = []
    failures: List[Dict[str, Any]] = []
    by_task = dict(zip(tasks, coarse_results))
    for i, stage in enumerate(stages):
        failures.extend(stage.failures)
        for comparison in cfg.comparisons:
            if comparison in PER_EPSILON:
                rows.extend(stage.rows.get(comparison, []))
                continue
            for n in coarse:
                rows.extend(by_task[(i, n)][0].get(comparison, []))
        for n in coarse:
            failures.extend(by_task[(i, n)][1])
    if failures:
        logger.warning("sweep finished with %d failure(s)", len(failures))
    return SweepResult(rows=rows, failures=failures, cell=cell)


# -- single-triangle experiment ------------------------------------------------


@dataclass
class LemmaResult:
    corners: Tuple[Tuple[float, float], ...]
    inradius: float
    points: List[Tuple[float, float]]
    subdivisions: Dict[float, int]
    fit: Optional[RateFit]
    note: str = ""

    def as_dict(self) -> Dict[str, Any]:
        return {
            "corners": [list(c) for c in self.corners],
            "inradius": self.inradius,
            "points": [list(p) for p in self.points],
            "subdivisions": {repr(k): v for k, v in self.subdivisions.items()},
            "fit": self.fit.as_dict() if self.fit else None,
            "note": self.note,
        }


def _inradius(corners: np.ndarray) -> float:
    a = np.linalg.norm(corners[1] - corners[2])
    b = np.linalg.norm(corners[2] - corners[0])
    c = np.linalg.norm(corners[0] - corners[1])
    e1, e2 = corners[1] - corners[0], corners[2] - corners[0]
    area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
    return float(2.0 * area / (a + b + c))


def _seminorm(points: np.ndarray, triangles: np.ndarray, values: np.ndarray) -> float:
    sub = points[triangles]
    grads = barycentric_gradients(sub)
    e1, e2 = sub[:, 1] - sub[:, 0], sub[:, 2] - sub[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    g = np.einsum("ta,tai->ti", values[triangles], grads)
    return math.sqrt(float(np.sum(area * np.sum(g * g, axis=1))))


def lemma_triangle_experiment(
    coef: CoefficientField,
    epsilons: Sequence[float],
    w0: Optional[AnalyticField] = None,
    m: Optional[int] = None,
    points_per_epsilon: int = 16,
    cell: Optional[CellSolution] = None,
    quad_order: int = 2,
) -> LemmaResult:
    """|w_eps - w_eps1|_1 / |w0|_1 on a fixed triangle as epsilon shrinks.

    w_eps is the A(x/eps)-harmonic extension of the linear w0 and
    w_eps1 = w0 + eps N_l(x/eps) d_l w0. The lattice spacing is
    eps / points_per_epsilon, matching the cell mesh when cell_n equals
    points_per_epsilon.
    """
    w0 = w0 or analytic_field("x")
    if w0.gradient is None:
        raise ConfigError("w0 needs a gradient")
    corners = np.array(LEMMA_TRIANGLE)
    r = _inradius(corners)
    for eps in epsilons:
        if not 0 < eps < r / 4:
            raise ConfigError(f"epsilon={eps} violates epsilon << r: need 0 < epsilon < r/4 = {r / 4:.4f}")
    cell = cell or solve_cell_problems(coef, max(8, int(points_per_epsilon)), quad_order)
    legs = max(np.linalg.norm(corners[1] - corners[0]), np.linalg.norm(corners[2] - corners[1]))

    points_out: List[Tuple[float, float]] = []
    subdivisions: Dict[float, int] = {}
    for eps in epsilons:
        mm = int(m) if m is not None else 2 ** math.ceil(math.log2(points_per_epsilon * legs / eps) - 1e-12)
        subdivisions[float(eps)] = mm
        if mm > LARGE_LATTICE:
            logger.warning(
                "triangle experiment eps=%g: m=%d gives %d lattice unknowns; expect several GB for the LU",
                eps,
                mm,
                (mm + 1) * (mm + 2) // 2,
            )
        pts, w = harmonic_extension(corners, coef, eps, mm, w0.value, quad_order)
        base = sample(w0.value, pts)
        correctors, _ = eval_correctors(cell, pts, eps)
        w1 = base + eps * np.einsum("lk,kl->k", correctors, w0.gradient(pts))
        triangles = reference_lattice(mm).triangles
        denom = _seminorm(pts, triangles, base)
        err = _seminorm(pts, triangles, w - w1)
        ratio = err / denom if denom > 0 else 0.0
        logger.info("triangle experiment eps=%g m=%d: relative error %.4e", eps, mm, ratio)
        points_out.append((float(eps), float(ratio)))

    if all(e < ZERO_ERROR for _, e in points_out):
        return LemmaResult(tuple(map(tuple, corners.tolist())), r, points_out, subdivisions, None, "degenerate: zero error")
    fit = fit_rate(points_out, "epsilon", comparison="lemma_triangle", norm="h1")
    return LemmaResult(tuple(map(tuple, corners.tolist())), r, points_out, subdivisions, fit)
