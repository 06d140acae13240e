"""Mixed, Robin and hemivariational boundary problems with three backends.

``fine`` solves with the oscillating coefficient on a grid resolving eps,
``homogenized`` solves with the constant tensor A_hat on the coarse grid and
``msfem`` solves on the span of the multiscale basis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .cell import CellSolution
from .coefficients import CoefficientField, ConstantCoefficient, IdentityCoefficient
from .errors import ConfigError, ContractionError, InfeasibleError, NonConvergenceError
from .expansion import FeField
from .fem import (
    DEFAULT_TOL,
    Scalar,
    SparseSystem,
    apply_dirichlet,
    assemble_boundary_law,
    assemble_boundary_load,
    assemble_boundary_mass,
    assemble_load,
    assemble_stiffness,
    factorize,
    solve_spd,
)
from .mesh import BoundaryTagging, Mesh, Rectangle, TagSelector, build_structured_mesh, tagging_of
from .multiscale import RESOLUTION, MsBasis, assemble_coarse_system, build_ms_basis, downscale

logger = logging.getLogger(__name__)

PROBLEM_KINDS = ("mixed", "robin", "hemivariational")
BACKENDS = ("fine", "homogenized", "msfem")
_BACKEND_ALIASES = {"homog": "homogenized", "ms": "msfem"}

POWER_TOL = 1e-8
POWER_MAX_ITER = 2000
CONTRACTION_SLACK = 1e-4
RATIO_FLOOR = 1e-6


def normalize_backend(name: str) -> str:
    key = _BACKEND_ALIASES.get(name.lower(), name.lower())
    if key not in BACKENDS:
        raise ConfigError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    return key


# -- data samplers ---------------------------------------------------------

SAMPLER_NAMES = ("zero", "one", "x", "y", "sinsin")


def _sinsin_source(p: np.ndarray) -> np.ndarray:
    return 2.0 * math.pi ** 2 * np.sin(math.pi * p[..., 0]) * np.sin(math.pi * p[..., 1])


def make_sampler(spec: Union[None, str, float, Callable[[np.ndarray], np.ndarray]]) -> Optional[Scalar]:
    """Turn a config value into a source/flux sampler.

    Numbers become constants; ``sinsin`` is 2 pi^2 sin(pi x) sin(pi y), the
    Poisson load whose all-Dirichlet solution on the unit square is sin(pi x) sin(pi y).
    """
    if spec is None or callable(spec):
        return spec
    if isinstance(spec, (int, float)):
        return None if spec == 0 else float(spec)
    key = str(spec).strip().lower()
    try:
        value = float(key)
    except ValueError:
        pass
    else:
        return None if value == 0 else value
    if key == "zero":
        return None
    if key == "one":
        return 1.0
    if key == "x":
        return lambda p: p[..., 0]
    if key == "y":
        return lambda p: p[..., 1]
    if key == "sinsin":
        return _sinsin_source
    raise ConfigError(f"unknown sampler {spec!r}; use a number or one of {SAMPLER_NAMES}")


@dataclass(frozen=True)
class RobinWeight:
    """Robin coefficient alpha with its declared bounds 0 < alpha_1 <= alpha <= alpha_2."""

    value: Scalar = 1.0
    bounds: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self) -> None:
        low, high = (float(b) for b in self.bounds)
        object.__setattr__(self, "bounds", (low, high))
        if not (0 < low <= high):
            raise ConfigError(f"Robin bounds need 0 < alpha1 <= alpha2, got {self.bounds}")
        if not callable(self.value) and not (low <= float(self.value) <= high):
            raise ConfigError(f"Robin weight {self.value} lies outside its bounds {self.bounds}")

    @classmethod
    def constant(cls, alpha: float) -> "RobinWeight":
        return cls(float(alpha), (float(alpha), float(alpha)))


@dataclass(frozen=True)
class BoundaryLaw:
    """Single-valued boundary law beta = j' with Lipschitz constant L and sup bound M."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    bound: float = math.inf

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


def boundary_law(kind: str, scale: float = 1.0) -> BoundaryLaw:
    """Catalog: ``zero``, ``linear`` (scale * s) and ``nonmonotone``."""
    kind = kind.lower()
    if kind == "zero":
        return BoundaryLaw("zero", lambda s: np.zeros_like(s), 0.0, 0.0)
    if kind == "linear":
        return BoundaryLaw(f"linear:{scale!r}", lambda s: scale * s, abs(scale))
    if kind == "nonmonotone":
        # |d/ds (s / (1 + s^2))| <= 1 and |d/ds tanh s| <= 1
        return BoundaryLaw(
            f"nonmonotone:{scale!r}",
            lambda s: scale * (0.1 * s / (1.0 + s * s) + 0.05 * np.tanh(s)),
            0.15 * abs(scale),
            0.1 * abs(scale),
        )
    raise ConfigError(f"unknown boundary law {kind!r}; expected zero, linear or nonmonotone")


@dataclass(frozen=True)
class ProblemSpec:
    kind: str = "mixed"
    domain: Rectangle = field(default_factory=Rectangle)
    tagging: BoundaryTagging = field(default_factory=BoundaryTagging)
    f: Optional[Scalar] = None
    g: Optional[Scalar] = None
    alpha: Optional[RobinWeight] = None
    beta: Optional[BoundaryLaw] = None
    epsilon: float = 1.0 / 16
    coefficient: CoefficientField = field(default_factory=IdentityCoefficient)

    def __post_init__(self) -> None:
        if self.kind not in PROBLEM_KINDS:
            raise ConfigError(f"unknown problem kind {self.kind!r}; expected one of {PROBLEM_KINDS}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.kind == "robin":
            if self.alpha is None:
                raise ConfigError("robin problem needs a Robin weight alpha")
            return
        if not self.tagging.has("D"):
            raise ConfigError(f"{self.kind} problem needs a nonempty Dirichlet part (pure Neumann unsupported)")
        if self.kind == "hemivariational" and not self.tagging.has("C"):
            raise ConfigError("hemivariational problem needs a nonempty contact part (tag C)")
        if self.kind == "mixed" and self.tagging.has("C"):
            logger.debug("mixed problem: sides tagged C carry the natural condition with zero flux")

    @property
    def flux_tags(self) -> TagSelector:
        return None if self.kind == "robin" else "N"

    @property
    def law(self) -> BoundaryLaw:
        return self.beta if self.beta is not None else boundary_law("zero")

    def describe(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "kind": self.kind,
            "domain": self.domain.as_list(),
            "tagging": self.tagging.as_dict(),
            "epsilon": self.epsilon,
            "coefficient": self.coefficient.describe(),
        }
        if self.alpha is not None:
            out["alpha_bounds"] = list(self.alpha.bounds)
        if self.kind == "hemivariational":
            out["beta"] = self.law.name
        return out


@dataclass(frozen=True)
class Resolution:
    """Discretization parameters shared by the backends."""

    coarse_n: int = 8
    fine_ratio: float = 1.0 / 16
    m: Optional[int] = None
    fine_n: Optional[int] = None
    quad_order: int = 2
    solver: str = "cg"
    tol: float = DEFAULT_TOL
    max_iter: Optional[int] = None
    workers: int = 1

    def __post_init__(self) -> None:
        if int(self.coarse_n) != self.coarse_n or self.coarse_n < 1:
            raise ConfigError(f"coarse n must be a positive integer, got {self.coarse_n}")
        if not 0 < self.fine_ratio <= 0.125:
            raise ConfigError(f"fine ratio must lie in (0, 1/8], got {self.fine_ratio}")
        if self.solver not in ("cg", "direct"):
            raise ConfigError(f"solver must be cg or direct, got {self.solver!r}")

    def fine_cells(self, domain: Rectangle, epsilon: float) -> int:
        """Cells per side of the fine grid: a power of two with side / n <= fine_ratio * eps, nested over coarse_n."""
        if self.fine_n is not None:
            n = int(self.fine_n)
        else:
            target = domain.side / (epsilon * self.fine_ratio)
            n = 2 ** max(0, math.ceil(math.log2(target) - 1e-12))
        n = max(n, self.coarse_n)
        if n % self.coarse_n:
            n = self.coarse_n * math.ceil(n / self.coarse_n)
        return n

    def subdivisions(self, domain: Rectangle, epsilon: float) -> int:
        if self.m is not None:
            return int(self.m)
        return max(2, self.fine_cells(domain, epsilon) // self.coarse_n)


@dataclass(frozen=True)
class HemiFeasibility:
    c_j: float
    alpha_j: float
    Delta: float
    contraction_bound: float
    kappa1: float
    c0: float
    c1: float
    power_iterations: int = 0

    @property
    def feasible(self) -> bool:
        return self.Delta > 0

    def as_dict(self) -> Dict[str, float]:
        return {
            "c_j": self.c_j,
            "alpha_j": self.alpha_j,
            "Delta": self.Delta,
            "contraction_bound": self.contraction_bound,
            "kappa1": self.kappa1,
            "c0": self.c0,
            "c1": self.c1,
        }


@dataclass
class SolveResult:
    backend: str
    field: FeField
    coarse_field: Optional[FeField] = None
    iterations: int = 1
    residuals: List[float] = field(default_factory=list)
    increments: List[float] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    feasibility: Optional[HemiFeasibility] = None
    basis: Optional[MsBasis] = None

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else 0.0

    def summary(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "backend": self.backend,
            "vertices": self.field.mesh.n_vertices,
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "max_abs": float(np.max(np.abs(self.field.values))) if self.field.values.size else 0.0,
            "warnings": list(self.warnings),
        }
        if self.increments:
            out["increments"] = list(self.increments)
            out["ratios"] = list(self.ratios)
        if self.feasibility is not None:
            out["feasibility"] = self.feasibility.as_dict()
        return out


@dataclass(eq=False)
class _Discretization:
    backend: str
    mesh: Mesh
    stiffness: sp.csr_matrix
    load: np.ndarray
    boundary_mass: Optional[sp.csr_matrix]
    space_mesh: Mesh
    basis: Optional[MsBasis] = None
    warnings: List[str] = field(default_factory=list)

    def result(self, u: np.ndarray, **kwargs: Any) -> SolveResult:
        if self.basis is not None:
            fine = FeField(self.basis.fine_mesh, downscale(self.basis, u), "u_ms")
            coarse = FeField(self.mesh, u, "U")
            return SolveResult(self.backend, fine, coarse, basis=self.basis, warnings=self.warnings, **kwargs)
        name = "u_eps" if self.backend == "fine" else "u0"
        return SolveResult(self.backend, FeField(self.mesh, u, name), warnings=self.warnings, **kwargs)


def _warn(messages: List[str], text: str) -> None:
    logger.warning("%s", text)
    messages.append(text)


def _robin_mass(spec: ProblemSpec, mesh: Mesh) -> Optional[sp.csr_matrix]:
    if spec.alpha is None or spec.kind != "robin":
        return None
    return assemble_boundary_mass(mesh, None, spec.alpha.value, spec.alpha.bounds)


def _standard(
    spec: ProblemSpec, backend: str, mesh: Mesh, coef: CoefficientField, epsilon: Optional[float], order: int
) -> _Discretization:
    stiffness = assemble_stiffness(mesh, coef, epsilon, order)
    load = assemble_load(mesh, spec.f, order) + assemble_boundary_load(mesh, spec.flux_tags, spec.g)
    return _Discretization(backend, mesh, stiffness, load, _robin_mass(spec, mesh), mesh)


def _discretize(
    spec: ProblemSpec,
    backend: str,
    resolution: Resolution,
    cell: Optional[CellSolution],
    basis: Optional[MsBasis],
) -> _Discretization:
    backend = normalize_backend(backend)
    order = resolution.quad_order
    if backend == "fine":
        n = resolution.fine_cells(spec.domain, spec.epsilon)
        mesh = build_structured_mesh(spec.domain, n, spec.tagging)
        disc = _standard(spec, backend, mesh, spec.coefficient, spec.epsilon, order)
        if mesh.cell_size > spec.epsilon / RESOLUTION * (1 + 1e-12):
            _warn(
                disc.warnings,
                f"under-resolved fine reference: h_f={mesh.cell_size:.3g} > epsilon/{RESOLUTION}={spec.epsilon / RESOLUTION:.3g}",
            )
        logger.info("fine backend: %d x %d cells, %d vertices", n, n, mesh.n_vertices)
        return disc

    coarse = build_structured_mesh(spec.domain, resolution.coarse_n, spec.tagging)
    if backend == "homogenized":
        if cell is None:
            raise ConfigError("the homogenized backend needs a cell solution")
        return _standard(spec, backend, coarse, ConstantCoefficient(cell.A_hat), None, order)

    if basis is None:
        basis = build_ms_basis(
            coarse,
            spec.coefficient,
            spec.epsilon,
            m=resolution.subdivisions(spec.domain, spec.epsilon),
            quad_order=order,
            workers=resolution.workers,
        )
    elif (
        basis.coarse.domain != spec.domain
        or basis.coarse.shape != coarse.shape
        or tagging_of(basis.coarse) != spec.tagging
        or basis.epsilon != spec.epsilon
    ):
        raise ConfigError("multiscale basis was built for a different mesh, tagging or epsilon")
    robin = spec.alpha if spec.kind == "robin" else None
    system = assemble_coarse_system(
        basis,
        f=spec.f,
        flux=spec.g,
        flux_tags=spec.flux_tags,
        robin_weight=robin.value if robin else None,
        robin_tags=None,
        robin_bounds=robin.bounds if robin else None,
        quad_order=order,
    )
    stiffness = basis.stiffness()
    mass = system.matrix - stiffness if robin else None
    disc = _Discretization(backend, basis.coarse, stiffness, system.rhs, mass, basis.fine_mesh, basis)
    if basis.fine_size > spec.epsilon / RESOLUTION * (1 + 1e-12):
        disc.warnings.append(
            f"under-resolved multiscale basis: fine size {basis.fine_size:.3g} > epsilon/{RESOLUTION}"
        )
    return disc


def _linear_solver(
    system: SparseSystem, resolution: Resolution, residuals: List[float]
) -> Callable[[np.ndarray], np.ndarray]:
    """Solve callable for repeated right-hand sides; appends the relative residual of every solve."""
    if system.trivial:
        return lambda b: np.zeros(0)
    if resolution.solver == "direct":
        lu = factorize(system.matrix)

        def direct(b: np.ndarray) -> np.ndarray:
            x = lu(b)
            residuals.append(system.with_rhs(b).residual(x))
            return x

        return direct

    def iterative(b: np.ndarray) -> np.ndarray:
        x = solve_spd(system.matrix, b, tol=resolution.tol, max_iter=resolution.max_iter)
        residuals.append(system.with_rhs(b).residual(x))
        return x

    return iterative


def _check_kind(spec: ProblemSpec, kinds: Sequence[str]) -> None:
    if spec.kind not in kinds:
        raise ConfigError(f"expected a {' or '.join(kinds)} problem, got {spec.kind!r}")


def _solve_linear(
    spec: ProblemSpec,
    backend: str,
    resolution: Resolution,
    cell: Optional[CellSolution],
    basis: Optional[MsBasis],
) -> SolveResult:
    disc = _discretize(spec, backend, resolution, cell, basis)
    matrix = disc.stiffness if disc.boundary_mass is None else disc.stiffness + disc.boundary_mass
    system = SparseSystem.full(matrix, disc.load, has_boundary_mass=disc.boundary_mass is not None)
    if spec.kind != "robin":
        system = apply_dirichlet(system, disc.mesh, "D")
    residuals: List[float] = []
    x = _linear_solver(system, resolution, residuals)(system.rhs)
    return disc.result(system.expand(x), residuals=residuals)


def solve_mixed(
    spec: ProblemSpec,
    backend: str = "fine",
    resolution: Optional[Resolution] = None,
    cell: Optional[CellSolution] = None,
    basis: Optional[MsBasis] = None,
) -> SolveResult:
    """Dirichlet on sides tagged D, flux g on sides tagged N."""
    _check_kind(spec, ("mixed",))
    return _solve_linear(spec, backend, resolution or Resolution(), cell, basis)


def solve_robin(
    spec: ProblemSpec,
    backend: str = "fine",
    resolution: Optional[Resolution] = None,
    cell: Optional[CellSolution] = None,
    basis: Optional[MsBasis] = None,
) -> SolveResult:
    """Stiffness plus boundary mass alpha on the whole boundary, flux g on the whole boundary."""
    _check_kind(spec, ("robin",))
    return _solve_linear(spec, backend, resolution or Resolution(), cell, basis)


def trace_constant(
    mesh: Mesh, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER
) -> Tuple[float, int]:
    """c_j**2: largest lambda with M_C v = lambda K v, K the Laplacian with D eliminated."""
    if not mesh.has_tag("C"):
        raise ConfigError("trace constant needs boundary edges tagged C")
    stiffness = assemble_stiffness(mesh, IdentityCoefficient())
    system = apply_dirichlet(SparseSystem.full(stiffness, np.zeros(mesh.n_vertices)), mesh, "D")
    free = system.free
    mass = assemble_boundary_mass(mesh, "C", 1.0)[free][:, free]
    solve = factorize(system.matrix)
    v = np.ones(system.n_free)
    lam_prev = 0.0
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = solve(mass @ v)
        energy = float(w @ (system.matrix @ w))
        if energy <= 0:
            return 0.0, it
        lam = float(w @ (mass @ w)) / energy
        v = w / math.sqrt(energy)
        if abs(lam - lam_prev) <= tol * lam:
            return lam, it
        lam_prev = lam
    logger.warning("trace constant power iteration stopped after %d iterations (lambda=%.6g)", max_iter, lam)
    return lam, max_iter


def check_hemi_feasibility(spec: ProblemSpec, mesh: Mesh) -> HemiFeasibility:
    """Estimate c_j on ``mesh`` and check Delta = kappa1 - L_beta c_j**2 > 0."""
    _check_kind(spec, ("hemivariational",))
    law = spec.law
    c2, iterations = trace_constant(mesh)
    kappa1 = spec.coefficient.kappa1
    alpha_j = law.lipschitz
    delta = kappa1 - alpha_j * c2
    contact = math.sqrt(mesh.boundary_length("C"))
    if math.isfinite(law.bound):
        c0, c1 = law.bound * contact, 0.0
    else:
        c0, c1 = abs(float(law.fn(np.zeros(1))[0])) * contact, alpha_j
    feasibility = HemiFeasibility(
        c_j=math.sqrt(c2),
        alpha_j=alpha_j,
        Delta=delta,
        contraction_bound=alpha_j * c2 / kappa1,
        kappa1=kappa1,
        c0=c0,
        c1=c1,
        power_iterations=iterations,
    )
    logger.info("hemivariational feasibility: %s", feasibility.as_dict())
    if delta <= 0:
        raise InfeasibleError(
            f"Delta = kappa1 - alpha_j * c_j^2 = {kappa1:.6g} - {alpha_j:.6g} * {c2:.6g} = {delta:.6g} <= 0"
        )
    return feasibility


def solve_hemivariational(
    spec: ProblemSpec,
    backend: str = "fine",
    resolution: Optional[Resolution] = None,
    tol: float = 1e-10,
    max_iter: int = 200,
    cell: Optional[CellSolution] = None,
    basis: Optional[MsBasis] = None,
) -> SolveResult:
    """Fixed point u <- solve(a(u, v) = F(v) - int_C beta(u_old) v), started from zero.

    Stops when the energy-norm increment |u_new - u|_a is at most ``tol`` (an
    absolute bound) or when the boundary load stops changing.
    """
    _check_kind(spec, ("hemivariational",))
    resolution = resolution or Resolution()
    disc = _discretize(spec, backend, resolution, cell, basis)
    feasibility = check_hemi_feasibility(spec, disc.space_mesh)
    system = apply_dirichlet(SparseSystem.full(disc.stiffness, disc.load), disc.mesh, "D")
    residuals: List[float] = []
    solve = _linear_solver(system, resolution, residuals)
    law = spec.law

    u = np.zeros(disc.mesh.n_vertices)
    previous: Optional[np.ndarray] = None
    increments: List[float] = []
    ratios: List[float] = []
    iterations = 0
    converged = False
    for k in range(1, max_iter + 1):
        contact = assemble_boundary_law(disc.mesh, "C", u, law.fn)
        if previous is not None and np.array_equal(contact, previous):
            converged = True
            break
        u_new = system.expand(solve(system.restrict(disc.load - contact)))
        d = u_new - u
        inc = math.sqrt(max(0.0, float(d @ (disc.stiffness @ d))))
        increments.append(inc)
        u, previous, iterations = u_new, contact, k
        if len(increments) >= 2 and increments[-2] > RATIO_FLOOR * increments[0]:
            ratio = inc / increments[-2]
            ratios.append(ratio)
            limit = min(1.0, feasibility.contraction_bound + CONTRACTION_SLACK)
            if ratio > limit:
                raise ContractionError(
                    f"iteration {k}: increment ratio {ratio:.4g} exceeds the contraction bound "
                    f"{feasibility.contraction_bound:.4g}",
                    ratios=ratios,
                )
        logger.debug("fixed point %d: increment %.3e", k, inc)
        if inc <= tol:
            converged = True
            break
    if not converged:
        raise NonConvergenceError(
            f"fixed point did not converge in {max_iter} iterations (last increment {increments[-1]:.3e})",
            residuals=increments,
        )
    logger.info("%s hemivariational solve: %d iteration(s)", disc.backend, iterations)
    return disc.result(
        u,
        iterations=iterations,
        residuals=residuals,
        increments=increments,
        ratios=ratios,
        feasibility=feasibility,
    )


def solve_problem(
    spec: ProblemSpec,
    backend: str = "fine",
    resolution: Optional[Resolution] = None,
    cell: Optional[CellSolution] = None,
    basis: Optional[MsBasis] = None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> SolveResult:
    """Dispatch on ``spec.kind``."""
    if spec.kind == "mixed":
        return solve_mixed(spec, backend, resolution, cell, basis)
    if spec.kind == "robin":
        return solve_robin(spec, backend, resolution, cell, basis)
    return solve_hemivariational(spec, backend, resolution, tol, max_iter, cell, basis)
