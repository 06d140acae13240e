"""Periodic cell problems on Q = (-1/2, 1/2)^2 and the homogenized tensor.

The correctors N_1, N_2 are P1 fields on a structured n x n mesh of Q whose
opposite-face vertices are identified, leaving n**2 periodic unknowns.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .coefficients import CoefficientField
from .errors import ConfigError, NumericalError, SingularSystemError
from .fem import coefficient_at, element_coefficient, element_stiffness, factorize, quadrature_points, scatter
from .mesh import Mesh, Rectangle, build_structured_mesh, locate

logger = logging.getLogger(__name__)

CELL = Rectangle(-0.5, -0.5, 0.5, 0.5)
MIN_CELL_N = 8
SCHEMA_VERSION = "1"
ASYMMETRY_WARN = 1e-8
ASYMMETRY_FAIL = 1e-6


def periodic_map(n: int) -> np.ndarray:
    """Vertex (i, j) of the (n+1) x (n+1) grid maps to periodic dof (i mod n) + n (j mod n)."""
    k = np.arange(n + 1) % n
    ii, jj = np.meshgrid(k, k)
    return (jj * n + ii).ravel()


@dataclass(frozen=True, eq=False)
class CellSolution:
    n_cell: int
    correctors: np.ndarray
    A_hat: np.ndarray
    corrector_grad_bound: float
    coefficient: str = ""
    asymmetry: float = 0.0

    def __post_init__(self) -> None:
        correctors = np.array(self.correctors, dtype=float).reshape(2, self.n_cell * self.n_cell)
        a_hat = np.array(self.A_hat, dtype=float).reshape(2, 2)
        correctors.setflags(write=False)
        a_hat.setflags(write=False)
        object.__setattr__(self, "correctors", correctors)
        object.__setattr__(self, "A_hat", a_hat)

    @cached_property
    def mesh(self) -> Mesh:
        return build_structured_mesh(CELL, self.n_cell)

    @cached_property
    def nodal(self) -> np.ndarray:
        """Corrector values on all (n+1)**2 cell-mesh vertices, shape (2, nv)."""
        return self.correctors[:, periodic_map(self.n_cell)]

    @cached_property
    def gradients(self) -> np.ndarray:
        """Element gradients of N_1, N_2 in y, shape (2, nt, 2)."""
        mesh = self.mesh
        return np.einsum("lta,tai->lti", self.nodal[:, mesh.triangles], mesh.gradients)

    def mean(self) -> np.ndarray:
        return _p1_mean(self.mesh, self.nodal)


def _p1_mean(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    area = np.abs(mesh.areas)
    return np.einsum("t,lt->l", area, nodal[:, mesh.triangles].mean(axis=2)) / area.sum()


def _tensor_from(mesh: Mesh, gradients: np.ndarray, abar: np.ndarray) -> Tuple[np.ndarray, float]:
    area = np.abs(mesh.areas)
    tensor = np.empty((2, 2))
    for l in range(2):
        field = gradients[l] + np.eye(2)[l]
        flux = np.einsum("tij,tj->ti", abar, field)
        tensor[:, l] = area @ flux / area.sum()
    asymmetry = abs(tensor[0, 1] - tensor[1, 0])
    scale = max(1.0, float(np.abs(tensor).max()))
    if asymmetry > ASYMMETRY_FAIL * scale:
        raise NumericalError(
            f"homogenized tensor asymmetry {asymmetry:.3e} exceeds {ASYMMETRY_FAIL:g}; "
            "cell solution and coefficient are inconsistent"
        )
    if asymmetry > ASYMMETRY_WARN * scale:
        logger.warning("homogenized tensor asymmetry %.3e symmetrized", asymmetry)
    return 0.5 * (tensor + tensor.T), float(asymmetry)


def solve_cell_problems(coef: CoefficientField, n_cell: int, quad_order: int = 2) -> CellSolution:
    """Solve -div(A(y)(e_l + grad N_l)) = 0 with N_l periodic and zero mean, l = 1, 2."""
    if int(n_cell) != n_cell or n_cell < MIN_CELL_N:
        raise ConfigError(f"n_cell must be an integer >= {MIN_CELL_N}, got {n_cell}")
    n = int(n_cell)
    mesh = build_structured_mesh(CELL, n)
    pmap = periodic_map(n)
    dofs = pmap[mesh.triangles]
    abar = element_coefficient(mesh.corners, coef, None, quad_order)
    stiffness = scatter(dofs, element_stiffness(mesh.corners, coef, None, quad_order), n * n)

    grads = mesh.gradients
    area = np.abs(mesh.areas)
    rhs = np.zeros((n * n, 2))
    for l in range(2):
        local = -area[:, None] * np.einsum("tai,ti->ta", grads, abar[:, :, l])
        rhs[:, l] = np.bincount(dofs.ravel(), weights=local.ravel(), minlength=n * n)

    # dof 0 pinned; the quotient system is SPD for elliptic A
    reduced = stiffness[1:, 1:]
    try:
        solve = factorize(reduced)
    except SingularSystemError as exc:
        raise SingularSystemError(f"cell problem for {coef.describe()} at n_cell={n} is singular: {exc}") from exc
    sol = np.zeros((n * n, 2))
    sol[1:] = solve(rhs[1:])
    if not np.all(np.isfinite(sol)):
        raise SingularSystemError(
            f"cell problem for {coef.describe()} at n_cell={n} produced non-finite correctors "
            f"(kappa1={coef.kappa1}, kappa2={coef.kappa2})"
        )
    correctors = sol.T
    correctors = correctors - _p1_mean(mesh, correctors[:, pmap])[:, None]

    gradients = np.einsum("lta,tai->lti", correctors[:, pmap][:, mesh.triangles], grads)
    a_hat, asymmetry = _tensor_from(mesh, gradients, abar)
    bound = float(np.max(np.linalg.norm(gradients, axis=2)))
    logger.info("cell n=%d %s: A_hat=%s grad bound %.4g", n, coef.describe(), a_hat.tolist(), bound)
    return CellSolution(
        n_cell=n,
        correctors=correctors,
        A_hat=a_hat,
        corrector_grad_bound=bound,
        coefficient=coef.describe(),
        asymmetry=asymmetry,
    )


def homogenized_tensor(cell: CellSolution, coef: CoefficientField, quad_order: int = 2) -> np.ndarray:
    """A_hat[i, l] = mean over Q of (A (e_l + grad N_l))_i, symmetrized."""
    abar = element_coefficient(cell.mesh.corners, coef, None, quad_order)
    tensor, _ = _tensor_from(cell.mesh, cell.gradients, abar)
    return tensor


def eval_correctors(cell: CellSolution, x: np.ndarray, epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    """Both correctors at x/epsilon: values (2, k) and y-gradients (2, k, 2)."""
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    pts = np.reshape(np.asarray(x, dtype=float), (-1, 2))
    y = pts / epsilon
    y = y - np.floor(y + 0.5)
    elements, bary = locate(cell.mesh, y)
    tri = cell.mesh.triangles[elements]
    values = np.einsum("lka,ka->lk", cell.nodal[:, tri], bary)
    return values, cell.gradients[:, elements]


def eval_corrector(cell: CellSolution, l: int, x: np.ndarray, epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    """N_l(x/epsilon) and (grad_y N_l)(x/epsilon) for l in {1, 2}."""
    if l not in (1, 2):
        raise ConfigError(f"corrector index must be 1 or 2, got {l}")
    values, grads = eval_correctors(cell, x, epsilon)
    return values[l - 1], grads[l - 1]


def voigt_reuss_bounds(coef: CoefficientField, n: int = 64, quad_order: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """(harmonic, arithmetic) cell averages of A; A_hat lies between them."""
    mesh = build_structured_mesh(CELL, n)
    xq, w = quadrature_points(mesh.corners, quad_order)
    a = coefficient_at(coef, xq, None)
    area = np.abs(mesh.areas)
    arithmetic = np.einsum("t,q,tqij->ij", area, w, a) / area.sum()
    harmonic = np.linalg.inv(np.einsum("t,q,tqij->ij", area, w, np.linalg.inv(a)) / area.sum())
    return 0.5 * (harmonic + harmonic.T), 0.5 * (arithmetic + arithmetic.T)


def cell_to_dict(cell: CellSolution) -> Dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "cell-solution",
        "n_cell": cell.n_cell,
        "coefficient": cell.coefficient,
        "A_hat": cell.A_hat.tolist(),
        "corrector_grad_bound": cell.corrector_grad_bound,
        "asymmetry": cell.asymmetry,
        "correctors": cell.correctors.tolist(),
    }


def cell_from_dict(data: Dict[str, Any]) -> CellSolution:
    if data.get("kind") != "cell-solution":
        raise ConfigError(f"not a cell solution document (kind={data.get('kind')!r})")
    if str(data.get("schema_version")) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported cell solution schema {data.get('schema_version')!r}")
    try:
        return CellSolution(
            n_cell=int(data["n_cell"]),
            correctors=np.array(data["correctors"], dtype=float),
            A_hat=np.array(data["A_hat"], dtype=float),
            corrector_grad_bound=float(data["corrector_grad_bound"]),
            coefficient=str(data.get("coefficient", "")),
            asymmetry=float(data.get("asymmetry", 0.0)),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed cell solution: {exc}") from exc


def save_cell_solution(cell: CellSolution, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cell_to_dict(cell), f)
    return path


def load_cell_solution(path: str) -> CellSolution:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read cell solution {path}: {exc}") from exc
    return cell_from_dict(data)


def cell_summary(cell: CellSolution, coef: Optional[CoefficientField] = None) -> Dict[str, Any]:
    """Compact description for CLI output and report metadata."""
    eig = np.linalg.eigvalsh(cell.A_hat)
    out: Dict[str, Any] = {
        "coefficient": cell.coefficient,
        "n_cell": cell.n_cell,
        "A_hat": cell.A_hat.tolist(),
        "eigenvalues": eig.tolist(),
        "corrector_grad_bound": cell.corrector_grad_bound,
        "asymmetry": cell.asymmetry,
        "max_abs_corrector": float(np.max(np.abs(cell.correctors))) if cell.correctors.size else 0.0,
    }
    if coef is not None:
        out["kappa"] = [coef.kappa1, coef.kappa2]
        exact = getattr(coef, "homogenized", None)
        if callable(exact):
            ref = exact()
            out["closed_form"] = ref.tolist()
            out["closed_form_error"] = float(np.max(np.abs(ref - cell.A_hat)))
    return out
