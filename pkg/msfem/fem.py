"""P1 finite element machinery: quadrature, sparse assembly, Dirichlet elimination, SPD solves.

Element kernels are vectorized over blocks of CHUNK triangles; each block is
scattered through COO triplets and summed into the global CSR matrix in fixed
element order, so assembling the same inputs twice gives bitwise-identical
matrices and peak memory stays bounded by one block of triplets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterator, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import CoefficientField
from .errors import ConfigError, NonConvergenceError, SingularSystemError
from .mesh import Mesh, TagSelector, barycentric_gradients

logger = logging.getLogger(__name__)

Sampler = Callable[[np.ndarray], np.ndarray]
Scalar = Union[float, Sampler]

CHUNK = 200_000
DEFAULT_TOL = 1e-12

# Symmetric triangle rules: (barycentric points, weights summing to 1).
_TRIANGLE_RULES = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: (
        np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
        np.full(3, 1 / 3),
    ),
    3: (
        np.array([[1 / 3, 1 / 3, 1 / 3], [0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6]]),
        np.array([-27 / 48, 25 / 48, 25 / 48, 25 / 48]),
    ),
    4: (
        np.array(
            [
                [0.108103018168070, 0.445948490915965, 0.445948490915965],
                [0.445948490915965, 0.108103018168070, 0.445948490915965],
                [0.445948490915965, 0.445948490915965, 0.108103018168070],
                [0.816847572980459, 0.091576213509771, 0.091576213509771],
                [0.091576213509771, 0.816847572980459, 0.091576213509771],
                [0.091576213509771, 0.091576213509771, 0.816847572980459],
            ]
        ),
        np.array([0.223381589678011] * 3 + [0.109951743655322] * 3),
    ),
}

# Two-point Gauss on [0, 1].
EDGE_POINTS = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])
EDGE_WEIGHTS = np.array([0.5, 0.5])


def triangle_rule(order: int) -> Tuple[np.ndarray, np.ndarray]:
    if order not in _TRIANGLE_RULES:
        raise ConfigError(f"quadrature order must be 1..4, got {order}")
    return _TRIANGLE_RULES[order]


def _chunks(n: int, size: Optional[int] = None) -> Iterator[slice]:
    size = size or CHUNK
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def sample(fn: Optional[Scalar], points: np.ndarray) -> np.ndarray:
    """Evaluate a sampler (callable on (..., 2) arrays) or a constant at points."""
    shape = points.shape[:-1]
    if fn is None:
        return np.zeros(shape)
    if callable(fn):
        return np.broadcast_to(np.asarray(fn(points), dtype=float), shape).copy()
    return np.full(shape, float(fn))


def check_epsilon(epsilon: Optional[float]) -> None:
    if epsilon is not None and not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")


def coefficient_at(coef: CoefficientField, points: np.ndarray, epsilon: Optional[float]) -> np.ndarray:
    """A(x/epsilon) at points, or A(x) when epsilon is None."""
    check_epsilon(epsilon)
    if coef.is_constant:
        return coef.evaluate(points)
    return coef.evaluate(points if epsilon is None else points / epsilon)


def quadrature_points(corners: np.ndarray, order: int) -> Tuple[np.ndarray, np.ndarray]:
    bary, weights = triangle_rule(order)
    return np.einsum("qa,tai->tqi", bary, corners), weights


def _areas(corners: np.ndarray) -> np.ndarray:
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def element_coefficient(
    corners: np.ndarray, coef: CoefficientField, epsilon: Optional[float] = None, quad_order: int = 2
) -> np.ndarray:
    """Quadrature average of the coefficient over each triangle, shape (nt, 2, 2)."""
    check_epsilon(epsilon)
    if coef.is_constant:
        return np.broadcast_to(coef.evaluate(np.zeros(2)), (corners.shape[0], 2, 2)).copy()
    out = np.empty((corners.shape[0], 2, 2))
    for sl in _chunks(corners.shape[0]):
        xq, w = quadrature_points(corners[sl], quad_order)
        out[sl] = np.einsum("q,tqij->tij", w, coefficient_at(coef, xq, epsilon))
    return out


def element_stiffness(
    corners: np.ndarray, coef: CoefficientField, epsilon: Optional[float] = None, quad_order: int = 2
) -> np.ndarray:
    """Local matrices int_T A grad(phi_a) . grad(phi_b), shape (nt, 3, 3), exactly symmetric."""
    out = np.empty((corners.shape[0], 3, 3))
    for sl in _chunks(corners.shape[0]):
        c = corners[sl]
        grads = barycentric_gradients(c)
        abar = element_coefficient(c, coef, epsilon, quad_order)
        local = _areas(c)[:, None, None] * np.einsum("tai,tij,tbj->tab", grads, abar, grads)
        out[sl] = 0.5 * (local + np.swapaxes(local, 1, 2))
    return out


def _scatter_block(triangles: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def scatter(triangles: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    """Sum local (nt, 3, 3) matrices into an n x n CSR matrix, CHUNK triangles at a time."""
    out = sp.csr_matrix((n, n))
    for sl in _chunks(triangles.shape[0]):
        out = out + _scatter_block(triangles[sl], local[sl], n)
    return out


def assemble_stiffness(
    mesh: Mesh, coef: CoefficientField, epsilon: Optional[float] = None, quad_order: int = 2
) -> sp.csr_matrix:
    """Global stiffness; local matrices are built and scattered per chunk, never for the whole mesh."""
    n = mesh.n_vertices
    out = sp.csr_matrix((n, n))
    for sl in _chunks(mesh.n_triangles):
        local = element_stiffness(mesh.vertices[mesh.triangles[sl]], coef, epsilon, quad_order)
        out = out + _scatter_block(mesh.triangles[sl], local, n)
    return out


def element_mass(corners: np.ndarray) -> np.ndarray:
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _areas(corners)[:, None, None] * ref


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Exact P1 mass matrix over the domain."""
    return scatter(mesh.triangles, element_mass(mesh.corners), mesh.n_vertices)


def _edge_geometry(mesh: Mesh, tags: TagSelector) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    edges = mesh.edges_with(tags)
    pa = mesh.vertices[edges[:, 0]]
    pb = mesh.vertices[edges[:, 1]]
    length = np.linalg.norm(pb - pa, axis=1)
    points = pa[:, None, :] + EDGE_POINTS[None, :, None] * (pb - pa)[:, None, :]
    return edges, length, points


def _edge_shapes() -> np.ndarray:
    return np.stack([1.0 - EDGE_POINTS, EDGE_POINTS], axis=1)


def assemble_boundary_mass(
    mesh: Mesh,
    tags: TagSelector,
    weight: Scalar = 1.0,
    bounds: Optional[Tuple[float, float]] = None,
) -> sp.csr_matrix:
    """Boundary mass sum_e int_e weight phi_i phi_j by two-point Gauss per edge.

    With ``bounds`` the weight is checked against [low, high] at every node.
    """
    n = mesh.n_vertices
    edges, length, points = _edge_geometry(mesh, tags)
    if len(edges) == 0:
        logger.warning("no boundary edges tagged %s; boundary mass is zero", tags)
        return sp.csr_matrix((n, n))
    alpha = sample(weight, points)
    if bounds is not None:
        low, high = bounds
        slack = 1e-12 * max(1.0, abs(high))
        if np.any(alpha < low - slack) or np.any(alpha > high + slack):
            raise ConfigError(
                f"Robin weight leaves its declared bounds [{low}, {high}]: observed [{alpha.min()}, {alpha.max()}]"
            )
    shapes = _edge_shapes()
    local = np.einsum("e,q,eq,qa,qb->eab", length, EDGE_WEIGHTS, alpha, shapes, shapes)
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_load(mesh: Mesh, f: Optional[Scalar], quad_order: int = 2) -> np.ndarray:
    """Load vector int f phi_i."""
    bary, w = triangle_rule(quad_order)
    out = np.zeros(mesh.n_vertices)
    if f is None:
        return out
    for sl in _chunks(mesh.n_triangles):
        c = mesh.corners[sl]
        xq = np.einsum("qa,tai->tqi", bary, c)
        area = np.abs(mesh.areas[sl])
        local = np.einsum("t,q,tq,qa->ta", area, w, sample(f, xq), bary)
        out += np.bincount(mesh.triangles[sl].ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    return out


def assemble_boundary_load(mesh: Mesh, tags: TagSelector, g: Optional[Scalar]) -> np.ndarray:
    """Boundary load sum_e int_e g phi_i by two-point Gauss per edge."""
    out = np.zeros(mesh.n_vertices)
    edges, length, points = _edge_geometry(mesh, tags)
    if len(edges) == 0 or g is None:
        return out
    local = np.einsum("e,q,eq,qa->ea", length, EDGE_WEIGHTS, sample(g, points), _edge_shapes())
    return np.bincount(edges.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def assemble_boundary_law(
    mesh: Mesh, tags: TagSelector, values: np.ndarray, law: Callable[[np.ndarray], np.ndarray]
) -> np.ndarray:
    """Nonlinear boundary load int_e law(u) phi_i for a P1 field ``values``."""
    out = np.zeros(mesh.n_vertices)
    edges, length, _ = _edge_geometry(mesh, tags)
    if len(edges) == 0:
        return out
    shapes = _edge_shapes()
    uq = values[edges] @ shapes.T
    local = np.einsum("e,q,eq,qa->ea", length, EDGE_WEIGHTS, np.asarray(law(uq), dtype=float), shapes)
    return np.bincount(edges.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Linear system over mesh vertices.

    ``dof_map`` marks free vertices; after Dirichlet elimination ``matrix``
    and ``rhs`` only hold the free rows and columns.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dof_map: np.ndarray
    has_boundary_mass: bool = False

    @classmethod
    def full(cls, matrix: sp.spmatrix, rhs: np.ndarray, has_boundary_mass: bool = False) -> "SparseSystem":
        n = matrix.shape[0]
        return cls(sp.csr_matrix(matrix), np.asarray(rhs, dtype=float), np.ones(n, dtype=bool), has_boundary_mass)

    @property
    def n_free(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(self.dof_map)

    @property
    def trivial(self) -> bool:
        return self.n_free == 0

    def expand(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.dof_map.shape[0])
        out[self.dof_map] = x
        return out

    def restrict(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[self.dof_map]

    def with_rhs(self, rhs: np.ndarray) -> "SparseSystem":
        return replace(self, rhs=np.asarray(rhs, dtype=float))

    def residual(self, x: np.ndarray) -> float:
        """Relative residual |K x - b| / |b| (absolute when b = 0)."""
        if self.trivial:
            return 0.0
        r = float(np.linalg.norm(self.matrix @ x - self.rhs))
        b = float(np.linalg.norm(self.rhs))
        return r / b if b > 0 else r


def apply_dirichlet(system: SparseSystem, mesh: Mesh, tags: TagSelector = "D") -> SparseSystem:
    """Eliminate homogeneous Dirichlet rows and columns for vertices on the tagged edges."""
    constrained = mesh.boundary_vertices(tags) if tags is not None else np.zeros(0, dtype=np.int64)
    if constrained.size == 0 and not system.has_boundary_mass:
        raise SingularSystemError("pure Neumann unsupported: no Dirichlet boundary and no boundary mass")
    free = system.dof_map.copy()
    free[constrained] = False
    keep = np.flatnonzero(free)
    full_index = np.flatnonzero(system.dof_map)
    local = np.searchsorted(full_index, keep)
    matrix = system.matrix[local][:, local].tocsr()
    rhs = system.rhs[local]
    if keep.size == 0:
        logger.debug("all vertices constrained; system is trivially solved")
    return SparseSystem(matrix, rhs, free, system.has_boundary_mass)


def _jacobi(matrix: sp.csr_matrix) -> spla.LinearOperator:
    diag = matrix.diagonal()
    if np.any(diag <= 0):
        raise SingularSystemError("matrix has a non-positive diagonal entry; not SPD")
    inv = 1.0 / diag
    return spla.LinearOperator(matrix.shape, matvec=lambda v: inv * np.ravel(v), dtype=float)


def solve_spd(
    system: Union[SparseSystem, sp.spmatrix],
    rhs: Optional[np.ndarray] = None,
    tol: float = DEFAULT_TOL,
    max_iter: Optional[int] = None,
    method: str = "cg",
    history: Optional[List[float]] = None,
) -> np.ndarray:
    """Solve an SPD system by Jacobi-preconditioned CG (or sparse LU with method="direct").

    Relative residuals |b - Kx|/|b| per iteration are appended to ``history``.
    """
    if isinstance(system, SparseSystem):
        matrix, b = system.matrix, system.rhs if rhs is None else rhs
    else:
        matrix, b = sp.csr_matrix(system), rhs
    if b is None:
        raise ConfigError("solve_spd needs a right-hand side")
    b = np.asarray(b, dtype=float)
    n = matrix.shape[0]
    if n == 0:
        return np.zeros(0)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n)
    residuals: List[float] = [] if history is None else history

    if method == "direct":
        x = spla.spsolve(sp.csc_matrix(matrix), b)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("direct factorization produced non-finite values")
        residuals.append(float(np.linalg.norm(b - matrix @ x)) / bnorm)
        return np.asarray(x)
    if method != "cg":
        raise ConfigError(f"unknown solver method {method!r}")

    def record(xk: np.ndarray) -> None:
        residuals.append(float(np.linalg.norm(b - matrix @ xk)) / bnorm)

    limit = max_iter if max_iter is not None else max(1000, 10 * n)
    x, info = spla.cg(matrix, b, rtol=tol, atol=0.0, maxiter=limit, M=_jacobi(matrix), callback=record)
    if info > 0:
        raise NonConvergenceError(
            f"CG did not reach tol={tol:g} in {limit} iterations (last residual {residuals[-1] if residuals else float('nan'):.3e})",
            residuals=residuals,
        )
    if info < 0:
        raise SingularSystemError("CG breakdown: matrix is not SPD")
    return np.asarray(x)


def factorize(matrix: sp.spmatrix) -> Callable[[np.ndarray], np.ndarray]:
    """Sparse LU factorization returning a solve callable; used for local and cell problems."""
    try:
        lu = spla.splu(sp.csc_matrix(matrix))
    except RuntimeError as exc:
        raise SingularSystemError(f"sparse LU failed: {exc}") from exc
    return lu.solve
