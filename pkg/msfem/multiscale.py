"""Multiscale basis functions and the coarse MsFEM system.

On every coarse triangle T the three basis functions solve
-div(A(x/eps) grad Phi_j) = 0 in T with Phi_j equal to the linear hat psi_j
on the boundary of T. The local problems live on a uniform m-fold
refinement of T that coincides with the structured fine grid, so basis
functions of neighbouring elements agree on shared edges.
"""

from __future__ import annotations

import concurrent.futures as futures
import json
import logging
import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .coefficients import CoefficientField
from .errors import ConfigError, MeshError, NonConvergenceError, SingularSystemError
from .fem import (
    CHUNK,
    Scalar,
    SparseSystem,
    assemble_boundary_load,
    assemble_boundary_mass,
    check_epsilon,
    element_stiffness,
    factorize,
    sample,
    scatter,
    triangle_rule,
)
from .mesh import (
    Lattice,
    Mesh,
    SubMesh,
    TagSelector,
    build_fine_submesh,
    grid_indices,
    lattice_points,
    reference_lattice,
    refine,
)

logger = logging.getLogger(__name__)

RESOLUTION = 16
SCHEMA_VERSION = "1"


def default_subdivisions(h: float, epsilon: float) -> int:
    """Smallest power of two m with h / m <= epsilon / 16."""
    check_epsilon(epsilon)
    return max(2, 2 ** math.ceil(math.log2(max(1.0, RESOLUTION * h / epsilon))))


@dataclass(frozen=True, eq=False)
class MsBasis:
    """Per-element multiscale basis.

    ``phi[e, k, j]`` is Phi_j of coarse element e at lattice vertex k;
    ``element_stiffness[e]`` is the 3x3 matrix int_T A grad Phi_i . grad Phi_j.
    """

    coarse: Mesh
    coef: CoefficientField
    epsilon: float
    m: int
    phi: np.ndarray
    element_stiffness: np.ndarray
    quad_order: int = 2

    @property
    def lattice(self) -> Lattice:
        return reference_lattice(self.m)

    @property
    def n_elements(self) -> int:
        return self.coarse.n_triangles

    @cached_property
    def fine_mesh(self) -> Mesh:
        return refine(self.coarse, self.m)

    @cached_property
    def fine_index(self) -> np.ndarray:
        """Fine-grid vertex id of every lattice vertex of every element, shape (ne, nl)."""
        points = lattice_points(self.coarse.corners, self.lattice)
        return grid_indices(self.fine_mesh, points).reshape(self.n_elements, -1)

    @property
    def fine_size(self) -> float:
        return self.coarse.cell_size / self.m

    def submesh(self, element: int) -> SubMesh:
        return build_fine_submesh(self.coarse, element, self.m)

    def stiffness(self) -> sp.csr_matrix:
        return scatter(self.coarse.triangles, self.element_stiffness, self.coarse.n_vertices)


def _element_chunks(n_elements: int, per_element: int) -> List[slice]:
    size = max(1, CHUNK // max(1, per_element))
    return [slice(s, min(n_elements, s + size)) for s in range(0, n_elements, size)]


def _offsets(k: int, nl: int) -> np.ndarray:
    return (np.arange(k) * nl)[:, None]


def _local_stiffness(
    corners: np.ndarray, lattice: Lattice, coef: CoefficientField, epsilon: float, quad_order: int
) -> sp.csr_matrix:
    """Block-diagonal fine stiffness of k coarse elements, one block of nl dofs per element."""
    k, nl = corners.shape[0], lattice.n_vertices
    points = lattice_points(corners, lattice)
    sub = points[:, lattice.triangles].reshape(-1, 3, 2)
    local = element_stiffness(sub, coef, epsilon, quad_order)
    dofs = (lattice.triangles[None] + _offsets(k, nl)[:, :, None]).reshape(-1, 3)
    return scatter(dofs, local, k * nl)


def _solve_chunk(
    start: int, corners: np.ndarray, lattice: Lattice, coef: CoefficientField, epsilon: float, quad_order: int
) -> Tuple[np.ndarray, np.ndarray]:
    k, nl = corners.shape[0], lattice.n_vertices
    stiffness = _local_stiffness(corners, lattice, coef, epsilon, quad_order)
    off = _offsets(k, nl)
    interior = (lattice.interior[None] + off).ravel()
    trace = (lattice.trace[None] + off).ravel()
    data = np.tile(lattice.bary[lattice.trace], (k, 1))

    phi = np.empty((k * nl, 3))
    phi[trace] = data
    if interior.size:
        rows = stiffness[interior]
        try:
            solve = factorize(rows[:, interior])
        except SingularSystemError as exc:
            raise NonConvergenceError(f"local basis solve failed in elements {start}..{start + k - 1}: {exc}", element=start) from exc
        phi[interior] = solve(-(rows[:, trace] @ data))
    phi = phi.reshape(k, nl, 3)
    bad = np.flatnonzero(~np.all(np.isfinite(phi), axis=(1, 2)))
    if bad.size:
        element = start + int(bad[0])
        raise NonConvergenceError(f"local basis solve produced non-finite values in element {element}", element=element)

    applied = (stiffness @ phi.reshape(-1, 3)).reshape(k, nl, 3)
    local = np.einsum("kna,knb->kab", phi, applied)
    return phi, 0.5 * (local + np.swapaxes(local, 1, 2))


def harmonic_extension(
    corners: np.ndarray,
    coef: CoefficientField,
    epsilon: float,
    m: int,
    boundary: Callable[[np.ndarray], np.ndarray],
    quad_order: int = 2,
) -> Tuple[np.ndarray, np.ndarray]:
    """Solve -div(A(x/eps) grad w) = 0 in one triangle with w = boundary on its edges.

    Returns the lattice points (nl, 2) and the nodal values of w (nl,).
    """
    check_epsilon(epsilon)
    lattice = reference_lattice(int(m))
    corners = np.asarray(corners, dtype=float).reshape(1, 3, 2)
    points = lattice_points(corners, lattice)[0]
    stiffness = _local_stiffness(corners, lattice, coef, epsilon, quad_order)
    values = np.empty(lattice.n_vertices)
    values[lattice.trace] = sample(boundary, points[lattice.trace])
    if lattice.interior.size:
        rows = stiffness[lattice.interior]
        solve = factorize(rows[:, lattice.interior])
        values[lattice.interior] = solve(-(rows[:, lattice.trace] @ values[lattice.trace]))
    return points, values


def build_ms_basis(
    coarse: Mesh,
    coef: CoefficientField,
    epsilon: float,
    m: Optional[int] = None,
    quad_order: int = 2,
    workers: int = 1,
) -> MsBasis:
    """Solve the three local Dirichlet problems on every coarse element."""
    check_epsilon(epsilon)
    if not coarse.is_structured:
        raise MeshError("the multiscale basis needs a structured coarse mesh")
    if m is None:
        m = default_subdivisions(coarse.cell_size, epsilon)
    if int(m) != m or m < 2:
        raise ConfigError(f"fine subdivisions m must be an integer >= 2, got {m}")
    m = int(m)
    lattice = reference_lattice(m)
    fine_size = coarse.cell_size / m
    if fine_size > epsilon / RESOLUTION * (1 + 1e-12):
        logger.warning(
            "under-resolved multiscale basis: fine size %.3g exceeds epsilon/%d = %.3g (m=%d)",
            fine_size,
            RESOLUTION,
            epsilon / RESOLUTION,
            m,
        )

    corners = coarse.corners
    chunks = _element_chunks(coarse.n_triangles, len(lattice.triangles))
    with futures.ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(
            pool.map(lambda sl: _solve_chunk(sl.start, corners[sl], lattice, coef, epsilon, quad_order), chunks)
        )
    phi = np.concatenate([p for p, _ in parts])
    stiffness = np.concatenate([s for _, s in parts])
    phi.setflags(write=False)
    stiffness.setflags(write=False)
    logger.info(
        "built multiscale basis: %d elements, m=%d, %d fine dofs per element", coarse.n_triangles, m, lattice.n_vertices
    )
    return MsBasis(coarse, coef, float(epsilon), m, phi, stiffness, quad_order)


def _lattice_loads(basis: MsBasis, f: Scalar, quad_order: int) -> np.ndarray:
    """int_T f Phi_j for every element, shape (ne, 3)."""
    lattice = basis.lattice
    bary, w = triangle_rule(quad_order)
    nl = lattice.n_vertices
    out = np.empty((basis.n_elements, 3))
    for sl in _element_chunks(basis.n_elements, len(lattice.triangles)):
        points = lattice_points(basis.coarse.corners[sl], lattice)
        sub = points[:, lattice.triangles]
        e1 = sub[:, :, 1] - sub[:, :, 0]
        e2 = sub[:, :, 2] - sub[:, :, 0]
        area = 0.5 * np.abs(e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0])
        xq = np.einsum("qa,ksai->ksqi", bary, sub)
        local = np.einsum("ks,q,ksq,qa->ksa", area, w, sample(f, xq), bary)
        k = points.shape[0]
        dofs = lattice.triangles[None] + _offsets(k, nl)[:, :, None]
        load = np.bincount(dofs.ravel(), weights=local.ravel(), minlength=k * nl).reshape(k, nl)
        out[sl] = np.einsum("kn,knj->kj", load, basis.phi[sl])
    return out


def assemble_coarse_system(
    basis: MsBasis,
    f: Optional[Scalar] = None,
    flux: Optional[Scalar] = None,
    flux_tags: TagSelector = "N",
    robin_weight: Optional[Scalar] = None,
    robin_tags: TagSelector = None,
    robin_bounds: Optional[Tuple[float, float]] = None,
    quad_order: Optional[int] = None,
) -> SparseSystem:
    """Coarse MsFEM system: multiscale stiffness plus linear-trace boundary terms."""
    coarse = basis.coarse
    order = basis.quad_order if quad_order is None else quad_order
    matrix = basis.stiffness()
    rhs = np.zeros(coarse.n_vertices)
    if f is not None:
        loads = _lattice_loads(basis, f, order)
        rhs += np.bincount(coarse.triangles.ravel(), weights=loads.ravel(), minlength=coarse.n_vertices)
    if flux is not None:
        rhs += assemble_boundary_load(coarse, flux_tags, flux)
    has_mass = robin_weight is not None
    if has_mass:
        matrix = matrix + assemble_boundary_mass(coarse, robin_tags, robin_weight, robin_bounds)
    return SparseSystem.full(matrix, rhs, has_boundary_mass=has_mass)


def element_values(basis: MsBasis, coarse_values: Sequence[float]) -> np.ndarray:
    """sum_j c_j Phi_j on each element's lattice, shape (ne, nl)."""
    c = np.asarray(coarse_values, dtype=float)
    if c.shape != (basis.coarse.n_vertices,):
        raise MeshError(
            f"coarse coefficients have shape {c.shape}; expected ({basis.coarse.n_vertices},)"
        )
    return np.einsum("knj,kj->kn", basis.phi, c[basis.coarse.triangles])


def downscale(basis: MsBasis, coarse_values: Sequence[float]) -> np.ndarray:
    """Nodal values of sum_j c_j Phi_j on the fine grid of ``basis``."""
    values = element_values(basis, coarse_values)
    out = np.zeros(basis.fine_mesh.n_vertices)
    out[basis.fine_index.ravel()] = values.ravel()
    return out


def trace_jump(basis: MsBasis, coarse_values: Sequence[float]) -> float:
    """Largest disagreement between elements at shared fine vertices."""
    values = element_values(basis, coarse_values)
    idx = basis.fine_index.ravel()
    n = basis.fine_mesh.n_vertices
    high = np.full(n, -np.inf)
    low = np.full(n, np.inf)
    np.maximum.at(high, idx, values.ravel())
    np.minimum.at(low, idx, values.ravel())
    seen = np.isfinite(high)
    return float(np.max(high[seen] - low[seen])) if seen.any() else 0.0


def dump_basis(basis: MsBasis, path: str) -> str:
    """Write the per-element fine nodal values of Phi_1..Phi_3 as JSON."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "msfem-basis",
        "coefficient": basis.coef.describe(),
        "epsilon": basis.epsilon,
        "m": basis.m,
        "elements": [
            {
                "id": e,
                "corners": basis.coarse.corners[e].tolist(),
                "phi": basis.phi[e].T.tolist(),
                "stiffness": basis.element_stiffness[e].tolist(),
            }
            for e in range(basis.n_elements)
        ],
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    return path
