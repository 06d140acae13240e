"""Discrete fields, interpolation, the first-order expansion and error norms."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from .cell import CellSolution, eval_correctors
from .coefficients import CoefficientField, IdentityCoefficient
from .errors import ConfigError, MeshError, MeshMismatchError
from .fem import Scalar, assemble_boundary_mass, element_coefficient, sample
from .mesh import TAGS, Mesh, is_nested, locate
from .multiscale import MsBasis, downscale

logger = logging.getLogger(__name__)

Sampler = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class FeField:
    """P1 field: nodal values on a mesh, piecewise-constant gradient."""

    mesh: Mesh
    values: np.ndarray
    name: str = ""

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float).ravel()
        if values.shape[0] != self.mesh.n_vertices:
            raise MeshError(f"field has {values.shape[0]} values for a mesh with {self.mesh.n_vertices} vertices")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @cached_property
    def gradients(self) -> np.ndarray:
        """Element gradients, shape (nt, 2)."""
        return np.einsum("ta,tai->ti", self.values[self.mesh.triangles], self.mesh.gradients)

    @cached_property
    def vertex_gradients(self) -> np.ndarray:
        """Area-weighted average of the gradients of the elements around each vertex, shape (nv, 2)."""
        mesh = self.mesh
        area = np.abs(mesh.areas)
        idx = mesh.triangles.ravel()
        weight = np.bincount(idx, weights=np.repeat(area, 3), minlength=mesh.n_vertices)
        out = np.empty((mesh.n_vertices, 2))
        for i in range(2):
            out[:, i] = np.bincount(idx, weights=np.repeat(area * self.gradients[:, i], 3), minlength=mesh.n_vertices)
        return out / weight[:, None]

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        elements, bary = locate(self.mesh, points)
        return np.einsum("ka,ka->k", self.values[self.mesh.triangles[elements]], bary)

    def gradient_at(self, points: np.ndarray) -> np.ndarray:
        elements, _ = locate(self.mesh, points)
        return self.gradients[elements]

    def prolongate(self, fine: Mesh) -> "FeField":
        """Exact transfer to a nested refinement."""
        if fine is self.mesh:
            return self
        if not is_nested(self.mesh, fine):
            raise MeshMismatchError("target mesh is not a nested refinement of the field's mesh")
        return FeField(fine, self.evaluate(fine.vertices), self.name)

    def with_values(self, values: np.ndarray, name: Optional[str] = None) -> "FeField":
        return FeField(self.mesh, values, self.name if name is None else name)

    def __add__(self, other: "FeField") -> "FeField":
        a, b = _common(self, other)
        return a.with_values(a.values + b.values)

    def __sub__(self, other: "FeField") -> "FeField":
        a, b = _common(self, other)
        return a.with_values(a.values - b.values)

    def scaled(self, c: float) -> "FeField":
        return self.with_values(c * self.values)


@dataclass(frozen=True)
class AnalyticField:
    """Closed-form function with optional derivatives, all vectorized over (..., 2) points."""

    value: Sampler
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "analytic"


def _sinsin() -> AnalyticField:
    pi = math.pi

    def value(p: np.ndarray) -> np.ndarray:
        return np.sin(pi * p[..., 0]) * np.sin(pi * p[..., 1])

    def gradient(p: np.ndarray) -> np.ndarray:
        sx, sy = np.sin(pi * p[..., 0]), np.sin(pi * p[..., 1])
        cx, cy = np.cos(pi * p[..., 0]), np.cos(pi * p[..., 1])
        return pi * np.stack([cx * sy, sx * cy], axis=-1)

    def hessian(p: np.ndarray) -> np.ndarray:
        sx, sy = np.sin(pi * p[..., 0]), np.sin(pi * p[..., 1])
        cx, cy = np.cos(pi * p[..., 0]), np.cos(pi * p[..., 1])
        h = np.empty(p.shape[:-1] + (2, 2))
        h[..., 0, 0] = -pi * pi * sx * sy
        h[..., 1, 1] = -pi * pi * sx * sy
        h[..., 0, 1] = h[..., 1, 0] = pi * pi * cx * cy
        return h

    return AnalyticField(value, gradient, hessian, "sinsin")


def _coscos() -> AnalyticField:
    pi = math.pi

    def value(p: np.ndarray) -> np.ndarray:
        return np.cos(pi * p[..., 0]) * np.cos(pi * p[..., 1])

    def gradient(p: np.ndarray) -> np.ndarray:
        sx, sy = np.sin(pi * p[..., 0]), np.sin(pi * p[..., 1])
        cx, cy = np.cos(pi * p[..., 0]), np.cos(pi * p[..., 1])
        return -pi * np.stack([sx * cy, cx * sy], axis=-1)

    def hessian(p: np.ndarray) -> np.ndarray:
        sx, sy = np.sin(pi * p[..., 0]), np.sin(pi * p[..., 1])
        cx, cy = np.cos(pi * p[..., 0]), np.cos(pi * p[..., 1])
        h = np.empty(p.shape[:-1] + (2, 2))
        h[..., 0, 0] = -pi * pi * cx * cy
        h[..., 1, 1] = -pi * pi * cx * cy
        h[..., 0, 1] = h[..., 1, 0] = pi * pi * sx * sy
        return h

    return AnalyticField(value, gradient, hessian, "coscos")


def _linear(a: float, b: float, c: float, name: str) -> AnalyticField:
    return AnalyticField(
        lambda p: c + a * p[..., 0] + b * p[..., 1],
        lambda p: np.broadcast_to(np.array([a, b]), p.shape).copy(),
        lambda p: np.zeros(p.shape[:-1] + (2, 2)),
        name,
    )


def analytic_field(name: str) -> AnalyticField:
    """Catalog: ``sinsin``, ``coscos``, ``x``, ``y``, ``one``, ``zero``.

    ``coscos`` is cos(pi x) cos(pi y), which does not vanish on the boundary.
    """
    catalog = {
        "sinsin": _sinsin,
        "coscos": _coscos,
        "x": lambda: _linear(1.0, 0.0, 0.0, "x"),
        "y": lambda: _linear(0.0, 1.0, 0.0, "y"),
        "one": lambda: _linear(0.0, 0.0, 1.0, "one"),
        "zero": lambda: _linear(0.0, 0.0, 0.0, "zero"),
    }
    if name not in catalog:
        raise ConfigError(f"unknown analytic field {name!r}; expected one of {sorted(catalog)}")
    return catalog[name]()


Source = Union[FeField, AnalyticField, Sampler]


def interpolate(u0: Source, coarse: Mesh) -> FeField:
    """Nodal interpolant of u0 on ``coarse``."""
    if isinstance(u0, FeField):
        if u0.mesh is coarse:
            return u0
        return FeField(coarse, u0.evaluate(coarse.vertices), u0.name)
    fn = u0.value if isinstance(u0, AnalyticField) else u0
    name = u0.name if isinstance(u0, AnalyticField) else "interpolant"
    return FeField(coarse, sample(fn, coarse.vertices), name)


def first_order_expansion(
    u0: Union[FeField, AnalyticField], cell: CellSolution, epsilon: float, target: Optional[Mesh] = None
) -> FeField:
    """Nodal values of u0 + eps N_l(x/eps) d_l u0 on ``target`` (default: the mesh of u0)."""
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if isinstance(u0, FeField):
        target = target or u0.mesh
        points = target.vertices
        if target is u0.mesh:
            value = u0.values
            grad = u0.vertex_gradients
        else:
            value = u0.evaluate(points)
            elements, bary = locate(u0.mesh, points)
            grad = np.einsum("ka,kai->ki", bary, u0.vertex_gradients[u0.mesh.triangles[elements]])
    else:
        if target is None:
            raise ConfigError("an analytic u0 needs a target mesh")
        if u0.gradient is None:
            raise ConfigError(f"analytic field {u0.name!r} has no gradient")
        points = target.vertices
        value = sample(u0.value, points)
        grad = u0.gradient(points)
    correctors, _ = eval_correctors(cell, points, epsilon)
    values = value + epsilon * np.einsum("lk,kl->k", correctors, grad)
    return FeField(target, values, "first_order_expansion")


def _same_grid(a: Mesh, b: Mesh) -> bool:
    if a is b:
        return True
    return (
        a.is_structured
        and b.is_structured
        and a.domain == b.domain
        and a.shape == b.shape
        and a.n_vertices == b.n_vertices
    )


def ms_interpolant(basis: MsBasis, u0I: FeField) -> FeField:
    """The element of V_ms whose coarse nodal values are those of u0I."""
    if not _same_grid(u0I.mesh, basis.coarse):
        raise MeshMismatchError("interpolant does not live on the basis' coarse mesh")
    return FeField(basis.fine_mesh, downscale(basis, u0I.values), "ms_interpolant")


def _common(a: FeField, b: FeField) -> Tuple[FeField, FeField]:
    if _same_grid(a.mesh, b.mesh):
        return a, (b if b.mesh is a.mesh else FeField(a.mesh, b.values, b.name))
    if is_nested(a.mesh, b.mesh):
        logger.debug("prolongating %s onto %s", a.mesh.shape, b.mesh.shape)
        return a.prolongate(b.mesh), b
    if is_nested(b.mesh, a.mesh):
        logger.debug("prolongating %s onto %s", b.mesh.shape, a.mesh.shape)
        return a, b.prolongate(a.mesh)
    raise MeshMismatchError("fields do not live on nested meshes of the same domain")


@dataclass(frozen=True)
class NormContext:
    """What error_norms needs besides the two fields."""

    coef: CoefficientField = field(default_factory=IdentityCoefficient)
    epsilon: Optional[float] = None
    alpha: Optional[Scalar] = None
    quad_order: int = 2
    h: Optional[float] = None
    backends: Tuple[str, str] = ("", "")


@dataclass(frozen=True)
class ErrorReport:
    h1_semi: float
    l2: float
    energy: Optional[float]
    boundary_l2: Dict[str, float]
    epsilon: Optional[float]
    h: Optional[float]
    backends: Tuple[str, str]

    def norm(self, name: str) -> float:
        """Look up ``h1``, ``l2``, ``energy`` or ``boundary_<tag>``."""
        if name in ("h1", "h1_semi"):
            return self.h1_semi
        if name == "l2":
            return self.l2
        if name == "energy":
            if self.energy is None:
                raise ConfigError("energy norm needs a Robin weight")
            return self.energy
        if name.startswith("boundary_"):
            tag = name[len("boundary_"):]
            if tag not in self.boundary_l2:
                raise ConfigError(f"no boundary edges tagged {tag!r}")
            return self.boundary_l2[tag]
        raise ConfigError(f"unknown norm {name!r}")

    def as_dict(self) -> Dict[str, object]:
        return {
            "h1_semi": self.h1_semi,
            "l2": self.l2,
            "energy": self.energy,
            "boundary_l2": dict(self.boundary_l2),
            "epsilon": self.epsilon,
            "h": self.h,
            "backends": list(self.backends),
        }


def _sqrt(x: float) -> float:
    return math.sqrt(max(0.0, float(x)))


def error_norms(a: FeField, b: FeField, context: Optional[NormContext] = None) -> ErrorReport:
    """Norms of a - b on the finer of the two (nested) meshes."""
    context = context or NormContext()
    a, b = _common(a, b)
    mesh = a.mesh
    d = a.values - b.values
    area = np.abs(mesh.areas)
    local = d[mesh.triangles]
    # exact P1 mass: |T|/6 (sum d_a^2 + sum_{a<b} d_a d_b)
    cross = local[:, 0] * local[:, 1] + local[:, 1] * local[:, 2] + local[:, 0] * local[:, 2]
    l2 = np.sum(area / 6.0 * (np.sum(local * local, axis=1) + cross))
    grad = np.einsum("ta,tai->ti", local, mesh.gradients)
    h1 = np.sum(area * np.sum(grad * grad, axis=1))

    energy: Optional[float] = None
    if context.alpha is not None:
        abar = element_coefficient(mesh.corners, context.coef, context.epsilon, context.quad_order)
        bulk = np.sum(area * np.einsum("ti,tij,tj->t", grad, abar, grad))
        boundary = d @ (assemble_boundary_mass(mesh, None, context.alpha) @ d)
        energy = _sqrt(bulk + boundary)

    boundary_l2: Dict[str, float] = {}
    for tag in TAGS:
        if mesh.has_tag(tag):
            boundary_l2[tag] = _sqrt(d @ (assemble_boundary_mass(mesh, tag, 1.0) @ d))
    return ErrorReport(
        h1_semi=_sqrt(h1),
        l2=_sqrt(l2),
        energy=energy,
        boundary_l2=boundary_l2,
        epsilon=context.epsilon,
        h=context.h,
        backends=context.backends,
    )
