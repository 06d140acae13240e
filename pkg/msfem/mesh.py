"""Structured triangulations, boundary tagging and nested element submeshes.

Meshes are immutable: every array is stored read-only and derived
geometry (areas, gradients, regularity) is computed once on first use.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, MeshError

logger = logging.getLogger(__name__)

TAGS = ("D", "N", "C")
SIDES = ("bottom", "right", "top", "left")
RHO_MIN = 0.1
MESH_HEADER = "msfem-mesh v1"

TagSelector = Union[None, str, Iterable[str]]


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Rectangle:
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0

    def __post_init__(self) -> None:
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise MeshError(f"degenerate rectangle [{self.x0}, {self.x1}] x [{self.y0}, {self.y1}]")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "Rectangle":
        if len(values) != 4:
            raise ConfigError(f"domain needs 4 numbers [x0, y0, x1, y1], got {list(values)}")
        return cls(*(float(v) for v in values))

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def side(self) -> float:
        return max(self.width, self.height)

    def as_list(self) -> List[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class BoundaryTagging:
    """One tag per side of the rectangle: D (Dirichlet), N (Neumann) or C (contact)."""

    bottom: str = "D"
    right: str = "D"
    top: str = "D"
    left: str = "D"

    def __post_init__(self) -> None:
        for side in SIDES:
            tag = getattr(self, side)
            if tag not in TAGS:
                raise ConfigError(f"side {side!r} has tag {tag!r}; expected one of {TAGS}")

    @classmethod
    def uniform(cls, tag: str) -> "BoundaryTagging":
        return cls(tag, tag, tag, tag)

    @classmethod
    def from_mapping(cls, data: Mapping[str, str]) -> "BoundaryTagging":
        unknown = set(data) - set(SIDES) - {"all"}
        if unknown:
            raise ConfigError(f"unknown boundary sides: {sorted(unknown)}")
        base = data.get("all", "D")
        return cls(**{side: str(data.get(side, base)).upper() for side in SIDES})

    def tag(self, side: str) -> str:
        return getattr(self, side)

    def sides_with(self, tag: str) -> List[str]:
        return [s for s in SIDES if self.tag(s) == tag]

    def has(self, tag: str) -> bool:
        return bool(self.sides_with(tag))

    def as_dict(self) -> Dict[str, str]:
        return {side: self.tag(side) for side in SIDES}


def _triangle_shape(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (signed area, diameter, circumradius, inradius) for (k, 3, 2) corner arrays."""
    p0, p1, p2 = points[:, 0], points[:, 1], points[:, 2]
    e1 = p1 - p0
    e2 = p2 - p0
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    a = np.linalg.norm(p1 - p2, axis=1)
    b = np.linalg.norm(p2 - p0, axis=1)
    c = np.linalg.norm(p0 - p1, axis=1)
    diameter = np.maximum(np.maximum(a, b), c)
    abs_area = np.abs(area)
    with np.errstate(divide="ignore", invalid="ignore"):
        circumradius = np.where(abs_area > 0, a * b * c / (4.0 * abs_area), np.inf)
        inradius = 2.0 * abs_area / (a + b + c)
    return area, diameter, circumradius, inradius


@dataclass(frozen=True, eq=False)
class Mesh:
    """P1 triangulation.

    ``shape`` and ``domain`` are set for structured meshes of a rectangle;
    they enable point location and nested transfer between meshes.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: Tuple[str, ...]
    domain: Optional[Rectangle] = None
    shape: Optional[Tuple[int, int]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertices", _frozen(np.reshape(self.vertices, (-1, 2)), float))
        object.__setattr__(self, "triangles", _frozen(np.reshape(self.triangles, (-1, 3)), np.int64))
        object.__setattr__(self, "boundary_edges", _frozen(np.reshape(self.boundary_edges, (-1, 2)), np.int64))
        object.__setattr__(self, "boundary_tags", tuple(self.boundary_tags))
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise MeshError("every boundary edge needs exactly one tag")

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def is_structured(self) -> bool:
        return self.shape is not None and self.domain is not None

    @cached_property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @cached_property
    def _shape(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return _triangle_shape(self.corners)

    @property
    def areas(self) -> np.ndarray:
        return self._shape[0]

    @cached_property
    def gradients(self) -> np.ndarray:
        """Gradients of the three barycentric coordinates per element, shape (nt, 3, 2)."""
        return barycentric_gradients(self.corners)

    @property
    def h_max(self) -> float:
        return float(np.max(self._shape[1]))

    @property
    def rho(self) -> float:
        return float(np.min(self._shape[3] / self._shape[2]))

    @property
    def cell_size(self) -> float:
        """Side of a grid cell for structured meshes, the longest edge otherwise."""
        if not self.is_structured:
            return self.h_max
        nx, ny = self.shape  # type: ignore[misc]
        return max(self.domain.width / nx, self.domain.height / ny)  # type: ignore[union-attr]

    @cached_property
    def edges(self) -> np.ndarray:
        pairs = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.unique(np.sort(pairs, axis=1), axis=0)

    def edges_with(self, tags: TagSelector = None) -> np.ndarray:
        mask = self.tag_mask(tags)
        return self.boundary_edges[mask]

    def tag_mask(self, tags: TagSelector = None) -> np.ndarray:
        if tags is None:
            return np.ones(len(self.boundary_tags), dtype=bool)
        wanted = {tags} if isinstance(tags, str) else set(tags)
        return np.array([t in wanted for t in self.boundary_tags], dtype=bool)

    def has_tag(self, tag: str) -> bool:
        return tag in self.boundary_tags

    def boundary_vertices(self, tags: TagSelector = None) -> np.ndarray:
        return np.unique(self.edges_with(tags))

    def boundary_length(self, tags: TagSelector = None) -> float:
        edges = self.edges_with(tags)
        if len(edges) == 0:
            return 0.0
        diff = self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]]
        return float(np.sum(np.linalg.norm(diff, axis=1)))

    def to_text(self) -> str:
        lines = [MESH_HEADER]
        lines.extend(f"v {x!r} {y!r}" for x, y in self.vertices.tolist())
        lines.extend(f"t {i} {j} {k}" for i, j, k in self.triangles.tolist())
        lines.extend(f"b {i} {j} {tag}" for (i, j), tag in zip(self.boundary_edges.tolist(), self.boundary_tags))
        return "\n".join(lines) + "\n"


def barycentric_gradients(corners: np.ndarray) -> np.ndarray:
    """Constant gradients of the P1 hat functions on each triangle, shape (k, 3, 2)."""
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    g1 = np.stack([e2[:, 1], -e2[:, 0]], axis=1) / det[:, None]
    g2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1) / det[:, None]
    g0 = -(g1 + g2)
    return np.stack([g0, g1, g2], axis=1)


def build_structured_mesh(domain: Rectangle, n: int, tagging: Optional[BoundaryTagging] = None) -> Mesh:
    """Split ``domain`` into n x n cells, each cut along its bottom-left to top-right diagonal.

    Vertices are numbered row-major (x fastest); cell (i, j) owns elements
    2(jn+i) (below the diagonal) and 2(jn+i)+1 (above it).
    """
    if int(n) != n or n < 1:
        raise ConfigError(f"n must be a positive integer, got {n}")
    n = int(n)
    tagging = tagging or BoundaryTagging()
    ks = np.arange(n + 1)
    xs = domain.x0 + domain.width * (ks / n)
    ys = domain.y0 + domain.height * (ks / n)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)

    top_row = n * (n + 1)
    sides = {
        "bottom": [(k, k + 1) for k in range(n)],
        "right": [(k * (n + 1) + n, (k + 1) * (n + 1) + n) for k in range(n)],
        "top": [(top_row + k + 1, top_row + k) for k in reversed(range(n))],
        "left": [((k + 1) * (n + 1), k * (n + 1)) for k in reversed(range(n))],
    }
    edges: List[Tuple[int, int]] = []
    tags: List[str] = []
    for side in SIDES:
        edges.extend(sides[side])
        tags.extend([tagging.tag(side)] * n)
    return Mesh(vertices, triangles, np.array(edges), tuple(tags), domain=domain, shape=(n, n))


def tagging_of(mesh: Mesh) -> BoundaryTagging:
    """Recover the per-side tagging of a structured mesh."""
    if not mesh.is_structured:
        raise MeshError("side tagging is only defined for structured meshes")
    n = mesh.shape[0]  # type: ignore[index]
    tags = mesh.boundary_tags
    return BoundaryTagging(*(tags[k * n] for k in range(len(SIDES))))


def refine(mesh: Mesh, factor: int) -> Mesh:
    """Structured mesh with ``factor`` times as many cells per side, nested in ``mesh``."""
    if not mesh.is_structured:
        raise MeshError("only structured meshes can be refined")
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"refinement factor must be a positive integer, got {factor}")
    return build_structured_mesh(mesh.domain, mesh.shape[0] * int(factor), tagging_of(mesh))  # type: ignore[arg-type,index]


@dataclass(frozen=True)
class Lattice:
    """Uniform refinement of the reference triangle into m**2 sub-triangles."""

    m: int
    ij: np.ndarray
    triangles: np.ndarray
    trace: np.ndarray
    interior: np.ndarray

    @property
    def n_vertices(self) -> int:
        return int(self.ij.shape[0])

    @property
    def bary(self) -> np.ndarray:
        s = self.ij[:, 0] / self.m
        t = self.ij[:, 1] / self.m
        return np.stack([1.0 - s - t, s, t], axis=1)


@lru_cache(maxsize=32)
def reference_lattice(m: int) -> Lattice:
    if m < 2:
        raise ConfigError(f"fine subdivisions m must be >= 2, got {m}")

    def index(i: np.ndarray, j: np.ndarray) -> np.ndarray:
        return j * (m + 1) - j * (j - 1) // 2 + i

    def rows(width: int) -> Tuple[np.ndarray, np.ndarray]:
        # (i, j) with 0 <= i < width - j, row by row
        counts = np.maximum(width - np.arange(m + 1), 0)
        j = np.repeat(np.arange(m + 1), counts)
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return np.arange(j.size) - np.repeat(start, counts), j

    i, j = rows(m + 1)
    ij = np.stack([i, j], axis=1)
    ui, uj = rows(m)
    di, dj = rows(m - 1)
    up = np.stack([index(ui, uj), index(ui + 1, uj), index(ui, uj + 1)], axis=1)
    down = np.stack([index(di + 1, dj), index(di + 1, dj + 1), index(di, dj + 1)], axis=1)
    k = np.arange(m)
    trace = np.concatenate([index(k, 0 * k), index(m - k, k), index(0 * k, m - k)])
    on_trace = np.zeros(len(ij), dtype=bool)
    on_trace[trace] = True
    return Lattice(
        m=m,
        ij=_frozen(ij, np.int64),
        triangles=_frozen(np.concatenate([up, down]), np.int64),
        trace=_frozen(trace, np.int64),
        interior=_frozen(np.flatnonzero(~on_trace), np.int64),
    )


def lattice_points(corners: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Lattice vertices for (k, 3, 2) corner arrays, shape (k, nl, 2)."""
    s = (lattice.ij[:, 0] / lattice.m)[None, :, None]
    t = (lattice.ij[:, 1] / lattice.m)[None, :, None]
    p0 = corners[:, None, 0]
    return p0 + s * (corners[:, None, 1] - p0) + t * (corners[:, None, 2] - p0)


@dataclass(frozen=True, eq=False)
class SubMesh:
    parent_element: int
    mesh: Mesh
    trace_dofs: np.ndarray
    trace_bary: np.ndarray
    bary: np.ndarray


def build_fine_submesh(mesh: Mesh, element: int, m: int) -> SubMesh:
    if not 0 <= element < mesh.n_triangles:
        raise ConfigError(f"element {element} out of range (mesh has {mesh.n_triangles})")
    lattice = reference_lattice(int(m))
    corners = mesh.corners[element][None]
    points = lattice_points(corners, lattice)[0]
    trace = lattice.trace
    edges = np.stack([trace, np.roll(trace, -1)], axis=1)
    sub = Mesh(points, lattice.triangles, edges, ("D",) * len(edges))
    bary = lattice.bary
    return SubMesh(
        parent_element=int(element),
        mesh=sub,
        trace_dofs=trace,
        trace_bary=_frozen(bary[trace], float),
        bary=_frozen(bary, float),
    )


@dataclass(frozen=True)
class RegularityReport:
    rho: float
    h_max: float
    ratios: np.ndarray
    flagged: Tuple[int, ...]
    rho_min: float


def regularity_report(mesh: Mesh, rho_min: float = RHO_MIN) -> RegularityReport:
    area, diameter, circumradius, inradius = mesh._shape
    scale = np.maximum(diameter, np.finfo(float).tiny) ** 2
    degenerate = np.flatnonzero(np.abs(area) <= 1e-14 * scale)
    if degenerate.size:
        elem = int(degenerate[0])
        raise MeshError(f"element {elem} has zero area", element=elem)
    ratios = inradius / circumradius
    flagged = tuple(int(e) for e in np.flatnonzero(ratios < rho_min))
    if flagged:
        logger.warning("%d element(s) below rho_min=%g (first: %d)", len(flagged), rho_min, flagged[0])
    return RegularityReport(
        rho=float(np.min(ratios)),
        h_max=float(np.max(diameter)),
        ratios=_frozen(ratios, float),
        flagged=flagged,
        rho_min=rho_min,
    )


def validate_mesh(mesh: Mesh) -> None:
    """Check orientation, edge ownership and tag coverage; raise MeshError on violation."""
    bad = np.flatnonzero(mesh.areas <= 0)
    if bad.size:
        raise MeshError(f"element {int(bad[0])} is not counterclockwise", element=int(bad[0]))
    pairs = np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [2, 0]]])
    keys, counts = np.unique(np.sort(pairs, axis=1), axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("an edge is shared by more than two triangles")
    single = {tuple(k) for k in keys[counts == 1].tolist()}
    tagged = {tuple(sorted(e)) for e in mesh.boundary_edges.tolist()}
    if single != tagged or len(tagged) != len(mesh.boundary_edges):
        raise MeshError("boundary edges and tags do not cover the boundary exactly once")
    if any(t not in TAGS for t in mesh.boundary_tags):
        raise MeshError(f"boundary tags must be in {TAGS}")


def locate(mesh: Mesh, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Element ids and barycentric weights for points of a structured mesh.

    Points on shared edges resolve to the lower element of the lower-left cell.
    """
    if not mesh.is_structured:
        raise MeshError("point location needs a structured mesh")
    pts = np.reshape(np.asarray(points, dtype=float), (-1, 2))
    nx, ny = mesh.shape  # type: ignore[misc]
    d = mesh.domain
    s = (pts[:, 0] - d.x0) / d.width * nx  # type: ignore[union-attr]
    t = (pts[:, 1] - d.y0) / d.height * ny  # type: ignore[union-attr]
    i = np.clip(np.floor(s).astype(np.int64), 0, nx - 1)
    j = np.clip(np.floor(t).astype(np.int64), 0, ny - 1)
    fs = np.clip(s - i, 0.0, 1.0)
    ft = np.clip(t - j, 0.0, 1.0)
    lower = fs >= ft
    elements = 2 * (j * nx + i) + (~lower).astype(np.int64)
    bary = np.where(
        lower[:, None],
        np.stack([1.0 - fs, fs - ft, ft], axis=1),
        np.stack([1.0 - ft, fs, ft - fs], axis=1),
    )
    return elements, bary


def grid_indices(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Vertex ids of a structured mesh for points that are (up to rounding) grid vertices."""
    if not mesh.is_structured:
        raise MeshError("grid lookup needs a structured mesh")
    pts = np.reshape(np.asarray(points, dtype=float), (-1, 2))
    nx, ny = mesh.shape  # type: ignore[misc]
    d = mesh.domain
    ix = np.rint((pts[:, 0] - d.x0) / d.width * nx).astype(np.int64)  # type: ignore[union-attr]
    iy = np.rint((pts[:, 1] - d.y0) / d.height * ny).astype(np.int64)  # type: ignore[union-attr]
    if ix.min(initial=0) < 0 or iy.min(initial=0) < 0 or ix.max(initial=0) > nx or iy.max(initial=0) > ny:
        raise MeshError("points fall outside the structured grid")
    return iy * (nx + 1) + ix


def is_nested(coarse: Mesh, fine: Mesh) -> bool:
    if not (coarse.is_structured and fine.is_structured):
        return False
    if coarse.domain != fine.domain:
        return False
    (cx, cy), (fx, fy) = coarse.shape, fine.shape  # type: ignore[misc]
    return fx % cx == 0 and fy % cy == 0


def dump_mesh(mesh: Mesh, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(mesh.to_text())
    return path


def parse_mesh(text: str) -> Mesh:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MESH_HEADER:
        raise MeshError(f"missing header {MESH_HEADER!r}")
    verts: List[Tuple[float, float]] = []
    tris: List[Tuple[int, int, int]] = []
    edges: List[Tuple[int, int]] = []
    tags: List[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        try:
            if parts[0] == "v":
                verts.append((float(parts[1]), float(parts[2])))
            elif parts[0] == "t":
                tris.append((int(parts[1]), int(parts[2]), int(parts[3])))
            elif parts[0] == "b":
                edges.append((int(parts[1]), int(parts[2])))
                tags.append(parts[3])
            else:
                raise ValueError(parts[0])
        except (IndexError, ValueError) as exc:
            raise MeshError(f"line {lineno}: cannot parse {line!r}") from exc
    mesh = Mesh(np.array(verts), np.array(tris), np.array(edges), tuple(tags))
    validate_mesh(mesh)
    return mesh


def load_mesh(path: str) -> Mesh:
    with open(path, "r", encoding="utf-8") as f:
        return parse_mesh(f.read())
