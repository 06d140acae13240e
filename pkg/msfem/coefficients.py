"""Periodic coefficient fields A(y) on the unit cell.

Every field evaluates to symmetric 2x2 tensors with the ellipticity bounds
kappa1 <= eig(A) <= kappa2. Inputs are arrays of points with a trailing
axis of length 2; outputs add two trailing axes of length 2.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError

TWO_PI = 2.0 * math.pi


def _scalar_tensor(a: np.ndarray) -> np.ndarray:
    return a[..., None, None] * np.eye(2)


class CoefficientField:
    kind: str = "abstract"
    kappa1: float
    kappa2: float

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> str:
        raise NotImplementedError

    def fingerprint(self) -> str:
        return self.describe()

    @property
    def is_constant(self) -> bool:
        return False


@dataclass(frozen=True)
class IdentityCoefficient(CoefficientField):
    kind: str = field(default="identity", init=False)
    kappa1: float = field(default=1.0, init=False)
    kappa2: float = field(default=1.0, init=False)

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.eye(2), y.shape[:-1] + (2, 2)).copy()

    def describe(self) -> str:
        return "identity"

    @property
    def is_constant(self) -> bool:
        return True


class ConstantCoefficient(CoefficientField):
    """A fixed SPD tensor, e.g. the homogenized coefficient."""

    kind = "constant"

    def __init__(self, tensor: Sequence[Sequence[float]]) -> None:
        t = np.array(tensor, dtype=float).reshape(2, 2)
        if abs(t[0, 1] - t[1, 0]) > 1e-12 * max(1.0, float(np.abs(t).max())):
            raise ConfigError(f"constant tensor is not symmetric: {t.tolist()}")
        t = 0.5 * (t + t.T)
        eig = np.linalg.eigvalsh(t)
        if eig[0] <= 0:
            raise ConfigError(f"constant tensor is not positive definite: eigenvalues {eig.tolist()}")
        t.setflags(write=False)
        self.tensor = t
        self.kappa1 = float(eig[0])
        self.kappa2 = float(eig[1])

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(self.tensor, y.shape[:-1] + (2, 2)).copy()

    def describe(self) -> str:
        a = self.tensor
        return f"constant:{a[0, 0]!r},{a[0, 1]!r},{a[1, 1]!r}"

    @property
    def is_constant(self) -> bool:
        return True


@dataclass(frozen=True)
class LayeredCoefficient(CoefficientField):
    """A(y) = (p + q sin 2pi y_axis) I, varying along one axis only."""

    p: float
    q: float
    axis: int = 1
    kind: str = field(default="layered", init=False)

    def __post_init__(self) -> None:
        if self.axis not in (1, 2):
            raise ConfigError(f"layered axis must be 1 or 2, got {self.axis}")
        if self.p <= abs(self.q):
            raise ConfigError(f"layered coefficient needs p > |q|, got p={self.p}, q={self.q}")

    @property
    def kappa1(self) -> float:  # type: ignore[override]
        return self.p - abs(self.q)

    @property
    def kappa2(self) -> float:  # type: ignore[override]
        return self.p + abs(self.q)

    def scalar(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self.p + self.q * np.sin(TWO_PI * y[..., self.axis - 1])

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        return _scalar_tensor(self.scalar(y))

    def homogenized(self) -> np.ndarray:
        """Closed form: harmonic mean across the layers, arithmetic mean along them."""
        across = math.sqrt(self.p ** 2 - self.q ** 2)
        diag = [across, self.p] if self.axis == 1 else [self.p, across]
        return np.diag(diag)

    def describe(self) -> str:
        suffix = "" if self.axis == 1 else f",{self.axis}"
        return f"layered:{self.p!r},{self.q!r}{suffix}"


@dataclass(frozen=True)
class SeparableCoefficient(CoefficientField):
    """a(y) = (p + q sin 2pi y1) / (p + q cos 2pi y2), A = a I."""

    p: float
    q: float
    kind: str = field(default="separable", init=False)

    def __post_init__(self) -> None:
        if self.p <= abs(self.q):
            raise ConfigError(f"separable coefficient needs p > |q|, got p={self.p}, q={self.q}")

    @property
    def kappa1(self) -> float:  # type: ignore[override]
        return (self.p - abs(self.q)) / (self.p + abs(self.q))

    @property
    def kappa2(self) -> float:  # type: ignore[override]
        return (self.p + abs(self.q)) / (self.p - abs(self.q))

    def scalar(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return (self.p + self.q * np.sin(TWO_PI * y[..., 0])) / (self.p + self.q * np.cos(TWO_PI * y[..., 1]))

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        return _scalar_tensor(self.scalar(y))

    def describe(self) -> str:
        return f"separable:{self.p!r},{self.q!r}"


class GridCoefficient(CoefficientField):
    """Bilinear periodic interpolation of N x N samples at y = (i/N, j/N).

    Samples are stored as ``(N, N, 3)`` holding (a11, a12, a22) with the first
    index running over y2 (rows) and the second over y1. Interpolated tensors
    have their eigenvalues clamped to [kappa1, kappa2].
    """

    kind = "grid"

    def __init__(self, samples: np.ndarray, kappa1: float, kappa2: float, source: Optional[str] = None) -> None:
        samples = np.array(samples, dtype=float)
        if samples.ndim != 3 or samples.shape[0] != samples.shape[1] or samples.shape[2] != 3:
            raise ConfigError(f"grid samples must have shape (N, N, 3), got {samples.shape}")
        if not (0 < kappa1 <= kappa2):
            raise ConfigError(f"grid bounds need 0 < kappa1 <= kappa2, got {kappa1}, {kappa2}")
        samples.setflags(write=False)
        self.samples = samples
        self.n = int(samples.shape[0])
        self.kappa1 = float(kappa1)
        self.kappa2 = float(kappa2)
        self.source = source

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        n = self.n
        u = y[..., 0] * n
        v = y[..., 1] * n
        fu = np.floor(u)
        fv = np.floor(v)
        du = (u - fu)[..., None]
        dv = (v - fv)[..., None]
        i0 = np.mod(fu.astype(np.int64), n)
        j0 = np.mod(fv.astype(np.int64), n)
        i1 = (i0 + 1) % n
        j1 = (j0 + 1) % n
        s = self.samples
        comp = (
            (1 - du) * (1 - dv) * s[j0, i0]
            + du * (1 - dv) * s[j0, i1]
            + (1 - du) * dv * s[j1, i0]
            + du * dv * s[j1, i1]
        )
        tensor = np.empty(y.shape[:-1] + (2, 2))
        tensor[..., 0, 0] = comp[..., 0]
        tensor[..., 0, 1] = comp[..., 1]
        tensor[..., 1, 0] = comp[..., 1]
        tensor[..., 1, 1] = comp[..., 2]
        w, vecs = np.linalg.eigh(tensor)
        w = np.clip(w, self.kappa1, self.kappa2)
        return np.einsum("...ik,...k,...jk->...ij", vecs, w, vecs)

    def describe(self) -> str:
        return f"grid:{self.source}" if self.source else "grid:<memory>"

    def fingerprint(self) -> str:
        digest = hashlib.sha256(self.samples.tobytes()).hexdigest()[:16]
        return f"grid:{self.kappa1!r},{self.kappa2!r},{digest}"


def parse_grid_coefficient(text: str, source: Optional[str] = None) -> GridCoefficient:
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not lines or len(lines[0]) != 3:
        raise ConfigError("grid file must start with 'N kappa1 kappa2'")
    try:
        n = int(lines[0][0])
        kappa1, kappa2 = float(lines[0][1]), float(lines[0][2])
        rows = [[float(v) for v in ln] for ln in lines[1:]]
    except ValueError as exc:
        raise ConfigError(f"grid file has a non-numeric entry: {exc}") from exc
    if n < 1 or len(rows) != n * n or any(len(r) != 3 for r in rows):
        raise ConfigError(f"grid file needs {n * n} lines of 'a11 a12 a22', got {len(rows)}")
    return GridCoefficient(np.array(rows).reshape(n, n, 3), kappa1, kappa2, source=source)


def load_grid_coefficient(path: str) -> GridCoefficient:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read grid coefficient {path}: {exc}") from exc
    return parse_grid_coefficient(text, source=path)


def _numbers(text: str, expected: Sequence[int], kind: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{kind} parameters must be numbers: {text!r}") from exc
    if len(values) not in expected:
        raise ConfigError(f"{kind} expects {' or '.join(map(str, expected))} parameters, got {text!r}")
    return values


def parse_coefficient(spec: str) -> CoefficientField:
    """Build a field from an id such as ``identity``, ``layered:2,1.8`` or ``grid:cell.txt``."""
    kind, _, params = spec.strip().partition(":")
    kind = kind.lower()
    if kind == "identity":
        return IdentityCoefficient()
    if kind == "layered":
        vals = _numbers(params, (2, 3), kind)
        return LayeredCoefficient(vals[0], vals[1], int(vals[2]) if len(vals) == 3 else 1)
    if kind == "separable":
        p, q = _numbers(params, (2,), kind)
        return SeparableCoefficient(p, q)
    if kind == "constant":
        a11, a12, a22 = _numbers(params, (3,), kind)
        return ConstantCoefficient([[a11, a12], [a12, a22]])
    if kind == "grid":
        if not params:
            raise ConfigError("grid coefficient needs a file path: grid:<path>")
        return load_grid_coefficient(params)
    raise ConfigError(f"unknown coefficient {spec!r}")


def check_ellipticity(coef: CoefficientField, probes: int = 1000, seed: int = 0, rtol: float = 1e-12) -> None:
    """Probe symmetry and the declared bounds at random points; raise ConfigError on violation."""
    rng = np.random.default_rng(seed)
    y = rng.uniform(-1.0, 2.0, size=(probes, 2))
    xi = rng.normal(size=(probes, 2))
    a = coef.evaluate(y)
    scale = max(1.0, coef.kappa2)
    if np.max(np.abs(a - np.swapaxes(a, -1, -2))) > rtol * scale:
        raise ConfigError(f"{coef.describe()} is not symmetric")
    quad = np.einsum("ki,kij,kj->k", xi, a, xi)
    norm2 = np.sum(xi * xi, axis=1)
    if np.any(quad < coef.kappa1 * norm2 * (1 - 1e-10)) or np.any(quad > coef.kappa2 * norm2 * (1 + 1e-10)):
        raise ConfigError(f"{coef.describe()} violates its ellipticity bounds [{coef.kappa1}, {coef.kappa2}]")
