from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Any, Dict, List, Optional, Union

import yaml

from .coefficients import CoefficientField, parse_coefficient
from .errors import ConfigError
from .mesh import BoundaryTagging, Rectangle
from .problems import (
    PROBLEM_KINDS,
    ProblemSpec,
    Resolution,
    RobinWeight,
    boundary_law,
    make_sampler,
)

CACHE_ENV = "MSFEM_CACHE_DIR"
COMPARISONS = ("msfem_vs_fine", "homog_vs_msfem", "expansion_vs_fine", "homog_vs_fine")
PER_EPSILON = ("expansion_vs_fine", "homog_vs_fine")
BASE_NORMS = ("h1", "l2", "energy", "boundary_D", "boundary_N", "boundary_C")
DEFAULT_NAMES = ("msfem.yml", "msfem.yaml", "msfem.json")

Number = Union[int, float, str]


def parse_rational(value: Number) -> float:
    """Accept numbers or strings such as ``"1/64"`` and ``"0.125"``."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse {value!r} as a number or fraction") from exc


@dataclass
class StudyConfig:
    problem: str = "mixed"
    domain: List[float] = None  # type: ignore[assignment]
    tagging: Dict[str, str] = None  # type: ignore[assignment]
    coefficient: str = "layered:2,1.8"
    source: Any = "one"
    flux: Any = 0
    robin: Dict[str, Any] = None  # type: ignore[assignment]
    beta: Dict[str, Any] = None  # type: ignore[assignment]
    epsilons: List[Number] = None  # type: ignore[assignment]
    coarse: List[int] = None  # type: ignore[assignment]
    fine_ratio: Number = "1/16"
    cell_n: Optional[int] = None
    quad_order: int = 2
    norms: List[str] = None  # type: ignore[assignment]
    comparisons: List[str] = None  # type: ignore[assignment]
    tol: float = 1e-12
    fixed_point_tol: float = 1e-10
    max_iter: int = 200
    solver: str = "cg"
    workers: int = 1
    seed: int = 0
    cache_dir: Optional[str] = None
    out_dir: str = "msfem-out"

    @property
    def epsilon_values(self) -> List[float]:
        return [parse_rational(e) for e in self.epsilons]

    @property
    def fine_ratio_value(self) -> float:
        return parse_rational(self.fine_ratio)

    @property
    def cell_resolution(self) -> int:
        """Cell mesh subdivisions; by default aligned with the fine grid (1 / fine_ratio cells per period)."""
        if self.cell_n is not None:
            return int(self.cell_n)
        return max(8, int(round(1.0 / self.fine_ratio_value)))

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _default_tagging(problem: str) -> Dict[str, str]:
    if problem == "hemivariational":
        return {"bottom": "N", "right": "C", "top": "N", "left": "D"}
    if problem == "robin":
        return {"all": "N"}
    return {"all": "D"}


def _default_norms(problem: str) -> List[str]:
    norms = ["h1", "l2"]
    if problem == "robin":
        norms.append("energy")
    if problem == "hemivariational":
        norms.append("boundary_C")
    return norms


def apply_defaults(cfg: StudyConfig) -> StudyConfig:
    if cfg.domain is None:
        cfg.domain = [0.0, 0.0, 1.0, 1.0]
    if cfg.tagging is None:
        cfg.tagging = _default_tagging(cfg.problem)
    if cfg.robin is None:
        cfg.robin = {"value": 1.0, "bounds": [1.0, 1.0]}
    if cfg.beta is None:
        cfg.beta = {"kind": "zero", "scale": 1.0}
    if cfg.epsilons is None:
        cfg.epsilons = ["1/16", "1/32", "1/64"]
    if cfg.coarse is None:
        cfg.coarse = [4, 8, 16]
    if cfg.norms is None:
        cfg.norms = _default_norms(cfg.problem)
    if cfg.comparisons is None:
        cfg.comparisons = list(COMPARISONS)
    if cfg.cache_dir is None:
        cfg.cache_dir = os.environ.get(CACHE_ENV) or None
    return cfg


def validate(cfg: StudyConfig) -> StudyConfig:
    if cfg.problem not in PROBLEM_KINDS:
        raise ConfigError(f"problem must be one of {PROBLEM_KINDS}, got {cfg.problem!r}")
    if not cfg.epsilons:
        raise ConfigError("epsilons must be a nonempty list")
    if not cfg.coarse:
        raise ConfigError("coarse must be a nonempty list")
    if any(e <= 0 for e in cfg.epsilon_values):
        raise ConfigError(f"epsilons must be positive, got {cfg.epsilons}")
    if any(int(n) != n or n < 1 for n in cfg.coarse):
        raise ConfigError(f"coarse sizes must be positive integers, got {cfg.coarse}")
    ratio = cfg.fine_ratio_value
    if not 0 < ratio <= 0.125:
        raise ConfigError(f"fine_ratio must lie in (0, 1/8], got {cfg.fine_ratio}")
    if cfg.cell_resolution < 8:
        raise ConfigError(f"cell_n must be >= 8, got {cfg.cell_n}")
    if cfg.quad_order not in (1, 2, 3, 4):
        raise ConfigError(f"quad_order must be 1..4, got {cfg.quad_order}")
    unknown = [c for c in cfg.comparisons if c not in COMPARISONS]
    if unknown:
        raise ConfigError(f"unknown comparisons {unknown}; expected a subset of {COMPARISONS}")
    bad = [n for n in cfg.norms if n not in BASE_NORMS]
    if bad:
        raise ConfigError(f"unknown norms {bad}; expected a subset of {BASE_NORMS}")
    if "energy" in cfg.norms and cfg.problem != "robin":
        raise ConfigError("the energy norm is defined for Robin problems only")
    if cfg.solver not in ("cg", "direct"):
        raise ConfigError(f"solver must be cg or direct, got {cfg.solver!r}")
    if cfg.workers < 1 or cfg.max_iter < 1:
        raise ConfigError("workers and max_iter must be >= 1")
    if not (cfg.tol > 0 and cfg.fixed_point_tol > 0):
        raise ConfigError("tolerances must be positive")
    Rectangle.from_sequence(cfg.domain)
    BoundaryTagging.from_mapping(cfg.tagging)
    coefficient(cfg)
    problem_spec(cfg, cfg.epsilon_values[0])
    return cfg


def config_from_dict(data: Dict[str, Any]) -> StudyConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    known = {f.name for f in fields(StudyConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {unknown}")
    return validate(apply_defaults(StudyConfig(**data)))


def load_config_file(path: str) -> StudyConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) if path.endswith((".yaml", ".yml")) else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(data or {})


def try_load_default(path: str) -> Optional[StudyConfig]:
    for name in DEFAULT_NAMES:
        p = os.path.join(path, name)
        if os.path.exists(p):
            return load_config_file(p)
    return None


def coefficient(cfg: StudyConfig) -> CoefficientField:
    return parse_coefficient(cfg.coefficient)


def robin_weight(cfg: StudyConfig) -> RobinWeight:
    data = cfg.robin
    value = data.get("value", 1.0)
    bounds = data.get("bounds")
    sampler = make_sampler(value)
    if bounds is None:
        if sampler is None or callable(sampler):
            raise ConfigError("a non-constant Robin weight needs explicit bounds [alpha1, alpha2]")
        bounds = [sampler, sampler]
    if sampler is None:
        raise ConfigError("the Robin weight must be positive")
    return RobinWeight(sampler, (parse_rational(bounds[0]), parse_rational(bounds[1])))


def problem_spec(cfg: StudyConfig, epsilon: float, coef: Optional[CoefficientField] = None) -> ProblemSpec:
    return ProblemSpec(
        kind=cfg.problem,
        domain=Rectangle.from_sequence(cfg.domain),
        tagging=BoundaryTagging.from_mapping(cfg.tagging),
        f=make_sampler(cfg.source),
        g=make_sampler(cfg.flux),
        alpha=robin_weight(cfg) if cfg.problem == "robin" else None,
        beta=boundary_law(str(cfg.beta.get("kind", "zero")), parse_rational(cfg.beta.get("scale", 1.0))),
        epsilon=epsilon,
        coefficient=coef or coefficient(cfg),
    )


def resolution(cfg: StudyConfig, coarse_n: int, fine_n: Optional[int] = None) -> Resolution:
    return Resolution(
        coarse_n=int(coarse_n),
        fine_ratio=cfg.fine_ratio_value,
        fine_n=fine_n,
        quad_order=cfg.quad_order,
        solver=cfg.solver,
        tol=cfg.tol,
        workers=1,
    )
