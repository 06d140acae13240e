import math

import numpy as np
import pytest

from msfem.cell import solve_cell_problems
from msfem.coefficients import IdentityCoefficient, LayeredCoefficient
from msfem.errors import ConfigError, InfeasibleError
from msfem.expansion import error_norms
from msfem.fem import (
    SparseSystem,
    apply_dirichlet,
    assemble_boundary_load,
    assemble_boundary_mass,
    assemble_load,
    assemble_stiffness,
    solve_spd,
)
from msfem.mesh import BoundaryTagging, Rectangle, build_structured_mesh
from msfem.problems import (
    ProblemSpec,
    Resolution,
    RobinWeight,
    boundary_law,
    check_hemi_feasibility,
    make_sampler,
    normalize_backend,
    solve_hemivariational,
    solve_mixed,
    solve_problem,
    solve_robin,
    trace_constant,
)

UNIT = Rectangle()
CONTACT = BoundaryTagging.from_mapping({"left": "D", "right": "C", "top": "N", "bottom": "N"})


def _spec(kind: str, coef=None, **kwargs) -> ProblemSpec:
    defaults = {
        "mixed": {"tagging": BoundaryTagging.from_mapping({"all": "D", "top": "N"}), "g": 0.5},
        "robin": {"tagging": BoundaryTagging.uniform("N"), "alpha": RobinWeight.constant(2.0), "g": 1.0},
        "hemivariational": {"tagging": CONTACT, "g": 0.5, "beta": boundary_law("nonmonotone")},
    }[kind]
    defaults = {"epsilon": 0.25, **defaults}
    defaults.update(kwargs)
    return ProblemSpec(kind=kind, f=1.0, coefficient=coef or IdentityCoefficient(), **defaults)


@pytest.mark.parametrize("kind", ["mixed", "robin", "hemivariational"])
def test_identity_msfem_equals_coarse_p1(kind: str) -> None:
    spec = _spec(kind)
    res = Resolution(coarse_n=4, fine_ratio=1.0 / 8)
    cell = solve_cell_problems(IdentityCoefficient(), 8)
    ms = solve_problem(spec, "msfem", res)
    p1 = solve_problem(spec, "homogenized", res, cell=cell)
    report = error_norms(ms.field, p1.field)
    assert report.h1_semi < 1e-9
    assert np.allclose(ms.coarse_field.values, p1.field.values, atol=1e-9)


def test_fine_backend_solves_poisson() -> None:
    spec = ProblemSpec(kind="mixed", f=make_sampler("sinsin"), epsilon=1.0)
    result = solve_mixed(spec, "fine", Resolution(coarse_n=4, fine_n=32))
    x, y = result.field.mesh.vertices.T
    exact = np.sin(math.pi * x) * np.sin(math.pi * y)
    assert np.max(np.abs(result.field.values - exact)) < 5e-3
    assert result.warnings == []


def test_zero_law_reduces_to_mixed_problem() -> None:
    res = Resolution(coarse_n=4, fine_n=16)
    hemi = solve_hemivariational(_spec("hemivariational", beta=boundary_law("zero")), "fine", res)
    mixed = solve_mixed(_spec("mixed", tagging=CONTACT), "fine", res)
    assert hemi.iterations == 1
    assert np.max(np.abs(hemi.field.values - mixed.field.values)) < 1e-12


def test_linear_law_matches_direct_robin_type_solve() -> None:
    scale = 0.3
    res = Resolution(coarse_n=4, fine_n=16, solver="direct")
    result = solve_hemivariational(_spec("hemivariational", beta=boundary_law("linear", scale)), "fine", res, tol=1e-12)

    mesh = build_structured_mesh(UNIT, 16, CONTACT)
    matrix = assemble_stiffness(mesh, IdentityCoefficient()) + assemble_boundary_mass(mesh, "C", scale)
    load = assemble_load(mesh, 1.0) + assemble_boundary_load(mesh, "N", 0.5)
    system = apply_dirichlet(SparseSystem.full(matrix, load, has_boundary_mass=True), mesh, "D")
    direct = system.expand(solve_spd(system, method="direct"))
    assert np.max(np.abs(result.field.values - direct)) < 1e-8
    assert all(r <= result.feasibility.contraction_bound + 1e-4 for r in result.ratios)


def test_nonmonotone_law_contracts() -> None:
    spec = _spec("hemivariational", coef=LayeredCoefficient(2.0, 1.0), beta=boundary_law("nonmonotone", 2.0))
    result = solve_hemivariational(spec, "fine", Resolution(coarse_n=4, fine_n=32))
    feas = result.feasibility
    assert feas.feasible
    assert feas.contraction_bound < 1.0
    assert result.iterations >= 2
    assert all(r <= feas.contraction_bound + 0.05 for r in result.ratios)
    assert result.increments[-1] < result.increments[0]


def test_fixed_point_increments_decay_geometrically() -> None:
    spec = _spec("hemivariational", coef=LayeredCoefficient(2.0, 1.0), beta=boundary_law("nonmonotone", 2.0))
    result = solve_hemivariational(spec, "fine", Resolution(coarse_n=4, fine_n=32, solver="direct"), tol=1e-10)
    bound = result.feasibility.contraction_bound
    increments = result.increments
    assert len(increments) >= 3
    assert all(later < earlier for earlier, later in zip(increments[1:], increments[2:]))
    for k, inc in enumerate(increments):
        assert inc <= bound ** k * increments[0] * (1 + 1e-9)


def test_fixed_point_stops_on_an_absolute_increment() -> None:
    spec = ProblemSpec(kind="hemivariational", tagging=CONTACT, f=200.0, g=0.5, beta=boundary_law("nonmonotone", 2.0))
    result = solve_hemivariational(spec, "fine", Resolution(coarse_n=4, fine_n=16, solver="direct"), tol=1e-6)
    assert result.increments[-1] <= 1e-6
    assert all(inc > 1e-6 for inc in result.increments[:-1])
    assert np.max(np.abs(result.field.values)) > 1.0


def test_infeasible_law_is_rejected_before_solving() -> None:
    spec = _spec("hemivariational", beta=boundary_law("linear", 50.0))
    with pytest.raises(InfeasibleError):
        solve_hemivariational(spec, "fine", Resolution(coarse_n=4, fine_n=8))


def test_trace_constant_and_feasibility_metadata() -> None:
    mesh = build_structured_mesh(UNIT, 8, CONTACT)
    c2, iterations = trace_constant(mesh)
    # u = x has |u|_1 = 1 and unit trace on the right side
    assert c2 >= 1.0 - 1e-6
    assert iterations >= 1
    feas = check_hemi_feasibility(_spec("hemivariational"), mesh)
    assert math.isclose(feas.c_j, math.sqrt(c2))
    assert math.isclose(feas.c0, 0.1 * math.sqrt(mesh.boundary_length("C")))
    assert feas.c1 == 0.0


def test_trace_constant_self_converges() -> None:
    values = [trace_constant(build_structured_mesh(UNIT, n, CONTACT))[0] for n in (8, 16, 32)]
    assert all(v >= 1.0 - 1e-6 for v in values)
    assert abs(values[2] - values[1]) <= abs(values[1] - values[0]) + 1e-9
    assert max(values) - min(values) < 1e-3


def test_problem_validation() -> None:
    with pytest.raises(ConfigError):
        ProblemSpec(kind="robin")
    with pytest.raises(ConfigError):
        ProblemSpec(kind="mixed", tagging=BoundaryTagging.uniform("N"))
    with pytest.raises(ConfigError):
        ProblemSpec(kind="hemivariational")
    with pytest.raises(ConfigError):
        ProblemSpec(kind="mixed", epsilon=0.0)
    with pytest.raises(ConfigError):
        RobinWeight(3.0, (1.0, 2.0))
    with pytest.raises(ConfigError):
        solve_robin(_spec("mixed"))


def test_homogenized_backend_needs_cell() -> None:
    with pytest.raises(ConfigError):
        solve_problem(_spec("mixed"), "homogenized", Resolution(coarse_n=4))


def test_samplers_and_backend_names() -> None:
    p = np.array([[0.5, 0.25]])
    assert make_sampler(0) is None
    assert make_sampler("one") == 1.0
    assert make_sampler("x")(p)[0] == 0.5
    assert math.isclose(make_sampler("sinsin")(p)[0], 2 * math.pi ** 2 * math.sin(math.pi / 4))
    assert normalize_backend("homog") == "homogenized"
    assert normalize_backend("ms") == "msfem"
    with pytest.raises(ConfigError):
        make_sampler("cosh")
    with pytest.raises(ConfigError):
        normalize_backend("coarse")


def test_resolution_fine_cells_are_nested() -> None:
    res = Resolution(coarse_n=8, fine_ratio=1.0 / 16)
    assert res.fine_cells(UNIT, 1.0 / 16) == 256
    assert res.subdivisions(UNIT, 1.0 / 16) == 32
    with pytest.raises(ConfigError):
        Resolution(fine_ratio=0.5)


def test_msfem_tracks_fine_solution_for_layered_coefficient() -> None:
    spec = _spec("mixed", coef=LayeredCoefficient(2.0, 1.8), epsilon=1.0 / 16)
    res = Resolution(coarse_n=2, fine_ratio=1.0 / 16)
    ms = solve_mixed(spec, "msfem", res)
    fine = solve_mixed(spec, "fine", res)
    cell = solve_cell_problems(spec.coefficient, 16)
    homog = solve_mixed(spec, "homogenized", res, cell=cell)
    assert ms.field.mesh.shape == fine.field.mesh.shape
    ms_err = error_norms(ms.field, fine.field).h1_semi
    homog_err = error_norms(homog.field, fine.field).h1_semi
    assert 0.0 < ms_err < homog_err


def test_robin_constant_data_gives_the_constant_solution() -> None:
    spec = ProblemSpec(
        kind="robin",
        tagging=BoundaryTagging.uniform("N"),
        alpha=RobinWeight.constant(1.0),
        g=1.0,
        epsilon=0.25,
    )
    res = Resolution(coarse_n=4, fine_ratio=1.0 / 8)
    cell = solve_cell_problems(IdentityCoefficient(), 8)
    for backend in ("fine", "homogenized", "msfem"):
        result = solve_robin(spec, backend, res, cell=cell)
        assert np.max(np.abs(result.field.values - 1.0)) < 1e-8, backend


def test_large_robin_weight_approaches_dirichlet() -> None:
    res = Resolution(coarse_n=4, fine_n=16, solver="direct")
    coef = LayeredCoefficient(2.0, 1.8)
    dirichlet = solve_mixed(ProblemSpec(kind="mixed", f=1.0, epsilon=0.25, coefficient=coef), "fine", res)
    distances = []
    for alpha in (1e2, 1e4, 1e6):
        spec = ProblemSpec(
            kind="robin",
            tagging=BoundaryTagging.uniform("N"),
            alpha=RobinWeight.constant(alpha),
            f=1.0,
            epsilon=0.25,
            coefficient=coef,
        )
        distances.append(error_norms(solve_robin(spec, "fine", res).field, dirichlet.field).l2)
    assert distances[-1] < 1e-5
    for weak, strong in zip(distances, distances[1:]):
        assert weak / strong > 50.0


def test_fine_reference_differences_shrink_under_refinement() -> None:
    spec = _spec("mixed", coef=LayeredCoefficient(2.0, 1.8), epsilon=1.0 / 8)
    fields = [solve_mixed(spec, "fine", Resolution(coarse_n=4, fine_n=n)).field for n in (32, 64, 128)]
    first = error_norms(fields[0], fields[1]).h1_semi
    second = error_norms(fields[1], fields[2]).h1_semi
    assert 0.0 < second < first


def _msfem_error(eps: float, n: int) -> tuple:
    spec = _spec("mixed", coef=LayeredCoefficient(2.0, 1.8), epsilon=eps, tagging=BoundaryTagging.uniform("D"), g=None)
    res = Resolution(coarse_n=n, fine_ratio=1.0 / 8)
    report = error_norms(solve_mixed(spec, "msfem", res).field, solve_mixed(spec, "fine", res).field)
    return report.h1_semi, report.l2


@pytest.mark.slow
def test_resonance_plateau_and_l2_level() -> None:
    levels = {(eps, n): _msfem_error(eps, n) for eps, n in ((1 / 32, 4), (1 / 64, 8), (1 / 128, 16), (1 / 128, 8))}
    h1 = [levels[(1 / 32, 4)][0], levels[(1 / 64, 8)][0], levels[(1 / 128, 16)][0]]
    for coarse, fine in zip(h1, h1[1:]):
        assert 0.6 <= coarse / fine <= 1.6
    # eps/h goes from 1/8 to 1/16 at h = 1/8
    assert 1.5 <= levels[(1 / 64, 8)][1] / levels[(1 / 128, 8)][1] <= 2.8


@pytest.mark.slow
def test_error_has_an_interior_minimum_in_h_at_fixed_epsilon() -> None:
    h1 = [_msfem_error(1 / 64, n)[0] for n in (4, 8, 16, 32)]
    best = int(np.argmin(h1))
    assert 0 < best < len(h1) - 1
    assert h1[-1] > h1[best]
