import numpy as np
import pytest

from msfem.cell import eval_correctors, solve_cell_problems
from msfem.coefficients import IdentityCoefficient, LayeredCoefficient
from msfem.errors import ConfigError, MeshError, MeshMismatchError
from msfem.expansion import (
    FeField,
    NormContext,
    analytic_field,
    error_norms,
    first_order_expansion,
    interpolate,
    ms_interpolant,
)
from msfem.mesh import BoundaryTagging, Rectangle, build_structured_mesh, refine
from msfem.multiscale import build_ms_basis

UNIT = Rectangle()


def _field(n: int, name: str) -> FeField:
    return interpolate(analytic_field(name), build_structured_mesh(UNIT, n))


def test_linear_fields_have_exact_gradients() -> None:
    u = _field(4, "x")
    assert np.allclose(u.gradients, [1.0, 0.0])
    assert np.allclose(u.vertex_gradients, [1.0, 0.0])
    pts = np.array([[0.3, 0.7], [1.0, 1.0], [0.05, 0.0]])
    assert np.allclose(u.evaluate(pts), pts[:, 0])
    assert np.allclose(u.gradient_at(pts), [1.0, 0.0])
    with pytest.raises(MeshError):
        FeField(u.mesh, np.zeros(3))


def test_prolongation_requires_nested_meshes() -> None:
    u = _field(3, "sinsin")
    fine = refine(u.mesh, 2)
    up = u.prolongate(fine)
    assert up.mesh is fine
    assert np.allclose(up.evaluate(u.mesh.vertices), u.values, atol=1e-12)
    assert u.prolongate(u.mesh) is u
    with pytest.raises(MeshMismatchError):
        u.prolongate(build_structured_mesh(UNIT, 4))
    with pytest.raises(MeshMismatchError):
        error_norms(u, _field(4, "x"))


def test_expansion_with_identity_cell_is_the_homogenized_field() -> None:
    cell = solve_cell_problems(IdentityCoefficient(), 8)
    mesh = build_structured_mesh(UNIT, 8)
    u0 = analytic_field("sinsin")
    expanded = first_order_expansion(u0, cell, 0.125, target=mesh)
    assert np.allclose(expanded.values, u0.value(mesh.vertices), atol=1e-12)


def test_expansion_adds_scaled_correctors() -> None:
    cell = solve_cell_problems(LayeredCoefficient(2.0, 1.0), 16)
    eps = 0.125
    mesh = build_structured_mesh(UNIT, 16)
    from_analytic = first_order_expansion(analytic_field("x"), cell, eps, target=mesh)
    from_field = first_order_expansion(interpolate(analytic_field("x"), mesh), cell, eps)
    correctors, _ = eval_correctors(cell, mesh.vertices, eps)
    expected = mesh.vertices[:, 0] + eps * correctors[0]
    assert np.allclose(from_analytic.values, expected, atol=1e-12)
    assert np.allclose(from_field.values, expected, atol=1e-12)
    with pytest.raises(ConfigError):
        first_order_expansion(analytic_field("x"), cell, eps)
    with pytest.raises(ConfigError):
        first_order_expansion(analytic_field("x"), cell, 0.0, target=mesh)


def test_ms_interpolant_lives_on_the_fine_lattice() -> None:
    coarse = build_structured_mesh(UNIT, 2)
    basis = build_ms_basis(coarse, IdentityCoefficient(), 0.125, m=8)
    u0I = interpolate(analytic_field("x"), coarse)
    ms = ms_interpolant(basis, u0I)
    assert ms.mesh is basis.fine_mesh
    assert np.allclose(ms.values, ms.mesh.vertices[:, 0], atol=1e-12)
    with pytest.raises(MeshMismatchError):
        ms_interpolant(basis, _field(4, "x"))


def test_error_norms_of_simple_differences() -> None:
    one = _field(4, "one")
    zero = _field(4, "zero")
    report = error_norms(one, zero)
    assert np.isclose(report.l2, 1.0)
    assert report.h1_semi < 1e-12
    assert np.isclose(report.norm("boundary_D"), 2.0)
    assert report.energy is None

    x = _field(8, "x")
    report = error_norms(x, _field(8, "zero"))
    assert np.isclose(report.norm("h1"), 1.0)
    assert np.isclose(report.l2, np.sqrt(1.0 / 3.0))
    doubled = error_norms(x.scaled(2.0), _field(8, "zero"))
    assert np.isclose(doubled.h1_semi, 2.0 * report.h1_semi)
    assert np.isclose(doubled.l2, 2.0 * report.l2)


def test_energy_norm_needs_a_robin_weight() -> None:
    mesh = build_structured_mesh(UNIT, 4, BoundaryTagging.uniform("N"))
    one = FeField(mesh, np.ones(mesh.n_vertices))
    zero = FeField(mesh, np.zeros(mesh.n_vertices))
    report = error_norms(one, zero, NormContext(alpha=1.0, h=0.25, backends=("msfem", "fine")))
    assert np.isclose(report.norm("energy"), 2.0)
    assert report.as_dict()["backends"] == ["msfem", "fine"]
    plain = error_norms(one, zero)
    with pytest.raises(ConfigError):
        plain.norm("energy")
    with pytest.raises(ConfigError):
        plain.norm("boundary_C")
    with pytest.raises(ConfigError):
        plain.norm("linf")


def test_energy_norm_is_equivalent_to_h1() -> None:
    coef = LayeredCoefficient(2.0, 1.8)
    alpha = 0.5
    mesh = build_structured_mesh(UNIT, 8, BoundaryTagging.uniform("N"))
    zero = FeField(mesh, np.zeros(mesh.n_vertices))
    context = NormContext(coef=coef, epsilon=0.25, alpha=alpha)
    rng = np.random.default_rng(11)
    for _ in range(100):
        u = FeField(mesh, rng.normal(size=mesh.n_vertices))
        report = error_norms(u, zero, context)
        trace2 = report.boundary_l2["N"] ** 2
        lower = coef.kappa1 * report.h1_semi ** 2 + alpha * trace2
        upper = coef.kappa2 * report.h1_semi ** 2 + alpha * trace2
        assert lower * (1 - 1e-10) <= report.energy ** 2 <= upper * (1 + 1e-10)


def test_interpolation_error_rates_under_refinement() -> None:
    u0 = analytic_field("coscos")
    reference = _field(256, "coscos")
    assert np.allclose(reference.values, u0.value(reference.mesh.vertices))
    reports = [error_norms(interpolate(u0, build_structured_mesh(UNIT, n)), reference) for n in (8, 16, 32)]
    h1 = [r.h1_semi for r in reports]
    boundary = [r.norm("boundary_D") for r in reports]
    assert boundary[0] > 1e-4
    for coarse, fine in zip(h1, h1[1:]):
        assert 1.6 <= coarse / fine <= 2.4
    for coarse, fine in zip(boundary, boundary[1:]):
        assert np.log2(coarse / fine) >= 1.3
