import math
from pathlib import Path

import numpy as np
import pytest

from msfem.errors import ConfigError, MeshError
from msfem.mesh import (
    BoundaryTagging,
    Mesh,
    Rectangle,
    build_fine_submesh,
    build_structured_mesh,
    dump_mesh,
    grid_indices,
    is_nested,
    lattice_points,
    load_mesh,
    locate,
    parse_mesh,
    reference_lattice,
    refine,
    regularity_report,
    tagging_of,
    validate_mesh,
)

UNIT = Rectangle()


def test_unit_square_single_cell() -> None:
    mesh = build_structured_mesh(UNIT, 1)
    assert mesh.n_vertices == 4
    assert mesh.n_triangles == 2
    assert math.isclose(mesh.h_max, math.sqrt(2.0))
    assert math.isclose(mesh.rho, math.sqrt(2.0) - 1.0, rel_tol=1e-12)


def test_structured_mesh_counts_and_orientation() -> None:
    mesh = build_structured_mesh(UNIT, 4)
    assert mesh.n_vertices == 25
    assert mesh.n_triangles == 32
    assert len(mesh.boundary_edges) == 16
    assert np.all(mesh.areas > 0)
    assert math.isclose(float(np.sum(mesh.areas)), 1.0)
    validate_mesh(mesh)


def test_boundary_tagging_per_side() -> None:
    tagging = BoundaryTagging.from_mapping({"left": "D", "right": "C", "top": "N", "bottom": "N"})
    mesh = build_structured_mesh(UNIT, 8, tagging)
    assert math.isclose(mesh.boundary_length("C"), 1.0)
    assert math.isclose(mesh.boundary_length("N"), 2.0)
    assert math.isclose(mesh.boundary_length(), 4.0)
    right = mesh.vertices[mesh.boundary_vertices("C")]
    assert np.allclose(right[:, 0], 1.0)
    assert tagging_of(mesh) == tagging


def test_tagging_rejects_unknown_tag_and_side() -> None:
    with pytest.raises(ConfigError):
        BoundaryTagging.from_mapping({"left": "X"})
    with pytest.raises(ConfigError):
        BoundaryTagging.from_mapping({"front": "D"})


def test_degenerate_inputs_rejected() -> None:
    with pytest.raises(MeshError):
        Rectangle(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(ConfigError):
        build_structured_mesh(UNIT, 0)


def test_regularity_report_uniform_mesh() -> None:
    report = regularity_report(build_structured_mesh(UNIT, 8))
    assert math.isclose(report.rho, math.sqrt(2.0) - 1.0, rel_tol=1e-12)
    assert math.isclose(report.h_max, math.sqrt(2.0) / 8)
    assert report.flagged == ()


def test_regularity_report_names_degenerate_element() -> None:
    mesh = Mesh(
        np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]),
        np.array([[0, 1, 2]]),
        np.array([[0, 1], [1, 2], [2, 0]]),
        ("D", "D", "D"),
    )
    with pytest.raises(MeshError) as info:
        regularity_report(mesh)
    assert info.value.element == 0


def test_submesh_preserves_shape_regularity() -> None:
    mesh = build_structured_mesh(UNIT, 2)
    sub = build_fine_submesh(mesh, 3, 4)
    assert sub.mesh.n_triangles == 16
    assert math.isclose(float(np.sum(np.abs(sub.mesh.areas))), abs(float(mesh.areas[3])))
    assert math.isclose(regularity_report(sub.mesh).rho, regularity_report(mesh).rho, rel_tol=1e-12)
    assert np.allclose(sub.trace_bary.sum(axis=1), 1.0)


def test_reference_lattice_sizes() -> None:
    for m in (2, 3, 8):
        lattice = reference_lattice(m)
        assert lattice.n_vertices == (m + 1) * (m + 2) // 2
        assert len(lattice.triangles) == m * m
        assert len(lattice.trace) == 3 * m
        assert len(lattice.interior) == (m - 1) * (m - 2) // 2
    with pytest.raises(ConfigError):
        reference_lattice(1)


def test_element_lattices_coincide_with_refined_grid() -> None:
    coarse = build_structured_mesh(UNIT, 4)
    fine = refine(coarse, 8)
    points = lattice_points(coarse.corners, reference_lattice(8))
    idx = grid_indices(fine, points)
    assert np.allclose(fine.vertices[idx], points.reshape(-1, 2), atol=1e-14)
    assert is_nested(coarse, fine)
    assert not is_nested(coarse, build_structured_mesh(UNIT, 6))


def test_locate_reproduces_linear_functions() -> None:
    mesh = build_structured_mesh(Rectangle(0.0, 0.0, 2.0, 1.0), 5)
    rng = np.random.default_rng(0)
    points = rng.uniform([0.0, 0.0], [2.0, 1.0], size=(200, 2))
    elements, bary = locate(mesh, points)
    assert np.allclose(bary.sum(axis=1), 1.0)
    assert np.all(bary >= -1e-12)
    corners = mesh.corners[elements]
    assert np.allclose(np.einsum("ka,kai->ki", bary, corners), points)


def test_dump_and_load_mesh(tmp_path: Path) -> None:
    mesh = build_structured_mesh(UNIT, 3, BoundaryTagging.from_mapping({"all": "N", "left": "D"}))
    path = dump_mesh(mesh, str(tmp_path / "unit.mesh"))
    loaded = load_mesh(path)
    assert np.array_equal(loaded.vertices, mesh.vertices)
    assert np.array_equal(loaded.triangles, mesh.triangles)
    assert loaded.boundary_tags == mesh.boundary_tags
    validate_mesh(loaded)


def test_parse_mesh_rejects_missing_header(tmp_path: Path) -> None:
    bad = tmp_path / "bad.mesh"
    bad.write_text("v 0 0\n", encoding="utf-8")
    with pytest.raises(MeshError):
        load_mesh(str(bad))


def test_regularity_report_flags_needle_triangles() -> None:
    mesh = Mesh(
        np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1e-6]]),
        np.array([[0, 1, 2]]),
        np.array([[0, 1], [1, 2], [2, 0]]),
        ("D", "D", "D"),
    )
    report = regularity_report(mesh)
    assert report.rho < 1e-5
    assert report.flagged == (0,)
    assert regularity_report(build_structured_mesh(UNIT, 2), rho_min=0.5).flagged == tuple(range(8))


def test_parsed_meshes_are_validated() -> None:
    lines = build_structured_mesh(UNIT, 1).to_text().splitlines()
    flipped = [ln if not ln.startswith("t ") else "t " + " ".join(reversed(ln.split()[1:])) for ln in lines]
    with pytest.raises(MeshError, match="counterclockwise") as info:
        parse_mesh("\n".join(flipped))
    assert info.value.element == 0
    untagged = [ln for ln in lines if ln != next(b for b in lines if b.startswith("b "))]
    with pytest.raises(MeshError, match="boundary edges"):
        parse_mesh("\n".join(untagged))
