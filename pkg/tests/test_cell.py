from pathlib import Path

import numpy as np
import pytest

from msfem.cell import (
    cell_summary,
    eval_corrector,
    eval_correctors,
    homogenized_tensor,
    load_cell_solution,
    save_cell_solution,
    solve_cell_problems,
    voigt_reuss_bounds,
)
from msfem.coefficients import IdentityCoefficient, LayeredCoefficient, SeparableCoefficient
from msfem.errors import ConfigError


def test_identity_has_vanishing_correctors() -> None:
    cell = solve_cell_problems(IdentityCoefficient(), 8)
    assert np.max(np.abs(cell.correctors)) < 1e-10
    assert np.allclose(cell.A_hat, np.eye(2), atol=1e-12)


def test_layered_tensor_matches_closed_form() -> None:
    coef = LayeredCoefficient(2.0, 1.8)
    cell = solve_cell_problems(coef, 64)
    assert np.allclose(cell.A_hat, coef.homogenized(), atol=3e-2)
    assert np.max(np.abs(cell.mean())) < 1e-10
    summary = cell_summary(cell, coef)
    assert summary["closed_form_error"] < 3e-2


def test_tensor_lies_within_ellipticity_and_averaging_bounds() -> None:
    coef = SeparableCoefficient(2.0, 1.0)
    cell = solve_cell_problems(coef, 32)
    eig = np.linalg.eigvalsh(cell.A_hat)
    assert eig[0] >= coef.kappa1 - 1e-12
    assert eig[1] <= coef.kappa2 + 1e-12
    harmonic, arithmetic = voigt_reuss_bounds(coef, 32)
    assert np.linalg.eigvalsh(arithmetic - cell.A_hat).min() > -1e-10
    assert np.linalg.eigvalsh(cell.A_hat - harmonic).min() > -1e-3
    assert np.allclose(homogenized_tensor(cell, coef), cell.A_hat, atol=1e-12)


def test_layer_direction_swaps_tensor_axes() -> None:
    a1 = solve_cell_problems(LayeredCoefficient(2.0, 1.5, axis=1), 16).A_hat
    a2 = solve_cell_problems(LayeredCoefficient(2.0, 1.5, axis=2), 16).A_hat
    assert np.allclose(a2, a1[::-1, ::-1], atol=1e-9)


def test_correctors_are_periodic_in_the_fast_variable() -> None:
    cell = solve_cell_problems(LayeredCoefficient(2.0, 1.0), 16)
    eps = 0.125
    x = np.random.default_rng(3).uniform(0, 1, size=(40, 2))
    values, grads = eval_correctors(cell, x, eps)
    shifted, _ = eval_correctors(cell, x + eps * np.array([1.0, 2.0]), eps)
    assert values.shape == (2, 40)
    assert grads.shape == (2, 40, 2)
    assert np.allclose(values, shifted, atol=1e-12)
    n1, _ = eval_corrector(cell, 1, x, eps)
    assert np.array_equal(n1, values[0])
    with pytest.raises(ConfigError):
        eval_corrector(cell, 3, x, eps)
    with pytest.raises(ConfigError):
        eval_correctors(cell, x, 0.0)


def test_cell_resolution_is_checked() -> None:
    with pytest.raises(ConfigError):
        solve_cell_problems(IdentityCoefficient(), 4)


def test_save_and_load_cell_solution(tmp_path: Path) -> None:
    cell = solve_cell_problems(LayeredCoefficient(2.0, 1.0), 8)
    path = save_cell_solution(cell, str(tmp_path / "cell.json"))
    loaded = load_cell_solution(path)
    assert np.array_equal(loaded.correctors, cell.correctors)
    assert np.array_equal(loaded.A_hat, cell.A_hat)
    assert loaded.coefficient == cell.coefficient

    other = tmp_path / "other.json"
    other.write_text('{"kind": "msfem-basis", "schema_version": "1"}', encoding="utf-8")
    with pytest.raises(ConfigError):
        load_cell_solution(str(other))


@pytest.mark.slow
def test_layered_tensor_self_converges() -> None:
    coef = LayeredCoefficient(2.0, 1.8)
    tensors = [solve_cell_problems(coef, n).A_hat for n in (64, 128, 256)]
    assert np.allclose(tensors[-1], coef.homogenized(), atol=1e-3)
    d1 = np.max(np.abs(tensors[1] - tensors[0]))
    d2 = np.max(np.abs(tensors[2] - tensors[1]))
    assert d2 < d1
