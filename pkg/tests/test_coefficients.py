from pathlib import Path

import numpy as np
import pytest

from msfem.coefficients import (
    ConstantCoefficient,
    GridCoefficient,
    IdentityCoefficient,
    LayeredCoefficient,
    SeparableCoefficient,
    check_ellipticity,
    load_grid_coefficient,
    parse_coefficient,
)
from msfem.errors import ConfigError


def test_parse_coefficient_ids() -> None:
    assert isinstance(parse_coefficient("identity"), IdentityCoefficient)
    layered = parse_coefficient("layered:2,1.8")
    assert isinstance(layered, LayeredCoefficient)
    assert layered.axis == 1
    assert parse_coefficient("layered:2,1,2").axis == 2
    assert isinstance(parse_coefficient("separable:2,1"), SeparableCoefficient)
    assert isinstance(parse_coefficient("constant:2,0.5,1"), ConstantCoefficient)
    for bad in ("layered:2", "layered:1,2", "wavy:1", "grid:"):
        with pytest.raises(ConfigError):
            parse_coefficient(bad)


def test_layered_bounds_and_periodicity() -> None:
    coef = LayeredCoefficient(2.0, 1.8)
    assert np.isclose(coef.kappa1, 0.2)
    assert np.isclose(coef.kappa2, 3.8)
    y = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
    assert np.allclose(coef.evaluate(y), coef.evaluate(y + np.array([1.0, -3.0])))
    assert np.allclose(coef.homogenized(), np.diag([np.sqrt(0.76), 2.0]))
    check_ellipticity(coef)


def test_separable_and_constant_pass_ellipticity_check() -> None:
    check_ellipticity(SeparableCoefficient(2.0, 1.0))
    check_ellipticity(ConstantCoefficient([[2.0, 0.5], [0.5, 1.0]]))
    with pytest.raises(ConfigError):
        ConstantCoefficient([[1.0, 2.0], [2.0, 1.0]])


def test_grid_coefficient_reproduces_samples(tmp_path: Path) -> None:
    n = 4
    rows = []
    for j in range(n):
        for i in range(n):
            rows.append(f"{1.0 + 0.1 * i} 0.0 {2.0 + 0.1 * j}")
    path = tmp_path / "cell.txt"
    path.write_text(f"{n} 0.5 3.0\n" + "\n".join(rows) + "\n", encoding="utf-8")
    coef = load_grid_coefficient(str(path))
    assert isinstance(coef, GridCoefficient)
    y = np.array([[2 / n, 1 / n], [0.0, 3 / n]])
    a = coef.evaluate(y)
    assert np.allclose(a[0], np.diag([1.2, 2.1]))
    assert np.allclose(a[1], np.diag([1.0, 2.3]))
    assert np.allclose(coef.evaluate(y + 1.0), a)
    assert parse_coefficient(f"grid:{path}").fingerprint() == coef.fingerprint()
    check_ellipticity(coef)


def test_grid_coefficient_rejects_short_file(tmp_path: Path) -> None:
    path = tmp_path / "short.txt"
    path.write_text("2 1 2\n1 0 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_grid_coefficient(str(path))
    with pytest.raises(ConfigError):
        load_grid_coefficient(str(tmp_path / "missing.txt"))
