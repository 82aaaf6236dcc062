import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from thinhomog.errors import ConfigError, StageError
from thinhomog.homog import CoefficientTable
from thinhomog.study import (
    CSV_HEADER,
    ConvergenceTable,
    StudyConfig,
    coefficient_smoothness,
    emit_csv,
    emit_svg,
    fit_rate,
    load_config,
    parse_config,
    run_study,
)

SMALL = """
profile.G = 2+sin(2*pi*y)
source.f0 = cos(pi*x)
study.eps = 1/4, 1/8, 1/16
study.x_samples = 3
study.homog_n = 16
study.gate = off
mesh.cells_per_period = 8
mesh.nz = 4
"""


@pytest.fixture(scope="module")
def small():
    return run_study(parse_config(SMALL))


# configuration


def test_defaults():
    cfg = StudyConfig()
    assert cfg.eps_list == (1 / 8, 1 / 16, 1 / 32, 1 / 64)
    assert (cfg.b, cfg.G, cfg.L, cfg.f0) == ("0", "2+sin(2*pi*y)", 1.0, "cos(pi*x)")
    assert cfg.x_samples == 17 and cfg.mesh_factor == 1


def test_parse_all_value_kinds():
    cfg = parse_config(SMALL + "solver.tol_thin = 1e-9\nmesh.factor = 1.5\npullback.levels = 8, 16\n# note\n")
    assert cfg.eps_list == (0.25, 0.125, 0.0625)
    assert cfg.gate is False
    assert cfg.tol_thin == 1e-9
    assert cfg.pullback_levels == (8, 16)
    assert cfg.thin_columns == 12 and cfg.thin_layers == 6


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("study.eps = 1/16, 1/8", "decreasing"),
        ("study.eps = 1, 1/2", "exceeds"),
        ("mesh.nz = 2.5", "mesh.nz"),
        ("nonsense", ":1:"),
        ("\nstudy.colour = red", ":2: unknown key"),
        ("mesh.factor = 0", "positive"),
        ("study.gate = maybe", "boolean"),
        ("study.eps = 1/0", "study.eps"),
    ],
)
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.conf")


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.conf")):
        load_config(path)


# rates


def test_fit_rate():
    eps = np.array([1 / 8, 1 / 16, 1 / 32])
    assert fit_rate(eps, 3 * eps) == pytest.approx(1.0)
    assert fit_rate(eps, eps**2) == pytest.approx(2.0)
    assert math.isnan(fit_rate(eps, [1e-12, 1e-13, 0.0]))


# runs


def test_flat_study_is_exact(tmp_path):
    cfg = parse_config("profile.G = 1\nsource.f0 = 1\nstudy.eps = 1/4, 1/8, 1/16\nstudy.x_samples = 2\n"
                       "mesh.cells_per_period = 8\nmesh.nz = 2\nstudy.homog_n = 8\n")
    res = run_study(cfg)
    for name in ("e_l2_plain", "e_h1_plain", "e_h1_corr"):
        assert np.all(res.column(name) <= 1e-8)
        assert math.isnan(res.rates[name])
    emit_csv(res, tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()[1:]
    assert all(r.endswith(",exact,exact") for r in rows)
    assert res.gate["passed"]


def test_small_sweep_structure(small):
    assert [r.epsilon for r in small.rows] == [0.25, 0.125, 0.0625]
    assert all(np.isfinite(v) for v in small.rates.values())
    assert np.all(small.ratios("e_l2_plain") < 0.8)
    assert np.all(small.column("e_h1_corr") < small.column("e_h1_plain"))
    assert small.gate is None
    assert small.f_bound_ratio < 1.1


def test_csv_rows_and_header(small, tmp_path):
    path = tmp_path / "conv.csv"
    emit_csv(small, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 4
    empty = tmp_path / "empty.csv"
    emit_csv(ConvergenceTable((), {"e_l2_plain": float("nan"), "e_h1_corr": float("nan")}), empty)
    assert empty.read_text().splitlines() == [",".join(CSV_HEADER)]


def test_csv_is_deterministic(small, tmp_path):
    again = run_study(parse_config(SMALL))
    emit_csv(small, tmp_path / "a.csv")
    emit_csv(again, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_svg_is_valid(small, tmp_path):
    path = tmp_path / "c.svg"
    emit_svg(small, path)
    root = ET.parse(path).getroot()
    lines = root.findall("{http://www.w3.org/2000/svg}polyline")
    assert len(lines) == 3
    assert all(len(pl.get("points").split()) == 3 for pl in lines)


def test_csv_write_error_names_path(small, tmp_path):
    with pytest.raises(OSError, match="missing"):
        emit_csv(small, tmp_path / "missing" / "c.csv")


def test_stage_failure_is_named():
    # a roof that touches zero fails validation in the first stage
    cfg = parse_config("profile.G = sin(2*pi*y)\nstudy.eps = 1/8\n")
    with pytest.raises(StageError) as info:
        run_study(cfg)
    assert info.value.stage == "profile"


def test_coefficient_smoothness():
    t = CoefficientTable(np.linspace(0, 1, 5), np.array([1.0, 0.9, 0.8, 0.7, 0.6]), np.ones(5))
    second, first = coefficient_smoothness(t)
    assert second == pytest.approx(0.0, abs=1e-15)
    assert first == pytest.approx(0.1)
