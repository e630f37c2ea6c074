"""Homotopy operators, model integrals and global assembly."""

from math import pi

import numpy as np
import pytest

from crlab.barrier import Barrier
from crlab.errors import CoverMismatch, DegreeOutOfRange
from crlab.geometry import AtlasCover, ExplicitCover
from crlab.homotopy import (
    GridSpec,
    TestFormLibrary,
    assemble_global,
    bm_reproduce,
    case_prediction,
    centered_grid,
    homotopy_residual,
    i2_bounded,
    local_H,
    local_R,
    model_integrals,
    prefactor,
    residual_at,
    threads,
)

SPEC = GridSpec(8, 8, 3, 2, 0.5, 0.5)


@pytest.fixture(scope="module")
def setup(barriers):
    B = barriers("hyperquadric")
    lib = TestFormLibrary(B.M.graph, a=0.25)
    z = lib.sample_points(np.random.default_rng(0), 2)
    return B, lib, z


def test_prefactor():
    assert np.isclose(prefactor(2, 1), 1 / (2j * pi) ** 2)
    assert np.isclose(prefactor(3, 2), 2 / (2j * pi) ** 3)


@pytest.mark.parametrize(
    "f, expected",
    [
        (lambda x: np.ones(len(x)), 1.0),
        (lambda x: x[:, 0], 0.3),
        (lambda x: x[:, 0] * x[:, 1], 0.03),
    ],
)
def test_bm_reproduces_holomorphic_functions(f, expected):
    val = bm_reproduce(f, 1.0, np.array([0.3, 0.1]), 2304)
    assert abs(val - expected) < 1e-3


def test_bm_reproduction_in_three_variables():
    z = np.array([0.2, 0.1j, 0.0])
    assert abs(bm_reproduce(lambda x: x[:, 1], 1.0, z, 16384) - 0.1j) < 1e-3


def test_bm_rejects_point_outside():
    with pytest.raises(ValueError):
        bm_reproduce(lambda x: np.ones(len(x)), 1.0, np.array([1.2, 0.0]), 100)


def test_case_table():
    # n = 2, m = 1 (d = 3): one case per branch
    assert case_prediction(3, 1, 2, 1) == (1, -1, 2)
    assert case_prediction(2, 0, 2, 1)[0] == 2
    assert case_prediction(0, 3, 2, 1) == (3, -1.0, 1)
    assert case_prediction(1, 1, 2, 1)[0] == 4
    assert i2_bounded(2, 0, 2, 1) and i2_bounded(1, 1, 2, 1)


def test_bounded_model_integral():
    rep = model_integrals(2, 0, [1e-3, 1e-4, 1e-5], i2_deltas=[0.25, 0.5])
    assert rep.branch == 2 and rep.error < 0.15
    assert rep.I2_delta_ratio < 2


def test_grid_spec_counts():
    spec = GridSpec(4, 5, 3, 2)
    assert spec.nodes_per_sheet(2) == 4 * 5 * 9 * 2
    pts, w = spec.directions(2)
    assert len(pts) == 18


def test_centered_grid_sheets(setup):
    B, lib, z = setup
    g = centered_grid(B.M, z[0], 0.02, SPEC)
    assert np.allclose(np.abs(B.M.rho_values(g.zeta)[:, 0]), 0.02, atol=1e-12)
    assert set(np.unique(g.sigma)) == {-1.0, 1.0}


def test_local_R_is_linear(setup):
    B, lib, z = setup
    g1, g2 = lib.form("bump_dzbar2"), lib.form("bump_poly")
    a = local_R(B, g1, 1, 0.03, SPEC, z)
    b = local_R(B, g2, 1, 0.03, SPEC, z)
    c = local_R(B, g1 + g2.scale(2.0), 1, 0.03, SPEC, z)
    for x, y, s in zip(a, b, c):
        assert abs(s[()] - x[()] - 2 * y[()]) < 1e-14
        assert abs(x[()]) > 1e-4


def test_zero_form_maps_to_zero(setup):
    B, lib, z = setup
    assert all(v[()] == 0 for v in local_R(B, lib.form("zero"), 1, 0.03, SPEC, z))


def test_degree_mismatch(setup):
    B, lib, z = setup
    with pytest.raises(DegreeOutOfRange):
        local_R(B, lib.form("bump_dzbar2"), 2, 0.03, SPEC, z)
    with pytest.raises(DegreeOutOfRange):
        local_H(B, lib.form("bump_dzbar2"), 0, 0.03, SPEC, z)


def test_residual_rows(setup):
    B, lib, z = setup
    g = lib.form("bump_dzbar2")
    rows = residual_at(B, g, 0.03, SPEC, z)
    for row in rows:
        for K, v in row["residual"].items():
            parts = row["dbarR"].get(K, 0) + row["Rdbar"].get(K, 0) + row["H"].get(K, 0)
            assert np.isclose(v, row["g"].get(K, 0) - parts)


def test_residual_drops_on_refinement(setup):
    B, lib, z = setup
    run = homotopy_residual(B, lib.form("bump_dzbar2"), [(0.03, SPEC), (0.01, GridSpec(10, 10, 3, 2, 0.5, 0.5))], z)
    assert len(run.rows) == 2 and run.non_increasing()


def test_threads_env(monkeypatch):
    monkeypatch.setenv("CRLAB_THREADS", "3")
    assert threads() == 3
    monkeypatch.setenv("CRLAB_THREADS", "bogus")
    assert threads() == 1


def _chart_R(B):
    def fn(i, form, r, z):
        rows = local_R(B, form, r, 0.03, SPEC, z)
        return {K: np.array([row[K] for row in rows]) for K in rows[0]}

    return fn


def test_single_chart_assembly_equals_local(setup):
    B, lib, z = setup
    g = lib.form("bump_dzbar2")
    cover = AtlasCover([np.zeros(3)], [2.0])
    R = assemble_global(cover, _chart_R(B), check_points=z)
    glob = R.R(g, 1, z)
    loc = local_R(B, g, 1, 0.03, SPEC, z)
    assert np.allclose(glob[()], [row[()] for row in loc])


def test_assembly_rejects_bad_partition(setup):
    B, lib, z = setup
    half = lambda p, pb: 0.4 * np.ones(len(p))
    with pytest.raises(CoverMismatch):
        assemble_global(ExplicitCover([half, half], [half, half]), _chart_R(B), check_points=z)
