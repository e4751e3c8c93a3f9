import dataclasses
import json

import numpy as np
import pytest

from phasefield_rb.errors import ConfigurationError, ParameterError
from phasefield_rb.site import (SiteModel, corner_graph, hex_grid_centers, honeymoon_site, select_wells,
                                site_from_config, write_hexagon_csv, write_well_csv)

R = 15.0
THREE = np.array([[0.0, 0.0], [1.5 * R, np.sqrt(3) / 2 * R], [1.5 * R, -np.sqrt(3) / 2 * R]])


@pytest.fixture(scope="module")
def bundle(hex_small):
    return hex_small[1].bundle


def test_single_hexagon_graph(bundle):
    s = SiteModel(np.zeros((1, 2)), bundle)
    assert s.n_wells == 6 and all(len(w.members) == 1 for w in s.wells)
    assert s.n_dofs == bundle.r + 6


def test_three_hexagons_share_one_corner():
    g = corner_graph(THREE, R)
    assert g.adjacency_counts() == {1: 9, 2: 3, 3: 1}  # pairs share an edge, all three its inner end
    shared = [m for m in g.members if len(m) == 3][0]
    assert sorted(h for h, _ in shared) == [0, 1, 2]
    np.testing.assert_allclose(g.positions[[len(m) == 3 for m in g.members]][0], [R, 0.0], atol=1e-9)


def test_honeymoon_dof_count(bundle):
    site = honeymoon_site(bundle.truncated(25))
    assert site.n_hex == 225 and site.n_wells == 452
    assert site.n_dofs == 225 * 25 + 452 == 6077
    assert site.assemble().shape == (6077, 6077)
    counts = site.graph.adjacency_counts()
    assert counts[3] > counts.get(2, 0) > 0   # interior corners are triple
    assert all(1 <= len(w.members) <= 3 for w in site.wells)


def test_dof_formula_any_layout(bundle):
    b = bundle.truncated(7)
    for nc, nr in ((1, 1), (2, 3), (4, 2)):
        s = SiteModel(hex_grid_centers(nc, nr, R), b)
        assert s.n_dofs == nc * nr * 7 + s.n_wells
        assert s.n_wells == len(s.graph.members)


def test_bad_tiling_and_inputs(bundle):
    with pytest.raises(ConfigurationError):
        SiteModel(np.array([[0.0, 0.0], [5.0, 0.0]]), bundle)
    with pytest.raises(ConfigurationError):
        hex_grid_centers(0, 3, R)
    with pytest.raises(ConfigurationError):
        select_wells(corner_graph(THREE, R), "odd")
    with pytest.raises(ParameterError):
        SiteModel(np.zeros((1, 2)), bundle, np.full((1, 6), 1.5))
    stub = dataclasses.replace(bundle, tags=tuple(t.replace("well_3", "w3") for t in bundle.tags))
    with pytest.raises(ConfigurationError):
        SiteModel(np.zeros((1, 2)), stub)


def test_zero_inflow_gives_zero_solution(bundle):
    sol = SiteModel(THREE, bundle).solve()
    assert not np.any(sol.coeffs) and not np.any(sol.multipliers) and not np.any(sol.outflows)


def test_single_hexagon_mass_balance(bundle):
    inflows = np.array([0.5, 1.0, 1.5, 0.2, 0.3, 0.5])
    s = SiteModel(np.zeros((1, 2)), bundle.truncated(30), np.full((1, 6), 0.4), inflows)
    sol = s.solve()
    assert abs(sol.outflows.sum() - inflows.sum()) <= 1e-8 * inflows.sum()
    assert sol.leakage == 0.0


def test_constraint_rows_satisfied(bundle):
    rng = np.random.default_rng(0)
    s = SiteModel(THREE, bundle.truncated(30), rng.random((3, 6)), rng.uniform(0.5, 1.5, 13))
    sol = s.solve()
    np.testing.assert_allclose(sol.well_inflows, s.inflows, rtol=1e-9)
    assert abs(sol.outflows.sum() + sol.leakage - s.inflows.sum()) <= 1e-8 * s.inflows.sum()


def test_update_damage_locality_and_rebuild(bundle):
    b = bundle.truncated(20)
    rng = np.random.default_rng(1)
    D0 = rng.random((3, 6))
    s = SiteModel(THREE, b, D0, 1.0)
    A0 = s.assemble()
    s.update_damage(1, D0[1].copy())
    assert (s.assemble() != A0).nnz == 0
    D1 = rng.random(6)
    s.update_damage(1, D1)
    diff = (s.assemble() - A0).tocoo()
    rows, cols = diff.row[diff.data != 0], diff.col[diff.data != 0]
    assert len(rows) and np.all((rows >= b.r) & (rows < 2 * b.r) & (cols >= b.r) & (cols < 2 * b.r))
    D_all = D0.copy()
    D_all[1] = D1
    fresh = SiteModel(THREE, b, D_all, 1.0)
    x1, x2 = s.solve(), fresh.solve()
    assert np.abs(s.assemble() - fresh.assemble()).max() == 0
    np.testing.assert_allclose(x1.coeffs, x2.coeffs, rtol=1e-12, atol=1e-12 * np.abs(x2.coeffs).max())
    with pytest.raises(ParameterError):
        s.update_damage(0, np.full(6, -0.1))
    with pytest.raises(ParameterError):
        s.update_damage(3, np.zeros(6))


def test_symmetric_single_hexagon(bundle):
    # uniform damage 0.5 is a training point of this full-rank bundle, so the ROM inherits the symmetry
    s = SiteModel(np.zeros((1, 2)), bundle, np.full((1, 6), 0.5), 1.0)
    p = s.solve().multipliers
    assert np.ptp(p) <= 1e-8 * np.abs(p).max()


def test_multiplier_monotone_in_damage(hex_desk):
    b = hex_desk[1].bundle.truncated(25)
    s = SiteModel(np.zeros((1, 2)), b, np.full((1, 6), 0.3), 1.0)
    p = []
    for d in np.linspace(0.0, 1.0, 11):
        D = np.full(6, 0.3)
        D[0] = d
        p.append(s.update_damage(0, D).solve().multipliers[0])
    assert np.all(np.diff(p) <= 1e-9 * max(p))


def test_honeymoon_interior_outflows_equal(hex_desk):
    site = honeymoon_site(hex_desk[1].bundle.truncated(25), np.full((225, 6), 0.3), 1.0)
    sol = site.solve()
    out = sol.outflows.reshape(15, 15)
    deep = out[6:9, 6:9]   # far from the open boundary corners
    assert np.ptp(deep) <= 1e-4 * deep.mean()
    center = out[7, 7]
    assert abs(center - 2.0) <= 1e-4 * 2.0  # two wells' worth of inflow per interior hexagon
    assert abs(sol.outflows.sum() + sol.leakage - site.inflows.sum()) <= 1e-8 * site.inflows.sum()


def test_config_and_csv_roundtrip(bundle, tmp_path):
    rng = np.random.default_rng(2)
    s = SiteModel(THREE, bundle.truncated(10), rng.random((3, 6)), well_policy="shared", extra_wells=2)
    assert s.n_wells == 6
    s.set_inflows(rng.uniform(0.5, 1.5, 6))
    with pytest.raises(ParameterError):
        s.set_inflows(np.ones(13))
    p = tmp_path / "site.json"
    s.write_config(p, "bundle.rom")
    back = site_from_config(json.loads(p.read_text()), bundle.truncated(10))
    np.testing.assert_array_equal(back.damage, s.damage)
    np.testing.assert_array_equal(back.inflows, s.inflows)
    np.testing.assert_allclose(back.solve().outflows, s.solve().outflows, rtol=1e-12)
    sol = s.solve()
    write_well_csv(tmp_path / "w.csv", s, sol, "# test")
    write_hexagon_csv(tmp_path / "h.csv", s, sol)
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "# test" and lines[1].startswith("well_id") and len(lines) == 2 + s.n_wells
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 4
