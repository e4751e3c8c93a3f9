import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phasefield_rb import container
from phasefield_rb.errors import FormatError, ParameterError
from phasefield_rb.mesh import make_rect_mesh
from phasefield_rb.phasefield import rotating_channel_family
from phasefield_rb.pod import (ModeBasis, SamplingPlan, SnapshotSet, build_field_snapshots,
                               build_snapshots, epsilon, epsilon_table, svd_modes)


def epsilon_oracle(X, n):
    """Brute force: relative Frobenius error of the best rank-(n-1) projection."""
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    k = n - 1
    Xk = (U[:, :k] * s[:k]) @ Vt[:k]
    return np.linalg.norm(X - Xk) / np.linalg.norm(X)


def test_container_roundtrip_and_corruption(tmp_path):
    a = np.arange(12.0).reshape(3, 4)
    b = np.array([3, 1, 2])
    p = tmp_path / "x.bin"
    container.write(p, b"TESTMAG1", {"k": [1, 2]}, {"a": a, "b": b})
    meta, arr = container.read(p, b"TESTMAG1")
    assert meta == {"k": [1, 2]}
    np.testing.assert_array_equal(arr["a"], a)
    np.testing.assert_array_equal(arr["b"], b)
    assert arr["b"].dtype == np.int64
    data = bytearray(p.read_bytes())
    with pytest.raises(FormatError):
        container.decode(bytes(data), b"OTHERMAG")
    data[40] ^= 0xFF
    with pytest.raises(FormatError):
        container.decode(bytes(data), b"TESTMAG1")
    with pytest.raises(FormatError):
        container.decode(p.read_bytes()[:-5], b"TESTMAG1")


def test_rank_one_snapshots():
    u = np.array([1.0, 2.0, -2.0]) / 3
    X = np.outer(u, [1.0, -3.0, 2.0, 0.5])
    basis = svd_modes(X)
    np.testing.assert_allclose(np.abs(basis.modes[:, 0]), np.abs(u), atol=1e-14)
    assert basis.sigma[1] < 1e-14 * basis.sigma[0]
    assert epsilon(basis, 1) == pytest.approx(1.0)
    assert epsilon(basis, 2) < 1e-12


def test_orthogonal_columns_give_their_norms():
    X = np.zeros((5, 3))
    X[0, 0], X[2, 1], X[4, 2] = 3.0, -5.0, 1.0
    basis = svd_modes(X)
    np.testing.assert_allclose(basis.sigma, [5.0, 3.0, 1.0])
    np.testing.assert_allclose(basis.modes[:, 0], [0, 0, 1, 0, 0])  # sign convention: max entry positive


def test_epsilon_two_values():
    assert epsilon(np.array([2.0, 1.0]), 2) == pytest.approx(np.sqrt(1 / 5))
    with pytest.raises(ParameterError):
        epsilon(np.array([2.0, 1.0]), 3)
    with pytest.raises(ParameterError):
        epsilon(np.array([2.0, 1.0]), 0)


def test_reconstruction_and_orthonormality():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((50, 10))
    basis = svd_modes(X)
    V = basis.modes
    np.testing.assert_allclose(V.T @ V, np.eye(10), atol=1e-12)
    np.testing.assert_allclose(V @ (V.T @ X), X, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_epsilon_matches_eckart_young(seed):
    rng = np.random.default_rng(100 + seed)
    X = rng.standard_normal((60, 12)) @ np.diag(np.logspace(0, -4, 12)) @ rng.standard_normal((12, 12))
    basis = svd_modes(X)
    table = epsilon_table(basis)
    for n in range(1, 13):
        ref = epsilon_oracle(X, n)
        assert epsilon(basis, n) == pytest.approx(ref, abs=1e-10)
        assert table[n - 1] == pytest.approx(ref, abs=1e-10)


def test_gram_method_agrees_with_direct():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((200, 8)) @ np.diag([10, 5, 3, 1, .5, .1, .05, .01])
    d, g = svd_modes(X, 5, method="direct"), svd_modes(X, 5, method="gram")
    np.testing.assert_allclose(d.sigma, g.sigma, rtol=1e-10)
    np.testing.assert_allclose(d.modes, g.modes, atol=1e-9)


def test_max_modes_bounds():
    X = np.eye(4)[:, :3]
    assert svd_modes(X, 2).n_modes == 2
    with pytest.raises(ParameterError):
        svd_modes(X, 4)
    with pytest.raises(ParameterError):
        svd_modes(X, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(1, 8), st.integers(0, 10_000))
def test_epsilon_monotone(m, n, seed):
    X = np.random.default_rng(seed).standard_normal((m, n))
    t = epsilon_table(svd_modes(X).sigma)
    assert t[0] == pytest.approx(1.0)
    assert np.all(np.diff(t) <= 1e-14)


def test_plan_counts():
    assert len(SamplingPlan("uniform", n=1001).sample([180], [540])) == 1001
    assert SamplingPlan("uniform", n=21).sample([-.5] * 3, [.5] * 3).shape == (9261, 3)
    one = SamplingPlan("uniform", n=1).sample([0.0], [180.0])
    np.testing.assert_allclose(one, [[90.0]])
    r1 = SamplingPlan("random", n=5, seed=4).sample([0, 0], [1, 2])
    r2 = SamplingPlan("random", n=5, seed=4).sample([0, 0], [1, 2])
    np.testing.assert_array_equal(r1, r2)
    assert np.all(r1[:, 1] <= 2) and np.all(r1 >= 0)
    u = SamplingPlan("union", parts=(SamplingPlan("uniform", n=3), SamplingPlan("explicit", points=((0.25,),))))
    np.testing.assert_allclose(u.sample([0], [1]).ravel(), [0, .5, 1, .25])
    assert SamplingPlan.from_dict(u.to_dict()).sample([0], [1]).shape == (4, 1)
    with pytest.raises(ParameterError):
        SamplingPlan("random", n=3)
    with pytest.raises(ParameterError):
        SamplingPlan("sobol", n=3)


def test_field_snapshots_and_persistence(tmp_path):
    fam = rotating_channel_family(delta=0.25)
    mesh = make_rect_mesh(1, 1, 12, 12)
    plan = SamplingPlan("uniform", n=4)
    sets = build_field_snapshots(fam, mesh, plan.sample(fam.lower, fam.upper), ("xi", "zeta", "t"), workers=2)
    assert sets["xi"].matrix.shape == (mesh.n_vertices, 4)
    assert sets["t"].matrix.shape == (2 * mesh.n_vertices, 4)
    np.testing.assert_allclose(sets["xi"].matrix ** 2 + sets["zeta"].matrix ** 2, 1.0, atol=1e-14)
    single = build_snapshots("xi", fam, mesh, plan)
    np.testing.assert_array_equal(single.matrix, sets["xi"].matrix)

    p = tmp_path / "xi.snap"
    single.save(p)
    back = SnapshotSet.load(p)
    np.testing.assert_array_equal(back.matrix, single.matrix)
    np.testing.assert_array_equal(back.betas, single.betas)

    basis = svd_modes(single, 3)
    basis.save(tmp_path / "xi.modes")
    b2 = ModeBasis.load(tmp_path / "xi.modes")
    np.testing.assert_array_equal(b2.modes, basis.modes)
    np.testing.assert_array_equal(b2.sigma, basis.sigma)
    assert b2.kind == "xi"
