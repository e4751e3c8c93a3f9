import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phasefield_rb.deim import (DeimModel, affine_weights, expand_squared, pair_indices, reconstruct_classical,
                                reconstruct_nonneg, scalar_mode_products, select_points, tensor_mode_products,
                                train)
from phasefield_rb.errors import NumericsError, ParameterError
from phasefield_rb.mesh import make_annulus_mesh, make_rect_mesh
from phasefield_rb.phasefield import rotating_channel_family, sample_fields, spiral_family
from phasefield_rb.pod import SamplingPlan, build_field_snapshots, svd_modes


@pytest.fixture(scope="module")
def spiral_setup():
    fam = spiral_family()
    mesh = make_annulus_mesh(0.25, 1.0, 22)
    betas = SamplingPlan("uniform", n=41).sample(fam.lower, fam.upper)
    sets = build_field_snapshots(fam, mesh, betas, ("xi", "zeta", "t", "phi"))
    bases = {k: svd_modes(v) for k, v in sets.items()}
    return fam, mesh, sets, bases


def test_single_mode_point():
    v = np.zeros(12)
    v[7], v[3] = 0.9, -0.4
    model = select_points(v[:, None], 1)
    assert model.indices.tolist() == [7]


def test_canonical_modes():
    U = np.eye(6)[:, [4, 1]]
    model = select_points(U, 2)
    assert model.indices.tolist() == [4, 1]
    np.testing.assert_array_equal(model.matrix, np.eye(2))


def test_tie_breaks_to_lowest_index():
    U = np.array([[1.0], [-1.0], [1.0]]) / np.sqrt(3)
    assert select_points(U, 1).indices.tolist() == [0]


def test_greedy_is_deterministic_and_distinct():
    rng = np.random.default_rng(0)
    U, _ = np.linalg.qr(rng.standard_normal((80, 12)))
    a, b = select_points(U, 12), select_points(U.copy(), 12)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert len(set(a.indices.tolist())) == 12


def test_weights_examples():
    rng = np.random.default_rng(1)
    U, _ = np.linalg.qr(rng.standard_normal((40, 6)))
    model = select_points(U, 6)
    np.testing.assert_allclose(model.weights(U[model.indices, 0]), np.eye(6)[0], atol=1e-12)
    np.testing.assert_array_equal(model.weights(np.zeros(6)), np.zeros(6))
    c = rng.standard_normal(6)
    f = U @ c
    np.testing.assert_allclose(model.weights(f[model.indices]), c, atol=1e-10)
    np.testing.assert_allclose(reconstruct_classical(model, f[model.indices]), f, atol=1e-10)
    with pytest.raises(ParameterError):
        model.weights(np.zeros(5))


def test_singular_and_bad_requests():
    U = np.zeros((5, 2))
    U[0, 0] = 1.0
    U[0, 1] = 1.0  # second mode interpolated exactly by the first: zero residual
    with pytest.raises(NumericsError):
        select_points(U, 2)
    with pytest.raises(ParameterError):
        select_points(np.eye(3), 4)


def test_ill_conditioned_matrix_warns():
    U = np.array([[1.0, 1.0], [0.0, 1e-13], [0.0, 0.0]])
    with pytest.warns(RuntimeWarning):
        DeimModel("x", U, np.array([0, 1]))


def test_expand_squared_examples():
    np.testing.assert_allclose(expand_squared([3.0]), [9.0])
    assert len(expand_squared(np.ones(4))) == 10
    i, j = pair_indices(3)
    assert list(zip(i.tolist(), j.tolist())) == [(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2)]
    np.testing.assert_allclose(expand_squared([1.0, 2.0]), [1.0, 4.0, 4.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_expansion_identity(N, seed):
    rng = np.random.default_rng(seed)
    modes = rng.standard_normal((30, N))
    theta = rng.standard_normal(N)
    direct = (modes @ theta) ** 2
    expanded = scalar_mode_products(modes) @ expand_squared(theta)
    np.testing.assert_allclose(expanded, direct, atol=1e-12 * max(1.0, direct.max()))

    tmodes = rng.standard_normal((30, N))  # 15 nodes, stacked [tx; ty]
    t = tmodes @ theta
    tx, ty = t[:15], t[15:]
    A = np.einsum("nck,k->nc", tensor_mode_products(tmodes), expand_squared(theta))
    np.testing.assert_allclose(A, np.column_stack([tx * tx, tx * ty, ty * ty]), atol=1e-12 * max(1.0, np.abs(A).max()))


def test_spiral_interpolation_exact_at_points(spiral_setup):
    fam, mesh, sets, bases = spiral_setup
    model = train(bases["xi"], 10, mesh.vertices)
    X = sets["xi"].matrix
    for k in range(X.shape[1]):
        f = X[:, k]
        rec = reconstruct_classical(model, f[model.indices])
        assert np.max(np.abs(rec[model.indices] - f[model.indices])) <= 1e-9 * np.abs(f).max()
        # against a direct dense solve of the interpolation system
        theta = np.linalg.solve(model.modes[model.indices], f[model.indices])
        np.testing.assert_allclose(model.weights(f[model.indices]), theta, atol=1e-10)


def test_online_sampling_matches_nodal_values(spiral_setup):
    fam, mesh, sets, bases = spiral_setup
    for kind in ("xi", "zeta", "t"):
        model = train(bases[kind], 8, mesh.vertices)
        beta = sets[kind].betas[5]
        np.testing.assert_allclose(model.sample(fam, beta), sets[kind].matrix[model.indices, 5], atol=1e-14)


def test_full_rank_training_point_reproduced(spiral_setup):
    fam, mesh, sets, bases = spiral_setup
    n = np.linalg.matrix_rank(sets["xi"].matrix)
    models = [train(bases[k], min(n, bases[k].n_modes), mesh.vertices) for k in ("xi", "zeta", "t")]
    beta = sets["xi"].betas[17]
    rec = reconstruct_nonneg(*models, beta, fam, mesh)
    true = sample_fields(fam, beta, mesh)
    assert np.max(np.abs(rec.phi - true.phi)) <= 1e-8


def test_nonneg_reconstruction_random_betas(spiral_setup):
    fam, mesh, sets, bases = spiral_setup
    models = [train(bases[k], 5, mesh.vertices) for k in ("xi", "zeta", "t")]
    rng = np.random.default_rng(5)
    for beta in rng.uniform(180, 540, 10):
        rec = reconstruct_nonneg(*models, [beta], fam, mesh)
        assert rec.phi.min() >= 0 and rec.psi.min() >= 0
        a = rec.alpha
        det = a[:, 0] * a[:, 2] - a[:, 1] ** 2
        assert np.all(a[:, 0] >= 0) and np.all(det >= -1e-12 * (a[:, 0] + a[:, 2]) ** 2)


def test_classical_reconstruction_goes_negative(spiral_setup):
    fam, mesh, sets, bases = spiral_setup
    model = train(bases["phi"], 5, mesh.vertices)
    rec = reconstruct_classical(model, model.sample(fam, [360.0]))
    assert rec.min() < 0


def test_channel_classical_ten_modes_negative():
    fam = rotating_channel_family()
    mesh = make_rect_mesh(1, 1, 30, 30)
    sets = build_field_snapshots(fam, mesh, SamplingPlan("uniform", n=61).sample(fam.lower, fam.upper), ("phi",))
    model = train(svd_modes(sets["phi"]), 10, mesh.vertices)
    assert reconstruct_classical(model, model.sample(fam, [30.0])).min() < 0


def test_affine_weights_match_expanded_products(spiral_setup):
    fam, mesh, sets, bases = spiral_setup
    models = [train(bases[k], 4, mesh.vertices) for k in ("xi", "zeta", "t")]
    w = affine_weights(*models, fam, [400.0])
    rec = reconstruct_nonneg(*models, [400.0], fam, mesh)
    np.testing.assert_allclose(scalar_mode_products(models[0].modes) @ w.theta_phi, rec.phi, atol=1e-12)
    np.testing.assert_allclose(scalar_mode_products(models[1].modes) @ w.theta_psi, rec.psi, atol=1e-12)
    A = np.einsum("nck,k->nc", tensor_mode_products(models[2].modes), w.theta_alpha)
    np.testing.assert_allclose(A, rec.alpha, atol=1e-12 * max(1.0, np.abs(A).max()))
    assert w.counts == (4, 4, 4)


def test_model_array_roundtrip(spiral_setup):
    fam, mesh, sets, bases = spiral_setup
    model = train(bases["t"], 6, mesh.vertices)
    back = DeimModel.from_arrays("t", model.to_arrays("t_"), "t_")
    np.testing.assert_array_equal(back.indices, model.indices)
    np.testing.assert_array_equal(back.sample(fam, [300.0]), model.sample(fam, [300.0]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert back.cond == pytest.approx(model.cond)
