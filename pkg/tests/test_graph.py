import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from airgraph import graph
from airgraph.graph import (ChebCoeffs, cheb_conv, cheb_conv_steps, lambda_max, laplacian,
                            scale_laplacian, scaled_laplacian_from_adjacency, spectral_radius,
                            symmetrize)
from airgraph.tensor import ShapeError, Tensor, gradient_check


def random_adjacency(rng, n, density=0.6):
    a = rng.uniform(0.1, 1.0, (n, n)) * (rng.uniform(size=(n, n)) < density)
    a = np.triu(a, 1)
    return a + a.T


def random_scaled_laplacian(rng, n):
    lap = laplacian(random_adjacency(rng, n)).data
    return 2 * lap / np.linalg.eigvalsh(lap).max() - np.eye(n)


def coeffs(rng, k, d_in, d_out):
    return ChebCoeffs(Tensor(rng.normal(size=k)), Tensor(rng.normal(size=(k, d_in, d_out))))


RING4 = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]], dtype=float)


# -- Laplacian -------------------------------------------------------------------------------------


def test_laplacian_two_nodes():
    np.testing.assert_array_equal(laplacian(np.array([[0.0, 1], [1, 0]])).data, [[1, -1], [-1, 1]])


def test_laplacian_edgeless_is_zero():
    np.testing.assert_array_equal(laplacian(np.zeros((3, 3))).data, np.zeros((3, 3)))


def test_laplacian_ring4():
    expected = 2 * np.eye(4) - RING4
    np.testing.assert_array_equal(laplacian(RING4).data, expected)


def test_laplacian_batched_matches_single():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(3, 5, 5))
    batched = laplacian(a).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], laplacian(a[i]).data, atol=1e-15)


# -- spectral radius -----------------------------------------------------------------------------


def test_spectral_radius_two_node_laplacian():
    assert spectral_radius(np.array([[1.0, -1], [-1, 1]])) == pytest.approx(2.0, abs=1e-6)


def test_spectral_radius_identity():
    assert spectral_radius(np.eye(4)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_spectral_radius_matches_eigensolve(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(6, 6))
    m = m @ m.T  # symmetric PSD: the dominant eigenvalue is the largest one
    assert spectral_radius(m) == pytest.approx(np.linalg.eigvalsh(m).max(), rel=1e-4)


def test_spectral_radius_symmetrises_input():
    rng = np.random.default_rng(1)
    m = np.abs(rng.normal(size=(5, 5)))
    assert spectral_radius(m) == pytest.approx(np.linalg.eigvalsh(0.5 * (m + m.T)).max(), rel=1e-4)


def test_spectral_radius_floor_on_zero_matrix():
    assert spectral_radius(np.zeros((3, 3))) == graph.GAMMA_FLOOR


def test_power_iteration_fallback_when_not_converged(caplog):
    # nearly tied top eigenvalues: the Rayleigh quotient still moves by > tol after 100 steps
    m = np.diag([1.0, 0.999, 0.998])
    _, _, _, converged = graph._power_iterate(m)
    assert not converged
    with caplog.at_level(logging.DEBUG, logger="airgraph.graph"):
        value = spectral_radius(m)
    assert value == graph.GAMMA_FALLBACK
    assert any("did not converge" in r.getMessage() for r in caplog.records)


def test_lambda_max_is_independent_of_batch_mates():
    rng = np.random.default_rng(4)
    easy = laplacian(random_adjacency(rng, 5, density=1.0)).data
    hard = np.diag([1.0, 0.999, 0.998, 0.5, 0.1])  # does not converge
    alone = lambda_max(Tensor(easy[None])).data
    mixed = lambda_max(Tensor(np.stack([easy, hard]))).data
    assert mixed[0] == alone[0]
    assert mixed[1] == graph.GAMMA_FALLBACK


def test_batched_lambda_max_gradient():
    rng = np.random.default_rng(5)
    mats = np.stack([laplacian(random_adjacency(rng, 4, density=1.0)).data for _ in range(3)])
    w = rng.uniform(1, 2, 3)
    assert gradient_check(lambda m: (lambda_max(symmetrize(m)) * w).sum(), Tensor(mats)) < 1e-4


def test_lambda_max_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    lap = Tensor(laplacian(random_adjacency(rng, 5, density=1.0)).data)
    assert gradient_check(lambda m: lambda_max(symmetrize(m)), lap) < 1e-4


def test_lambda_max_gradient_is_eigenvector_outer_product():
    rng = np.random.default_rng(3)
    # star graph: spectrum {0, w.., 1 + sum w}, a wide gap so the iteration converges tightly
    a = np.zeros((6, 6))
    a[0, 1:] = a[1:, 0] = rng.uniform(0.5, 1.5, 5)
    lap = laplacian(a).data
    t = Tensor(lap, requires_grad=True)
    lambda_max(t).backward()
    w, v = np.linalg.eigh(lap)
    np.testing.assert_allclose(t.grad, np.outer(v[:, -1], v[:, -1]), atol=1e-4)


# -- scaled Laplacian ----------------------------------------------------------------------------


def test_scale_laplacian_examples():
    lap = np.array([[1.0, -1], [-1, 1]])
    np.testing.assert_allclose(scale_laplacian(lap, 2.0).matrix.data, [[0, -1], [-1, 0]])
    np.testing.assert_allclose(scale_laplacian(np.zeros((3, 3)), 2.0).matrix.data, -np.eye(3))


@pytest.mark.parametrize("gamma", [0.0, -1.0])
def test_scale_laplacian_rejects_nonpositive_gamma(gamma):
    with pytest.raises(ValueError):
        scale_laplacian(np.eye(2), gamma)


def test_ring4_scaled_spectrum_in_unit_interval():
    lap = laplacian(RING4).data
    lt = scale_laplacian(lap, spectral_radius(lap)).matrix.data
    ev = np.linalg.eigvalsh(lt)
    assert ev.min() >= -1 - 1e-6 and ev.max() <= 1 + 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_scaled_laplacian_symmetric_and_bounded(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(n, n))
    lap = laplacian(symmetrize(a)).data
    np.testing.assert_allclose(scaled_laplacian_from_adjacency(Tensor(a)).matrix.data,
                               scaled_laplacian_from_adjacency(Tensor(a)).matrix.data.T, atol=1e-12)
    exact = np.linalg.eigvalsh(lap).max()
    ev = np.linalg.eigvalsh(scale_laplacian(lap, exact).matrix.data)
    assert ev.min() >= -1 - 1e-6 and ev.max() <= 1 + 1e-6


# -- Chebyshev convolution -----------------------------------------------------------------------


def test_cheb_k1_is_pure_feature_map():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 3))
    c = coeffs(rng, 1, 3, 2)
    out = cheb_conv(Tensor(x), random_scaled_laplacian(rng, 6), c).data
    np.testing.assert_array_equal(out, (x @ c.weights.data[0]) * c.theta.data[0])


def test_cheb_k2_with_zero_laplacian():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    c = coeffs(rng, 2, 3, 2)
    out = cheb_conv(Tensor(x), np.zeros((4, 4)), c).data
    np.testing.assert_allclose(out, c.theta.data[0] * x @ c.weights.data[0], atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_cheb_k3_matches_explicit_polynomial(seed):
    rng = np.random.default_rng(seed)
    lt = random_scaled_laplacian(rng, 6)
    x = rng.normal(size=(6, 4))
    c = coeffs(rng, 3, 4, 3)
    th, w = c.theta.data, c.weights.data
    expected = (th[0] * x @ w[0] + th[1] * lt @ x @ w[1]
                + th[2] * (2 * lt @ lt - np.eye(6)) @ x @ w[2])
    np.testing.assert_allclose(cheb_conv(Tensor(x), lt, c).data, expected, atol=1e-10)


@pytest.mark.parametrize("k", range(6))
def test_recurrence_matches_cosine_of_eigenvalues(k):
    rng = np.random.default_rng(10 + k)
    a = rng.normal(size=(6, 6))
    lt = 0.5 * (a + a.T)
    lt /= np.abs(np.linalg.eigvalsh(lt)).max()
    # pick out T_k by a unit coefficient on term k and identity input / weights
    theta = np.zeros(k + 1)
    theta[k] = 1.0
    c = ChebCoeffs(Tensor(theta), Tensor(np.broadcast_to(np.eye(6), (k + 1, 6, 6)).copy()))
    tk = cheb_conv(Tensor(np.eye(6)), lt, c).data
    w, v = np.linalg.eigh(lt)
    oracle = v @ np.diag(np.cos(k * np.arccos(np.clip(w, -1, 1)))) @ v.T
    np.testing.assert_allclose(tk, oracle, atol=1e-8)


def test_cheb_conv_linear_in_x():
    rng = np.random.default_rng(6)
    lt = random_scaled_laplacian(rng, 5)
    c = coeffs(rng, 3, 2, 4)
    x1, x2 = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    lhs = cheb_conv(Tensor(2.5 * x1 - 0.7 * x2), lt, c).data
    rhs = 2.5 * cheb_conv(Tensor(x1), lt, c).data - 0.7 * cheb_conv(Tensor(x2), lt, c).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_cheb_conv_gradients():
    rng = np.random.default_rng(7)
    lt = random_scaled_laplacian(rng, 5)
    x = Tensor(rng.normal(size=(5, 3)))
    th, w = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=(3, 3, 2)))
    f = lambda x, th, w: (cheb_conv(x, lt, ChebCoeffs(th, w)) ** 2).sum()
    assert gradient_check(f, [x, th, w]) < 1e-4


def test_cheb_conv_gradient_through_laplacian():
    rng = np.random.default_rng(8)
    lt = Tensor(random_scaled_laplacian(rng, 4))
    x = rng.normal(size=(4, 2))
    c = coeffs(rng, 3, 2, 2)
    assert gradient_check(lambda lt: (cheb_conv(x, lt, c) ** 2).sum(), lt) < 1e-4


def test_cheb_conv_steps_matches_per_step_loop():
    rng = np.random.default_rng(9)
    b, n, t, d = 2, 5, 4, 3
    x = rng.normal(size=(b, n, t, d))
    lts = np.stack([random_scaled_laplacian(rng, n) for _ in range(b)])
    c = coeffs(rng, 3, d, 2)
    out = cheb_conv_steps(Tensor(x), lts, c).data
    for i in range(b):
        for s in range(t):
            np.testing.assert_allclose(out[i, :, s], cheb_conv(Tensor(x[i, :, s]), lts[i], c).data,
                                       atol=1e-12)


def test_cheb_conv_dimension_mismatch():
    rng = np.random.default_rng(10)
    with pytest.raises(ShapeError):
        cheb_conv(Tensor(np.ones((4, 3))), np.eye(5), coeffs(rng, 2, 3, 2))
    with pytest.raises(ShapeError):
        cheb_conv(Tensor(np.ones((5, 2))), np.eye(5), coeffs(rng, 2, 3, 2))


def test_cheb_coeffs_init():
    c = ChebCoeffs.init(3, 4, 5, np.random.default_rng(0))
    assert c.order == 3 and c.weights.shape == (3, 4, 5)
    np.testing.assert_array_equal(c.theta.data, 1.0)
    with pytest.raises(ValueError):
        ChebCoeffs.init(0, 4, 5, np.random.default_rng(0))
