import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posetransfer import fisher, so3


def test_log_normalizer_zero_is_exactly_zero():
    assert fisher.log_normalizer(np.zeros((3, 3))) == 0.0


def test_log_normalizer_batch_shape(rng):
    F = rng.standard_normal((2, 5, 3, 3))
    out = fisher.log_normalizer(F)
    assert out.shape == (2, 5)
    assert np.isclose(out[1, 3], fisher.log_normalizer(F[1, 3]))


@given(st.integers(0, 10**6))
def test_log_normalizer_orthogonal_invariance(seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((3, 3)) * 3
    U, V = so3.random_rotations(2, rng)
    assert np.isclose(fisher.log_normalizer(U @ F @ V), fisher.log_normalizer(F), rtol=1e-10, atol=1e-12)


def test_log_normalizer_matches_monte_carlo(rng):
    R = so3.random_rotations(200_000, rng)
    for _ in range(3):
        F = rng.standard_normal((3, 3)) * 1.5
        mc = fisher.haar_log_normalizer_mc(F, R)
        assert abs(fisher.log_normalizer(F) - mc) < 0.02 * max(1.0, abs(mc))


def test_log_normalizer_large_singular_values():
    v = fisher.log_normalizer(np.diag([fisher.S_MAX] * 3))
    assert np.isfinite(v) and v > 0
    assert np.isfinite(fisher.log_normalizer(np.diag([40.0, 30.0, -20.0])))
    with pytest.raises(fisher.ConcentrationError):
        fisher.log_normalizer(np.diag([500.0, 0.0, 0.0]))


def test_log_normalizer_rejects_nan():
    with pytest.raises(ValueError):
        fisher.log_normalizer(np.full((3, 3), np.nan))


@given(st.integers(0, 10**6))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((3, 3)) * 2
    _, g = fisher.log_normalizer_and_grad(F)
    h = 1e-6
    num = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            E = np.zeros((3, 3))
            E[i, j] = h
            num[i, j] = (fisher.log_normalizer(F + E) - fisher.log_normalizer(F - E)) / (2 * h)
    assert np.allclose(g[0], num, atol=1e-6)


def test_proper_svd_reconstructs(rng):
    F = rng.standard_normal((4, 3, 3))
    U, s, Vt = fisher.proper_svd(F)
    assert np.allclose(np.einsum("bij,bj,bjk->bik", U, s, Vt), F, atol=1e-12)
    assert np.allclose(np.linalg.det(U), 1) and np.allclose(np.linalg.det(Vt), 1)


def test_mode_and_bingham(rng):
    R0 = so3.random_rotations(1, rng)[0]
    F = 5.0 * R0
    assert np.allclose(fisher.mode(F), R0, atol=1e-12)
    B = fisher.bingham_matrix(rng.standard_normal((3, 3)))
    q = so3.random_quaternions(1, rng)[0]
    F2 = rng.standard_normal((3, 3))
    assert np.isclose(q @ fisher.bingham_matrix(F2) @ q, np.sum(F2 * so3.attitude(q)))
    assert np.allclose(B, B.T)


def test_sampler_concentrates_and_is_deterministic():
    F = 20.0 * np.eye(3)
    R = fisher.sample(F, 2000, seed=3)
    angles = np.degrees(so3.geodesic_angle(np.eye(3), R))
    assert angles.mean() < 25.0
    assert np.array_equal(R, fisher.sample(F, 2000, seed=3))
    assert not np.array_equal(R, fisher.sample(F, 2000, seed=4))


def test_sampler_matches_density_moment(rng):
    # E[tr(F^T R)] equals d log c / d t at t = 1 for F_t = t F
    F = rng.standard_normal((3, 3)) * 2
    R = fisher.sample(F, 40_000, seed=1)
    h = 1e-5
    deriv = (fisher.log_normalizer((1 + h) * F) - fisher.log_normalizer((1 - h) * F)) / (2 * h)
    est = np.mean(np.einsum("ij,nij->n", F, R))
    assert abs(est - deriv) < 0.05 * max(1.0, abs(deriv))


def test_sampler_zero_is_uniform():
    R = fisher.sample(np.zeros((3, 3)), 20_000, seed=0)
    assert np.allclose(R.mean(axis=0), 0.0, atol=0.03)


def test_sampler_errors():
    with pytest.raises(fisher.ConcentrationError):
        fisher.sample(np.eye(3) * (fisher.S_MAX * 2), 5)
    with pytest.raises(ValueError):
        fisher.sample(np.eye(3), 0)


def test_nll_is_lowest_at_mode(rng):
    F = 8 * so3.random_rotations(1, rng)[0]
    m = fisher.nll(fisher.mode(F), F)
    for R in so3.random_rotations(20, rng):
        assert fisher.nll(R, F) >= m
