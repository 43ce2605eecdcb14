import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corr_sparse import (
    DegenerateReference,
    Hyperparams,
    MMVProblem,
    block_view,
    devectorize,
    extract_support,
    kron_dictionary,
    nmse,
    posterior_mean_cov,
    trial_failure,
    true_support,
    vectorize,
)
from corr_sparse.model import PosteriorFactor, chol_solve_jitter


def random_hyper(rng, m, l, lam):
    gamma = rng.uniform(0.1, 10.0, size=m)
    q = rng.standard_normal((l, l))
    b = q @ q.T + 0.2 * np.eye(l)
    b *= l / np.trace(b)
    return Hyperparams(gamma=gamma, b=b, lam=lam)


def dense_sigma0(gamma, b):
    return scipy_block_diag([g * b for g in gamma])


def scipy_block_diag(blocks):
    import scipy.linalg

    return scipy.linalg.block_diag(*blocks)


class TestVectorize:
    def test_two_by_two(self):
        y = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(vectorize(y), [1.0, 2.0, 3.0, 4.0])

    def test_zeros(self):
        assert np.array_equal(vectorize(np.zeros((25, 4))), np.zeros(100))

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal((5, 3))
        assert np.array_equal(devectorize(vectorize(y), 3), y)

    @given(
        n=st.integers(min_value=1, max_value=8),
        l=st.integers(min_value=1, max_value=6),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=50, deadline=None)
    def test_round_trip_property(self, n, l, seed):
        y = np.random.default_rng(seed).standard_normal((n, l))
        assert np.array_equal(devectorize(vectorize(y), l), y)


class TestKronDictionary:
    def test_dense_small(self):
        view = kron_dictionary(np.array([[1.0, 2.0]]), 2)
        expected = np.array([[1.0, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, 2.0]])
        assert np.array_equal(view.dense(), expected)

    def test_apply_matches_matrix_product(self):
        rng = np.random.default_rng(1)
        phi = rng.standard_normal((4, 6))
        x = rng.standard_normal((6, 3))
        view = kron_dictionary(phi, 3)
        lhs = view.apply(vectorize(x))
        rhs = vectorize(phi @ x)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=0)

    def test_shape_fig1_scale(self):
        view = kron_dictionary(np.ones((25, 125)), 4)
        assert view.shape == (100, 500)

    def test_operator_consistency_sweep(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = rng.integers(1, 11)
            m = rng.integers(1, 21)
            l = rng.integers(1, 6)
            phi = rng.standard_normal((n, m))
            x = rng.standard_normal((m, l))
            view = kron_dictionary(phi, l)
            lhs = view.apply(vectorize(x))
            rhs = vectorize(phi @ x)
            scale = max(np.abs(rhs).max(), 1e-300)
            assert np.abs(lhs - rhs).max() <= 1e-12 * scale
            # adjoint against the dense matrix
            v = rng.standard_normal(n * l)
            assert np.allclose(view.apply_t(v), view.dense().T @ v, rtol=1e-12, atol=1e-14)


class TestPosterior:
    def test_zero_prior(self):
        rng = np.random.default_rng(2)
        p = MMVProblem(phi=rng.standard_normal((4, 7)), y_mat=rng.standard_normal((4, 2)), lam=0.5)
        h = Hyperparams(gamma=np.zeros(7), b=np.eye(2), lam=0.5)
        x, blocks = posterior_mean_cov(block_view(p), h)
        assert np.array_equal(x, np.zeros(14))
        assert np.array_equal(blocks, np.zeros((7, 2, 2)))

    def test_scalar_case(self):
        p = MMVProblem(phi=[[1.0]], y_mat=[[2.0]], lam=1.0)
        h = Hyperparams(gamma=[1.0], b=[[1.0]], lam=1.0)
        x, blocks = posterior_mean_cov(block_view(p), h)
        assert x[0] == pytest.approx(1.0, rel=1e-14)
        assert blocks[0, 0, 0] == pytest.approx(0.5, rel=1e-14)

    def test_dual_forms_agree(self):
        # (lam Sigma0^-1 + D^T D)^-1 D^T y computed densely must match the
        # spectral N*L-side route.
        rng = np.random.default_rng(3)
        for lam in (1e-6, 1e-3, 1.0):
            n, m, l = 6, 10, 3
            phi = rng.standard_normal((n, m))
            y = rng.standard_normal((n, l))
            p = MMVProblem(phi=phi, y_mat=y, lam=lam)
            h = random_hyper(rng, m, l, lam)
            x, _ = posterior_mean_cov(block_view(p), h)

            d = kron_dictionary(phi, l).dense()
            sigma0 = dense_sigma0(h.gamma, h.b)
            lhs = np.linalg.solve(
                lam * np.linalg.inv(sigma0) + d.T @ d, d.T @ vectorize(y)
            )
            assert np.linalg.norm(x - lhs) <= 1e-8 * np.linalg.norm(lhs)

    def test_blocks_match_dense(self):
        rng = np.random.default_rng(4)
        n, m, l = 5, 8, 2
        phi = rng.standard_normal((n, m))
        y = rng.standard_normal((n, l))
        lam = 0.3
        h = random_hyper(rng, m, l, lam)
        _, blocks = posterior_mean_cov(block_view(MMVProblem(phi, y, lam)), h)

        d = kron_dictionary(phi, l).dense()
        sigma0 = dense_sigma0(h.gamma, h.b)
        s = lam * np.eye(n * l) + d @ sigma0 @ d.T
        full = sigma0 - sigma0 @ d.T @ np.linalg.solve(s, d @ sigma0)
        for i in range(m):
            blk = full[i * l : (i + 1) * l, i * l : (i + 1) * l]
            assert np.allclose(blocks[i], blk, rtol=0, atol=1e-10)

    def test_blocks_psd_and_below_prior(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n, m, l = 4, 9, 3
            phi = rng.standard_normal((n, m))
            y = rng.standard_normal((n, l))
            lam = 10.0 ** rng.uniform(-6, 0)
            h = random_hyper(rng, m, l, lam)
            _, blocks = posterior_mean_cov(block_view(MMVProblem(phi, y, lam)), h)
            for i in range(m):
                blk = blocks[i]
                assert np.allclose(blk, blk.T, atol=1e-12)
                assert np.linalg.eigvalsh(blk).min() >= -1e-10
                gap = h.gamma[i] * h.b + 1e-10 * np.eye(l) - blk
                assert np.linalg.eigvalsh(gap).min() >= -1e-10

    def test_cholesky_jitter_solver(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((5, 5))
        mat = a @ a.T + np.eye(5)
        rhs = rng.standard_normal(5)
        sol, logdet = chol_solve_jitter(mat, rhs)
        assert np.allclose(mat @ sol, rhs, rtol=1e-10, atol=1e-12)
        assert logdet == pytest.approx(np.linalg.slogdet(mat)[1], rel=1e-10)


class TestSupportAndMetrics:
    def test_support_zero_matrix(self):
        assert extract_support(np.zeros((5, 3)), 0.01) == set()

    def test_support_threshold(self):
        x = np.zeros((3, 2))
        x[0] = [10.0, 0.0]
        x[1] = [0.001, 0.0]
        x[2] = [9.0, 0.0]
        assert extract_support(x, 0.01) == {0, 2}

    def test_support_exact_recovery_any_tau(self):
        rng = np.random.default_rng(8)
        x = np.zeros((20, 4))
        rows = rng.choice(20, size=3, replace=False)
        x[rows] = rng.standard_normal((3, 4))
        for tau in (1e-6, 1e-3, 0.1):
            assert extract_support(x, tau) == set(rows.tolist())

    def test_nmse_cases(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((6, 2))
        assert nmse(x, x) == 0.0
        assert nmse(np.zeros_like(x), x) == pytest.approx(1.0)
        assert nmse(2 * x, x) == pytest.approx(1.0)
        with pytest.raises(DegenerateReference):
            nmse(x, np.zeros_like(x))

    def test_trial_failure_rule(self):
        rng = np.random.default_rng(10)
        x = np.zeros((10, 3))
        x[[1, 4]] = rng.standard_normal((2, 3))
        assert trial_failure(x, x) is False
        assert trial_failure(np.zeros_like(x), x) is True
        # correct support but error above tolerance
        noisy = x + 0.2 * np.linalg.norm(x) * rng.standard_normal(x.shape) * (
            np.any(x != 0, axis=1)[:, None]
        )
        assert true_support(noisy) == true_support(x)
        assert nmse(noisy, x) > 1e-3
        assert trial_failure(noisy, x, nmse_tol=1e-3) is True


class TestValidation:
    def test_rejects_zero_column(self):
        phi = np.ones((3, 2))
        phi[:, 1] = 0.0
        with pytest.raises(ValueError):
            MMVProblem(phi=phi, y_mat=np.ones((3, 1)), lam=0.0)

    def test_rejects_negative_lam(self):
        with pytest.raises(ValueError):
            MMVProblem(phi=np.ones((2, 2)), y_mat=np.ones((2, 1)), lam=-1.0)

    def test_hyper_rejects_asymmetric_b(self):
        with pytest.raises(ValueError):
            Hyperparams(gamma=[1.0], b=[[1.0, 0.5], [0.0, 1.0]], lam=0.1)

    def test_immutability(self):
        p = MMVProblem(phi=np.eye(2), y_mat=np.ones((2, 1)), lam=0.0)
        with pytest.raises(ValueError):
            p.phi[0, 0] = 5.0
