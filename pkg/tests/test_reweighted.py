import numpy as np
import pytest
import scipy.linalg

from corr_sparse import (
    MMVProblem,
    MmvGenSpec,
    ReweightOptions,
    WeightState,
    dual_refresh,
    g_tc_penalty,
    gen_mmv_instance,
    group_lasso_md,
    group_lasso_solve,
    nmse,
    rw_l1_candes_solve,
    rw_l1_sbl_solve,
    rw_l2_solve,
    tsbl_solve,
)
from corr_sparse.reweighted import _effective_lambda, _md_rows
from corr_sparse.sbl import SblOptions


def random_pd(rng, l, trace=None):
    q = rng.standard_normal((l, l))
    b = q @ q.T + 0.3 * np.eye(l)
    if trace is not None:
        b *= trace / np.trace(b)
    return b


def cd_group_lasso(phi, y, lam, w, iters=4000, tol=1e-12):
    """Reference solver: cyclic coordinate descent over rows, B = I.

    Minimizes ||Y - Phi X||_F^2 + lam sum_i w_i ||X_i||_2 by exact row
    updates; independent of the proximal-gradient path under test.
    """
    m = phi.shape[1]
    x = np.zeros((m, y.shape[1]))
    resid = y.copy()
    col_sq = np.sum(phi * phi, axis=0)
    for _ in range(iters):
        delta = 0.0
        for i in range(m):
            old = x[i].copy()
            c = phi[:, i] @ (resid + np.outer(phi[:, i], old))
            norm_c = np.linalg.norm(c)
            thr = 0.5 * lam * w[i]
            new = np.zeros_like(old) if norm_c <= thr else (1 - thr / norm_c) * c / col_sq[i]
            if not np.array_equal(new, old):
                resid += np.outer(phi[:, i], old - new)
                x[i] = new
                delta = max(delta, np.abs(new - old).max())
        if delta < tol:
            break
    return x


class TestGroupLassoMd:
    def test_scalar_soft_threshold(self):
        res = group_lasso_md(MMVProblem([[1.0]], [[3.0]], 2.0), np.ones(1), np.eye(1))
        assert res.x_mat[0, 0] == pytest.approx(2.0, abs=1e-8)

    def test_matches_coordinate_descent_reference(self):
        rng = np.random.default_rng(0)
        opts = ReweightOptions(fista_tol=1e-9, fista_max_iters=50_000)
        for trial in range(5):
            n, m, l = 6, 12, 3
            phi = rng.standard_normal((n, m))
            y = rng.standard_normal((n, l))
            lam = 0.8
            w = rng.uniform(0.5, 2.0, m)
            res = group_lasso_md(MMVProblem(phi, y, lam), w, np.eye(l), opts)
            ref = cd_group_lasso(phi, y, lam, w)
            assert np.linalg.norm(res.x_mat - ref) <= 1e-6

    def test_null_solution_above_critical_lambda(self):
        rng = np.random.default_rng(1)
        n, m, l = 5, 9, 3
        phi = rng.standard_normal((n, m))
        y = rng.standard_normal((n, l))
        w = rng.uniform(0.5, 2.0, m)
        b = random_pd(rng, l, trace=l)
        b_half = scipy.linalg.sqrtm(b).real
        crit = max(
            2.0 * np.linalg.norm(phi[:, i] @ y @ b_half) / w[i] for i in range(m)
        )
        res = group_lasso_md(MMVProblem(phi, y, 1.01 * crit), w, b)
        assert np.all(res.x_mat == 0.0)
        # just below the critical value the solution leaves zero
        res2 = group_lasso_md(MMVProblem(phi, y, 0.9 * crit), w, b)
        assert np.any(res2.x_mat != 0.0)

    def test_kkt_certificate_at_return(self):
        rng = np.random.default_rng(2)
        n, m, l = 6, 14, 2
        phi = rng.standard_normal((n, m))
        y = rng.standard_normal((n, l))
        lam = 0.5
        w = rng.uniform(0.5, 2.0, m)
        b = random_pd(rng, l, trace=l)
        opts = ReweightOptions(fista_tol=1e-8)
        res = group_lasso_md(MMVProblem(phi, y, lam), w, b, opts)
        assert res.converged
        # verify the certificate independently in the transformed metric
        d, u = np.linalg.eigh(b)
        b_half = (u * np.sqrt(d)) @ u.T
        z = res.x_mat @ (u / np.sqrt(d)) @ u.T
        grad = 2.0 * phi.T @ (phi @ z @ b_half - y) @ b_half
        norms = np.linalg.norm(z, axis=1)
        for i in range(m):
            if norms[i] > 0:
                kkt = np.linalg.norm(grad[i] + lam * w[i] * z[i] / norms[i])
            else:
                kkt = max(0.0, np.linalg.norm(grad[i]) - lam * w[i])
            assert kkt <= 1e-8 + 1e-12

    def test_objective_trace_nonincreasing(self):
        rng = np.random.default_rng(3)
        phi = rng.standard_normal((8, 20))
        y = rng.standard_normal((8, 3))
        res = group_lasso_md(MMVProblem(phi, y, 0.05), np.ones(20), np.eye(3))
        diffs = np.diff(res.objective_trace)
        assert diffs.max(initial=-np.inf) <= 1e-10 * max(1.0, res.objective_trace[0])

    def test_md_penalty_equals_transformed_norm(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            l = rng.integers(1, 5)
            b = random_pd(rng, l)
            x = rng.standard_normal((6, l))
            d, u = np.linalg.eigh(b)
            z = x @ (u / np.sqrt(d)) @ u.T
            assert np.allclose(
                _md_rows(x, b), np.linalg.norm(z, axis=1), rtol=1e-12, atol=1e-12
            )


class TestCollapses:
    def test_md_identity_matches_plain_counterpart(self):
        spec = MmvGenSpec(n=10, m=24, k=3, l=3, corr_beta=0.7, seed=6)
        problem, _ = gen_mmv_instance(spec)
        a = rw_l2_solve(problem, "mahalanobis", ReweightOptions(b_source="identity"))
        b = rw_l2_solve(problem, "lq_norm")
        assert np.allclose(a.x_mat, b.x_mat, atol=1e-12)
        c = rw_l1_candes_solve(problem, "md_true_b", b_true=np.eye(3))
        d = rw_l1_candes_solve(problem, "l2_norm")
        assert np.linalg.norm(c.x_mat - d.x_mat) <= 1e-6

    def test_one_outer_identity_is_group_lasso(self):
        spec = MmvGenSpec(n=10, m=24, k=3, l=3, corr_beta=0.7, seed=7)
        problem, _ = gen_mmv_instance(spec)
        opts = ReweightOptions(b_source="identity", outer_iters=1)
        est = rw_l1_sbl_solve(problem, opts)
        lam = _effective_lambda(problem)
        ref = group_lasso_md(
            MMVProblem(problem.phi, problem.y_mat, lam), np.ones(24), np.eye(3)
        )
        assert np.array_equal(est.x_mat, ref.x_mat)

    def test_candes_first_pass_is_scaled_group_lasso(self):
        # from X = 0 all weights are exactly 1/eps, so one outer pass equals
        # the uniform group Lasso with lam' = lam/eps
        spec = MmvGenSpec(n=9, m=20, k=3, l=2, corr_beta=0.5, seed=8)
        problem, _ = gen_mmv_instance(spec)
        eps = 1e-3
        opts = ReweightOptions(outer_iters=1, epsilon=eps)
        est = rw_l1_candes_solve(problem, "l2_norm", opts)
        lam = _effective_lambda(problem)
        ref = group_lasso_md(
            MMVProblem(problem.phi, problem.y_mat, lam / eps), np.ones(20), np.eye(2)
        )
        assert np.allclose(est.x_mat, ref.x_mat, atol=1e-12)

    def test_one_step_ridge_equivalence(self):
        # single reweighted-l2 step with gamma = 1, B = I is ridge regression
        rng = np.random.default_rng(9)
        phi = rng.standard_normal((7, 12))
        y = rng.standard_normal((7, 2))
        lam = 0.3
        est = rw_l2_solve(MMVProblem(phi, y, lam), "lq_norm", ReweightOptions(outer_iters=1))
        ridge = np.linalg.solve(lam * np.eye(12) + phi.T @ phi, phi.T @ y)
        assert np.allclose(est.x_mat, ridge, rtol=1e-10, atol=1e-10)


class TestDualRules:
    def test_fixed_point_self_consistency(self):
        # at inner-loop convergence gamma_i * w_i == 2 sqrt(X_i B^-1 X_i^T);
        # the identity violation is bounded by the final w drift, so it is
        # checked where the loop actually converges (fixed-B inner modes;
        # the learned-B map settles into a harmless ~1e-5 limit cycle)
        spec = MmvGenSpec(n=12, m=24, k=3, l=3, corr_beta=0.8, seed=10)
        problem, _ = gen_mmv_instance(spec)
        est = rw_l1_sbl_solve(problem, ReweightOptions(inner_iters=2))
        lam = _effective_lambda(problem)
        state = WeightState(w=np.ones(24), gamma=np.ones(24), b=est.hyper.b)
        drift = np.inf
        for _ in range(20_000):
            new = dual_refresh(problem.phi, est.x_mat, state, lam, learn_b=False)
            drift = float(np.max(np.abs(new.w - state.w) / state.w))
            state = new
            if drift < 1e-10:
                break
        assert drift < 1e-10
        md = _md_rows(est.x_mat, state.b)
        live = md > 0
        assert np.allclose(
            state.gamma[live] * state.w[live], 2.0 * md[live], rtol=1e-8, atol=1e-12
        )
        # learned-B refresh: violation stays at the drift scale
        state = WeightState(w=np.ones(24), gamma=np.ones(24), b=np.eye(3))
        for _ in range(500):
            state = dual_refresh(problem.phi, est.x_mat, state, lam)
        md = _md_rows(est.x_mat, state.b)
        live = md > 0
        viol = np.abs(state.gamma[live] * state.w[live] - 2 * md[live]) / (2 * md[live])
        assert viol.max() < 1e-3

    def test_recovery_orderings_small(self):
        # correlation-aware variants should not lose to their blind twins
        fails = {"sbl": 0, "sbl_bi": 0}
        trials = 12
        for t in range(trials):
            spec = MmvGenSpec(n=12, m=30, k=4, l=4, corr_beta=0.9, seed=60_000 + t)
            problem, truth = gen_mmv_instance(spec)
            est = rw_l1_sbl_solve(problem)
            est_bi = rw_l1_sbl_solve(problem, ReweightOptions(b_source="identity"))
            fails["sbl"] += nmse(est.x_mat, truth.x_true) > 1e-3
            fails["sbl_bi"] += nmse(est_bi.x_mat, truth.x_true) > 1e-3
        assert fails["sbl"] <= fails["sbl_bi"]

    def test_group_lasso_solve_wrapper(self):
        spec = MmvGenSpec(n=10, m=20, k=2, l=2, corr_beta=0.0, seed=11)
        problem, truth = gen_mmv_instance(spec)
        est = group_lasso_solve(problem)
        assert est.x_mat.shape == (20, 2)
        assert est.hyper.lam > 0


class TestGtcPenalty:
    def test_zero_signal_limit(self):
        rng = np.random.default_rng(12)
        phi = rng.standard_normal((4, 6))
        lam = 0.1
        val = g_tc_penalty(np.zeros((6, 2)), lam, phi)
        assert val == pytest.approx(8 * np.log(lam), abs=1e-3)

    def test_never_above_value_at_solver_fixed_point(self):
        spec = MmvGenSpec(n=8, m=12, k=2, l=2, corr_beta=0.8, seed=13)
        problem, _ = gen_mmv_instance(spec)
        lam = 1e-4
        est = tsbl_solve(
            MMVProblem(problem.phi, problem.y_mat, lam), SblOptions(lambda_mode="fixed")
        )
        from corr_sparse.reweighted import _gtc_objective

        at_fixed_point = _gtc_objective(
            est.x_mat, lam, problem.phi, est.hyper.gamma, est.hyper.b
        )
        val = g_tc_penalty(est.x_mat, lam, problem.phi)
        assert val <= at_fixed_point + 1e-6 * max(1.0, abs(at_fixed_point))

    @pytest.mark.slow
    def test_matches_dense_grid_oracle(self):
        # two-row instance: exhaustive grid over (gamma1, gamma2, r)
        rng = np.random.default_rng(14)
        phi = rng.standard_normal((3, 2))
        x = rng.standard_normal((2, 2))
        lam = 0.05
        from corr_sparse.reweighted import _gtc_objective

        gammas = np.geomspace(1e-3, 1e2, 50)
        rs = np.linspace(-0.95, 0.95, 50)
        best = np.inf
        for g1 in gammas:
            for g2 in gammas:
                gamma = np.array([g1, g2])
                for r in rs:
                    b = scipy.linalg.toeplitz([1.0, r])
                    best = min(best, _gtc_objective(x, lam, phi, gamma, b))
        val = g_tc_penalty(x, lam, phi, restarts=6)
        assert val <= best + 1e-2 * max(1.0, abs(best))
        assert val >= best - 1e-2 * max(1.0, abs(best))
