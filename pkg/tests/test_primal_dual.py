import numpy as np
import pytest

from devsplit.fb import FbState, ell_sq, fb_step
from devsplit.policies import MomentumPolicy, RandomPolicy
from devsplit.primal_dual import (InertialState, cached_apply, inertial_rhs_factor, inertial_solve, inertial_step,
                                  pd_advance, pd_budget, pd_initial, pd_solve, pd_step)
from devsplit.problems import synthetic_pd
from devsplit.schedules import Schedules, UniformZeta
from oracles import PrimalOnlyU, dense_stacked_oracle


@pytest.mark.parametrize("with_C", [True, False])
@pytest.mark.parametrize("policy_name", ["zero", "momentum", "random"])
def test_matches_dense_stacked_oracle(with_C, policy_name):
    sp = synthetic_pd(1, 3, 4, with_C=with_C)
    prob = sp.problem
    fb_prob, M = dense_stacked_oracle(sp)
    np.testing.assert_allclose(prob.metric.dense(), M, atol=1e-15)
    make = {"zero": lambda: None, "momentum": lambda: MomentumPolicy("uv"), "random": lambda: RandomPolicy(5)}
    s = prob.schedules(Schedules.build(1e-3, prob.tau, 1.2, UniformZeta(2)))
    p1, p2 = make[policy_name](), make[policy_name]()
    a = pd_initial(np.ones(3), -np.ones(4))
    b = FbState.initial(np.r_[np.ones(3), -np.ones(4)])
    for _ in range(50):
        a = pd_step(a, prob, s, p1)
        b = fb_step(b, fb_prob, s, None if p2 is None else PrimalOnlyU(p2, 3))
        np.testing.assert_allclose(a.last.p, b.last.p, atol=1e-8)
    np.testing.assert_allclose(a.x, b.x, atol=1e-8)
    assert a.last.ell_sq == pytest.approx(b.last.ell_sq, rel=1e-6, abs=1e-12)
    assert a.last.residual == pytest.approx(b.last.residual, rel=1e-6, abs=1e-12)


def test_condat_vu_reduction():
    sp = synthetic_pd(2, 3, 4, with_C=True)
    prob = sp.problem
    tau, sigma = prob.tau, prob.sigma
    s = Schedules.build(1e-3, tau, 1.0)
    state = pd_initial(np.zeros(3), np.zeros(4))
    x, mu = np.zeros(3), np.zeros(4)
    for _ in range(100):
        state = pd_step(state, prob, s)
        x_new = prob.A.resolve(tau, x - tau * (sp.L_mat.T @ mu) - tau * (sp.Q @ x - sp.c))
        mu = prob.dual_resolvent(mu + sigma * (sp.L_mat @ (2 * x_new - x)))
        x = x_new
        np.testing.assert_allclose(state.x, np.r_[x, mu], rtol=1e-12, atol=1e-14)


def test_chambolle_pock_reduction(svm):
    prob = svm.pd
    tau, sigma = prob.tau, prob.sigma
    L = svm.L.toarray()
    s = Schedules.build(1e-6, tau, 1.0)
    state = pd_initial(np.zeros(svm.n_primal), np.zeros(svm.n_dual))
    x, mu = np.zeros(svm.n_primal), np.zeros(svm.n_dual)
    for _ in range(200):
        state = pd_step(state, prob, s)
        x_new = prob.A.resolve(tau, x - tau * (L.T @ mu))
        mu = prob.dual_resolvent(mu + sigma * (L @ (2 * x_new - x)))
        x = x_new
    np.testing.assert_allclose(state.x, np.r_[x, mu], rtol=1e-12, atol=1e-13)


def test_budget_without_cocoercive_part():
    sp = synthetic_pd(3, 3, 4, with_C=False)
    prob = sp.problem
    M = prob.metric
    lam, lam_next, zeta = 1.3, 0.9, 0.6
    s = prob.schedules(Schedules.build(1e-3, prob.tau, lambda n: lam if n == 0 else lam_next, zeta))
    rng = np.random.default_rng(0)
    state = pd_initial(rng.standard_normal(3), rng.standard_normal(4))
    state.v[:] = 0.1 * rng.standard_normal(7)
    state = pd_advance(state, prob, s)
    info = state.last
    b = pd_budget(prob, lam_next, zeta, info.ell_sq)
    assert b.weight_u == 0.0
    r = info.p - info.x - (1 - lam) / (2 - lam) * info.v
    factor = (2 - lam_next) * (2 - lam) * lam / lam_next
    v_new = rng.standard_normal(7)
    lhs_printed, rhs_printed = M.norm_sq(v_new), zeta * factor * M.norm_sq(r)
    # same inequality up to the common positive factor weight_v
    assert b.lhs(np.zeros(7), v_new) / b.weight_v == pytest.approx(lhs_printed)
    assert b.rhs / b.weight_v == pytest.approx(rhs_printed, rel=1e-12)


def test_budget_unit_lambda():
    sp = synthetic_pd(3, 3, 4, with_C=False)
    prob = sp.problem
    s = prob.schedules(Schedules.build(1e-3, prob.tau, 1.0, 0.4))
    state = pd_advance(pd_initial(np.ones(3), np.ones(4)), prob, s)
    info = state.last
    b = pd_budget(prob, 1.0, 0.4, info.ell_sq)
    assert b.weight_v == 1.0
    assert b.rhs == pytest.approx(0.4 * prob.metric.norm_sq(info.p - info.x))
    assert pd_budget(prob, 1.0, 0.0, info.ell_sq).rhs == 0.0


def test_primal_u_weight_uses_plain_norm():
    sp = synthetic_pd(4, 3, 4, with_C=True)
    prob = sp.problem
    b = pd_budget(prob, 1.0, 0.5, 1.0)
    ux = np.r_[np.array([0.3, -0.2, 0.5]), np.zeros(4)]
    assert b.lhs(ux, np.zeros(7)) == pytest.approx(b.weight_u * (ux @ ux), rel=1e-14)


def test_pd_dual_u_always_zero():
    sp = synthetic_pd(5, 3, 4, with_C=True)
    prob = sp.problem
    s = prob.schedules(Schedules.build(1e-3, prob.tau, 1.0, UniformZeta(5)))
    state = pd_initial(np.ones(3), np.ones(4))
    pol = RandomPolicy(1)
    for _ in range(30):
        state = pd_step(state, prob, s, pol)
        assert not state.u[3:].any()
        b = state.last.budget
        assert b.lhs(state.u, state.v) <= b.rhs + 1e-12 * (1 + b.rhs)


def test_pd_solve_with_deviations_converges():
    sp = synthetic_pd(6, 3, 4, with_C=True)
    prob = sp.problem
    s = prob.schedules(Schedules.build(1e-6, prob.tau, 1.0, UniformZeta(6)))
    tr = pd_solve(prob, s, np.zeros(3), np.zeros(4), policy=MomentumPolicy("uv"), max_iter=50_000,
                  residual_tol=1e-10)
    assert tr.converged
    x, mu = tr.final_x[:3], tr.final_x[3:]
    # 0 = A x + L* mu + C x and mu = B(L x)
    np.testing.assert_allclose(sp.A_mat @ x + sp.L_mat.T @ mu + sp.Q @ x - sp.c, 0, atol=1e-7)
    np.testing.assert_allclose(mu, sp.B_mat @ (sp.L_mat @ x), atol=1e-7)


# -- inertial method -------------------------------------------------------

def test_inertial_first_step_is_plain():
    sp = synthetic_pd(7, 3, 4, with_C=False)
    prob = sp.problem
    s = Schedules.build(1e-6, prob.tau, 1.0, 0.5)
    st = inertial_step(InertialState.initial(np.ones(3), np.ones(4)), prob, s)
    ref = pd_step(pd_initial(np.ones(3), np.ones(4)), prob, s)
    assert st.last.a == 0.0
    np.testing.assert_allclose(st.w, ref.x, rtol=1e-14, atol=1e-15)


def test_inertial_zero_zeta_is_chambolle_pock(svm):
    prob = svm.pd
    s = Schedules.build(1e-6, prob.tau, 1.0, 0.0)
    st = InertialState.initial(np.zeros(svm.n_primal), np.zeros(svm.n_dual))
    ref = pd_initial(np.zeros(svm.n_primal), np.zeros(svm.n_dual))
    for _ in range(300):
        st = inertial_step(st, prob, s)
        ref = pd_step(ref, prob, s)
        assert st.a == 0.0
    np.testing.assert_allclose(st.w, ref.x, rtol=1e-10, atol=1e-12)


def test_inertial_requires_zero_C():
    sp = synthetic_pd(7, 3, 4, with_C=True)
    with pytest.raises(ValueError):
        inertial_step(InertialState.initial(np.ones(3), np.ones(4)), sp.problem,
                      Schedules.build(1e-6, sp.problem.tau, 1.0))


@pytest.mark.parametrize("lam", [0.5, 1.0, 1.5])
def test_inertial_norm_condition_saturated(svm, lam):
    prob = svm.pd
    M = prob.metric
    s = Schedules.build(1e-6, prob.tau, lam, UniformZeta(0))
    st = InertialState.initial(np.zeros(svm.n_primal), np.zeros(svm.n_dual))
    hits = 0
    for _ in range(400):
        w_prev = st.w
        v_n = st.a * (st.w - np.r_[st.x_prev, st.mu_prev])
        st = inertial_step(st, prob, s, a_max=10.0)
        info = st.last
        np.testing.assert_allclose(info.v, v_n, rtol=0, atol=1e-14)
        # recompute both sides from the stored iterates
        l2 = ell_sq(w_prev, info.p, np.zeros_like(w_prev), v_n, prob.tau, lam, 0.0, M)
        assert info.ell_sq == pytest.approx(l2, rel=1e-9, abs=1e-14)
        D = st.w - w_prev
        lhs = st.a ** 2 * M.norm_sq(D)
        rhs = info.zeta * inertial_rhs_factor(lam, lam) / (lam * (2 - lam)) * l2
        assert lhs <= rhs * (1 + 1e-12) + 1e-300
        if st.a < 10.0 and rhs > 1e-20:
            assert lhs == pytest.approx(rhs, rel=1e-8)
            hits += 1
    assert hits > 300


def test_inertial_cache_fidelity(svm):
    prob = svm.pd
    L = svm.L
    s = Schedules.build(1e-6, prob.tau, 1.0, UniformZeta(0))
    st = InertialState.initial(np.zeros(svm.n_primal), np.zeros(svm.n_dual))
    for n in range(1, 1001):
        st = inertial_step(st, prob, s)
        if n % 50 == 0:
            c = cached_apply(st)
            for cached, direct in ((c["Lx"], L.apply(st.x)), (c["Lt_mu"], L.adjoint_apply(st.mu)),
                                   (c["L_x_hat"], L.apply(st.last.x_hat)),
                                   (c["Lt_mu_hat"], L.adjoint_apply(st.last.mu_hat))):
                assert np.linalg.norm(cached - direct) <= 1e-8 * (1 + np.linalg.norm(cached))


def test_inertial_evaluation_counts():
    sp = synthetic_pd(8, 3, 4, with_C=False)
    prob = sp.problem
    s = Schedules.build(1e-6, prob.tau, 1.0, UniformZeta(1))
    st = InertialState.initial(np.ones(3), np.ones(4))
    st = inertial_step(st, prob, s)
    assert st.direct_evals == 4
    for _ in range(99):
        before = st.direct_evals
        st = inertial_step(st, prob, s)
        assert st.direct_evals - before == 2
    assert st.direct_evals == 2 * 100 + 2
    tr = inertial_solve(prob, s, np.ones(3), np.ones(4), max_iter=100)
    assert tr.meta["direct_evals"] == 202


def test_inertial_zero_momentum_cache_is_relaxation():
    sp = synthetic_pd(9, 3, 4, with_C=False)
    prob = sp.problem
    s = Schedules.build(1e-6, prob.tau, 0.7, 0.0)
    st = InertialState.initial(np.ones(3), np.ones(4))
    for _ in range(20):
        prev = st
        st = inertial_step(st, prob, s)
        assert st.last.a == 0.0
        np.testing.assert_array_equal(st.last.L_x_hat, prev.Lx if prev.n else sp.L_mat @ np.ones(3))
