import numpy as np
import pytest

from devsplit.fb import (FbProblem, FbState, SolverAbort, advance, budget_weights, deviate, deviation_budget,
                         enforce_budget, ell_sq, fb_step, residual_bound, solve)
from devsplit.metric import IdentityMetric
from devsplit.operators import CocoerciveOperator, L1Resolvent, prox_l1
from devsplit.policies import HostilePolicy, MomentumPolicy, RandomPolicy
from devsplit.problems import TOY1D_SOLUTION, synthetic_fb, toy1d
from devsplit.schedules import Schedules, UniformZeta

I = IdentityMetric()


# -- scalar formulas -------------------------------------------------------

def test_ell_sq_zero_deviation():
    x, p = np.array([1.0, 2.0]), np.array([0.0, 4.0])
    assert ell_sq(x, p, 0 * x, 0 * x, 1.0, 1.0, 1.0, I) == pytest.approx(0.5 * 5.0)


def test_ell_sq_v_coefficient_vanishes_at_unit_lambda():
    rng = np.random.default_rng(0)
    x, p, u, v = rng.standard_normal((4, 3))
    got = ell_sq(x, p, u, v, 1.0, 1.0, 1.0, I)
    assert got == pytest.approx(0.5 * np.sum((p - x + u) ** 2))


def test_ell_sq_at_fixed_point():
    x = np.array([0.3, -1.0])
    assert ell_sq(x, x.copy(), 0 * x, 0 * x, 0.7, 1.2, 0.5, I) == 0.0


def test_budget_weights_examples():
    assert budget_weights(1.0, 1.0, 1.0) == pytest.approx((1.0, 1.0))
    for lam in (0.3, 1.0, 1.7):
        wu, wv = budget_weights(2.0, lam, 0.0)
        assert wu == 0.0
        assert wv == pytest.approx(lam / (2 - lam))


def test_single_deviation_budget_form():
    # weights (1, 1) with v = u give 2|u|^2 <= (1 - eps) * 0.5 |p - x + u|^2
    eps = 0.2
    rng = np.random.default_rng(1)
    x, p, u = rng.standard_normal((3, 4))
    l2 = ell_sq(x, p, u, u, 1.0, 1.0, 1.0, I)
    b = deviation_budget(1.0, 1.0, 1.0, 1 - eps, l2)
    assert b.lhs(u, u) == pytest.approx(2 * u @ u)
    assert b.rhs == pytest.approx((1 - eps) / 4 * 2 * np.sum((p - x + u) ** 2))


def test_zero_zeta_forces_zero_deviation():
    b = deviation_budget(1.0, 1.0, 1.0, 0.0, 3.0)
    assert b.rhs == 0.0
    u, v, scale = enforce_budget(np.ones(2), np.ones(2), b)
    assert scale == 0.0 and not u.any() and not v.any()


def test_enforce_budget_scales_to_boundary():
    b = deviation_budget(1.0, 1.0, 1.0, 0.5, 2.0)
    u, v, scale = enforce_budget(np.array([3.0, 0.0]), np.array([0.0, 4.0]), b)
    assert b.lhs(u, v) == pytest.approx(b.rhs)
    assert scale == pytest.approx(np.sqrt(1.0 / 25.0))
    # already inside: untouched
    u2, v2, s2 = enforce_budget(0.1 * u, 0.1 * v, b)
    assert s2 == 1.0
    np.testing.assert_array_equal(u2, 0.1 * u)


def test_residual_bound_examples():
    rng = np.random.default_rng(2)
    x, p, v = rng.standard_normal((3, 5))
    z = np.zeros(5)
    beta = 2.5
    assert residual_bound(x, p, z, z, 1 / beta, 1.0, beta, I) == pytest.approx(beta * np.linalg.norm(x - p))
    assert residual_bound(x, x.copy(), z, z, 0.4, 1.3, beta, I) == 0.0
    assert residual_bound(x, p, z, v, 0.7, 1.3, 0.0, I) == pytest.approx(np.linalg.norm(x - p + v) / 0.7)


# -- steps -----------------------------------------------------------------

def test_toy_one_step_reaches_fixed_point():
    s = Schedules.build(0.5, 1.0, 1.0)
    for x0 in (-3.0, 0.2, 5.0):
        state = fb_step(FbState.initial([x0]), toy1d(), s)
        assert state.last.p[0] == 0.0
        assert state.x[0] == 0.0


def test_toy_fixed_point_by_subgradient():
    # 0 in sign-set(x) + x - 1: brute-force over a grid
    grid = np.linspace(-2, 2, 4001)
    ok = [x for x in grid if (abs(1 - x) <= 1 if x == 0 else np.sign(x) + x - 1 == 0)]
    assert ok == [0.0]
    np.testing.assert_array_equal(TOY1D_SOLUTION, [0.0])


def test_toy_solve():
    tr = solve(toy1d(), Schedules.build(0.5, 1.0, 1.0), [5.0], residual_tol=0.0, max_iter=10,
               reference=TOY1D_SOLUTION)
    assert tr.converged and 1 <= len(tr) <= 2
    assert tr.array("residual")[-1] == 0.0
    assert tr.final_x[0] == 0.0


def test_zero_deviation_matches_plain_forward_backward():
    fb = synthetic_fb(3, dim=8)
    gamma = 1.5 / fb.problem.beta
    s = Schedules.build(1e-3, gamma, 1.0)
    state = FbState.initial(np.ones(8))
    x = np.ones(8)
    for _ in range(50):
        state = fb_step(state, fb.problem, s)
        x = prox_l1(x - gamma * fb.problem.C(x), gamma * fb.weight)
        np.testing.assert_allclose(state.x, x, rtol=1e-14, atol=0)


def test_single_deviation_instance():
    # gamma = 1/beta, lam = 1, v = u: p = J(x + u - C(x + u)/beta), x_next = p - u
    fb = synthetic_fb(4, dim=6)
    beta = fb.problem.beta
    eps = 0.1
    s = Schedules.build(eps, 1 / beta, 1.0, 1 - eps)
    state = FbState.initial(np.full(6, 2.0))
    pol = MomentumPolicy("uv")
    nonzero = 0
    for _ in range(60):
        x, u, v = state.x, state.u, state.v
        np.testing.assert_array_equal(u, v)
        nonzero += bool(u.any())
        state = fb_step(state, fb.problem, s, pol)
        w = x + u
        p = prox_l1(w - fb.problem.C(w) / beta, fb.weight / beta)
        np.testing.assert_allclose(state.last.p, p, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(state.x, p - u, rtol=1e-13, atol=1e-15)
    assert nonzero > 50


def test_zero_zeta_run_equals_zero_deviation_run():
    fb = synthetic_fb(5, dim=5)
    g = 1.9 / fb.problem.beta
    a = solve(fb.problem, Schedules.build(1e-6, g, 1.0, 0.0), np.ones(5), policy=RandomPolicy(0), max_iter=200)
    b = solve(fb.problem, Schedules.build(1e-6, g, 1.0, 0.0), np.ones(5), max_iter=200)
    np.testing.assert_array_equal(a.final_x, b.final_x)
    np.testing.assert_array_equal(a.array("ell_sq"), b.array("ell_sq"))


def test_quadratic_l1_converges():
    fb = synthetic_fb(7, dim=20)
    s = fb.default_schedules(lam=1.0, zeta=UniformZeta(7))
    tr = solve(fb.problem, s, np.zeros(20), policy=MomentumPolicy("uv"), max_iter=100_000, residual_tol=1e-8)
    assert tr.converged
    assert tr.array("residual")[-1] <= 1e-8


@pytest.mark.parametrize("policy", [MomentumPolicy("uv"), RandomPolicy(3), HostilePolicy(3)])
def test_budget_safety(policy):
    fb = synthetic_fb(8, dim=6)
    s = fb.default_schedules(lam=0.8, zeta=UniformZeta(8))
    state = FbState.initial(np.ones(6))
    for _ in range(300):
        state = fb_step(state, fb.problem, s, policy)
        b = state.last.budget
        assert b.lhs(state.u, state.v) <= b.rhs + 1e-12 * (1 + b.rhs)


def test_graph_membership():
    fb = synthetic_fb(9, dim=6)
    s = fb.default_schedules(lam=1.3, zeta=UniformZeta(9))
    tr = solve(fb.problem, s, np.full(6, 3.0), policy=RandomPolicy(9), max_iter=400, keep_iterates=True,
               record_delta=True)
    delta, bound = tr.array("delta"), tr.array("residual")
    assert np.all(delta <= bound * (1 + 1e-10) + 1e-15)
    # the inclusion itself: (z - p)/gamma - Cy is a subgradient of w|.|_1 at p
    state = FbState.initial(np.full(6, 3.0))
    pol = RandomPolicy(9)
    for _ in range(100):
        state = advance(state, fb.problem, s)
        info = state.last
        g = (info.z - info.p) / info.gamma - info.Cy
        # cancellation in z - p costs about eps * |z| / gamma
        tol = 1e-14 * (1 + np.abs(info.z).max() + np.abs(info.Cy).max()) / info.gamma
        assert np.all(np.abs(g) <= fb.weight + tol)
        nz = info.p != 0
        np.testing.assert_allclose(g[nz], fb.weight * np.sign(info.p[nz]), rtol=0, atol=tol)
        state = deviate(state, fb.problem, s, pol)


def test_nan_abort_keeps_trace():
    calls = {"n": 0}

    def bad(x):
        calls["n"] += 1
        return x * np.nan if calls["n"] > 3 else x - 1.0

    prob = FbProblem(A=L1Resolvent(1.0), C=CocoerciveOperator(eval=bad, beta=1.0))
    with pytest.raises(SolverAbort) as exc:
        solve(prob, Schedules.build(0.5, 0.5, 1.0), [5.0], max_iter=20, residual_tol=-1)
    tr = exc.value.trace
    assert tr.status == "aborted" and len(tr) == 3
    assert np.all(np.isfinite(tr.final_x))


def test_max_iter_status():
    fb = synthetic_fb(1, dim=4)
    tr = solve(fb.problem, fb.default_schedules(), np.ones(4), max_iter=3, residual_tol=0.0)
    assert tr.status == "max_iter" and len(tr) == 3
