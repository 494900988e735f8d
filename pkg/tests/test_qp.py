"""Subproblem solver checks against closed forms and an independent solver.

The independent oracle reformulates the penalty objective with slack
variables into a smooth QP and hands it to scipy's SLSQP, a completely
separate implementation. Objectives must agree (the minimizer itself can
be non-unique when H is singular).
"""

import numpy as np
import pytest
import scipy.optimize as sopt

from hybridlap.errors import QpFailure
from hybridlap.qp import (IN_ON, QpStatuses, VAR_FIX, solve_penalty_qp)


def penalty_objective(H, g, A_eq, b_eq, A_in, b_in, rho, d):
    val = g @ d + 0.5 * d @ (H @ d)
    if b_eq is not None and len(b_eq):
        val += rho * np.abs(b_eq + A_eq @ d).sum()
    if b_in is not None and len(b_in):
        val += rho * np.maximum(b_in + A_in @ d, 0.0).sum()
    return val


def slsqp_oracle(H, g, A_eq, b_eq, A_in, b_in, lb, ub, rho):
    """Solve the same piecewise problem via slack reformulation + SLSQP."""
    n = g.size
    m_e = 0 if b_eq is None else len(b_eq)
    m_i = 0 if b_in is None else len(b_in)

    def fun(z):
        d = z[:n]
        t = z[n:n + m_e]
        s = z[n + m_e:]
        return g @ d + 0.5 * d @ (H @ d) + rho * (t.sum() + s.sum())

    cons = []
    if m_e:
        cons.append({"type": "ineq",
                     "fun": lambda z: z[n:n + m_e] - (b_eq + A_eq @ z[:n])})
        cons.append({"type": "ineq",
                     "fun": lambda z: z[n:n + m_e] + (b_eq + A_eq @ z[:n])})
    if m_i:
        cons.append({"type": "ineq",
                     "fun": lambda z: z[n + m_e:] - (b_in + A_in @ z[:n])})
    bounds = [(lb[i], ub[i]) for i in range(n)]
    bounds += [(0.0, None)] * (m_e + m_i)
    z0 = np.zeros(n + m_e + m_i)
    if m_e:
        z0[n:n + m_e] = np.abs(b_eq) + 1.0
    if m_i:
        z0[n + m_e:] = np.maximum(b_in, 0.0) + 1.0
    res = sopt.minimize(fun, z0, method="SLSQP", constraints=cons,
                        bounds=bounds,
                        options={"maxiter": 500, "ftol": 1e-12})
    # SLSQP sometimes stops with status 8 at the solution; either way the
    # returned point evaluated under the exact penalty is a valid upper
    # bound on the optimum, which is all the one-sided comparison needs.
    assert res.success or res.status == 8, res.message
    return res.x[:n], res.x


class TestClosedForms:
    def test_unconstrained_diagonal(self):
        H = np.diag([2.0, 4.0])
        g = np.array([-2.0, -8.0])
        r = solve_penalty_qp(H, g, None, None, None, None,
                             np.full(2, -10.0), np.full(2, 10.0), 1.0)
        assert r.optimal
        assert np.allclose(r.d, [1.0, 2.0], atol=1e-9)

    def test_box_clipping(self):
        H = np.eye(2)
        g = np.array([-5.0, 3.0])   # unconstrained min at (5, -3)
        r = solve_penalty_qp(H, g, None, None, None, None,
                             np.array([-1.0, -1.0]), np.array([1.0, 1.0]), 1.0)
        assert r.optimal
        assert np.allclose(r.d, [1.0, -1.0], atol=1e-9)

    def test_equality_kkt(self):
        """min 1/2|d|^2 s.t. d0 + d1 = 1 has d = (1/2, 1/2), lam = -1/2."""
        H = np.eye(2)
        g = np.zeros(2)
        A = np.array([[1.0, 1.0]])
        b = np.array([-1.0])     # residual b + A d = 0 at the solution
        r = solve_penalty_qp(H, g, A, b, None, None,
                             np.full(2, -10.0), np.full(2, 10.0), 5.0)
        assert r.optimal
        assert np.allclose(r.d, [0.5, 0.5], atol=1e-9)
        assert r.lam_eq[0] == pytest.approx(-0.5, abs=1e-9)

    def test_single_inequality_active(self):
        """min 1/2|d|^2 - d0 s.t. d0 <= 0.3: active with mu = 0.7."""
        H = np.eye(2)
        g = np.array([-1.0, 0.0])
        A = np.array([[1.0, 0.0]])
        b = np.array([-0.3])
        r = solve_penalty_qp(H, g, None, None, A, b,
                             np.full(2, -10.0), np.full(2, 10.0), 5.0)
        assert r.optimal
        assert np.allclose(r.d, [0.3, 0.0], atol=1e-9)
        assert r.mu_in[0] == pytest.approx(0.7, abs=1e-9)

    def test_inactive_inequality_zero_multiplier(self):
        H = np.eye(1)
        g = np.array([1.0])      # min at d = -1
        A = np.array([[1.0]])
        b = np.array([-5.0])     # d <= 5, never active
        r = solve_penalty_qp(H, g, None, None, A, b,
                             np.array([-10.0]), np.array([10.0]), 2.0)
        assert r.optimal
        assert r.d[0] == pytest.approx(-1.0, abs=1e-9)
        assert r.mu_in[0] == 0.0


class TestElasticBehavior:
    def test_contradictory_equalities_split(self):
        """d = 1 and d = -1 cannot both hold; the solution balances them."""
        H = np.eye(1) * 1e-6
        g = np.zeros(1)
        A = np.array([[1.0], [1.0]])
        b = np.array([-1.0, 1.0])   # wants d=1 and d=-1
        r = solve_penalty_qp(H, g, A, b, None, None,
                             np.array([-10.0]), np.array([10.0]), 3.0)
        assert r.optimal
        # any d in [-1, 1] gives the same l1 sum; residuals stay nonzero
        assert np.abs(r.r_eq).sum() == pytest.approx(2.0, abs=1e-6)

    def test_unreachable_inequality_pinned_at_rho(self):
        """Bound prevents satisfying the row; multiplier pins at rho."""
        H = np.eye(1)
        g = np.zeros(1)
        A = np.array([[1.0]])
        b = np.array([2.0])      # wants d <= -2 but lb = -1
        r = solve_penalty_qp(H, g, None, None, A, b,
                             np.array([-1.0]), np.array([1.0]), 4.0)
        assert r.optimal
        assert r.d[0] == pytest.approx(-1.0, abs=1e-9)
        assert r.mu_in[0] == pytest.approx(4.0)
        assert r.r_in[0] == pytest.approx(1.0, abs=1e-9)

    def test_large_rho_recovers_exact_solution(self):
        H = np.diag([1.0, 1.0])
        g = np.array([0.0, 0.0])
        A_eq = np.array([[1.0, -1.0]])
        b_eq = np.array([0.5])
        for rho in (0.1, 10.0, 1e4):
            r = solve_penalty_qp(H, g, A_eq, b_eq, None, None,
                                 np.full(2, -5.0), np.full(2, 5.0), rho)
            assert r.optimal
        # with big rho the equality holds: d1 - d0 = 0.5... d0 - d1 = -0.5
        assert abs(r.r_eq[0]) < 1e-9


class TestAgainstSlsqp:
    @pytest.mark.parametrize("trial", range(12))
    def test_random_problems_match(self, trial):
        rng = np.random.default_rng(100 + trial)
        n = int(rng.integers(3, 8))
        m_e = int(rng.integers(0, 3))
        m_i = int(rng.integers(0, 4))
        M = rng.normal(size=(n, n))
        H = M.T @ M + np.eye(n) * 0.5
        g = rng.normal(size=n)
        A_eq = rng.normal(size=(m_e, n)) if m_e else None
        b_eq = rng.normal(size=m_e) if m_e else None
        A_in = rng.normal(size=(m_i, n)) if m_i else None
        b_in = rng.normal(size=m_i) if m_i else None
        lb = rng.uniform(-3.0, -0.5, size=n)
        ub = rng.uniform(0.5, 3.0, size=n)
        rho = float(rng.uniform(0.5, 8.0))

        r = solve_penalty_qp(H, g, A_eq, b_eq, A_in, b_in, lb, ub, rho)
        assert r.optimal
        mine = penalty_objective(H, g, A_eq, b_eq, A_in, b_in, rho, r.d)
        d_ref, _ = slsqp_oracle(H, g, A_eq, b_eq, A_in, b_in, lb, ub, rho)
        ref = penalty_objective(H, g, A_eq, b_eq, A_in, b_in, rho, d_ref)
        scale = max(abs(ref), 1.0)
        assert mine <= ref + 1e-5 * scale, (
            f"objective {mine} worse than oracle {ref}")
        assert abs(mine - r.obj) < 1e-8 * scale

    def test_sparse_path_matches_dense(self):
        rng = np.random.default_rng(777)
        n = 12
        M = rng.normal(size=(n, n))
        H = M.T @ M + np.eye(n)
        g = rng.normal(size=n)
        A_eq = rng.normal(size=(3, n))
        b_eq = rng.normal(size=3)
        A_in = rng.normal(size=(5, n))
        b_in = rng.normal(size=5)
        lb = np.full(n, -2.0)
        ub = np.full(n, 2.0)
        dense = solve_penalty_qp(H, g, A_eq, b_eq, A_in, b_in, lb, ub, 3.0,
                                 dense_below=1000)
        sparse = solve_penalty_qp(H, g, A_eq, b_eq, A_in, b_in, lb, ub, 3.0,
                                  dense_below=1)
        assert dense.optimal and sparse.optimal
        assert dense.obj == pytest.approx(sparse.obj, rel=1e-8, abs=1e-8)
        assert np.allclose(dense.d, sparse.d, atol=1e-6)


class TestWarmStart:
    def test_warm_statuses_cut_factorizations(self):
        rng = np.random.default_rng(5)
        n = 10
        M = rng.normal(size=(n, n))
        H = M.T @ M + np.eye(n)
        g = rng.normal(size=n)
        A_in = rng.normal(size=(6, n))
        b_in = rng.normal(size=6)
        lb = np.full(n, -1.5)
        ub = np.full(n, 1.5)
        cold = solve_penalty_qp(H, g, None, None, A_in, b_in, lb, ub, 2.0)
        warm = solve_penalty_qp(H, g, None, None, A_in, b_in, lb, ub, 2.0,
                                warm=cold.statuses)
        assert warm.optimal
        assert warm.obj == pytest.approx(cold.obj, rel=1e-10, abs=1e-10)
        assert warm.factorizations <= 3
        assert warm.factorizations < cold.factorizations or cold.factorizations <= 3

    def test_fixed_variables_respected(self):
        H = np.eye(3)
        g = np.array([-1.0, -1.0, -1.0])
        lb = np.array([0.0, -5.0, -5.0])
        ub = np.array([0.0, 5.0, 5.0])   # first variable pinned at 0
        r = solve_penalty_qp(H, g, None, None, None, None, lb, ub, 1.0)
        assert r.optimal
        assert r.d[0] == 0.0
        assert np.allclose(r.d[1:], [1.0, 1.0], atol=1e-9)
        assert r.statuses.var[0] == VAR_FIX


class TestGuards:
    def test_bad_bounds_raise(self):
        with pytest.raises(QpFailure):
            solve_penalty_qp(np.eye(1), np.zeros(1), None, None, None, None,
                             np.array([1.0]), np.array([-1.0]), 1.0)
