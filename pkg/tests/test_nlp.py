"""SQP driver tests against closed-form optima and scipy references."""

import numpy as np
import pytest
import scipy.optimize as sopt
import scipy.sparse as sp

from hybridlap.config import SolverParams
from hybridlap.errors import SolveFailed
from hybridlap.nlp import (EvalResult, NlpProblem, SolveReport, require_ok,
                           solve_sqp)

PARAMS = SolverParams()


def _dense(rows, n):
    if not rows:
        return np.zeros((0, n))
    return np.asarray(rows, dtype=float)


def make_problem(n, f, grad_f, eqs, ins, lb, ub, blocks=None,
                 quadratic=False, hess=None):
    """Assemble an NlpProblem from callables returning (value, gradient)."""

    def eval_full(z):
        c_eq, J_eq, c_in, J_in = [], [], [], []
        for fn in eqs:
            v, g = fn(z)
            c_eq.append(v)
            J_eq.append(g)
        for fn in ins:
            v, g = fn(z)
            c_in.append(v)
            J_in.append(g)
        return EvalResult(f=f(z), g=grad_f(z),
                          c_eq=np.asarray(c_eq), J_eq=_dense(J_eq, n),
                          c_in=np.asarray(c_in), J_in=_dense(J_in, n))

    def eval_vals(z):
        return (f(z), np.asarray([fn(z)[0] for fn in eqs]),
                np.asarray([fn(z)[0] for fn in ins]))

    if blocks is None:
        blocks = [np.arange(n)]
    return NlpProblem(n=n, lb=np.asarray(lb, float), ub=np.asarray(ub, float),
                      eval_full=eval_full, eval_vals=eval_vals, blocks=blocks,
                      quadratic=quadratic, hess=hess)


class TestQuadraticFastPath:
    def test_equality_qp_one_iteration(self):
        # min (x-3)^2 + (y+1)^2  s.t.  x + y = 1
        H = np.diag([2.0, 2.0])
        g0 = np.array([-6.0, 2.0])

        prob = make_problem(
            2,
            f=lambda z: float(0.5 * z @ H @ z + g0 @ z + 10.0),
            grad_f=lambda z: H @ z + g0,
            eqs=[lambda z: (z[0] + z[1] - 1.0, np.array([1.0, 1.0]))],
            ins=[],
            lb=[-10, -10], ub=[10, 10],
            quadratic=True, hess=H)
        rep = solve_sqp(prob, np.zeros(2), PARAMS)
        assert rep.status == "optimal"
        assert rep.iterations == 1
        # analytic: x - 3 = y + 1 = -lam/2 with x + y = 1 -> x=2.5, y=-1.5
        assert np.allclose(rep.z, [2.5, -1.5], atol=1e-8)
        assert abs(rep.lam_eq[0] - 1.0) < 1e-7

    def test_inequality_active(self):
        # min (x+1)^2 + (y-2)^2  s.t.  y - x <= 0
        H = np.diag([2.0, 2.0])
        g0 = np.array([2.0, -4.0])
        prob = make_problem(
            2,
            f=lambda z: float(0.5 * z @ H @ z + g0 @ z),
            grad_f=lambda z: H @ z + g0,
            eqs=[],
            ins=[lambda z: (z[1] - z[0], np.array([-1.0, 1.0]))],
            lb=[-10, -10], ub=[10, 10],
            quadratic=True, hess=H)
        rep = require_ok(solve_sqp(prob, np.array([3.0, -3.0]), PARAMS))
        assert np.allclose(rep.z, [0.5, 0.5], atol=1e-7)
        assert abs(rep.mu_in[0] - 3.0) < 1e-6

    def test_bound_active(self):
        H = np.diag([2.0])
        prob = make_problem(
            1,
            f=lambda z: float(z[0] ** 2),
            grad_f=lambda z: 2.0 * z,
            eqs=[], ins=[], lb=[1.5], ub=[4.0],
            quadratic=True, hess=H)
        rep = require_ok(solve_sqp(prob, np.array([3.0]), PARAMS))
        assert abs(rep.z[0] - 1.5) < 1e-9


class TestNonlinear:
    def test_circle_constraint(self):
        # min -x*y  s.t.  x^2 + y^2 = 2  ->  (1, 1), lam = 1/2
        prob = make_problem(
            2,
            f=lambda z: float(-z[0] * z[1]),
            grad_f=lambda z: np.array([-z[1], -z[0]]),
            eqs=[lambda z: (z[0] ** 2 + z[1] ** 2 - 2.0, 2.0 * z)],
            ins=[],
            lb=[0.1, 0.1], ub=[5, 5])
        rep = require_ok(solve_sqp(prob, np.array([1.8, 0.4]), PARAMS))
        assert np.allclose(rep.z, [1.0, 1.0], atol=1e-6)
        assert abs(rep.lam_eq[0] - 0.5) < 1e-5

    def test_rosenbrock_bounded(self):
        def f(z):
            return float((1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2)

        def g(z):
            return np.array([
                -2 * (1 - z[0]) - 400 * z[0] * (z[1] - z[0] ** 2),
                200 * (z[1] - z[0] ** 2)])

        prob = make_problem(2, f, g, [], [], [-2, -2], [2, 2])
        rep = solve_sqp(prob, np.array([-1.2, 1.0]), PARAMS)
        assert rep.status == "optimal"
        assert np.allclose(rep.z, [1.0, 1.0], atol=1e-5)

    def test_matches_slsqp_on_random_problem(self):
        rng = np.random.default_rng(7)
        for _ in range(6):
            n = 4
            A = rng.normal(size=(2, n))
            b = rng.normal(size=2) * 0.3
            Q = rng.normal(size=(n, n))
            Q = Q @ Q.T + np.eye(n)
            c = rng.normal(size=n)

            def f(z):
                return float(0.5 * z @ Q @ z + c @ z
                             + 0.1 * np.sum(np.sin(z)))

            def g(z):
                return Q @ z + c + 0.1 * np.cos(z)

            eqs = [
                (lambda z, i=i: (float(A[i] @ z - b[i]), A[i].copy()))
                for i in range(2)]
            prob = make_problem(n, f, g, eqs, [],
                                [-3] * n, [3] * n)
            rep = solve_sqp(prob, np.zeros(n), PARAMS)
            assert rep.status == "optimal"

            ref = sopt.minimize(
                f, np.zeros(n), jac=g, method="SLSQP",
                bounds=[(-3, 3)] * n,
                constraints=[{"type": "eq",
                              "fun": lambda z: A @ z - b,
                              "jac": lambda z: A}],
                options={"maxiter": 200, "ftol": 1e-12})
            assert ref.success
            assert rep.objective <= ref.fun + 1e-6
            assert float(np.abs(A @ rep.z - b).max()) < 1e-7


class TestWarmStart:
    def _problem(self):
        return make_problem(
            2,
            f=lambda z: float(-z[0] * z[1]),
            grad_f=lambda z: np.array([-z[1], -z[0]]),
            eqs=[lambda z: (z[0] ** 2 + z[1] ** 2 - 2.0, 2.0 * z)],
            ins=[],
            lb=[0.1, 0.1], ub=[5, 5])

    def test_resolve_from_solution_is_instant(self):
        prob = self._problem()
        rep = require_ok(solve_sqp(prob, np.array([1.8, 0.4]), PARAMS))
        rep2 = solve_sqp(prob, rep.z, PARAMS, warm=rep)
        assert rep2.status == "optimal"
        assert rep2.iterations == 0

    def test_resolve_from_nearby_is_fast(self):
        prob = self._problem()
        rep = require_ok(solve_sqp(prob, np.array([1.8, 0.4]), PARAMS))
        z_near = rep.z + np.array([1e-4, -1e-4])
        rep2 = solve_sqp(prob, z_near, PARAMS, warm=rep)
        assert rep2.status == "optimal"
        assert rep2.iterations <= 2


class TestPathologies:
    def test_contradictory_equalities_flagged_infeasible(self):
        prob = make_problem(
            1,
            f=lambda z: float(z[0] ** 2),
            grad_f=lambda z: 2.0 * z,
            eqs=[lambda z: (z[0] - 0.0, np.array([1.0])),
                 lambda z: (z[0] - 1.0, np.array([1.0]))],
            ins=[],
            lb=[-5], ub=[5])
        rep = solve_sqp(prob, np.array([2.0]), PARAMS)
        assert rep.status == "infeasible"
        assert rep.kkt_feas > 0.4

    def test_require_ok_raises_with_report(self):
        prob = make_problem(
            1,
            f=lambda z: float(z[0] ** 2),
            grad_f=lambda z: 2.0 * z,
            eqs=[lambda z: (z[0] - 0.0, np.array([1.0])),
                 lambda z: (z[0] - 1.0, np.array([1.0]))],
            ins=[],
            lb=[-5], ub=[5])
        rep = solve_sqp(prob, np.array([2.0]), PARAMS)
        with pytest.raises(SolveFailed) as exc:
            require_ok(rep, "toy")
        assert exc.value.report.status == "infeasible"

    def test_bad_blocks_rejected(self):
        prob = make_problem(
            2,
            f=lambda z: float(z @ z),
            grad_f=lambda z: 2.0 * z,
            eqs=[], ins=[], lb=[-1, -1], ub=[1, 1],
            blocks=[np.array([0])])   # does not cover variable 1
        with pytest.raises(ValueError):
            solve_sqp(prob, np.zeros(2), PARAMS)


class TestBlockStructure:
    def test_separable_blocks_converge(self):
        # two independent circles solved in one problem; per-block BFGS
        def f(z):
            return float(-z[0] * z[1] - z[2] * z[3])

        def g(z):
            return np.array([-z[1], -z[0], -z[3], -z[2]])

        eqs = [
            lambda z: (z[0] ** 2 + z[1] ** 2 - 2.0,
                       np.array([2 * z[0], 2 * z[1], 0, 0])),
            lambda z: (z[2] ** 2 + z[3] ** 2 - 8.0,
                       np.array([0, 0, 2 * z[2], 2 * z[3]])),
        ]
        prob = make_problem(4, f, g, eqs, [],
                            [0.1] * 4, [5] * 4,
                            blocks=[np.array([0, 1]), np.array([2, 3])])
        rep = require_ok(solve_sqp(prob, np.array([1.8, 0.4, 1.0, 2.5]),
                                   PARAMS))
        assert np.allclose(rep.z, [1, 1, 2, 2], atol=1e-6)
        assert len(rep.bfgs) == 2

    def test_sparse_jacobians_accepted(self):
        H = sp.csc_matrix(np.diag([2.0, 2.0]))

        def eval_full(z):
            return EvalResult(
                f=float(z @ z), g=2.0 * z,
                c_eq=np.array([z[0] + z[1] - 1.0]),
                J_eq=sp.csr_matrix(np.array([[1.0, 1.0]])),
                c_in=np.zeros(0), J_in=sp.csr_matrix((0, 2)))

        def eval_vals(z):
            return float(z @ z), np.array([z[0] + z[1] - 1.0]), np.zeros(0)

        prob = NlpProblem(n=2, lb=np.array([-5.0, -5.0]),
                          ub=np.array([5.0, 5.0]),
                          eval_full=eval_full, eval_vals=eval_vals,
                          blocks=[np.arange(2)], quadratic=True, hess=H)
        rep = require_ok(solve_sqp(prob, np.zeros(2), PARAMS))
        assert np.allclose(rep.z, [0.5, 0.5], atol=1e-9)


class TestKktReporting:
    def test_report_fields_populated(self):
        prob = make_problem(
            2,
            f=lambda z: float((z[0] - 1) ** 2 + (z[1] + 2) ** 2),
            grad_f=lambda z: np.array([2 * (z[0] - 1), 2 * (z[1] + 2)]),
            eqs=[], ins=[], lb=[-4, -4], ub=[4, 4])
        rep = require_ok(solve_sqp(prob, np.zeros(2), PARAMS))
        assert rep.kkt_stat <= PARAMS.tol
        assert rep.kkt_feas <= PARAMS.tol
        assert rep.wall_time > 0
        assert isinstance(rep.trace, list) and rep.trace
        assert rep.qp_statuses is not None
