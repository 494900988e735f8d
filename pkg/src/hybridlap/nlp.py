"""SQP driver over the elastic subproblem solver.

Problems present themselves through ``NlpProblem``: variable bounds, an
evaluator returning objective/constraints with Jacobians, and a partition
of the variables into blocks whose Lagrangian Hessian is maintained by
damped BFGS (the stage structure of a shooting transcription makes the
exact Hessian block-diagonal over these groups, so per-block updates lose
nothing). Problems with a constant Hessian can declare it and skip BFGS,
in which case a quadratic objective under linear constraints solves in a
single accepted step.

Globalization is an l1 merit line search with a second-order correction
retry, a box trust region intersected with the variable bounds, and a
penalty weight kept above the largest multiplier seen.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import SolverParams
from .errors import SolveFailed
from .qp import (QpFailure, QpStatuses, solve_penalty_qp,
                 solve_penalty_qp_ipm)

# state scales: v, p_im, e_f, e_b, e_tc
X_SCALE = np.array([50.0, 1.0e5, 1.0e7, 1.0e6, 1.0e4])
# control scales: u_th, mdot_cyl, p_k, p_h, u_wg, u_sa, p_brk (+ psi offline)
U_SCALE = np.array([1.0, 5.0e-3, 1.0e5, 1.0e5, 1.0, 1.0, 1.0e6])
PSI_SCALE = 6.0
MDOT_ROW_SCALE = 5.0e-3   # AFR and fuel-ceiling rows divided by this
POWER_ROW_SCALE = 1.0e5   # power-matching rows divided by this


@dataclass
class EvalResult:
    f: float
    g: np.ndarray
    c_eq: np.ndarray
    J_eq: object           # (m_e, n) sparse or dense
    c_in: np.ndarray
    J_in: object


@dataclass
class NlpProblem:
    n: int
    lb: np.ndarray
    ub: np.ndarray
    eval_full: Callable[[np.ndarray], EvalResult]
    eval_vals: Callable[[np.ndarray], tuple]
    blocks: list
    quadratic: bool = False
    hess: object = None
    name: str = ""


@dataclass
class SolveReport:
    status: str
    iterations: int
    objective: float
    kkt_stat: float
    kkt_feas: float
    kkt_comp: float
    z: np.ndarray
    lam_eq: np.ndarray
    mu_in: np.ndarray
    rho: float
    trace: list = field(default_factory=list)
    qp_statuses: QpStatuses | None = None
    bfgs: list | None = None
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def require_ok(report: SolveReport, what: str = "solve") -> SolveReport:
    if not report.ok:
        err = SolveFailed(f"{what} ended with status '{report.status}' "
                          f"(kkt {report.kkt_stat:.2e}/{report.kkt_feas:.2e})")
        err.report = report
        raise err
    return report


def _merit(f, c_eq, c_in, rho):
    pen = 0.0
    if c_eq.size:
        pen += np.abs(c_eq).sum()
    if c_in.size:
        pen += np.maximum(c_in, 0.0).sum()
    return f + rho * pen


def _kkt_measures(res: EvalResult, z, lb, ub, lam, mu):
    r = res.g.copy()
    if res.c_eq.size:
        r += res.J_eq.T @ lam
    if res.c_in.size:
        r += res.J_in.T @ mu
    at_lo = z <= lb + 1e-9
    at_up = z >= ub - 1e-9
    stat = 0.0
    for j in range(z.size):
        if at_lo[j] and at_up[j]:
            continue
        elif at_lo[j]:
            stat = max(stat, -r[j])
        elif at_up[j]:
            stat = max(stat, r[j])
        else:
            stat = max(stat, abs(r[j]))
    feas = 0.0
    if res.c_eq.size:
        feas = float(np.abs(res.c_eq).max())
    if res.c_in.size:
        feas = max(feas, float(np.maximum(res.c_in, 0.0).max()))
    comp = 0.0
    if res.c_in.size and mu.size:
        comp = float(np.abs(mu * res.c_in).max())
    return float(stat), float(feas), float(comp)


def _grad_lagrangian(res: EvalResult, lam, mu):
    r = res.g.copy()
    if res.c_eq.size:
        r += res.J_eq.T @ lam
    if res.c_in.size:
        r += res.J_in.T @ mu
    return r


def _assemble_hess(blocks_B, n):
    return sp.block_diag(blocks_B, format="csc") if len(blocks_B) > 1 \
        else sp.csc_matrix(blocks_B[0])


def solve_sqp(prob: NlpProblem, z0: np.ndarray, params: SolverParams,
              warm: SolveReport | None = None,
              qp_warm: QpStatuses | None = None) -> SolveReport:
    """Run the SQP loop from z0; returns a report (never raises on
    non-convergence, check ``report.status``)."""
    t_start = time.perf_counter()
    n = prob.n
    lb, ub = prob.lb, prob.ub
    z = np.clip(np.asarray(z0, dtype=float), lb, ub)

    # block bookkeeping
    blocks = [np.asarray(b, dtype=int) for b in prob.blocks]
    covered = np.concatenate(blocks) if blocks else np.zeros(0, dtype=int)
    if covered.size != n or np.any(np.sort(covered) != np.arange(n)):
        raise ValueError("blocks must partition the variables contiguously")

    if prob.quadratic:
        H = prob.hess if sp.issparse(prob.hess) else np.asarray(prob.hess)
        blocks_B = None
    elif warm is not None and warm.bfgs is not None:
        blocks_B = [b.copy() for b in warm.bfgs]
    else:
        blocks_B = [np.eye(b.size) for b in blocks]

    lam = warm.lam_eq.copy() if warm is not None else None
    mu = warm.mu_in.copy() if warm is not None else None
    rho = max(params.rho_init, warm.rho if warm is not None else 0.0)
    statuses = qp_warm if qp_warm is not None else (
        warm.qp_statuses if warm is not None else None)

    res = prob.eval_full(z)
    if lam is None or lam.size != res.c_eq.size:
        lam = np.zeros(res.c_eq.size)
    if mu is None or mu.size != res.c_in.size:
        mu = np.zeros(res.c_in.size)

    # with an exact constant Hessian the QP model is the problem itself,
    # so the full step needs no trust restriction
    trust = np.inf if prob.quadratic else 1.0
    trace = []
    it_accepted = 0
    status = "max_iter"
    prev_feas = None
    worsen = 0
    accepted_prev = False

    def finish(st):
        stat, feas, comp = _kkt_measures(res, z, lb, ub, lam, mu)
        return SolveReport(
            status=st, iterations=it_accepted, objective=res.f,
            kkt_stat=stat, kkt_feas=feas, kkt_comp=comp, z=z.copy(),
            lam_eq=lam.copy(), mu_in=mu.copy(), rho=rho, trace=trace,
            qp_statuses=statuses, bfgs=blocks_B,
            wall_time=time.perf_counter() - t_start)

    for _outer in range(params.max_iter):
        stat, feas, comp = _kkt_measures(res, z, lb, ub, lam, mu)
        if stat <= params.tol and feas <= params.tol and comp <= params.tol:
            status = "optimal"
            break
        if accepted_prev:
            # accepted merit decreases with steadily worsening constraint
            # violation mean the objective is buying its progress by
            # selling feasibility: the penalty sits below the problem's
            # multiplier scale, so raise it; the watched violation is the
            # same l1 sum the merit penalizes, not the max-norm, so a fall
            # concentrated into fewer rows does not trip it
            feas_l1 = float(np.abs(res.c_eq).sum()
                            + np.maximum(res.c_in, 0.0).sum())
            if prev_feas is not None and feas_l1 > prev_feas * (1.0 + 1e-3):
                worsen += 1
            else:
                worsen = 0
            prev_feas = feas_l1
            if worsen >= 4 and feas > params.tol and rho < params.rho_max:
                rho = min(10.0 * rho, params.rho_max)
                worsen = 0

        if prob.quadratic:
            H_iter = H
        else:
            H_iter = _assemble_hess(blocks_B, n)

        d_lb = np.maximum(lb - z, -trust)
        d_ub = np.minimum(ub - z, trust)
        # rho steering: the penalty must dominate the multipliers of rows
        # it actually satisfies (rows pinned at +-rho are in violation mode
        # and chasing them just doubles rho forever), and it only escalates
        # when the subproblem fails to cut the model infeasibility
        viol0 = float(np.abs(res.c_eq).sum()
                      + np.maximum(res.c_in, 0.0).sum())

        def run_qp(rho_now):
            # small problems go to the warm-started active set, which costs
            # almost nothing on a repeat solve; at transcription scale the
            # vertex walk degenerates, so the interior-point path is primary
            # there, and each method backs the other up
            args = (H_iter, res.g, res.J_eq, res.c_eq, res.J_in, res.c_in,
                    d_lb, d_ub, rho_now)
            if prob.n < params.dense_kkt_below:
                try:
                    return solve_penalty_qp(
                        *args, warm=statuses,
                        pivot_cap=params.qp_pivot_cap,
                        dense_below=params.dense_kkt_below)
                except QpFailure:
                    return solve_penalty_qp_ipm(*args)
            try:
                return solve_penalty_qp_ipm(*args)
            except QpFailure:
                return solve_penalty_qp(
                    *args, warm=None,
                    pivot_cap=params.qp_pivot_cap,
                    dense_below=params.dense_kkt_below)

        for _ in range(3):
            try:
                qp = run_qp(rho)
            except QpFailure:
                return finish("qp_failure")
            violq = float(np.abs(qp.r_eq).sum()
                          + np.maximum(qp.r_in, 0.0).sum())
            box_bound = float(np.max(np.abs(qp.d), initial=0.0)) \
                >= 0.99 * trust
            if viol0 <= params.tol or violq <= 0.9 * viol0 \
                    or box_bound or rho >= params.rho_max:
                # enough feasibility progress, or the trust box (not the
                # penalty level) is what limits it; keep rho where it is
                break
            lam_int = qp.lam_eq[np.abs(qp.lam_eq) < 0.999 * rho]
            mu_int = qp.mu_in[qp.mu_in < 0.999 * rho]
            need = 1.1 * max(
                float(np.abs(lam_int).max()) if lam_int.size else 0.0,
                float(mu_int.max()) if mu_int.size else 0.0)
            rho = min(max(need, 10.0 * rho), params.rho_max)
        statuses = qp.statuses
        d = qp.d

        merit0 = _merit(res.f, res.c_eq, res.c_in, rho)
        pen0 = rho * (np.abs(res.c_eq).sum()
                      + np.maximum(res.c_in, 0.0).sum())
        pred = pen0 - qp.obj   # model merit reduction (model f-part is 0 at d=0)
        step_inf = float(np.max(np.abs(d), initial=0.0))

        if pred <= params.tol * 1e-2 and step_inf <= 1e-9:
            if feas <= params.tol:
                lam, mu = qp.lam_eq, qp.mu_in
                stat2, feas2, comp2 = _kkt_measures(res, z, lb, ub, lam, mu)
                if stat2 <= params.tol and comp2 <= params.tol:
                    status = "optimal"
                    break
                status = "stalled"
                break
            if rho >= params.rho_max:
                status = "infeasible"
                break
            rho = min(rho * 10.0, params.rho_max)
            continue

        # line search on the l1 merit
        alpha = 1.0
        accepted = False
        soc_used = False
        f_t = c_eq_t = c_in_t = None
        dbg = bool(os.environ.get("HYBRIDLAP_LS_DEBUG"))
        while alpha >= params.ls_min_step:
            z_t = np.clip(z + alpha * d, lb, ub)
            f_t, c_eq_t, c_in_t = prob.eval_vals(z_t)
            if dbg and alpha >= 0.25:
                pe0 = rho * np.abs(res.c_eq).sum()
                pi0 = rho * np.maximum(res.c_in, 0.0).sum()
                pe = rho * np.abs(c_eq_t).sum()
                pi = rho * np.maximum(c_in_t, 0.0).sum()
                print(f"    ls a={alpha:.3f} need<={merit0 - params.ls_c1*alpha*pred:.6f} "
                      f"got={_merit(f_t, c_eq_t, c_in_t, rho):.6f} "
                      f"df={f_t-res.f:+.5f} dpen_eq={pe-pe0:+.5f} "
                      f"dpen_in={pi-pi0:+.5f}")
            if _merit(f_t, c_eq_t, c_in_t, rho) \
                    <= merit0 - params.ls_c1 * alpha * pred:
                accepted = True
                break
            if alpha == 1.0 and res.c_eq.size:
                # second-order correction against curvature-induced
                # constraint growth at the full step
                z_soc = _soc_point(res, z, z_t, lb, ub, c_eq_t)
                if z_soc is not None:
                    f_s, c_eq_s, c_in_s = prob.eval_vals(z_soc)
                    if dbg:
                        pe0 = rho * np.abs(res.c_eq).sum()
                        pi0 = rho * np.maximum(res.c_in, 0.0).sum()
                        pe = rho * np.abs(c_eq_s).sum()
                        pi = rho * np.maximum(c_in_s, 0.0).sum()
                        print(f"    soc  need<={merit0 - params.ls_c1*pred:.6f} "
                              f"got={_merit(f_s, c_eq_s, c_in_s, rho):.6f} "
                              f"df={f_s-res.f:+.5f} dpen_eq={pe-pe0:+.5f} "
                              f"dpen_in={pi-pi0:+.5f}")
                    if _merit(f_s, c_eq_s, c_in_s, rho) \
                            <= merit0 - params.ls_c1 * pred:
                        z_t, f_t, c_eq_t, c_in_t = z_soc, f_s, c_eq_s, c_in_s
                        accepted = True
                        soc_used = True
                        break
            alpha *= 0.5
        if not accepted:
            trust *= 0.25
            accepted_prev = False
            trace.append({"it": it_accepted, "alpha": 0.0, "pred": pred,
                          "merit": merit0, "trust": trust,
                          "pivots": qp.pivots, "rho": rho})
            if trust < 1e-9:
                status = "line_search_failure"
                break
            continue

        # accept
        z_old, res_old = z, res
        z = z_t
        res = prob.eval_full(z)
        lam, mu = qp.lam_eq.copy(), qp.mu_in.copy()
        it_accepted += 1
        accepted_prev = True
        trace.append({"it": it_accepted, "alpha": alpha, "pred": pred,
                      "merit": _merit(res.f, res.c_eq, res.c_in, rho),
                      "trust": trust, "pivots": qp.pivots, "rho": rho,
                      "soc": soc_used, "feas": feas})

        if not prob.quadratic:
            gL_new = _grad_lagrangian(res, lam, mu)
            gL_old = _grad_lagrangian(res_old, lam, mu)
            s_full = z - z_old
            y_full = gL_new - gL_old
            for bi, bidx in enumerate(blocks):
                _bfgs_update(blocks_B[bi], s_full[bidx], y_full[bidx])

        if not prob.quadratic:
            if alpha >= 1.0 - 1e-12:
                trust = min(trust * 2.0, 16.0)
            elif alpha <= 0.26:
                trust = max(trust * 0.5, 1e-3)

    return finish(status)


def _soc_point(res, z, z_t, lb, ub, c_eq1):
    """Second-order correction of the equalities at the trial point.

    Removes only the departure from linearity, c(z_t) - c(z) - J (z_t - z):
    rows the elastic subproblem deliberately left violated stay violated,
    otherwise the correction fights the optimizer and grows without bound
    on the step scale.
    """
    if not c_eq1.size:
        return None
    J = res.J_eq
    step = z_t - z
    b_curv = c_eq1 - (res.c_eq + np.asarray(J @ step))
    try:
        if sp.issparse(J):
            m = J.shape[0]
            JJt = (J @ J.T).tocsc() + 1e-10 * sp.identity(m, format="csc")
            w = spla.splu(JJt).solve(-b_curv)
        else:
            JJt = J @ J.T + 1e-10 * np.eye(J.shape[0])
            w = np.linalg.solve(JJt, -b_curv)
        d_soc = np.asarray(J.T @ w)
    except (np.linalg.LinAlgError, RuntimeError):
        return None
    step_inf = float(np.abs(step).max(initial=0.0))
    soc_inf = float(np.abs(d_soc).max(initial=0.0))
    if soc_inf > 0.5 * step_inf and soc_inf > 0.0:
        d_soc *= 0.5 * step_inf / soc_inf
    return np.clip(z_t + d_soc, lb, ub)


def _bfgs_update(B, s, y, damping=0.2):
    """Powell-damped BFGS update of one block, in place."""
    ss = float(s @ s)
    if ss < 1e-16:
        return
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 1e-14:
        return
    sy = float(s @ y)
    if sy < damping * sBs:
        theta = (1.0 - damping) * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * Bs
        sy = float(s @ y)
    if sy <= 1e-14:
        return
    B -= np.outer(Bs, Bs) / sBs
    B += np.outer(y, y) / sy
    if not np.all(np.isfinite(B)):
        B[:] = np.eye(B.shape[0])
