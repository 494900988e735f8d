"""Elastic piecewise-quadratic subproblem solver.

Solves

    min_d  g.d + 1/2 d.H.d
           + rho * sum_i |b_eq_i + a_eq_i . d|
           + rho * sum_j max(0, b_in_j + a_in_j . d)
    s.t.   lb <= d <= ub

by an active-set method on the penalty kinks. The problem is always
feasible, so an outer SQP loop never sees an infeasible subproblem:
unsatisfiable linearizations surface as nonzero penalty residuals with
multipliers pinned at +-rho instead.

Each iteration solves one equality-constrained KKT system (dense below a
size threshold, sparse LU above it) and then walks the piecewise-linear
directional derivative along the step, flipping penalty statuses it passes
through, until the derivative turns nonnegative or a variable hits its
bound. Warm statuses from a previous call typically cut the work to a
handful of factorizations.

Rows should be pre-scaled by the caller to O(1) magnitudes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import QpFailure

# status codes
EQ_NEG, EQ_ON, EQ_POS = -1, 0, 1
IN_OFF, IN_ON, IN_VIOL = 0, 1, 2
VAR_FREE, VAR_LO, VAR_UP, VAR_FIX = 0, -1, 1, 2

_EPS_DIR = 1e-13     # |a.p| below this is parallel to its kink
_EPS_STEP = 1e-11    # step infinity-norm considered zero
_EPS_SLOPE = 1e-12
_EPS_KINK = 1e-11    # |residual| below this sits on its kink


@dataclass
class QpStatuses:
    """Active-set state, reusable as a warm start for the next call."""

    eq: np.ndarray
    iq: np.ndarray
    var: np.ndarray


@dataclass
class QpResult:
    d: np.ndarray
    lam_eq: np.ndarray
    mu_in: np.ndarray
    obj: float
    pivots: int
    factorizations: int
    optimal: bool
    statuses: QpStatuses
    r_eq: np.ndarray
    r_in: np.ndarray


def _as_matrix(a, n):
    if a is None:
        return sp.csr_matrix((0, n))
    if sp.issparse(a):
        return a.tocsr()
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return sp.csr_matrix(arr)


def _solve_kkt(H, W, free, G, rW, dense):
    """Solve the working-set KKT system; returns (p_free, nu)."""
    nf = int(free.sum())
    mw = W.shape[0]
    rhs = np.concatenate([-G[free], -rW])
    # a factorization of a near-singular system returns finite garbage
    # rather than raising, so every rung is residual-checked and the
    # ladder escalates until the solution actually satisfies the system
    rhs_scale = 1.0 + float(np.abs(rhs).max(initial=0.0))
    best = None
    best_res = np.inf
    last_err = None
    # the dual block always carries a small regularization: a redundant
    # working set makes the plain saddle system singular with a whole
    # affine family of multipliers, and decisions based on an arbitrary
    # member of that family cycle; the damped system picks one consistently
    for reg in (1e-11, 1e-8, 1e-5):
        try:
            if dense:
                Hd = H if isinstance(H, np.ndarray) else H.toarray()
                A = W.toarray()[:, free]
                K = np.zeros((nf + mw, nf + mw))
                K[:nf, :nf] = Hd[np.ix_(free, free)]
                if reg:
                    K[np.diag_indices(nf)] += reg
                K[:nf, nf:] = A.T
                K[nf:, :nf] = A
                if mw and reg:
                    K[range(nf, nf + mw), range(nf, nf + mw)] -= reg
                with warnings.catch_warnings():
                    # the unregularized probe of a singular system is an
                    # expected rung of the ladder
                    warnings.simplefilter("ignore", sla.LinAlgWarning)
                    sol = sla.lu_solve(sla.lu_factor(K), rhs)
            else:
                idx = np.flatnonzero(free)
                Hs = H.tocsc() if sp.issparse(H) else sp.csc_matrix(H)
                Hff = Hs[idx, :][:, idx]
                if reg:
                    Hff = Hff + sp.eye(nf, format="csc") * reg
                A = W.tocsr()[:, idx].tocsc()
                blocks = [[Hff, A.T], [A, None]]
                if mw and reg:
                    blocks[1][1] = -sp.eye(mw, format="csc") * reg
                K = sp.bmat(blocks, format="csc")
                sol = spla.splu(K).solve(rhs)
        except (RuntimeError, ValueError, np.linalg.LinAlgError) as err:
            last_err = err
            continue
        if not np.all(np.isfinite(sol)):
            continue
        res = float(np.abs(K @ sol - rhs).max(initial=0.0))
        if res <= 1e-8 * rhs_scale:
            return sol[:nf], sol[nf:]
        if res < best_res:
            best, best_res = sol, res
    if best is not None and best_res <= 1e-4 * rhs_scale:
        return best[:nf], best[nf:]
    raise QpFailure(f"KKT factorization failed: {last_err}")


def solve_penalty_qp(H, g, A_eq, b_eq, A_in, b_in, lb, ub, rho, *,
                     warm: QpStatuses | None = None,
                     tol: float = 1e-9,
                     pivot_cap: int = 20000,
                     dense_below: int = 400) -> QpResult:
    """Solve the elastic subproblem. See the module docstring for the form."""
    g = np.asarray(g, dtype=float)
    n = g.size
    A_eq = _as_matrix(A_eq, n)
    A_in = _as_matrix(A_in, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float)
    m_e, m_i = b_eq.size, b_in.size
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    if np.any(lb > ub + 1e-12):
        raise QpFailure("inconsistent bounds lb > ub")
    dense = n < dense_below
    if dense and sp.issparse(H):
        H = H.toarray()

    d = np.clip(np.zeros(n), lb, ub)
    var = np.full(n, VAR_FREE, dtype=np.int8)
    fixed = (ub - lb) <= 1e-14
    var[fixed] = VAR_FIX
    d[fixed] = 0.5 * (lb[fixed] + ub[fixed])
    var[(~fixed) & (np.abs(d - lb) <= 1e-14)] = VAR_LO
    var[(~fixed) & (np.abs(d - ub) <= 1e-14)] = VAR_UP

    warm_ok = (warm is not None and warm.eq.size == m_e
               and warm.iq.size == m_i)
    if warm_ok and warm.var.size == n:
        # re-apply previous bound activity where the new bounds allow it
        take_lo = (warm.var == VAR_LO) & (~fixed) & np.isfinite(lb)
        take_up = (warm.var == VAR_UP) & (~fixed) & np.isfinite(ub)
        var[take_lo] = VAR_LO
        d[take_lo] = lb[take_lo]
        var[take_up] = VAR_UP
        d[take_up] = ub[take_up]

    r_eq = b_eq + A_eq @ d
    r_in = b_in + A_in @ d

    if warm_ok:
        st_eq = warm.eq.copy()
        st_in = warm.iq.copy()
    else:
        # equalities start in the working set: at any solution they are
        # active unless the penalty gives up on them, and entering them
        # one pivot at a time would dominate the factorization count
        st_eq = np.full(m_e, EQ_ON, dtype=np.int8)
        st_in = np.where(r_in > tol, IN_VIOL, IN_OFF).astype(np.int8)
    # the working set can never exceed the free space
    if int((st_eq == EQ_ON).sum() + (st_in == IN_ON).sum()) \
            > int((var == VAR_FREE).sum()):
        st_eq = np.where(r_eq >= 0.0, EQ_POS, EQ_NEG).astype(np.int8)
        st_in = np.where(r_in > tol, IN_VIOL, IN_OFF).astype(np.int8)
        var[~fixed] = VAR_FREE

    pivots = 0
    factorizations = 0
    lam_eq = np.zeros(m_e)
    mu_in = np.zeros(m_i)
    optimal = False
    stalls = 0
    best_merit = np.inf
    flat_iters = 0
    # rows barred from kink promotion until the iterate next moves,
    # set when a release or demotion proves they do not belong ON here
    no_prom_eq = np.zeros(m_e, dtype=bool)
    no_prom_in = np.zeros(m_i, dtype=bool)
    # promotion changes the EQP between a release and its follow-up solve,
    # which voids the guarantee that the released row moves the right way;
    # it therefore only runs after an iteration with real movement
    allow_prom = True

    def penalty_grad():
        ge = np.zeros(n)
        if m_e:
            sign = np.where(st_eq == EQ_POS, 1.0,
                            np.where(st_eq == EQ_NEG, -1.0, 0.0))
            ge += A_eq.T @ sign
        if m_i:
            ge += A_in.T @ (st_in == IN_VIOL).astype(float)
        return rho * ge

    while pivots < pivot_cap:
        # invariant: every non-ON status matches the sign of its residual
        # at the current point (warm starts and finite walk tolerances can
        # leave them stale, which would corrupt the penalty gradient).
        # Rows within the kink dead zone are exempt: their residual sign is
        # machine noise, and overwriting a deliberately chosen status there
        # (a release picks the side its multiplier points to) sets up an
        # activate/release cycle that never moves the iterate
        kink_band = max(_EPS_KINK, tol)
        ne = (st_eq != EQ_ON) & (np.abs(r_eq) > kink_band)
        st_eq[ne] = np.where(r_eq[ne] >= 0.0, EQ_POS, EQ_NEG)
        ni = (st_in != IN_ON) & (np.abs(r_in) > kink_band)
        st_in[ni] = np.where(r_in[ni] > tol, IN_VIOL, IN_OFF)

        # equality rows sitting exactly on their kink belong in the working
        # set: any fixed sign status there is arbitrary and lets the
        # penalty gradient flip-flop across iterations (inequalities at
        # their boundary are consistent from the inactive side and enter
        # through walk stops instead)
        cap = int((var == VAR_FREE).sum()) - int((st_eq == EQ_ON).sum()) \
            - int((st_in == IN_ON).sum())
        if cap > 0 and allow_prom:
            ke = np.flatnonzero((st_eq != EQ_ON) & ~no_prom_eq
                                & (np.abs(r_eq) <= kink_band))
            if ke.size:
                for t in np.argsort(np.abs(r_eq[ke]))[:cap]:
                    st_eq[ke[t]] = EQ_ON

        idx_e = np.flatnonzero(st_eq == EQ_ON)
        idx_i = np.flatnonzero(st_in == IN_ON)
        rows = []
        if idx_e.size:
            rows.append(A_eq[idx_e])
        if idx_i.size:
            rows.append(A_in[idx_i])
        W = sp.vstack(rows).tocsr() if rows else sp.csr_matrix((0, n))
        rW = np.concatenate([r_eq[idx_e], r_in[idx_i]])
        free = var == VAR_FREE
        G = g + H @ d + penalty_grad()
        over = W.shape[0] - int(free.sum())
        if over > 0:
            # bound activity has crowded out the working set; demote the
            # ON rows farthest from their surfaces and retry
            cand = [(abs(r_eq[i]), 0, int(i)) for i in idx_e]
            cand += [(abs(r_in[i]), 1, int(i)) for i in idx_i]
            cand.sort(reverse=True)
            for _, kind, i in cand[:over]:
                if kind == 0:
                    st_eq[i] = EQ_POS if r_eq[i] >= 0.0 else EQ_NEG
                    no_prom_eq[i] = True
                else:
                    st_in[i] = IN_VIOL if r_in[i] > tol else IN_OFF
                    no_prom_in[i] = True
            pivots += over
            allow_prom = False
            continue
        p_free, nu = _solve_kkt(H, W, free, G, rW, dense)
        factorizations += 1
        p = np.zeros(n)
        p[free] = p_free

        def _release_worst():
            """Multiplier test at the current working set.

            Applies the single worst release and returns it, or returns
            None after declaring optimality (multipliers assembled).
            """
            nonlocal lam_eq, mu_in, optimal, allow_prom
            allow_prom = False
            Gfull = G + (W.T @ nu if W.shape[0] else 0.0)
            margin = tol * (1.0 + rho)
            worst = margin
            worst_item = None
            nu_e = nu[:idx_e.size]
            nu_i = nu[idx_e.size:]
            for k, i in enumerate(idx_e):
                over = abs(nu_e[k]) - rho
                if over > worst:
                    worst = over
                    worst_item = ("eq", int(i),
                                  EQ_POS if nu_e[k] > 0 else EQ_NEG)
            for k, i in enumerate(idx_i):
                over = max(-nu_i[k], nu_i[k] - rho)
                if over > worst:
                    worst = over
                    worst_item = ("in", int(i),
                                  IN_VIOL if nu_i[k] > rho else IN_OFF)
            for j in np.flatnonzero(var == VAR_LO):
                if -Gfull[j] > worst:
                    worst = -Gfull[j]
                    worst_item = ("var", int(j), VAR_FREE)
            for j in np.flatnonzero(var == VAR_UP):
                if Gfull[j] > worst:
                    worst = Gfull[j]
                    worst_item = ("var", int(j), VAR_FREE)
            if worst_item is None:
                lam_eq = np.where(st_eq == EQ_POS, rho,
                                  np.where(st_eq == EQ_NEG, -rho, 0.0))
                mu_in = np.where(st_in == IN_VIOL, rho, 0.0)
                lam_eq[idx_e] = nu_e
                mu_in[idx_i] = np.clip(nu_i, 0.0, rho)
                optimal = True
                return None
            kind, j, new_state = worst_item
            if kind == "eq":
                st_eq[j] = new_state
                no_prom_eq[j] = True
            elif kind == "in":
                st_in[j] = new_state
                no_prom_in[j] = True
            else:
                var[j] = new_state
            return worst_item

        if np.max(np.abs(p), initial=0.0) <= _EPS_STEP:
            if _release_worst() is None:
                break
            pivots += 1
            continue

        # ---- line walk along p through the penalty kinks ----
        aep = A_eq @ p if m_e else np.zeros(0)
        aip = A_in @ p if m_i else np.zeros(0)
        base = float(G @ p)
        # ON rows are not inside G's penalty gradient, but their residuals
        # still belong to the true l1 objective; a warm working set with
        # drifted residuals descends through this term as EQP restores it
        if idx_e.size:
            base += rho * float(np.sign(r_eq[idx_e]) @ aep[idx_e])
        if idx_i.size:
            base += rho * float((r_in[idx_i] > 0.0).astype(float)
                                @ aip[idx_i])
        # rows resting on their kink have a one-sided derivative the sign
        # pricing inside G gets wrong whenever the direction crosses to the
        # other side; correct base to the true directional slope, and keep
        # these rows out of the event list (their crossing is at zero)
        band_eq = np.zeros(0, dtype=bool)
        band_in = np.zeros(0, dtype=bool)
        if m_e:
            band_eq = (st_eq != EQ_ON) & (np.abs(r_eq) <= kink_band)
            if band_eq.any():
                s = np.where(st_eq[band_eq] == EQ_POS, 1.0, -1.0)
                a = aep[band_eq]
                base += rho * float(np.sum(np.abs(a) - s * a))
        if m_i:
            band_in = (st_in != IN_ON) & (np.abs(r_in) <= kink_band)
            if band_in.any():
                viol = st_in[band_in] == IN_VIOL
                a = aip[band_in]
                base += rho * float(
                    np.sum(np.maximum(a, 0.0) - np.where(viol, a, 0.0)))
        curv = float(p @ (H @ p))

        events = []
        if m_e:
            mask = (st_eq != EQ_ON) & (np.abs(aep) > _EPS_DIR) & ~band_eq
            with np.errstate(divide="ignore", invalid="ignore"):
                al = np.where(mask, -r_eq / np.where(mask, aep, 1.0), np.inf)
            mask &= (al > 1e-14) & (al < 1.0 - 1e-14)
            for i in np.flatnonzero(mask):
                flip = EQ_POS if st_eq[i] == EQ_NEG else EQ_NEG
                events.append((float(al[i]), 2.0 * rho * abs(aep[i]),
                               "eq", int(i), flip))
        if m_i:
            mask = (st_in != IN_ON) & (np.abs(aip) > _EPS_DIR) & ~band_in
            with np.errstate(divide="ignore", invalid="ignore"):
                al = np.where(mask, -r_in / np.where(mask, aip, 1.0), np.inf)
            mask &= (al > 1e-14) & (al < 1.0 - 1e-14)
            for i in np.flatnonzero(mask):
                flip = IN_VIOL if st_in[i] == IN_OFF else IN_OFF
                events.append((float(al[i]), rho * abs(aip[i]),
                               "in", int(i), flip))
        events.sort(key=lambda e: e[0])

        bound_alpha = np.inf
        bound_piv = None
        movers = np.flatnonzero((var == VAR_FREE) & (np.abs(p) > _EPS_DIR))
        for j in movers:
            if p[j] > 0 and np.isfinite(ub[j]):
                a = (ub[j] - d[j]) / p[j]
                piv = ("var", int(j), VAR_UP)
            elif p[j] < 0 and np.isfinite(lb[j]):
                a = (lb[j] - d[j]) / p[j]
                piv = ("var", int(j), VAR_LO)
            else:
                continue
            if a < bound_alpha:
                bound_alpha = a
                bound_piv = piv

        alpha = None
        new_pivot = None
        jumps = 0.0
        alpha_prev = 0.0
        for alpha_e, jump, kind, i, flip in events:
            if alpha_e >= bound_alpha:
                break
            slope_here = base + jumps + curv * alpha_e
            if slope_here >= -_EPS_SLOPE:
                if curv > _EPS_SLOPE:
                    a_star = -(base + jumps) / curv
                    alpha = min(max(a_star, alpha_prev), alpha_e)
                else:
                    alpha = alpha_prev
                break
            if slope_here + jump >= -_EPS_SLOPE:
                # minimizer sits on this kink: activate the row
                alpha = alpha_e
                new_pivot = (kind, i, EQ_ON if kind == "eq" else IN_ON)
                break
            st = st_eq if kind == "eq" else st_in
            st[i] = flip
            jumps += jump
            alpha_prev = alpha_e
        if alpha is None:
            limit = min(1.0, bound_alpha)
            slope_at_limit = base + jumps + curv * limit
            if slope_at_limit >= -_EPS_SLOPE and curv > _EPS_SLOPE:
                a_star = -(base + jumps) / curv
                alpha = min(max(a_star, alpha_prev), limit)
                if bound_alpha <= 1.0 and alpha >= bound_alpha - 1e-14:
                    new_pivot = bound_piv
            else:
                alpha = limit
                if bound_alpha <= 1.0:
                    new_pivot = bound_piv

        alpha = float(min(max(alpha, 0.0), 1.0))
        if alpha <= 1e-14 and new_pivot is None:
            # the direction is blocked at zero length, so either a
            # kink-resident row priced against the direction blocks it
            # (activate the worst one so the EQP pins it instead), or a
            # working-set row demands a multiplier beyond what the penalty
            # pays (the multiplier test releases it or proves optimality)
            cap_left = int((var == VAR_FREE).sum()) \
                - int((st_eq == EQ_ON).sum()) - int((st_in == IN_ON).sum())
            act = None
            best_w = _EPS_DIR * rho
            if band_eq.any():
                s = np.where(st_eq == EQ_POS, 1.0, -1.0)
                w = np.where(band_eq, -s * aep, 0.0) * (2.0 * rho)
                i = int(np.argmax(w))
                if w[i] > best_w:
                    best_w, act = float(w[i]), ("eq", i)
            if band_in.any():
                push = band_in & (((st_in == IN_OFF) & (aip > 0.0))
                                  | ((st_in == IN_VIOL) & (aip < 0.0)))
                w = np.where(push, np.abs(aip), 0.0) * rho
                i = int(np.argmax(w))
                if w[i] > best_w:
                    best_w, act = float(w[i]), ("in", i)
            if act is not None and cap_left > 0:
                kind, i = act
                if kind == "eq":
                    st_eq[i] = EQ_ON
                else:
                    st_in[i] = IN_ON
            else:
                if _release_worst() is None:
                    break
            stalls += 1
            if stalls > 2 * (m_e + m_i) + 50:
                raise QpFailure(
                    "no progress along the subproblem direction")
        else:
            stalls = 0
        if alpha * np.max(np.abs(p), initial=0.0) > _EPS_STEP:
            no_prom_eq[:] = False
            no_prom_in[:] = False
            allow_prom = True
        else:
            allow_prom = False
        d = d + alpha * p
        if new_pivot is not None:
            kind, j, state = new_pivot
            if kind == "var":
                var[j] = state
                d[j] = ub[j] if state == VAR_UP else lb[j]
            elif kind == "eq":
                st_eq[j] = state
            else:
                st_in[j] = state
        r_eq = b_eq + A_eq @ d
        r_in = b_in + A_in @ d
        pivots += 1
        merit = float(g @ d + 0.5 * d @ (H @ d)
                      + rho * (np.abs(r_eq).sum()
                               + np.maximum(r_in, 0.0).sum()))
        if merit < best_merit - 1e-12 * (1.0 + abs(best_merit)):
            best_merit = merit
            flat_iters = 0
        else:
            # status shuffles without merit progress are bounded in a sound
            # run (release chains at a degenerate vertex move nothing but
            # cannot revisit a working set); a longer plateau means cycling
            flat_iters += 1
            if flat_iters > 300 + 2 * (m_e + m_i) + n:
                raise QpFailure("active set cycling (no merit progress)")
    else:
        raise QpFailure(f"pivot cap {pivot_cap} exceeded")

    obj = float(g @ d + 0.5 * d @ (H @ d)
                + rho * (np.abs(r_eq).sum() + np.maximum(r_in, 0.0).sum()))
    statuses = QpStatuses(eq=st_eq.copy(), iq=st_in.copy(), var=var.copy())
    return QpResult(d=d, lam_eq=lam_eq, mu_in=mu_in, obj=obj,
                    pivots=pivots, factorizations=factorizations,
                    optimal=optimal, statuses=statuses,
                    r_eq=r_eq.copy(), r_in=r_in.copy())



def solve_penalty_qp_ipm(H, g, A_eq, b_eq, A_in, b_in, lb, ub, rho, *,
                         tol: float = 1e-9,
                         max_iter: int = 60) -> QpResult:
    """Solve the elastic subproblem with a primal-dual interior-point method.

    Splitting each l1 term into a pair of nonnegative slacks and each hinge
    into one slack turns the objective smooth; a predictor-corrector scheme
    then needs a few dozen factorizations of one quasi-definite KKT matrix
    no matter how large the penalty weight is, which makes this the reliable
    choice at transcription scale where an active set has too many vertices
    to walk and a first-order splitting ramps its duals too slowly.
    """
    g = np.asarray(g, dtype=float)
    n = g.size
    A_eq = _as_matrix(A_eq, n)
    A_in = _as_matrix(A_in, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float)
    m_e, m_i = b_eq.size, b_in.size
    lb = np.asarray(lb, dtype=float).copy()
    ub = np.asarray(ub, dtype=float).copy()
    if np.any(lb > ub + 1e-12):
        raise QpFailure("inconsistent bounds")
    rho = float(rho)
    Hs = H.tocsr() if sp.issparse(H) else sp.csr_matrix(np.asarray(H))

    has_lo = np.isfinite(lb)
    has_up = np.isfinite(ub)
    # a pinched box would put a primal pair at zero width; open it a hair,
    # the elastic rows absorb the perturbation
    pinch = has_lo & has_up & (ub - lb < 1e-11)
    ub[pinch] = lb[pinch] + 1e-11

    # start strictly inside the box with consistent slacks so the linear
    # primal residuals are zero from the first iterate on
    d = np.zeros(n)
    d = np.where(has_lo & (d < lb), lb, d)
    d = np.where(has_up & (d > ub), ub, d)
    both = has_lo & has_up
    margin = np.where(both, 1e-3 * (ub - lb), 1.0)
    d = np.where(has_lo & (d - lb < margin), np.where(both, lb + margin, lb + 1.0), d)
    d = np.where(has_up & (ub - d < margin), np.where(both, ub - margin, ub - 1.0), d)

    r_E0 = b_eq + np.asarray(A_eq @ d)
    r_I0 = b_in + np.asarray(A_in @ d)
    sp_ = np.maximum(r_E0, 0.0) + 1.0
    sm_ = np.maximum(-r_E0, 0.0) + 1.0
    t_ = np.maximum(r_I0, 0.0) + 1.0
    q_ = t_ - r_I0
    y_e = np.zeros(m_e)
    y_i = np.full(m_i, 0.5 * rho)
    z_l = np.where(has_lo, 1.0, 0.0)
    z_u = np.where(has_up, 1.0, 0.0)

    n_pairs = 2 * m_e + 2 * m_i + int(has_lo.sum()) + int(has_up.sum())
    eta = 0.995
    factorizations = 0
    it = 0
    converged = False
    scale_d = 1.0 + float(np.abs(g).max(initial=0.0))
    scale_p = 1.0 + max(float(np.abs(b_eq).max(initial=0.0)),
                        float(np.abs(b_in).max(initial=0.0)))
    ctol = max(tol, 1e-10)

    def comp_total(dv, spv, smv, tv, qv, yev, yiv, zlv, zuv):
        tot = 0.0
        if m_e:
            tot += float(spv @ (rho - yev) + smv @ (rho + yev))
        if m_i:
            tot += float(tv @ (rho - yiv) + qv @ yiv)
        pl = dv - lb
        pu = ub - dv
        tot += float((pl * zlv)[has_lo].sum() + (pu * zuv)[has_up].sum())
        return tot

    pad = 1e-13 * (1.0 + rho)
    for it in range(1, max_iter + 1):
        # rounding in the updates can land a pair exactly on its boundary,
        # which would put a zero in the denominators below; pull everything
        # strictly inside first
        y_e = np.clip(y_e, -rho + pad, rho - pad)
        y_i = np.clip(y_i, pad, rho - pad)
        p_l = np.where(has_lo, np.maximum(d - lb, 1e-30), 1.0)
        p_u = np.where(has_up, np.maximum(ub - d, 1e-30), 1.0)
        w_p = rho - y_e
        w_m = rho + y_e
        w_t = rho - y_i
        r_d = (g + np.asarray(Hs @ d) + np.asarray(A_eq.T @ y_e)
               + np.asarray(A_in.T @ y_i) - z_l + z_u)
        r_E = b_eq + np.asarray(A_eq @ d) - sp_ + sm_
        r_I = b_in + np.asarray(A_in @ d) - t_ + q_
        mu = comp_total(d, sp_, sm_, t_, q_, y_e, y_i, z_l, z_u) / max(n_pairs, 1)
        feas = max(float(np.abs(r_E).max(initial=0.0)),
                   float(np.abs(r_I).max(initial=0.0)))
        if (mu <= ctol * (1.0 + rho)
                and float(np.abs(r_d).max(initial=0.0)) <= 1e-8 * scale_d
                and feas <= 1e-9 * scale_p):
            converged = True
            break

        D_b = (np.where(has_lo, z_l / p_l, 0.0)
               + np.where(has_up, z_u / p_u, 0.0))
        D_e = sp_ / w_p + sm_ / w_m
        D_i = t_ / w_t + q_ / np.maximum(y_i, 1e-300)

        reg = 1e-11
        K = sp.bmat([
            [Hs + sp.diags(D_b + reg), A_eq.T, A_in.T],
            [A_eq, -sp.diags(D_e + reg) if m_e else None, None],
            [A_in, None, -sp.diags(D_i + reg) if m_i else None],
        ], format="csc")
        lu = None
        for kreg in (0.0, 1e-8, 1e-5):
            try:
                lu = spla.splu(K if kreg == 0.0 else
                               (K + kreg * sp.eye(K.shape[0], format="csc")))
                break
            except RuntimeError:
                continue
        if lu is None:
            raise QpFailure("interior-point KKT factorization failed")
        factorizations += 1

        def solve_kkt(rhs):
            sol = lu.solve(rhs)
            res = rhs - np.asarray(K @ sol)
            if float(np.abs(res).max(initial=0.0)) > 1e-10 * (1.0 + float(np.abs(rhs).max(initial=0.0))):
                sol = sol + lu.solve(res)
            return sol

        def assemble_and_recover(rc_p, rc_m, rc_t, rc_q, rc_l, rc_u):
            rhs_d = (-r_d + np.where(has_lo, rc_l / p_l, 0.0)
                     - np.where(has_up, rc_u / p_u, 0.0))
            rhs_e = -r_E + rc_p / w_p - rc_m / w_m
            rhs_i = -r_I + rc_t / w_t - rc_q / np.maximum(y_i, 1e-300)
            sol = solve_kkt(np.concatenate([rhs_d, rhs_e, rhs_i]))
            dd = sol[:n]
            dye = sol[n:n + m_e]
            dyi = sol[n + m_e:]
            dsp = (rc_p + sp_ * dye) / w_p
            dsm = (rc_m - sm_ * dye) / w_m
            dt = (rc_t + t_ * dyi) / w_t
            dq = (rc_q - q_ * dyi) / np.maximum(y_i, 1e-300)
            dzl = np.where(has_lo, (rc_l - z_l * dd) / p_l, 0.0)
            dzu = np.where(has_up, (rc_u + z_u * dd) / p_u, 0.0)
            return dd, dsp, dsm, dt, dq, dye, dyi, dzl, dzu

        def step_lengths(dd, dsp, dsm, dt, dq, dye, dyi, dzl, dzu):
            def ratio(x, dx, mask=None):
                if mask is not None:
                    x, dx = x[mask], dx[mask]
                neg = dx < 0.0
                if not np.any(neg):
                    return 1.0
                return float(np.min(-x[neg] / dx[neg]))

            a_p = min(1.0,
                      eta * min(ratio(sp_, dsp), ratio(sm_, dsm),
                                ratio(t_, dt), ratio(q_, dq),
                                ratio(p_l, dd, has_lo),
                                ratio(p_u, -dd, has_up)))
            a_d = min(1.0,
                      eta * min(ratio(w_p, -dye), ratio(w_m, dye),
                                ratio(w_t, -dyi), ratio(y_i, dyi),
                                ratio(z_l, dzl, has_lo),
                                ratio(z_u, dzu, has_up)))
            return a_p, a_d

        aff = assemble_and_recover(-sp_ * w_p, -sm_ * w_m, -t_ * w_t,
                                   -q_ * y_i,
                                   np.where(has_lo, -p_l * z_l, 0.0),
                                   np.where(has_up, -p_u * z_u, 0.0))
        a_p, a_d = step_lengths(*aff)
        dd, dsp, dsm, dt, dq, dye, dyi, dzl, dzu = aff
        mu_aff = comp_total(d + a_p * dd, sp_ + a_p * dsp, sm_ + a_p * dsm,
                            t_ + a_p * dt, q_ + a_p * dq,
                            y_e + a_d * dye, y_i + a_d * dyi,
                            z_l + a_d * dzl, z_u + a_d * dzu) / max(n_pairs, 1)
        sig = min(0.99, (mu_aff / max(mu, 1e-300)) ** 3)
        smu = sig * mu
        cor = assemble_and_recover(
            smu - sp_ * w_p + dsp * dye,
            smu - sm_ * w_m - dsm * dye,
            smu - t_ * w_t + dt * dyi,
            smu - q_ * y_i - dq * dyi,
            np.where(has_lo, smu - p_l * z_l - dd * dzl, 0.0),
            np.where(has_up, smu - p_u * z_u + dd * dzu, 0.0))
        a_p, a_d = step_lengths(*cor)
        dd, dsp, dsm, dt, dq, dye, dyi, dzl, dzu = cor
        if max(a_p, a_d) < 1e-10:
            break
        d = d + a_p * dd
        sp_ = sp_ + a_p * dsp
        sm_ = sm_ + a_p * dsm
        t_ = t_ + a_p * dt
        q_ = q_ + a_p * dq
        y_e = y_e + a_d * dye
        y_i = y_i + a_d * dyi
        z_l = z_l + a_d * dzl
        z_u = z_u + a_d * dzu

    d = np.clip(d, lb, ub)
    r_eq = b_eq + np.asarray(A_eq @ d)
    r_in = b_in + np.asarray(A_in @ d)
    lam_eq = np.clip(y_e, -rho, rho)
    mu_in = np.clip(y_i, 0.0, rho)
    obj = float(g @ d + 0.5 * d @ np.asarray(Hs @ d)
                + rho * (np.abs(r_eq).sum() + np.maximum(r_in, 0.0).sum()))
    st_eq = np.where(np.abs(r_eq) <= 1e-9, EQ_ON,
                     np.where(r_eq > 0.0, EQ_POS, EQ_NEG)).astype(np.int8)
    st_in = np.where(np.abs(r_in) <= 1e-9, IN_ON,
                     np.where(r_in > 0.0, IN_VIOL, IN_OFF)).astype(np.int8)
    var = np.zeros(n, dtype=np.int8)
    var[np.abs(d - lb) <= 1e-12] = VAR_LO
    var[np.abs(ub - d) <= 1e-12] = VAR_UP
    var[np.abs(ub - lb) <= 1e-14] = VAR_FIX
    statuses = QpStatuses(eq=st_eq, iq=st_in, var=var)
    return QpResult(d=d, lam_eq=lam_eq, mu_in=mu_in, obj=obj,
                    pivots=it, factorizations=factorizations,
                    optimal=converged, statuses=statuses,
                    r_eq=r_eq, r_in=r_in)
