"""Lap-time optimal control over one closed lap.

Direct transcription of the per-meter dynamics on the track grid: decision
variables are the five states at every node plus eight controls per
interval, with cylinder count relaxed to a continuous variable. The solve
returns the nominal references the online controller tracks (state and
control trajectories, region classification, costates) and doubles as the
non-causal benchmark when re-run against disturbed conditions.

Variable layout: [x_0, u_0, x_1, u_1, ..., x_{M-1}, u_{M-1}, x_M], all
scaled to O(1). The lap closes through periodicity rows on speed, boost
and turbo energy; fuel and battery appear through budget rows whose
multipliers are the energy prices the supervisory layer consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import adiff, plant
from .adiff import Dual, value
from .config import Config, TargetParams
from .errors import SpecError
from .nlp import (MDOT_ROW_SCALE, PSI_SCALE, U_SCALE, X_SCALE, EvalResult,
                  NlpProblem, SolveReport, require_ok, solve_sqp)
from .track import TrackProfile, classify_region

NX = 5
NU = 8          # u_th, mdot_cyl, p_k, p_h, u_wg, u_sa, p_brk, psi
NODE = NX + NU
U_SCALE_OFF = np.concatenate([U_SCALE, [PSI_SCALE]])
BUDGET_W = 2.0e3       # softplus width for the throughput budgets [W]
V_FLOOR_RATE = 10.0    # controller update rate floor [1/s]


@dataclass
class OfflineLayout:
    m: int
    n: int

    def x_cols(self, k: int) -> np.ndarray:
        return np.arange(k * NODE, k * NODE + NX)

    def u_cols(self, k: int) -> np.ndarray:
        return np.arange(k * NODE + NX, (k + 1) * NODE)

    def states(self, z: np.ndarray) -> np.ndarray:
        """(M+1, 5) scaled states."""
        xs = np.empty((self.m + 1, NX))
        for j in range(NX):
            xs[:self.m, j] = z[j:self.m * NODE:NODE]
        xs[self.m] = z[self.m * NODE:self.m * NODE + NX]
        return xs

    def controls(self, z: np.ndarray) -> np.ndarray:
        """(M, 8) scaled controls."""
        us = np.empty((self.m, NU))
        for j in range(NU):
            us[:, j] = z[NX + j:self.m * NODE:NODE]
        return us

    def pack(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        z = np.empty(self.n)
        for j in range(NX):
            z[j:self.m * NODE:NODE] = xs[:self.m, j]
        for j in range(NU):
            z[NX + j:self.m * NODE:NODE] = us[:, j]
        z[self.m * NODE:] = xs[self.m]
        return z


def gear_schedule(v: np.ndarray, cfg: Config) -> np.ndarray:
    """Deterministic gear sequence for a periodic speed profile.

    Sweeps the hysteresis shifter twice around the lap and keeps the second
    pass, so the sequence is consistent across the start line.
    """
    vp, dp = cfg.vehicle, cfg.driver
    m = v.size
    gears = np.zeros(m, dtype=int)
    g = 3
    last_shift = -dp.shift_dwell
    for i in range(2 * m):
        w = plant.engine_speed(float(v[i % m]), g, vp)
        if i - last_shift >= dp.shift_dwell:
            if w >= dp.omega_up and g < plant.GEARS[-1]:
                g += 1
                last_shift = i
            elif w < dp.omega_down and g > plant.GEARS[0]:
                g -= 1
                last_shift = i
        gears[i % m] = g
    return gears


def shift_points(gears: np.ndarray) -> list:
    """Indices i where gears[i] != gears[i-1] (wrapping), with the new gear."""
    out = []
    m = gears.size
    for i in range(m):
        if gears[i] != gears[i - 1]:
            out.append((i, int(gears[i])))
    return out


def omega_speed_window(gear: int, cfg: Config) -> tuple:
    """Vehicle speeds keeping the engine inside its speed window."""
    k = cfg.vehicle.gear_ratios[gear - 1] * cfg.vehicle.gamma_d \
        / cfg.vehicle.r_wheel
    return cfg.engine.omega_min / k, cfg.engine.omega_max / k


def build_bounds(track: TrackProfile, gears: np.ndarray, cfg: Config,
                 targets: TargetParams):
    m = track.n
    layout = OfflineLayout(m=m, n=m * NODE + NX)
    lb = np.empty(layout.n)
    ub = np.empty(layout.n)
    tp, ep = cfg.turbo, cfg.engine
    v_floor = track.ds * V_FLOOR_RATE

    x_lo = np.array([0.0, tp.p_im_min / X_SCALE[1], 0.0, 0.0,
                     tp.e_tc_min / X_SCALE[4]])
    x_hi = np.array([0.0, tp.p_im_max / X_SCALE[1], 2.5,
                     cfg.vehicle.e_b_cap / X_SCALE[3],
                     tp.e_tc_max / X_SCALE[4]])
    u_lo = np.array([0.0, 0.0, -cfg.vehicle.p_k_max, -tp.p_h_max,
                     0.0, ep.u_sa_min, 0.0, 0.0]) / U_SCALE_OFF
    u_hi = np.array([1.0, 6.5e-3, cfg.vehicle.p_k_max, tp.p_h_max,
                     1.0, 1.0, cfg.vehicle.p_brk_max, 6.0]) / U_SCALE_OFF

    for k in range(m + 1):
        g = int(gears[k % m])
        w_lo, w_hi = omega_speed_window(g, cfg)
        vmax_k = float(track.v_max[k % m])
        x_lo[0] = max(v_floor, w_lo) / X_SCALE[0]
        x_hi[0] = min(vmax_k, w_hi) / X_SCALE[0]
        if x_lo[0] > x_hi[0]:
            raise SpecError(
                f"gear {g} cannot cover node {k}: v in "
                f"[{x_lo[0] * X_SCALE[0]:.1f}, {x_hi[0] * X_SCALE[0]:.1f}]")
        cols = layout.x_cols(k) if k < m else \
            np.arange(m * NODE, m * NODE + NX)
        lb[cols] = x_lo
        ub[cols] = x_hi
        if k < m:
            lb[layout.u_cols(k)] = u_lo
            ub[layout.u_cols(k)] = u_hi

    # initial fuel burned is zero and the battery starts at its target
    lb[2] = ub[2] = 0.0
    lb[3] = ub[3] = targets.e_b0 / X_SCALE[3]
    return layout, lb, ub


@dataclass
class _Template:
    """Fixed sparsity pattern reused by every Jacobian assembly."""
    eq_indices: np.ndarray
    eq_indptr: np.ndarray
    eq_shape: tuple
    in_indices: np.ndarray
    in_indptr: np.ndarray
    in_shape: tuple


def _build_template(layout: OfflineLayout):
    m, n = layout.m, layout.n
    eq_cols, eq_ptr = [], [0]
    for k in range(m):
        node = np.arange(k * NODE, (k + 1) * NODE)
        for j in range(NX):
            eq_cols.append(np.concatenate([node, [(k + 1) * NODE + j]]))
            eq_ptr.append(eq_ptr[-1] + NODE + 1)
    # periodicity v, p_im, e_tc then battery, fuel
    for j in (0, 1, 4, 3, 2):
        eq_cols.append(np.array([j, m * NODE + j]))
        eq_ptr.append(eq_ptr[-1] + 2)
    in_cols, in_ptr = [], [0]
    for k in range(m):
        node = np.arange(k * NODE, (k + 1) * NODE)
        for _ in range(3):
            in_cols.append(node)
            in_ptr.append(in_ptr[-1] + NODE)
    v_pk = np.empty(2 * m, dtype=int)
    v_pk[0::2] = np.arange(m) * NODE          # v column
    v_pk[1::2] = np.arange(m) * NODE + NX + 2  # p_k column
    for _ in range(2):
        in_cols.append(v_pk)
        in_ptr.append(in_ptr[-1] + 2 * m)
    return _Template(
        eq_indices=np.concatenate(eq_cols),
        eq_indptr=np.asarray(eq_ptr),
        eq_shape=(NX * m + 5, n),
        in_indices=np.concatenate(in_cols),
        in_indptr=np.asarray(in_ptr),
        in_shape=(3 * m + 2, n),
    )


def _stage_duals(xs, us, gears, pp, s_arr, n_seed):
    """Physical-unit duals (or zero-width duals) for all nodes at once."""
    m = gears.size
    cols = [xs[:m, j] for j in range(NX)] + [us[:, j] for j in range(NU)]
    if n_seed:
        duals = adiff.seed_rows(cols, n_seed, list(range(NODE)))
    else:
        duals = [Dual(np.asarray(c, dtype=float), np.zeros((0, m)))
                 for c in cols]
    sx = [duals[j] * X_SCALE[j] for j in range(NX)]
    su = [duals[NX + j] * U_SCALE_OFF[j] for j in range(NU)]
    x = plant.StateVector(*sx)
    u = plant.ControlInput(u_th=su[0], mdot_cyl=su[1], p_k=su[2], p_h=su[3],
                           u_wg=su[4], u_sa=su[5], p_brk=su[6],
                           gear=gears, psi=su[7])
    return x, u, plant.stage_outputs(x, u, pp, s_arr)


def _row_values(xs, outs, targets, ds, m):
    """Scaled equality residuals from states and the stage outputs."""
    derivs = outs[0]
    c_eq = np.empty(NX * m + 5)
    for j in range(NX):
        c_eq[j::NX][:m] = (xs[1:, j] - xs[:m, j]
                           - ds * value(derivs[j]) / X_SCALE[j])
    c_eq[NX * m + 0] = xs[m, 0] - xs[0, 0]
    c_eq[NX * m + 1] = xs[m, 1] - xs[0, 1]
    c_eq[NX * m + 2] = xs[m, 4] - xs[0, 4]
    c_eq[NX * m + 3] = (xs[m, 3] - xs[0, 3]
                        - targets.delta_eb / X_SCALE[3])
    c_eq[NX * m + 4] = (xs[m, 2] - xs[0, 2]
                        - targets.delta_ef / X_SCALE[2])
    return c_eq


def _afr_fia_values(th, u_psi, u_mdot, ep):
    """Per-node combustion-window and fuel-ceiling row values (duals ok)."""
    beta_cyl = th.mdot_beta / ep.n_cyl
    s_afr = ep.sigma_0 * MDOT_ROW_SCALE
    w = u_psi / plant.PSI_MAX
    lean = (beta_cyl - ep.lambda_max * ep.sigma_0 * u_mdot) * w / s_afr
    rich = (ep.lambda_min * ep.sigma_0 * u_mdot - beta_cyl) * w / s_afr
    fia = (th.mdot_f - plant.fia_fuel_limit_smooth(th.omega, ep)) \
        / (plant.PSI_MAX * MDOT_ROW_SCALE)
    return lean, rich, fia


def _budget_values(v_dual, pk_dual, ds):
    """MGU-K throughput integrands [J] per node; softplus splits the sign.

    softplus(x) >= max(x, 0), so a plan feasible against these sums is
    feasible against the exact deploy/recuperation budgets.
    """
    dep_i = adiff.softplus(pk_dual, BUDGET_W) * ds / v_dual
    rec_i = adiff.softplus(-pk_dual, BUDGET_W) * ds / v_dual
    return dep_i, rec_i


def build_ocp(track: TrackProfile, gears: np.ndarray, cfg: Config,
              targets: TargetParams) -> tuple:
    """Assemble the transcription as an NlpProblem."""
    m = track.n
    ds = track.ds
    layout, lb, ub = build_bounds(track, gears, cfg, targets)
    tmpl = _build_template(layout)
    pp = track.bind(cfg.plant())
    ep = cfg.engine
    s_arr = np.arange(m) * ds
    gear_arr = np.asarray(gears, dtype=int)

    dep_cap = targets.deploy_cap / X_SCALE[3]
    rec_cap = targets.recup_cap / X_SCALE[3]

    def eval_vals(z):
        xs = layout.states(z)
        us = layout.controls(z)
        x, u, outs = _stage_duals(xs, us, gear_arr, pp, s_arr, 0)
        c_eq = _row_values(xs, outs, targets, ds, m)
        lean, rich, fia = _afr_fia_values(outs[1], u.psi, u.mdot_cyl, ep)
        dep_i, rec_i = _budget_values(x.v, u.p_k, ds)
        c_in = np.empty(3 * m + 2)
        c_in[0::3][:m] = value(lean)
        c_in[1::3][:m] = value(rich)
        c_in[2::3][:m] = value(fia)
        c_in[3 * m] = np.sum(value(dep_i)) / X_SCALE[3] - dep_cap
        c_in[3 * m + 1] = np.sum(value(rec_i)) / X_SCALE[3] - rec_cap
        f = float(np.sum(ds / (xs[:m, 0] * X_SCALE[0])))
        return f, c_eq, c_in

    def eval_full(z):
        xs = layout.states(z)
        us = layout.controls(z)
        x, u, outs = _stage_duals(xs, us, gear_arr, pp, s_arr, NODE)
        derivs = outs[0]
        c_eq = _row_values(xs, outs, targets, ds, m)

        # dynamics Jacobian data, laid out to match the template
        eq_data = np.empty(tmpl.eq_indptr[-1])
        blk = np.empty((NODE + 1, m))
        per_row = NODE + 1
        for j in range(NX):
            blk[:NODE] = -(ds / X_SCALE[j]) * derivs[j].dot
            blk[j] -= 1.0
            blk[NODE] = 1.0
            # rows for state j are interleaved: row index 5k + j
            eq_data[:NX * m * per_row].reshape(
                m, NX, per_row)[:, j, :] = blk.T
        eq_data[NX * m * per_row:] = np.tile([-1.0, 1.0], 5)
        J_eq = sp.csr_matrix((eq_data, tmpl.eq_indices, tmpl.eq_indptr),
                             shape=tmpl.eq_shape)

        lean, rich, fia = _afr_fia_values(outs[1], u.psi, u.mdot_cyl, ep)
        dep_i, rec_i = _budget_values(x.v, u.p_k, ds)
        c_in = np.empty(3 * m + 2)
        c_in[0::3][:m] = value(lean)
        c_in[1::3][:m] = value(rich)
        c_in[2::3][:m] = value(fia)
        c_in[3 * m] = float(np.sum(value(dep_i))) / X_SCALE[3] - dep_cap
        c_in[3 * m + 1] = float(np.sum(value(rec_i))) / X_SCALE[3] - rec_cap

        in_data = np.empty(tmpl.in_indptr[-1])
        node_part = in_data[:3 * m * NODE].reshape(m, 3, NODE)
        node_part[:, 0, :] = lean.dot.T
        node_part[:, 1, :] = rich.dot.T
        node_part[:, 2, :] = fia.dot.T
        tail = in_data[3 * m * NODE:].reshape(2, 2 * m)
        tail[0, 0::2] = dep_i.dot[0] / X_SCALE[3]
        tail[0, 1::2] = dep_i.dot[NX + 2] / X_SCALE[3]
        tail[1, 0::2] = rec_i.dot[0] / X_SCALE[3]
        tail[1, 1::2] = rec_i.dot[NX + 2] / X_SCALE[3]
        J_in = sp.csr_matrix((in_data, tmpl.in_indices, tmpl.in_indptr),
                             shape=tmpl.in_shape)

        f = float(np.sum(ds / (xs[:m, 0] * X_SCALE[0])))
        g = np.zeros(layout.n)
        g[0:m * NODE:NODE] = -ds / (X_SCALE[0] * xs[:m, 0] ** 2)
        return EvalResult(f=f, g=g, c_eq=c_eq, J_eq=J_eq,
                          c_in=c_in, J_in=J_in)

    blocks = [np.arange(k * NODE, (k + 1) * NODE) for k in range(m)]
    blocks.append(np.arange(m * NODE, m * NODE + NX))
    prob = NlpProblem(n=layout.n, lb=lb, ub=ub, eval_full=eval_full,
                      eval_vals=eval_vals, blocks=blocks,
                      name="lap-ocp")
    return prob, layout


def _policy_controls(x: plant.StateVector, i: int, gears: np.ndarray,
                     track: TrackProfile, cfg: Config,
                     pp) -> plant.ControlInput:
    """Envelope-tracking heuristic controls for the warm-start rollout.

    Full power under the envelope, fuel cut plus friction brakes above it,
    wastegate bands holding boost and turbo energy inside their boxes, and
    the MGU-H sustained from an equal MGU-K harvest during fuel cut so the
    battery stays near its start value.
    """
    ep, tp, vp = cfg.engine, cfg.turbo, cfg.vehicle
    m = track.n
    ds = track.ds
    g = int(gears[i])
    v = float(x.v)
    omega = plant.engine_speed(v, g, vp)
    _w_lo, w_hi = omega_speed_window(g, cfg)
    v_tgt = min(track.v_max[(i + 1) % m] * 0.995, w_hi * 0.985)

    # per-cylinder air flow is computable from the state alone
    lamv = plant.volumetric_efficiency(omega, ep)
    beta_cyl = (x.p_im * ep.v_d / (ep.r_air * ep.theta_im)
                * omega / (4.0 * math.pi) * lamv / ep.n_cyl)

    # wastegate bands keep p_im and e_tc off their box edges
    if x.p_im > 3.3e5 or x.e_tc > 2.9e4:
        u_wg = 1.0
    elif x.p_im > 2.9e5 or x.e_tc > 2.4e4:
        u_wg = 0.6
    elif x.e_tc < 6.0e3:
        u_wg = 0.0
    else:
        u_wg = 0.25

    if v < v_tgt:   # full power under the envelope
        mdot = min(0.95 * plant.fia_fuel_limit(omega, ep) / ep.n_cyl,
                   beta_cyl / (ep.sigma_0 * 1.02))
        mdot = max(mdot, beta_cyl / (ep.sigma_0 * ep.lambda_max * 0.98))
        return plant.ControlInput(u_th=1.0, mdot_cyl=mdot, p_k=0.0, p_h=0.0,
                                  u_wg=u_wg, u_sa=1.0, p_brk=0.0,
                                  gear=g, psi=plant.PSI_MAX)

    # above the envelope: fuel cut, hold the turbo with the MGU-H and
    # harvest the same power back so the battery barely moves
    p_h = 0.0
    if x.e_tc < 1.6e4:
        pr = x.p_im / tp.p_amb
        mdot_c = tp.cmp_flow * math.sqrt(max(x.e_tc, 1.0)) \
            * (1.0 - tp.cmp_pr_taper * (pr - 1.0))
        head = max(pr ** tp.kappa_air - 1.0, 0.0)
        p_h = min(tp.p_h_max,
                  mdot_c * tp.cp_air * tp.theta_amb * head / tp.eta_c)
    p_k = -p_h
    p_e = plant.friction_pumping_power(omega, x.p_im, ep)
    dv_tgt = (v_tgt - v) / ds
    p_trac_need = vp.m_car * v * v * dv_tgt \
        + float(plant.resistive_power(v, pp, i * ds))
    p_sum = p_e + p_k
    p_brk = (vp.trac_eff * p_sum - vp.trac_quad * p_sum * p_sum / vp.trac_p_ref
             - p_trac_need)
    p_brk = min(max(p_brk, 0.0), vp.p_brk_max)
    return plant.ControlInput(u_th=1.0, mdot_cyl=0.0, p_k=p_k, p_h=p_h,
                              u_wg=1.0, u_sa=1.0, p_brk=p_brk,
                              gear=g, psi=0)


def initial_guess(track: TrackProfile, gears: np.ndarray, cfg: Config,
                  targets: TargetParams, layout: OfflineLayout,
                  warm_laps: int = 3) -> np.ndarray:
    """Dynamics-feasible start from a policy rollout.

    Integrates the plant for a few laps until the heuristic policy settles
    into a near-periodic orbit, then records one lap. The dynamics rows of
    the transcription are exactly satisfied at this point (same integrator),
    so the first subproblem only works on optimality and the lap-closure
    rows.
    """
    m = track.n
    ds = track.ds
    pp = track.bind(cfg.plant())
    tp = cfg.turbo
    x = plant.StateVector(v=0.9 * float(track.v_max[0]), p_im=2.0e5,
                          e_f=0.0, e_b=targets.e_b0, e_tc=1.5e4)
    for lap in range(warm_laps):
        for i in range(m):
            u = _policy_controls(x, i, gears, track, cfg, pp)
            x = plant.euler_step(x, u, pp, i * ds, ds, checked=False)
            x.p_im = min(max(x.p_im, tp.p_im_min), tp.p_im_max)
            x.e_tc = min(max(x.e_tc, tp.e_tc_min), tp.e_tc_max)
        x.e_f = 0.0
        x.e_b = targets.e_b0

    xs = np.empty((m + 1, NX))
    us = np.empty((m, NU))
    for i in range(m):
        u = _policy_controls(x, i, gears, track, cfg, pp)
        xs[i] = (x.v, x.p_im, x.e_f, x.e_b, x.e_tc)
        us[i] = (u.u_th, u.mdot_cyl, u.p_k, u.p_h, u.u_wg, u.u_sa, u.p_brk,
                 float(u.psi))
        x = plant.euler_step(x, u, pp, i * ds, ds, checked=False)
        x.p_im = min(max(x.p_im, tp.p_im_min), tp.p_im_max)
        x.e_tc = min(max(x.e_tc, tp.e_tc_min), tp.e_tc_max)
    xs[m] = (x.v, x.p_im, x.e_f, x.e_b, x.e_tc)
    return layout.pack(xs / X_SCALE, us / U_SCALE_OFF)


@dataclass
class ReferenceBundle:
    """Everything the online layers read from the nominal optimization."""
    ds: float
    t_nom: float
    v: np.ndarray
    p_im: np.ndarray
    e_f: np.ndarray
    e_b: np.ndarray
    e_tc: np.ndarray
    u_th: np.ndarray
    mdot: np.ndarray
    p_k: np.ndarray
    p_h: np.ndarray
    u_wg: np.ndarray
    u_sa: np.ndarray
    p_brk: np.ndarray
    psi: np.ndarray
    gear: np.ndarray
    region: np.ndarray
    lam_v: np.ndarray
    p_f: np.ndarray
    p_trac: np.ndarray
    v_max: np.ndarray
    lam_f: float
    lam_b: float
    eta_bar: float
    k_exh: float
    e_b0: float
    delta_ef: float

    @property
    def m(self) -> int:
        return self.v.size

    def lam_kin(self, cfg: Config) -> np.ndarray:
        """Kinetic-energy costate per node (negative where speed pays)."""
        return self.lam_v / (cfg.vehicle.m_car * self.v)


_REF_COLUMNS = ("v", "p_im", "e_f", "e_b", "e_tc", "u_th", "mdot", "p_k",
                "p_h", "u_wg", "u_sa", "p_brk", "psi", "gear", "region",
                "lam_v", "p_f", "p_trac", "v_max")


def save_reference(ref: ReferenceBundle, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("# reference v1\n")
        for name in ("ds", "t_nom", "lam_f", "lam_b", "eta_bar", "k_exh",
                     "e_b0", "delta_ef"):
            fh.write(f"# {name} {getattr(ref, name)!r}\n")
        fh.write("# columns " + " ".join(_REF_COLUMNS) + "\n")
        cols = [getattr(ref, c) for c in _REF_COLUMNS]
        for i in range(ref.m):
            fh.write(" ".join(
                str(int(c[i])) if c.dtype.kind == "i" else repr(float(c[i]))
                for c in cols) + "\n")


def load_reference(path: str) -> ReferenceBundle:
    meta = {}
    rows = []
    with open(path) as fh:
        head = fh.readline().strip()
        if head != "# reference v1":
            raise SpecError(f"unrecognized reference header: {head!r}")
        for line in fh:
            if line.startswith("# columns"):
                continue
            if line.startswith("# "):
                k, val = line[2:].split(None, 1)
                meta[k] = float(val)
                continue
            rows.append([float(t) for t in line.split()])
    arr = np.asarray(rows)
    kw = {name: arr[:, i] for i, name in enumerate(_REF_COLUMNS)}
    kw["gear"] = kw["gear"].astype(int)
    kw["region"] = kw["region"].astype(int)
    return ReferenceBundle(
        ds=meta["ds"], t_nom=meta["t_nom"], lam_f=meta["lam_f"],
        lam_b=meta["lam_b"], eta_bar=meta["eta_bar"], k_exh=meta["k_exh"],
        e_b0=meta["e_b0"], delta_ef=meta["delta_ef"], **kw)


def _costates(report: SolveReport, layout: OfflineLayout):
    """Physical costates from the scaled multipliers.

    The multiplier of a scaled dynamics row measures seconds per unit of
    scaled defect; dividing by the state scale gives seconds per physical
    unit injected into that state at that node.
    """
    m = layout.m
    lam_v = report.lam_eq[0:NX * m:NX] / X_SCALE[0]
    lam_f = report.lam_eq[NX * m + 4] / X_SCALE[2]
    lam_b = report.lam_eq[NX * m + 3] / X_SCALE[3]
    return lam_v, float(lam_f), float(lam_b)


def _unpack_solution(z, layout, track, gears, cfg, targets, report):
    m = layout.m
    xs = layout.states(z) * X_SCALE
    us = layout.controls(z) * U_SCALE_OFF
    pp = track.bind(cfg.plant())
    s_arr = np.arange(m) * track.ds
    x, u, outs = _stage_duals(layout.states(z), layout.controls(z),
                              np.asarray(gears, int), pp, s_arr, 0)
    _derivs, th, p_trac, _p_res, _f_b = outs
    t_nom = float(np.sum(track.ds / xs[:m, 0]))
    lam_v, lam_f, lam_b = _costates(report, layout)
    region = classify_region(xs[:m, 0], track.v_max).astype(int)

    p_f = value(th.p_f)
    p_e = value(th.p_e)
    p_t = value(th.p_t)
    u_wg = us[:, 4]
    firing = p_f > 1.0e4
    if not firing.any():
        firing = p_f > 0.0
    eta_bar = 0.98 * float(np.min(p_e[firing] / p_f[firing]))
    wg_closed = firing & (u_wg < 0.2)
    if not wg_closed.any():
        wg_closed = firing
    k_exh = float(np.mean(p_t[wg_closed] / p_f[wg_closed]))

    return ReferenceBundle(
        ds=track.ds, t_nom=t_nom,
        v=xs[:m, 0], p_im=xs[:m, 1], e_f=xs[:m, 2], e_b=xs[:m, 3],
        e_tc=xs[:m, 4],
        u_th=us[:, 0], mdot=us[:, 1], p_k=us[:, 2], p_h=us[:, 3],
        u_wg=us[:, 4], u_sa=us[:, 5], p_brk=us[:, 6], psi=us[:, 7],
        gear=np.asarray(gears, int).copy(), region=region,
        lam_v=lam_v, p_f=p_f, p_trac=value(p_trac),
        v_max=track.v_max.copy(),
        lam_f=lam_f, lam_b=lam_b, eta_bar=eta_bar, k_exh=k_exh,
        e_b0=targets.e_b0, delta_ef=targets.delta_ef)


def solve_nominal(track: TrackProfile, cfg: Config,
                  gears: np.ndarray | None = None,
                  warm: SolveReport | None = None,
                  z0: np.ndarray | None = None):
    """Nominal lap optimization; returns (ReferenceBundle, SolveReport)."""
    targets = cfg.targets
    if gears is None:
        gears = gear_schedule(track.v_max, cfg)
    prob, layout = build_ocp(track, gears, cfg, targets)
    if z0 is None:
        z0 = initial_guess(track, gears, cfg, targets, layout)
    params = replace(cfg.solver, max_iter=max(cfg.solver.max_iter, 200))
    report = solve_sqp(prob, z0, params, warm=warm)
    require_ok(report, "nominal lap optimization")
    ref = _unpack_solution(report.z, layout, track, gears, cfg, targets,
                           report)
    return ref, report


def round_deactivation(psi: np.ndarray, dwell: int) -> np.ndarray:
    """Nearest-integer cylinder counts with a minimum dwell per level."""
    raw = np.clip(np.rint(psi), 0, plant.PSI_MAX).astype(int)
    out = raw.copy()
    i = 0
    m = raw.size
    while i < m:
        j = i
        while j < m and raw[j] == raw[i]:
            j += 1
        if j - i < dwell and i > 0:
            out[i:j] = out[i - 1]
        else:
            out[i:j] = raw[i:j]
        i = j
    return out


@dataclass
class BenchmarkResult:
    ref: ReferenceBundle
    t_continuous: float
    t_rounded: float
    report: SolveReport


def solve_benchmark(track: TrackProfile, cfg: Config, gears: np.ndarray,
                    nominal: ReferenceBundle,
                    nominal_report: SolveReport) -> BenchmarkResult:
    """Full-knowledge re-optimization against the disturbed conditions.

    Stage one re-solves the relaxed problem warm-started from the nominal
    solution; stage two fixes the cylinder counts to a dwell-respecting
    rounding of the relaxed ones and re-solves the remaining controls.
    """
    targets = cfg.targets
    prob, layout = build_ocp(track, gears, cfg, targets)
    z0 = nominal_report.z
    warm = nominal_report if np.array_equal(
        np.asarray(gears), nominal.gear) else None
    params = replace(cfg.solver, max_iter=max(cfg.solver.max_iter, 200))
    rep_a = solve_sqp(prob, z0, params, warm=warm)
    require_ok(rep_a, "benchmark stage one")
    t_cont = rep_a.objective

    psi_cont = layout.controls(rep_a.z)[:, 7] * PSI_SCALE
    psi_int = round_deactivation(psi_cont, cfg.driver.shift_dwell)
    prob2, layout2 = build_ocp(track, gears, cfg, targets)
    psi_cols = np.arange(NX + 7, track.n * NODE, NODE)
    prob2.lb[psi_cols] = psi_int / PSI_SCALE
    prob2.ub[psi_cols] = psi_int / PSI_SCALE
    rep_b = solve_sqp(prob2, rep_a.z, params)
    require_ok(rep_b, "benchmark stage two")
    ref = _unpack_solution(rep_b.z, layout2, track, gears, cfg, targets,
                           rep_b)
    return BenchmarkResult(ref=ref, t_continuous=t_cont,
                           t_rounded=rep_b.objective, report=rep_b)
