"""Power-unit and vehicle model in the spatial domain.

State vector (per meter of track):

    v      velocity                         [m/s]
    p_im   intake manifold pressure         [Pa]
    e_f    fuel energy used since the line  [J]
    e_b    battery charge                   [J]
    e_tc   turbocharger shaft energy        [J]

Controls:

    u_th       throttle position                 [0..1]
    mdot_cyl   fuel flow per active cylinder     [kg/s]
    p_k        MGU-K electrical power, +deploy   [W]
    p_h        MGU-H electrical power, +to shaft [W]
    u_wg       waste-gate position, 1 = open     [0..1]
    u_sa       spark efficiency command          [u_sa_min..1]
    p_brk      friction brake power              [W]

Discrete inputs: gear (1..8) and the number of active cylinders psi (0..6).

All functions accept plain floats or ``adiff.Dual`` scalars so the same code
path produces derivatives for the optimizers. Checked entry points raise
``DomainError`` outside the validity box; the unchecked variants are for
optimizer iterates that may wander slightly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adiff
from .adiff import smoothmin, softplus, value
from .config import EngineParams, PlantParams, TurboParams, VehicleParams
from .errors import DomainError, IntegrationError

GEARS = tuple(range(1, 9))
PSI_MAX = 6


@dataclass
class StateVector:
    """Plant state; fields may be Dual during transcription."""

    v: float
    p_im: float
    e_f: float
    e_b: float
    e_tc: float

    def as_tuple(self):
        return (self.v, self.p_im, self.e_f, self.e_b, self.e_tc)


@dataclass
class ControlInput:
    """Continuous controls plus the discrete gear/cylinder inputs.

    In closed loop ``gear`` and ``psi`` are integers. Inside optimization
    transcriptions ``psi`` may be a continuous relaxation and any field may
    be a Dual.
    """

    u_th: float
    mdot_cyl: float
    p_k: float
    p_h: float
    u_wg: float
    u_sa: float
    p_brk: float
    gear: int
    psi: int


@dataclass
class ThermoOutputs:
    """Air-path quantities evaluated at one operating point."""

    omega: float          # engine speed [rad/s]
    mdot_beta: float      # air flow into the cylinders [kg/s]
    mdot_f: float         # total fuel flow [kg/s]
    lambda_af: float | None  # air/fuel ratio; None with no fuel injected
    eta: float            # thermal efficiency at this point [-]
    p_f: float            # chemical fuel power [W]
    p_e_comb: float       # combustion power [W]
    p_e: float            # net engine power incl. friction/pumping [W]
    mdot_c: float         # compressor air flow [kg/s]
    p_c: float            # compressor power draw [W]
    theta_em: float       # exhaust manifold temperature [K]
    p_em: float           # exhaust manifold pressure [Pa]
    mdot_t: float         # turbine flow [kg/s]
    p_t: float            # turbine power [W]


def engine_speed(v, gear, vp: VehicleParams):
    """Engine speed from vehicle speed through the fixed driveline.

    gear may be a scalar or an integer array (one entry per node).
    """
    if isinstance(gear, np.ndarray):
        if gear.min() < GEARS[0] or gear.max() > GEARS[-1]:
            raise DomainError("gear outside 1..8 in schedule")
        ratio = np.asarray(vp.gear_ratios)[gear - 1]
    else:
        if gear not in GEARS:
            raise DomainError(f"gear {gear} outside 1..8")
        ratio = vp.gear_ratios[gear - 1]
    return ratio * vp.gamma_d / vp.r_wheel * v


def gear_for_speed_range(vp: VehicleParams, ep: EngineParams, v):
    """Gears whose speed window contains v (ascending list, may be empty)."""
    out = []
    for g in GEARS:
        w = value(engine_speed(v, g, vp))
        if ep.omega_min <= w <= ep.omega_max:
            out.append(g)
    return out


def fia_fuel_limit(omega, ep: EngineParams):
    """Regulatory total fuel-flow ceiling, exact piecewise form [kg/s]."""
    affine = ep.fia_slope * omega + ep.fia_icpt
    if value(omega) <= ep.fia_omega_knee:
        return affine
    return ep.fia_const + 0.0 * omega


def fia_fuel_limit_smooth(omega, ep: EngineParams):
    """Smooth lower envelope of the fuel ceiling for derivative-based solvers.

    Always at or below the exact limit, so any plan feasible against this
    is feasible against the regulation.
    """
    affine = ep.fia_slope * omega + ep.fia_icpt
    return smoothmin(affine, ep.fia_const, ep.fia_blend)


def volumetric_efficiency(omega, ep: EngineParams):
    d = omega - ep.lamv_omega0
    return ep.lamv_peak - ep.lamv_curv * d * d


def thermal_efficiency(omega, lam, ep: EngineParams):
    """Separable efficiency surface over speed and AFR.

    The AFR droop is saturated far outside the admissible band so that
    optimizer iterates passing through extreme mixtures see bounded values
    and gradients; inside the band the saturation is inactive to machine
    precision.
    """
    dw = (omega - ep.eta_omega0) / ep.eta_omega_span
    eta_w = ep.eta_peak * (1.0 - ep.eta_omega_drop * dw * dw)
    dl = lam - 1.0
    raw = 1.0 - ep.eta_lambda_curv * dl * dl
    eta_l = ep.eta_lambda_floor + softplus(raw - ep.eta_lambda_floor,
                                           ep.eta_lambda_sat_w)
    return eta_w * eta_l


def friction_pumping_power(omega, p_im, ep: EngineParams):
    """Mechanical loss power; negative except under strong boost."""
    fric = ep.fric_lin * omega + ep.fric_quad * omega * omega
    pump = ep.pump_coef * omega * (p_im - ep.p_pump_ref)
    return -fric + pump


def check_operating_box(x: StateVector, u: ControlInput, pp: PlantParams,
                        tol: float = 1e-6):
    """Raise DomainError when outside the model validity region."""
    ep, tp, vp = pp.engine, pp.turbo, pp.vehicle
    v = value(x.v)
    if v <= 0.0:
        raise DomainError(f"velocity {v} must stay positive")
    p_im = value(x.p_im)
    if not (tp.p_im_min - tol * tp.p_im_min <= p_im
            <= tp.p_im_max + tol * tp.p_im_max):
        raise DomainError(f"p_im {p_im:.1f} Pa outside "
                          f"[{tp.p_im_min:.0f}, {tp.p_im_max:.0f}]")
    e_tc = value(x.e_tc)
    if not (tp.e_tc_min - tol * tp.e_tc_max <= e_tc
            <= tp.e_tc_max + tol * tp.e_tc_max):
        raise DomainError(f"e_tc {e_tc:.1f} J outside "
                          f"[{tp.e_tc_min:.0f}, {tp.e_tc_max:.0f}]")
    e_b = value(x.e_b)
    if not (-tol * vp.e_b_cap <= e_b <= (1.0 + tol) * vp.e_b_cap):
        raise DomainError(f"e_b {e_b:.1f} J outside [0, {vp.e_b_cap:.0f}]")
    if u.gear not in GEARS:
        raise DomainError(f"gear {u.gear} outside 1..8")
    if u.psi not in range(0, PSI_MAX + 1):
        raise DomainError(f"psi {u.psi} outside 0..6")
    w = value(engine_speed(x.v, u.gear, vp))
    if not (ep.omega_min - tol * ep.omega_max <= w
            <= ep.omega_max + tol * ep.omega_max):
        raise DomainError(f"engine speed {w:.1f} rad/s outside "
                          f"[{ep.omega_min:.0f}, {ep.omega_max:.0f}]")


def air_path(x: StateVector, u: ControlInput, pp: PlantParams,
             checked: bool = False) -> ThermoOutputs:
    """Evaluate engine, compressor, exhaust and turbine statics."""
    if checked:
        check_operating_box(x, u, pp)
    ep, tp = pp.engine, pp.turbo
    omega = engine_speed(x.v, u.gear, pp.vehicle)

    # cylinder air flow through the throttle-commanded induction
    lamv = volumetric_efficiency(omega, ep)
    mdot_beta = (x.p_im * ep.v_d / (ep.r_air * ep.theta_im)
                 * (omega / (4.0 * 3.141592653589793)) * lamv * u.u_th)

    mdot_f = u.mdot_cyl * u.psi
    p_f = mdot_f * ep.h_l

    # Fuel-cut handling: with plain numeric inputs (closed-loop plant) the
    # zero-fuel branch is exact. With Dual inputs (transcription) the smooth
    # path always runs so derivatives w.r.t. fueling survive at the boundary.
    numeric = not (isinstance(u.psi, adiff.Dual)
                   or isinstance(u.mdot_cyl, adiff.Dual))
    fuel_cut = numeric and (u.psi == 0 or u.mdot_cyl == 0.0)

    # AFR used in the efficiency map; regularised so mdot_cyl -> 0 is benign
    mdot_eff = adiff.sqrt(u.mdot_cyl * u.mdot_cyl + ep.mdot_reg * ep.mdot_reg)
    lam_model = mdot_beta / ep.n_cyl / (ep.sigma_0 * mdot_eff)
    if fuel_cut:
        lambda_af = None
        eta = thermal_efficiency(omega, 1.0, ep)
        p_e_comb = 0.0 * p_f
    else:
        if numeric:
            lambda_af = (value(mdot_beta) / ep.n_cyl
                         / (ep.sigma_0 * value(u.mdot_cyl)))
        else:
            lambda_af = None
        eta = thermal_efficiency(omega, lam_model, ep)
        p_e_comb = eta * u.u_sa * p_f
    p_e = p_e_comb + friction_pumping_power(omega, x.p_im, ep)

    # compressor
    pr_c = x.p_im / tp.p_amb
    mdot_c = (tp.cmp_flow * adiff.sqrt(x.e_tc)
              * (1.0 - tp.cmp_pr_taper * (pr_c - 1.0)))
    head = softplus(pr_c ** tp.kappa_air - 1.0, tp.softplus_w)
    p_c = mdot_c * tp.cp_air * tp.theta_amb * head / tp.eta_c

    # exhaust manifold: enthalpy rises with unconverted fuel power
    mdot_exh = mdot_beta + mdot_f
    mexh_eff = adiff.sqrt(mdot_exh * mdot_exh + 1e-12)
    if fuel_cut:
        waste = 0.0 * p_f
    else:
        waste = (1.0 - eta * u.u_sa) * p_f
    theta_raw = tp.theta_amb + tp.waste_to_exh * waste / (mexh_eff * tp.cp_exh)
    theta_em = smoothmin(theta_raw, tp.theta_em_cap, tp.theta_em_cap_width)

    p_em = tp.p_amb * (1.0
                       + tp.em_gain * mdot_exh
                       * adiff.sqrt(theta_em / tp.theta_ref)
                       * (1.0 - tp.em_wg_relief * u.u_wg)
                       * (1.0 + tp.em_omega_gain * (omega / tp.omega_ref - 1.0)))

    # turbine
    pr_t = p_em / tp.p_amb
    mdot_t = tp.trb_flow * (pr_t - 1.0) * adiff.sqrt(tp.theta_ref / theta_em)
    n_rel = adiff.sqrt(x.e_tc / tp.e_ref)
    eta_t_eff = tp.eta_t * (1.0 - tp.trb_speed_loss * (n_rel - 1.0) ** 2.0)
    p_t = (eta_t_eff * mdot_t * tp.cp_exh * theta_em
           * (1.0 - pr_t ** (-tp.kappa_exh)))

    return ThermoOutputs(
        omega=omega, mdot_beta=mdot_beta, mdot_f=mdot_f, lambda_af=lambda_af,
        eta=eta, p_f=p_f, p_e_comb=p_e_comb, p_e=p_e,
        mdot_c=mdot_c, p_c=p_c, theta_em=theta_em, p_em=p_em,
        mdot_t=mdot_t, p_t=p_t)


def traction_power(p_e, p_k, p_brk, vp: VehicleParams):
    """Wheel power delivered by engine plus MGU-K minus friction brakes."""
    p_sum = p_e + p_k
    return (vp.trac_eff * p_sum
            - vp.trac_quad * p_sum * p_sum / vp.trac_p_ref
            - p_brk)


def battery_flow(p_k, p_h, vp: VehicleParams):
    """Battery power balance; positive charges the battery."""
    return -(p_k + p_h) - (p_k * p_k + p_h * p_h) / vp.batt_quad_ref


def resistive_power(v, pp: PlantParams, s: float):
    """Rolling, cornering and aero drag power at position s."""
    vp = pp.vehicle
    lin = vp.roll_coef + pp.resistive_extra(s)
    return lin * v + vp.drag_coef * v * v * v


def stage_outputs(x: StateVector, u: ControlInput, pp: PlantParams,
                  s, checked: bool = False):
    """Derivatives plus the intermediates a transcription constrains.

    Returns (derivs, th, p_trac, p_res, f_b) where derivs is the tuple
    (dv, dp_im, de_f, de_b, de_tc) per meter.
    """
    th = air_path(x, u, pp, checked=checked)
    ep = pp.engine
    p_trac = traction_power(th.p_e, u.p_k, u.p_brk, pp.vehicle)
    p_res = resistive_power(x.v, pp, s)
    f_b = battery_flow(u.p_k, u.p_h, pp.vehicle)
    inv_v = 1.0 / x.v
    dv = (p_trac - p_res) * inv_v * inv_v / pp.vehicle.m_car
    dp_im = (ep.r_air * ep.theta_im / ep.v_im) * (th.mdot_c - th.mdot_beta) * inv_v
    de_f = th.p_f * inv_v
    de_b = f_b * inv_v
    de_tc = (th.p_t - th.p_c + u.p_h) * inv_v
    return (dv, dp_im, de_f, de_b, de_tc), th, p_trac, p_res, f_b


def spatial_derivatives(x: StateVector, u: ControlInput, pp: PlantParams,
                        s, checked: bool = False):
    """Right-hand side of the per-meter state equations.

    Returns the tuple (dv, dp_im, de_f, de_b, de_tc) per meter.
    """
    return stage_outputs(x, u, pp, s, checked=checked)[0]


def euler_step(x: StateVector, u: ControlInput, pp: PlantParams,
               s: float, ds: float, checked: bool = True) -> StateVector:
    """One explicit Euler step of length ds meters."""
    d = spatial_derivatives(x, u, pp, s, checked=checked)
    nxt = StateVector(
        v=x.v + ds * d[0],
        p_im=x.p_im + ds * d[1],
        e_f=x.e_f + ds * d[2],
        e_b=x.e_b + ds * d[3],
        e_tc=x.e_tc + ds * d[4],
    )
    if value(nxt.v) <= 0.0:
        raise IntegrationError(f"velocity collapsed to {value(nxt.v):.3f} m/s "
                               f"at s={s:.1f}")
    return nxt


def max_traction_power(v: float, gear: int, pp: PlantParams,
                       p_im_probe: float, p_k_probe: float) -> float:
    """Best-case wheel power at speed v in the given gear.

    Assumes wide-open throttle at the probe boost pressure, all six
    cylinders firing at the largest fuel flow allowed by the regulatory
    ceiling and the rich AFR bound, full spark efficiency, and the probe
    MGU-K power. Used by the driver model to decide whether the car is
    grip- or power-limited; the probe values are configured slightly
    below what the optimizer can actually reach so the answer errs
    toward power-limited.
    """
    ep = pp.engine
    omega = float(engine_speed(v, gear, pp.vehicle))
    lamv = volumetric_efficiency(omega, ep)
    mdot_beta = (p_im_probe * ep.v_d / (ep.r_air * ep.theta_im)
                 * (omega / (4.0 * 3.141592653589793)) * lamv)
    ceil_air = mdot_beta / (ep.n_cyl * ep.sigma_0 * ep.lambda_min)
    ceil_fia = fia_fuel_limit(omega, ep) / ep.n_cyl
    mdot_cyl = min(ceil_air, ceil_fia)
    lam = mdot_beta / ep.n_cyl / (ep.sigma_0 * mdot_cyl)
    lam = min(lam, ep.lambda_max)
    eta = thermal_efficiency(omega, lam, ep)
    p_f = mdot_cyl * ep.n_cyl * ep.h_l
    p_e = eta * p_f + friction_pumping_power(omega, p_im_probe, ep)
    return float(traction_power(p_e, p_k_probe, 0.0, pp.vehicle))
