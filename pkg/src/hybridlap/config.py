"""Parameter sets and config-file handling.

Every tunable lives in one of the frozen dataclasses below. ``load_config``
reads a TOML file (key/value entries grouped in nested sections, one section
per dataclass) and overrides the matching defaults; unknown sections or keys
raise ``SpecError`` so typos cannot silently change a run. The full field
schema with units is documented in ``docs/config.md``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import SpecError

RPM_TO_RADS = math.pi / 30.0


@dataclass(frozen=True)
class EngineParams:
    """Combustion engine and air-path constants (SI units)."""

    n_cyl: int = 6                     # cylinder count [-]
    v_d: float = 1.6e-3                # displacement volume [m^3]
    v_im: float = 0.010                # intake manifold volume [m^3]
    theta_im: float = 320.0            # intake charge temperature [K]
    r_air: float = 287.05              # gas constant of air [J/(kg K)]
    sigma_0: float = 14.7              # stoichiometric air/fuel ratio [-]
    h_l: float = 43.4e6                # fuel lower heating value [J/kg]
    lambda_min: float = 0.85           # richest admissible AFR [-]
    lambda_max: float = 1.20           # leanest admissible AFR [-]
    omega_min: float = 420.0           # engine speed floor [rad/s]
    omega_max: float = 1360.0          # engine speed ceiling [rad/s]
    # volumetric efficiency: quadratic peaking mid-range
    lamv_peak: float = 0.95            # peak volumetric efficiency [-]
    lamv_omega0: float = 900.0         # speed of the peak [rad/s]
    lamv_curv: float = 4.9e-7          # curvature [1/(rad/s)^2]
    # thermal efficiency: separable concave polynomials
    eta_peak: float = 0.50             # peak thermal efficiency [-]
    eta_omega0: float = 1000.0         # efficiency peak speed [rad/s]
    eta_omega_span: float = 500.0      # speed span of the droop [rad/s]
    eta_omega_drop: float = 0.20       # relative droop at +-span [-]
    eta_lambda_curv: float = 2.0       # AFR droop curvature [1/-^2]
    eta_lambda_floor: float = -0.5     # saturation floor far outside the band [-]
    eta_lambda_sat_w: float = 0.05     # saturation blend width [-]
    # friction and pumping power (loss, enters P_e with negative sign)
    fric_lin: float = 14.0             # [W/(rad/s)]
    fric_quad: float = 0.03            # [W/(rad/s)^2]
    pump_coef: float = 4.2e-5          # [W/(Pa rad/s)]
    p_pump_ref: float = 1.0e5          # pumping reference pressure [Pa]
    u_sa_min: float = 0.60             # lowest spark-efficiency command [-]
    # regulatory fuel-flow limit (total, all cylinders)
    fia_slope: float = 0.009 * (30.0 / math.pi) / 3600.0   # [kg/s per rad/s]
    fia_icpt: float = 5.5 / 3600.0                         # [kg/s]
    fia_omega_knee: float = 10500.0 * RPM_TO_RADS          # [rad/s]
    fia_blend: float = 2.8e-4          # smooth-min width for optimizers [kg/s]
    mdot_reg: float = 1.0e-8           # AFR regularisation floor [kg/s]

    @property
    def fia_const(self) -> float:
        """Constant branch above the knee; continuous by construction."""
        return self.fia_slope * self.fia_omega_knee + self.fia_icpt


@dataclass(frozen=True)
class TurboParams:
    """Turbocharger, exhaust statics and MGU-H limits (SI units)."""

    p_amb: float = 1.0e5               # ambient pressure [Pa]
    theta_amb: float = 300.0           # ambient temperature [K]
    cp_air: float = 1005.0             # air heat capacity [J/(kg K)]
    cp_exh: float = 1150.0             # exhaust heat capacity [J/(kg K)]
    kappa_air: float = 0.2857          # (gamma-1)/gamma, air [-]
    kappa_exh: float = 0.248           # (gamma-1)/gamma, exhaust [-]
    eta_c: float = 0.72                # compressor efficiency [-]
    eta_t: float = 0.72                # turbine efficiency [-]
    cmp_flow: float = 8.22e-3          # compressor flow gain [kg/s per sqrt(J)]
    cmp_pr_taper: float = 0.25         # flow taper per pressure-ratio excess [-]
    trb_flow: float = 0.27             # turbine flow gain [kg/s per PR excess]
    trb_speed_loss: float = 0.15       # efficiency droop vs shaft speed [-]
    e_ref: float = 1.5e4               # reference shaft energy [J]
    theta_ref: float = 900.0           # reference exhaust temperature [K]
    # exhaust manifold statics
    em_gain: float = 3.9               # back-pressure buildup per flow [s/kg]
    em_wg_relief: float = 0.75         # relief at fully open waste gate [-]
    em_omega_gain: float = 0.10        # engine-speed dependence [-]
    omega_ref: float = 1000.0          # reference engine speed [rad/s]
    waste_to_exh: float = 0.50         # waste-power share into enthalpy [-]
    theta_em_cap: float = 1400.0       # exhaust temperature cap [K]
    theta_em_cap_width: float = 50.0   # cap blend width [K]
    # operating box and actuator bound
    p_im_min: float = 0.8e5            # [Pa]
    p_im_max: float = 3.6e5            # [Pa]
    e_tc_min: float = 2.0e3            # [J]
    e_tc_max: float = 3.2e4            # [J]
    softplus_w: float = 0.01           # compressor head smoothing [-]
    p_h_max: float = 1.0e5             # MGU-H power bound, both signs [W]


@dataclass(frozen=True)
class VehicleParams:
    """Chassis, driveline, brakes, battery and resistance (SI units)."""

    m_car: float = 798.0               # car + driver mass [kg]
    gamma_d: float = 6.8               # differential ratio [-]
    r_wheel: float = 0.33              # wheel radius [m]
    gear_ratios: tuple[float, ...] = (
        2.4300, 2.0342, 1.7029, 1.4255, 1.1933, 0.9989, 0.8362, 0.7000)
    # traction map: eff*(P_e+P_k) - quad*(P_e+P_k)^2/p_ref - P_brk
    trac_eff: float = 0.96             # driveline efficiency [-]
    trac_quad: float = 0.02            # quadratic loss coefficient [-]
    trac_p_ref: float = 6.0e5          # loss reference power [W]
    # battery map: -(P_k+P_h) - (P_k^2+P_h^2)/quad_ref
    batt_quad_ref: float = 2.4e6       # loss reference power [W]
    e_b_cap: float = 4.0e6             # battery capacity [J]
    p_k_max: float = 1.2e5             # MGU-K power bound, both signs [W]
    p_brk_max: float = 4.0e6           # friction brake power bound [W]
    # resistive power: (roll + extra(s))*v + drag*v^3
    roll_coef: float = 98.0            # rolling resistance force [N]
    drag_coef: float = 0.83            # aero drag coefficient [N/(m/s)^2]


@dataclass(frozen=True)
class PlantParams:
    """Bundle handed to the plant functions.

    ``res_extra`` is an optional callable s -> additional linear resistive
    coefficient [N] (cornering drag); bound by the track module.
    """

    engine: EngineParams = field(default_factory=EngineParams)
    turbo: TurboParams = field(default_factory=TurboParams)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    res_extra: object = None

    def resistive_extra(self, s):
        if self.res_extra is None:
            return 0.0
        return self.res_extra(s)

    def with_res_extra(self, fn) -> "PlantParams":
        return dataclasses.replace(self, res_extra=fn)


@dataclass(frozen=True)
class TrackParams:
    """Synthetic loop-track construction parameters."""

    ds: float = 2.0                    # grid spacing [m]
    v_cap: float = 92.0                # aero-limited velocity ceiling [m/s]
    a_brake: float = 42.0              # tire braking deceleration [m/s^2]
    a_traction: float = 12.0           # tire traction acceleration [m/s^2]
    corner_drag: float = 2400.0        # extra linear resistance in corners [N]
    # segments: (kind, length [m], apex speed [m/s] for corners)
    segments: tuple = (
        ("straight", 380.0, 0.0),
        ("corner", 60.0, 20.2),
        ("straight", 330.0, 0.0),
        ("corner", 80.0, 30.6),
        ("straight", 150.0, 0.0),
    )


@dataclass(frozen=True)
class TargetParams:
    """Per-lap energy targets and regulatory budgets."""

    delta_ef: float = 13.0e6           # fuel energy allowance per lap [J]
    delta_eb: float = 0.0              # required battery gain per lap [J]
    e_b0: float = 2.0e6                # battery charge at the start line [J]
    deploy_cap: float = 4.0e6          # MGU-K deploy budget per lap [J]
    recup_cap: float = 2.0e6           # MGU-K recuperation budget per lap [J]


@dataclass(frozen=True)
class DriverParams:
    """Driver-model probe assumptions (deliberately conservative)."""

    p_im_probe: float = 2.2e5          # boost assumed for the probe [Pa]
    p_k_probe: float = 1.0e5           # MGU-K power assumed for the probe [W]
    omega_up: float = 1250.0           # heuristic upshift speed [rad/s]
    omega_down: float = 700.0          # heuristic downshift speed [rad/s]
    shift_dwell: int = 3               # minimum indices between shifts [-]


@dataclass(frozen=True)
class EltmsParams:
    """Supervisor table construction and costate adaptation."""

    # costate grid (multipliers on the nominal values)
    lam_grid_lo: float = 0.25
    lam_grid_hi: float = 4.0
    lam_grid_n: int = 9
    # table node grids
    pl_nodes: int = 26                 # lambda_kin nodes [-]
    gl_nodes: int = 41                 # P_req nodes [-]
    gl_preq_min: float = -2.6e6        # most negative request tabulated [W]
    gl_preq_max: float = 7.5e5         # largest request tabulated [W]
    # actuator search grids
    n_pf: int = 81
    n_pk: int = 61
    n_wg: int = 21
    pf_max: float = 1.206e6            # static fuel-power ceiling [W]
    # static-model constants not derived from the nominal trace
    bp_loss: float = 0.04              # back-pressure traction loss share [-]
    rec_eff: float = 0.80              # exhaust-to-electric recovery eff [-]
    # PI costate adaptation
    kp_f: float = 8.0e-14              # [1/J * s/J]
    ki_f: float = 1.2e-15              # [1/(J m) * s/J]
    kp_b: float = 6.0e-13
    ki_b: float = 1.0e-14
    clamp_lo: float = 0.30             # costate clamp, multiple of nominal
    clamp_hi: float = 3.5


@dataclass(frozen=True)
class FccParams:
    """Cylinder-count feasibility bands (per active cylinder, kg/s)."""

    band_lo: float = 1.5e-3            # lowest stable per-cylinder flow [kg/s]
    band_hi: float = 5.0e-3            # highest banded per-cylinder flow [kg/s]
    # per-count overrides (index psi-1), regenerated by scripts/regen_fcc_bands.py
    band_lo_psi: tuple[float, ...] = (1.5e-3,) * 6
    band_hi_psi: tuple[float, ...] = (5.0e-3,) * 6


@dataclass(frozen=True)
class NmpcParams:
    """Receding-horizon controller weights and limits."""

    horizon: int = 5                   # control intervals [-]
    w_eb: float = 2.0e2                # battery terminal slack weight [-]
    w_pim: float = 2.0                 # manifold terminal slack weight [-]
    w_etc: float = 2.0                 # turbo terminal slack weight [-]
    w_ef: float = 0.5                  # fuel-power tracking weight [-]
    max_iter: int = 25
    tol: float = 1.0e-6
    fallback_limit: int = 2            # consecutive failures before tables-only


@dataclass(frozen=True)
class SolverParams:
    """SQP and QP settings."""

    tol: float = 1.0e-6                # scaled KKT tolerance [-]
    max_iter: int = 120
    rho_init: float = 10.0             # l1 penalty start value [-]
    rho_max: float = 1.0e10
    ls_c1: float = 0.1                 # Armijo fraction [-]
    ls_min_step: float = 1.0e-10
    qp_pivot_cap: int = 20000
    dense_kkt_below: int = 400         # dense KKT path threshold [vars]


@dataclass(frozen=True)
class Config:
    engine: EngineParams = field(default_factory=EngineParams)
    turbo: TurboParams = field(default_factory=TurboParams)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    track: TrackParams = field(default_factory=TrackParams)
    targets: TargetParams = field(default_factory=TargetParams)
    driver: DriverParams = field(default_factory=DriverParams)
    eltms: EltmsParams = field(default_factory=EltmsParams)
    fcc: FccParams = field(default_factory=FccParams)
    nmpc: NmpcParams = field(default_factory=NmpcParams)
    solver: SolverParams = field(default_factory=SolverParams)

    def plant(self) -> PlantParams:
        return PlantParams(self.engine, self.turbo, self.vehicle)


_SECTIONS = {
    "engine": EngineParams,
    "turbo": TurboParams,
    "vehicle": VehicleParams,
    "track": TrackParams,
    "targets": TargetParams,
    "driver": DriverParams,
    "eltms": EltmsParams,
    "fcc": FccParams,
    "nmpc": NmpcParams,
    "solver": SolverParams,
}


def _coerce(cls, name: str, raw):
    """Coerce a TOML value onto the declared field type."""
    ftypes = {f.name: f for f in dataclasses.fields(cls)}
    if name not in ftypes:
        raise SpecError(f"unknown key '{name}' in section [{_section_of(cls)}]")
    default = ftypes[name].default
    if isinstance(raw, list):
        if name == "segments":
            return tuple((str(k), float(ln), float(ap)) for k, ln, ap in raw)
        return tuple(float(x) for x in raw)
    if isinstance(default, bool):
        return bool(raw)
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(raw, float) and not raw.is_integer():
            raise SpecError(f"key '{name}' expects an integer")
        return int(raw)
    return float(raw)


def _section_of(cls) -> str:
    for k, v in _SECTIONS.items():
        if v is cls:
            return k
    return cls.__name__


def load_config(path: str | None = None) -> Config:
    """Build a Config from defaults, overridden by the TOML file at ``path``."""
    cfg = Config()
    if path is None:
        return cfg
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    updates = {}
    for section, entries in data.items():
        if section not in _SECTIONS:
            raise SpecError(f"unknown config section [{section}]")
        if not isinstance(entries, dict):
            raise SpecError(f"section [{section}] must hold key/value pairs")
        cls = _SECTIONS[section]
        kwargs = {k: _coerce(cls, k, v) for k, v in entries.items()}
        updates[section] = dataclasses.replace(getattr(cfg, section), **kwargs)
    return dataclasses.replace(cfg, **updates)


def dump_config(cfg: Config) -> str:
    """Serialise a Config back to TOML text (full schema, all values)."""
    lines = []
    for section, cls in _SECTIONS.items():
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(cls):
            val = getattr(obj, f.name)
            if isinstance(val, tuple):
                if f.name == "segments":
                    inner = ", ".join(
                        f'["{k}", {ln!r}, {ap!r}]' for k, ln, ap in val)
                    lines.append(f"{f.name} = [{inner}]")
                else:
                    lines.append(f"{f.name} = [{', '.join(repr(x) for x in val)}]")
            elif isinstance(val, bool):
                lines.append(f"{f.name} = {'true' if val else 'false'}")
            else:
                lines.append(f"{f.name} = {val!r}")
        lines.append("")
    return "\n".join(lines)
