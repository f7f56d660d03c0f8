"""
Energy storage model for Quiet Meter
Three-circuit battery dynamics, feasibility envelopes and loss accounting
"""

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, Any, List, NamedTuple, Optional, Sequence, Tuple, Union
import hashlib
import json
import logging
import math

import yaml

logger = logging.getLogger(__name__)

HOURS_PER_MONTH = 720.0
SECONDS_PER_HOUR = 3600.0

# Capacity residue absorbed by step(), as a fraction of z_max
RESIDUE_FRACTION = 1e-9

PARAMETER_KEYS = (
    "v_oc_volts", "r_ohms", "eta_c", "eta_d", "gamma_per_month",
    "i_max_amps", "i_min_amps", "capacity_ah", "dt_seconds",
)

# 12 V 100 Ah pack behind a 95% converter, one-minute slots
DESK_SCALE_BATTERY: Dict[str, float] = {
    "v_oc_volts": 12.0,
    "r_ohms": 0.006,
    "eta_c": 0.95,
    "eta_d": 0.95,
    "gamma_per_month": 0.03,
    "i_max_amps": 80.0,
    "i_min_amps": 80.0,
    "capacity_ah": 100.0,
    "dt_seconds": 60.0,
}


class EssContractError(ValueError):
    """Raised when a power or action lies outside the physical envelope"""


def derive_step_params(gamma_month: float, dt: float) -> Tuple[float, float]:
    """
    Convert a monthly self-discharge rate into per-step coefficients

    Args:
        gamma_month: Fraction of stored energy lost over 720 hours
        dt: Slot duration in hours

    Returns:
        (gamma_step, beta) with beta in hours

    Raises:
        ValueError: If gamma_month is outside [0, 1) or dt is not positive
    """
    if not 0.0 <= gamma_month < 1.0:
        raise ValueError(f"gamma_month must lie in [0, 1), got {gamma_month}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")

    gamma_step = -math.expm1((dt / HOURS_PER_MONTH) * math.log1p(-gamma_month))
    return gamma_step, _beta_for(gamma_step, dt)


def _beta_for(gamma_step: float, dt: float) -> float:
    if gamma_step == 0.0:
        return dt
    return -gamma_step * dt / math.log1p(-gamma_step)


@dataclass(frozen=True)
class EssParams:
    """Electrical constants of one battery and its converters"""
    v_oc: float
    r_internal: float
    eta_c: float
    eta_d: float
    gamma_step: float
    beta: float
    i_max: float
    i_min_mag: float
    z_max: float
    dt: float
    rc_product: Optional[float] = None

    def __post_init__(self):
        if not (0 < self.eta_c <= 1 and 0 < self.eta_d <= 1):
            raise ValueError(f"Converter efficiencies must lie in (0, 1]: {self.eta_c}, {self.eta_d}")
        if not 0 <= self.gamma_step < 1:
            raise ValueError(f"gamma_step must lie in [0, 1), got {self.gamma_step}")
        if self.r_internal < 0:
            raise ValueError(f"r_internal must be non-negative, got {self.r_internal}")
        if self.v_oc <= 0 or self.z_max <= 0 or self.dt <= 0:
            raise ValueError("v_oc, z_max and dt must be positive")
        if self.i_max < 0 or self.i_min_mag < 0:
            raise ValueError("Current limits must be non-negative magnitudes")
        if not 0 < self.beta <= self.dt * (1 + 1e-12):
            raise ValueError(f"beta must lie in (0, dt], got {self.beta} with dt={self.dt}")

    @classmethod
    def from_mapping(cls, values: Dict[str, Any]) -> "EssParams":
        """Build parameters from a flat parameter-file mapping"""
        missing = [key for key in PARAMETER_KEYS if key not in values]
        if missing:
            raise ValueError(f"Missing ESS parameter keys: {missing}")
        unknown = sorted(set(values) - set(PARAMETER_KEYS))
        if unknown:
            raise ValueError(f"Unknown ESS parameter keys: {unknown}")

        dt = float(values["dt_seconds"]) / SECONDS_PER_HOUR
        gamma_step, beta = derive_step_params(float(values["gamma_per_month"]), dt)
        v_oc = float(values["v_oc_volts"])

        return cls(
            v_oc=v_oc,
            r_internal=float(values["r_ohms"]),
            eta_c=float(values["eta_c"]),
            eta_d=float(values["eta_d"]),
            gamma_step=gamma_step,
            beta=beta,
            i_max=float(values["i_max_amps"]),
            i_min_mag=float(values["i_min_amps"]),
            z_max=v_oc * float(values["capacity_ah"]),
            dt=dt,
        )

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "EssParams":
        """Load a flat key/value YAML parameter file"""
        param_file = Path(path)
        if not param_file.exists():
            raise FileNotFoundError(f"ESS parameter file not found: {path}")

        with open(param_file, 'r') as f:
            values = yaml.safe_load(f) or {}

        logger.info(f"Loaded ESS parameters from {param_file}")
        return cls.from_mapping(values)

    @classmethod
    def from_rc(cls, rc_product: float, **fields) -> "EssParams":
        """Build parameters from the self-discharge time constant R*C in hours"""
        if rc_product <= 0:
            raise ValueError(f"rc_product must be positive, got {rc_product}")
        dt = fields["dt"]
        gamma_step = -math.expm1(-dt / rc_product)
        return cls(gamma_step=gamma_step, beta=_beta_for(gamma_step, dt), rc_product=rc_product, **fields)

    def to_mapping(self) -> Dict[str, float]:
        """Parameter-file view; the monthly rate is recovered from gamma_step"""
        retained = (1.0 - self.gamma_step) ** (HOURS_PER_MONTH / self.dt)
        return {
            "v_oc_volts": self.v_oc,
            "r_ohms": self.r_internal,
            "eta_c": self.eta_c,
            "eta_d": self.eta_d,
            "gamma_per_month": 1.0 - retained,
            "i_max_amps": self.i_max,
            "i_min_amps": self.i_min_mag,
            "capacity_ah": self.z_max / self.v_oc,
            "dt_seconds": self.dt * SECONDS_PER_HOUR,
        }

    def digest(self) -> str:
        """Stable SHA-256 over every field"""
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class EssState:
    z: float

    def __post_init__(self):
        if not math.isfinite(self.z):
            raise ValueError(f"Stored energy must be finite, got {self.z}")

    def soc(self, params: EssParams) -> float:
        return self.z / params.z_max


@dataclass(frozen=True)
class ActionBounds:
    """Admissible AC-side battery power interval in W"""
    d_lo: float
    d_hi: float

    def __post_init__(self):
        if not self.d_lo <= 0 <= self.d_hi:
            raise ValueError(f"Bounds must bracket idle: [{self.d_lo}, {self.d_hi}]")

    def contains(self, d: float, tolerance: float = 1e-9) -> bool:
        slack = tolerance * max(1.0, abs(d))
        return self.d_lo - slack <= d <= self.d_hi + slack


class ConfigurationLosses(NamedTuple):
    loss_parallel: float
    loss_series: float


@dataclass(frozen=True)
class DivergenceRow:
    d: float
    soc_change_three_circuit: float
    soc_change_ideal: float

    @property
    def difference(self) -> float:
        return self.soc_change_ideal - self.soc_change_three_circuit


# ============================================================================
# Power and current
# ============================================================================

def converter_factor(d: float, params: EssParams) -> float:
    """Direction-dependent converter multiplier"""
    return params.eta_c if d >= 0 else 1.0 / params.eta_d


def converter_power(d: float, params: EssParams) -> float:
    """DC power reaching the battery terminals for AC-side demand d"""
    return d * converter_factor(d, params)


def battery_current(p: float, params: EssParams) -> float:
    """
    Current into the battery for terminal power p

    Uses 2p / (sqrt(v^2 + 4rp) + v), which equals (sqrt(v^2 + 4rp) - v) / 2r
    and reduces to p / v at r = 0.

    Raises:
        EssContractError: If the discharge power exceeds what the cell can source
    """
    v = params.v_oc
    radicand = v * v + 4.0 * params.r_internal * p
    if radicand < 0:
        raise EssContractError(
            f"Discharge power {p:.3f} W exceeds the source limit {-v * v / (4 * params.r_internal):.3f} W"
        )
    return 2.0 * p / (math.sqrt(radicand) + v)


def _advance(z: float, p: float, params: EssParams) -> float:
    """Unclamped energy update for terminal power p"""
    return (1.0 - params.gamma_step) * z + params.beta * params.v_oc * battery_current(p, params)


def _absorb_residue(z_next: float, params: EssParams) -> float:
    residue = RESIDUE_FRACTION * params.z_max
    if z_next < -residue or z_next > params.z_max + residue:
        raise EssContractError(
            f"Stored energy {z_next:.9f} Wh leaves [0, {params.z_max}] beyond rounding residue"
        )
    return min(max(z_next, 0.0), params.z_max)


def _check_state(state: EssState, params: EssParams):
    residue = RESIDUE_FRACTION * params.z_max
    if state.z < -residue or state.z > params.z_max + residue:
        raise EssContractError(f"State z={state.z} Wh outside [0, {params.z_max}]")


# ============================================================================
# Dynamics
# ============================================================================

def step(state: EssState, d: float, params: EssParams) -> EssState:
    """
    Advance the stored energy by one slot under AC-side power d

    Raises:
        EssContractError: If d lies outside state_bounds(state)
    """
    _check_state(state, params)
    bounds = state_bounds(state, params)
    if not bounds.contains(d):
        raise EssContractError(
            f"Action {d:.3f} W infeasible at z={state.z:.6f} Wh "
            f"(envelope [{bounds.d_lo:.3f}, {bounds.d_hi:.3f}])"
        )
    return EssState(_absorb_residue(_advance(state.z, converter_power(d, params), params), params))


def ideal_step(state: EssState, d: float, dt: float, z_max: Optional[float] = None) -> EssState:
    """Lossless reference update z + d*dt"""
    z_next = state.z + d * dt
    ceiling = math.inf if z_max is None else z_max
    residue = RESIDUE_FRACTION * (z_max if z_max is not None else max(1.0, abs(state.z)))
    if z_next < -residue or z_next > ceiling + residue:
        raise EssContractError(f"Ideal update leaves the store: z={state.z} Wh, d={d} W")
    return EssState(min(max(z_next, 0.0), ceiling))


def energy_loss(state: EssState, d: float, params: EssParams) -> float:
    """Energy lost in one slot relative to the ideal store, in Wh"""
    return state.z + d * params.dt - step(state, d, params).z


# ============================================================================
# Feasibility envelopes
# ============================================================================

def rate_bounds(params: EssParams) -> ActionBounds:
    """Current-limited envelope from the charge and discharge current caps"""
    v, r = params.v_oc, params.r_internal
    # ((v + 2rI)^2 - v^2) / 4r and (v^2 - (v - 2rI)^2) / 4r, expanded
    d_hi = (v * params.i_max + r * params.i_max ** 2) / params.eta_d
    d_lo = -params.eta_c * (v * params.i_min_mag - r * params.i_min_mag ** 2)
    return ActionBounds(d_lo=min(d_lo, 0.0), d_hi=max(d_hi, 0.0))


def _capacity_terminal_powers(z: float, params: EssParams) -> Tuple[float, float]:
    """Terminal powers that land exactly on z_max and on empty after one slot"""
    v2 = params.v_oc ** 2
    r, beta = params.r_internal, params.beta
    keep = 1.0 - params.gamma_step

    headroom = max(params.z_max - keep * z, 0.0)
    p_fill = (headroom / beta) * (1.0 + r * headroom / (beta * v2))

    c = 2.0 * r * keep * z / (beta * v2)
    if c < 1.0:
        p_drain = -(keep * z / beta) * (1.0 - c / 2.0)
    else:
        p_drain = -v2 / (4.0 * r)
    return p_fill, p_drain


def state_bounds(state: EssState, params: EssParams) -> ActionBounds:
    """
    Capacity-limited envelope at the given energy, intersected with rate_bounds

    The capacity bounds follow the published efficiency roles and are also
    intersected with the exact inverse of the energy update, so a bounded action
    never overfills or overdrains when eta_c differs from eta_d.
    """
    p_fill, p_drain = _capacity_terminal_powers(state.z, params)
    rates = rate_bounds(params)

    d_hi = min(rates.d_hi, p_fill / params.eta_d, p_fill / params.eta_c)
    d_lo = max(rates.d_lo, params.eta_c * p_drain, params.eta_d * p_drain)
    return ActionBounds(d_lo=min(d_lo, 0.0), d_hi=max(d_hi, 0.0))


def snap_inward(value: float, q: float) -> float:
    """Round a bound toward zero onto the q grid"""
    units = value / q
    if value >= 0:
        return math.floor(units + 1e-9) * q
    return math.ceil(units - 1e-9) * q


def grid_envelope(
    state: EssState,
    params: EssParams,
    q: float,
    d_floor: Optional[float] = None,
    d_ceiling: Optional[float] = None
) -> ActionBounds:
    """State bounds snapped inward to the q grid and limited to the action range"""
    bounds = state_bounds(state, params)
    d_lo, d_hi = bounds.d_lo, bounds.d_hi
    if d_floor is not None:
        d_lo = max(d_lo, d_floor)
    if d_ceiling is not None:
        d_hi = min(d_hi, d_ceiling)
    return ActionBounds(d_lo=min(snap_inward(d_lo, q), 0.0), d_hi=max(snap_inward(d_hi, q), 0.0))


def feasible_actions(state: EssState, params: EssParams, action_grid: Sequence[float]) -> Tuple[float, ...]:
    """Grid actions inside state_bounds; idle is always among them"""
    grid = tuple(float(d) for d in action_grid)
    if 0.0 not in grid:
        raise ValueError("Action grid must contain idle (0 W)")
    bounds = state_bounds(state, params)
    return tuple(d for d in grid if bounds.contains(d))


# ============================================================================
# Model comparisons
# ============================================================================

def compare_configurations(
    demand_trace: Sequence[float],
    params: EssParams,
    policy: Sequence[float],
    z0: Optional[float] = None
) -> ConfigurationLosses:
    """
    Accumulate losses of one control sequence under parallel and series wiring

    In parallel wiring only the battery power d = y - x crosses the converters.
    In series wiring the whole grid draw y is converted into the battery and the
    demand x is converted back out, so the net terminal power is
    y*eta_c - x/eta_d.

    Args:
        demand_trace: House power per slot in W, non-negative
        params: Battery parameters
        policy: Battery power d per slot in W
        z0: Initial stored energy in Wh (half capacity by default)

    Returns:
        ConfigurationLosses with both totals in Wh

    Raises:
        EssContractError: If the sequence is infeasible at some step in either wiring
    """
    if len(demand_trace) != len(policy):
        raise ValueError(f"Demand has {len(demand_trace)} slots but policy has {len(policy)}")

    z_parallel = z_series = params.z_max / 2.0 if z0 is None else float(z0)
    loss_parallel = loss_series = 0.0

    for k, (x, d) in enumerate(zip(demand_trace, policy)):
        if x < 0:
            raise ValueError(f"step {k}: negative demand {x} W")
        y = x + d

        try:
            z_next = step(EssState(z_parallel), d, params).z
        except EssContractError as e:
            raise EssContractError(f"step {k} (parallel): {e}") from e
        loss_parallel += z_parallel + d * params.dt - z_next
        z_parallel = z_next

        if y < 0:
            raise EssContractError(f"step {k} (series): grid draw {y} W would feed the grid")
        p_net = y * params.eta_c - x / params.eta_d
        try:
            z_next = _absorb_residue(_advance(z_series, p_net, params), params)
        except EssContractError as e:
            raise EssContractError(f"step {k} (series): {e}") from e
        loss_series += z_series + d * params.dt - z_next
        z_series = z_next

    return ConfigurationLosses(loss_parallel=loss_parallel, loss_series=loss_series)


def model_divergence(z: float, action_grid: Sequence[float], params: EssParams) -> List[DivergenceRow]:
    """
    Percent SOC change per action under the three-circuit and ideal models

    Both updates are evaluated directly. Current limits do not apply here, only
    the physical capacity and source limits.
    """
    _check_state(EssState(z), params)
    rows = []
    for d in action_grid:
        d = float(d)
        z_three = _absorb_residue(_advance(z, converter_power(d, params), params), params)
        z_ideal = z + d * params.dt
        rows.append(DivergenceRow(
            d=d,
            soc_change_three_circuit=100.0 * (z_three - z) / params.z_max,
            soc_change_ideal=100.0 * (z_ideal - z) / params.z_max,
        ))
    return rows
