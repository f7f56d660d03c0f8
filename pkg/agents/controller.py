"""
Real-time controller for Quiet Meter
Runs a synthesized policy over a household trace, clipping each request to the
battery's feasible envelope and tracking belief and stored energy slot by slot
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import logging

import numpy as np
import pandas as pd

from agents.base_agent import MeterAgent
from core.ess import EssParams, EssState, energy_loss, grid_envelope, step
from core.household import HouseholdModel, Trace, quantize_power
from core.inference import Belief, BeliefGrid, BeliefLike, belief_update, project_belief
from core.synthesis import PolicyTable, energy_grid

logger = logging.getLogger(__name__)

CONTROL_MODES = ("modal", "sample")


class ControllerError(ValueError):
    """Policy cannot drive this trace: horizon overflow or digest mismatch"""


@dataclass(frozen=True)
class ControlRecord:
    """One slot of a controller run; z is the stored energy after the slot"""
    slot: int
    x: float
    y_star: float
    y: float
    d: float
    z: float
    belief: np.ndarray
    clipped: bool
    loss: float
    belief_index: int
    energy_index: int


@dataclass
class ControlLog:
    z0: float
    dt: float
    records: List[ControlRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def outputs(self) -> np.ndarray:
        return np.array([r.y for r in self.records])

    @property
    def demand(self) -> np.ndarray:
        return np.array([r.x for r in self.records])

    @property
    def final_z(self) -> float:
        return self.records[-1].z if self.records else self.z0

    def to_frame(self) -> pd.DataFrame:
        """Tabular view with one belief column per hypothesis"""
        rows = []
        for r in self.records:
            row = {
                "slot": r.slot,
                "x": r.x,
                "y_star": r.y_star,
                "y": r.y,
                "d": r.d,
                "z": r.z,
                "clipped": int(r.clipped),
                "loss": r.loss,
            }
            row.update({f"belief_{i}": float(p) for i, p in enumerate(r.belief)})
            rows.append(row)
        return pd.DataFrame(rows)

    def to_csv(self, path: Union[str, Path]) -> Path:
        csv_path = Path(path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(csv_path, index=False, float_format="%.10g")
        return csv_path


@dataclass(frozen=True)
class ControlSummary:
    total_loss: float
    clip_count: int
    soc_trajectory: np.ndarray
    final_z: float
    slots: int

    @property
    def clip_rate(self) -> float:
        return self.clip_count / self.slots if self.slots else 0.0


def clip_action(
    y_star: float,
    x: float,
    z: float,
    params: EssParams,
    q: float,
    d_floor: Optional[float] = None,
    d_ceiling: Optional[float] = None
) -> float:
    """
    Move a requested meter output into the battery's feasible envelope

    The envelope is the state bound at the continuous energy z, snapped toward
    zero onto the q grid and limited to [d_floor, d_ceiling].
    """
    env = grid_envelope(EssState(z), params, q, d_floor, d_ceiling)
    return x + min(max(y_star - x, env.d_lo), env.d_hi)


def _check_policy(policy: PolicyTable, model: HouseholdModel, params: EssParams, trace: Trace):
    if policy.model_digest != model.digest():
        raise ControllerError("Policy was synthesized for a different household model")
    if policy.ess_digest != params.digest():
        raise ControllerError("Policy was synthesized for a different battery")
    if len(trace) > policy.horizon:
        raise ControllerError(f"Trace of {len(trace)} slots exceeds the policy horizon {policy.horizon}")
    if abs(policy.q - model.q) > 1e-12:
        raise ControllerError(f"Policy resolution {policy.q} W differs from the model's {model.q} W")


def _select_output(row: np.ndarray, x_prev_index: int, policy: PolicyTable, mode: str, rng) -> int:
    if mode == "sample":
        probs = np.clip(row, 0.0, None)
        return int(rng.choice(row.shape[0], p=probs / probs.sum()))

    top = np.flatnonzero(row >= row.max() - 1e-12)
    idle = int(round((x_prev_index * policy.q - policy.d_min) / policy.q))
    return idle if idle in top else int(top[0])


def run_controller(
    policy: PolicyTable,
    trace: Trace,
    model: HouseholdModel,
    params: EssParams,
    z0: float,
    pi0: BeliefLike,
    mode: str = "modal",
    seed: Optional[int] = None
) -> ControlLog:
    """
    Drive the battery over one trace

    At slot k the stage-k kernel is read at the projected (belief, energy) point
    and conditioned on the previous quantized reading (0 W before the first
    slot). The chosen output is clipped against the current reading, then the
    belief is updated with that reading and the continuous stored energy is
    advanced by the resulting battery power.

    Args:
        policy: Synthesized policy table
        trace: Household demand, raw watts
        model: Household model the policy was synthesized for
        params: Battery the policy was synthesized for
        z0: Initial stored energy in Wh
        pi0: Initial belief
        mode: "modal" picks the most likely output, "sample" draws from the kernel
        seed: Seed for sample mode

    Returns:
        ControlLog with one record per slot

    Raises:
        ControllerError: On horizon overflow or a digest mismatch
        ValueError: On an unknown mode or z0 outside [0, z_max]
    """
    if mode not in CONTROL_MODES:
        raise ValueError(f"Unknown control mode {mode!r}, expected one of {CONTROL_MODES}")
    if not 0.0 <= z0 <= params.z_max:
        raise ValueError(f"z0={z0} Wh is outside [0, {params.z_max}]")
    _check_policy(policy, model, params, trace)

    grid = BeliefGrid(model.hypothesis_count, policy.belief_resolution)
    levels = energy_grid(policy.e, params.z_max)
    rng = np.random.default_rng(seed)
    output_grid = policy.output_grid

    belief = pi0 if isinstance(pi0, Belief) else Belief(pi0)
    z = float(z0)
    x_prev_index = 0
    log = ControlLog(z0=z, dt=params.dt)

    for k, (slot, watts) in enumerate(zip(trace.slots, trace.x_watts), start=1):
        x = quantize_power(float(watts), model.q, model.x_max)
        b = project_belief(belief, grid)
        zi = min(max(int(np.floor(z / policy.e + 0.5)), 0), len(levels) - 1)

        row = policy.kernel(k, b, zi)[x_prev_index]
        y_star = float(output_grid[_select_output(row, x_prev_index, policy, mode, rng)])
        y = clip_action(y_star, x, z, params, policy.q, policy.d_min, policy.d_max)
        d = y - x

        state = EssState(z)
        z_next = step(state, d, params).z
        loss = energy_loss(state, d, params)
        belief = belief_update(belief, x, model)

        log.records.append(ControlRecord(
            slot=int(slot),
            x=x,
            y_star=y_star,
            y=y,
            d=d,
            z=z_next,
            belief=belief.probs,
            clipped=abs(y - y_star) > 1e-9,
            loss=loss,
            belief_index=b,
            energy_index=zi,
        ))
        z = z_next
        x_prev_index = model.observation_index(x)

    logger.debug(f"Controller ran {len(log)} slots from z0={z0:.3f} Wh to z={z:.3f} Wh")
    return log


def summarize(log: ControlLog, params: Optional[EssParams] = None) -> ControlSummary:
    """Aggregate a control log; SOC fractions need the battery capacity"""
    if not log.records:
        raise ValueError("Cannot summarize an empty control log")
    energies = np.array([log.z0] + [r.z for r in log.records])
    trajectory = energies / params.z_max if params is not None else energies
    return ControlSummary(
        total_loss=float(sum(r.loss for r in log.records)),
        clip_count=sum(1 for r in log.records if r.clipped),
        soc_trajectory=trajectory,
        final_z=log.final_z,
        slots=len(log),
    )


def realized_ambr(log: ControlLog, policy: PolicyTable) -> float:
    """Sum of the stored stage risk along the lattice points the run visited"""
    return float(sum(
        policy.stage_risk[k, r.belief_index, r.energy_index] for k, r in enumerate(log.records)
    ))


class EmuAgent(MeterAgent):
    """Battery controller bound to one policy, model and battery"""

    def __init__(
        self,
        policy: PolicyTable,
        model: HouseholdModel,
        params: EssParams,
        mode: str = "modal",
        seed: Optional[int] = None,
        agent_id: str = "emu"
    ):
        super().__init__(agent_id=agent_id, role="controller")
        self.policy = policy
        self.model = model
        self.params = params
        self.mode = mode
        self.seed = seed

    def describe(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "horizon": self.policy.horizon,
            "policy_shape": list(self.policy.shape),
        }

    def execute(self, trace: Trace, z0: float, pi0: Optional[BeliefLike] = None, day: int = 0) -> ControlLog:
        """Run one trace; the default initial belief is the model prior"""
        seed = None if self.seed is None else [self.seed, day]
        log = run_controller(
            self.policy,
            trace,
            self.model,
            self.params,
            z0,
            self.model.prior if pi0 is None else pi0,
            mode=self.mode,
            seed=seed,
        )
        summary = summarize(log, self.params)
        self.remember("run", {
            "day": day,
            "z0": z0,
            "total_loss": summary.total_loss,
            "clip_count": summary.clip_count,
            "final_z": summary.final_z,
        })
        return log
