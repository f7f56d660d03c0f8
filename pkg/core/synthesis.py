"""
Offline policy synthesis for Quiet Meter
Backward recursion over the belief x energy lattice with a per-stage kernel search
"""

from dataclasses import dataclass
from itertools import product
from typing import Dict, List, NamedTuple, Optional, Tuple
import hashlib
import json
import logging
import math

import numpy as np

from core.ess import EssParams, EssState, ActionBounds, energy_loss, grid_envelope, rate_bounds, snap_inward, step
from core.household import HouseholdModel
from core.inference import (
    BeliefGrid,
    CostMatrix,
    belief_update,
    min_risk_stage,
    observation_joint,
    predict,
    project_belief,
)

logger = logging.getLogger(__name__)

# Spread is in squared output steps, loss in Wh
SECONDARY_TOLERANCE = 1e-9


class SynthesisError(RuntimeError):
    """Optimizer failure at one lattice point"""

    def __init__(self, message: str, stage: int, belief_index: int, energy_index: int):
        super().__init__(f"{message} (stage {stage}, belief index {belief_index}, energy index {energy_index})")
        self.stage = stage
        self.belief_index = belief_index
        self.energy_index = energy_index


@dataclass(frozen=True)
class OptimizerConfig:
    """Per-stage kernel search settings"""
    starts: int = 4
    iterations: int = 120
    step_size: float = 0.5
    seed: int = 0
    stochastic_search: bool = True
    max_deterministic_kernels: int = 100_000
    improvement_tolerance: float = 1e-9
    tie_tolerance: float = 1e-12


class Successor(NamedTuple):
    x: float
    y: float
    probability: float
    next_pi_index: int
    next_z_index: int


def energy_grid(e: float, z_max: float) -> np.ndarray:
    if e <= 0:
        raise ValueError(f"Energy resolution must be positive, got {e}")
    return np.arange(math.floor(z_max / e + 1e-9) + 1, dtype=float) * e


class StateSpace:
    """
    Finite lattice the recursion runs over, with its precomputed transitions

    Holds the belief lattice, the e-spaced energy grid, the q-spaced output grid
    from d_min up to x_top + d_max, the per-energy output envelope, and the
    clipped successor tables indexed [z, x, y].
    """

    def __init__(
        self,
        model: HouseholdModel,
        params: EssParams,
        e: float,
        belief_resolution: int,
        d_min: Optional[float] = None,
        d_max: Optional[float] = None
    ):
        self.model = model
        self.params = params
        self.q = model.q
        self.e = e
        self.belief_resolution = belief_resolution

        rates = rate_bounds(params)
        self.d_min = snap_inward(rates.d_lo, self.q) if d_min is None else float(d_min)
        self.d_max = snap_inward(rates.d_hi, self.q) if d_max is None else float(d_max)
        for name, bound in (("d_min", self.d_min), ("d_max", self.d_max)):
            if abs(bound / self.q - round(bound / self.q)) > 1e-9:
                raise ValueError(f"{name}={bound} is not a multiple of q={self.q}")
        if not self.d_min <= 0 <= self.d_max:
            raise ValueError(f"Action range [{self.d_min}, {self.d_max}] must contain idle")

        self.observation_grid = model.power_grid
        self.belief_grid = BeliefGrid(model.hypothesis_count, belief_resolution)
        self.energy_grid = energy_grid(e, params.z_max)

        x_top = self.observation_grid[-1]
        steps = int(round((x_top + self.d_max - self.d_min) / self.q))
        self.output_grid = self.d_min + np.arange(steps + 1, dtype=float) * self.q
        self.idle_output = np.array([self.output_index(x) for x in self.observation_grid])

        self.envelopes: List[ActionBounds] = [
            grid_envelope(EssState(z), params, self.q, self.d_min, self.d_max) for z in self.energy_grid
        ]
        lo = np.array([env.d_lo for env in self.envelopes])
        hi = np.array([env.d_hi for env in self.envelopes])
        slack = 1e-9 * self.q
        self.output_mask = (
            (self.output_grid[None, :] >= lo[:, None] - slack)
            & (self.output_grid[None, :] <= x_top + hi[:, None] + slack)
        )

        self.next_energy, self.effective_output = self._build_energy_tables()
        self.request_loss = self._build_request_loss()
        self.next_belief = self._build_belief_table()
        self._deterministic_kernels: Optional[np.ndarray] = None

        logger.info(f"State space {self.shape} with outputs {self.output_grid.tolist()}")

    def _build_energy_tables(self) -> Tuple[np.ndarray, np.ndarray]:
        shape = (len(self.energy_grid), len(self.observation_grid), len(self.output_grid))
        next_energy = np.empty(shape, dtype=int)
        effective = np.empty(shape, dtype=int)
        for zi, z in enumerate(self.energy_grid):
            env = self.envelopes[zi]
            state = EssState(z)
            cache: Dict[float, int] = {}
            for xi, x in enumerate(self.observation_grid):
                for yi, y in enumerate(self.output_grid):
                    d = min(max(y - x, env.d_lo), env.d_hi)
                    if d not in cache:
                        cache[d] = self.project_energy(step(state, d, self.params).z)
                    next_energy[zi, xi, yi] = cache[d]
                    effective[zi, xi, yi] = self.output_index(x + d)
        return next_energy, effective

    def _build_request_loss(self) -> np.ndarray:
        """
        Energy lost by each request at each reading, evaluated at half capacity

        Only the half-capacity envelope clips the request, so the table does
        not depend on how full the store is.
        """
        state = EssState(self.params.z_max / 2.0)
        env = grid_envelope(state, self.params, self.q, self.d_min, self.d_max)
        loss = np.empty((len(self.observation_grid), len(self.output_grid)))
        for xi, x in enumerate(self.observation_grid):
            for yi, y in enumerate(self.output_grid):
                loss[xi, yi] = energy_loss(state, min(max(y - x, env.d_lo), env.d_hi), self.params)
        return loss

    def _build_belief_table(self) -> np.ndarray:
        grid = self.belief_grid
        table = np.empty((len(grid), len(self.observation_grid)), dtype=int)
        for b in range(len(grid)):
            for xi, x in enumerate(self.observation_grid):
                table[b, xi] = project_belief(belief_update(grid.points[b], x, self.model), grid)
        return table

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return (len(self.belief_grid), len(self.energy_grid), len(self.observation_grid), len(self.output_grid))

    def cardinalities(self) -> Dict[str, int]:
        beliefs, energies, observations, outputs = self.shape
        return {
            'observations': observations,
            'outputs': outputs,
            'energy_levels': energies,
            'beliefs': beliefs,
            'hypotheses': self.model.hypothesis_count,
        }

    def output_index(self, y: float) -> int:
        index = int(round((y - self.d_min) / self.q))
        if not 0 <= index < len(self.output_grid) or abs(self.output_grid[index] - y) > 1e-9 * self.q:
            raise ValueError(f"{y} W is not on the output grid")
        return index

    def project_energy(self, z: float) -> int:
        index = math.floor(z / self.e + 0.5)
        return min(max(index, 0), len(self.energy_grid) - 1)

    def deterministic_kernels(self, limit: int) -> np.ndarray:
        """All maps x -> y index in lexicographic order"""
        count = len(self.output_grid) ** len(self.observation_grid)
        if count > limit:
            raise ValueError(f"{count} deterministic kernels exceed the limit of {limit}")
        if self._deterministic_kernels is None:
            self._deterministic_kernels = np.array(
                list(product(range(len(self.output_grid)), repeat=len(self.observation_grid))),
                dtype=int,
            ).reshape(count, len(self.observation_grid))
        return self._deterministic_kernels

    def digest(self) -> str:
        payload = json.dumps({
            'model': self.model.digest(),
            'ess': self.params.digest(),
            'e': self.e,
            'belief_resolution': self.belief_resolution,
            'd_min': self.d_min,
            'd_max': self.d_max,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()

    def stage_objective(
        self,
        belief_index: int,
        costs: CostMatrix,
        next_values: Optional[np.ndarray] = None
    ) -> "StageObjective":
        """Objective of every energy point at one belief point"""
        pi = self.belief_grid.points[belief_index]
        risk_weights = observation_joint(pi, self.model) @ costs.c.T
        conditioning = self.model.emission @ pi

        reading = self.model.emission @ predict(pi, self.model)
        expected_loss = reading @ self.request_loss

        continuation = np.zeros((len(self.energy_grid), len(self.output_grid)))
        if next_values is not None:
            beliefs = self.next_belief[belief_index]
            for xi, weight in enumerate(reading):
                if weight > 0:
                    continuation += weight * next_values[beliefs[xi]][self.next_energy[:, xi, :]]

        return StageObjective(
            risk_weights=risk_weights,
            conditioning=conditioning,
            continuation=continuation,
            mask=self.output_mask,
            idle_output=self.idle_output,
            expected_loss=expected_loss,
        )


@dataclass
class StageObjective:
    """
    Stage payoff R* + continuation for a batch of energy points

    risk_weights[x, i] is the expected cost of deciding i contributed by reading
    x; conditioning is the belief-induced distribution of the kernel's reading;
    continuation[z, y] is the expected next-stage value after emitting y;
    expected_loss[y] is the expected energy lost this slot when y is requested,
    independent of the stored energy.
    """
    risk_weights: np.ndarray
    conditioning: np.ndarray
    continuation: np.ndarray
    mask: np.ndarray
    idle_output: np.ndarray
    expected_loss: np.ndarray

    def evaluate(self, mu: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Payoff and stage risk of kernels shaped (..., Z, X, Y)"""
        expected = np.einsum('...zxy,xk->...zyk', mu, self.risk_weights)
        risk = expected.min(axis=-1).sum(axis=-1)
        future = np.einsum('...zxy,x,zy->...z', mu, self.conditioning, self.continuation)
        return risk + future, risk

    def supergradient(self, mu: np.ndarray) -> np.ndarray:
        expected = np.einsum('...zxy,xk->...zyk', mu, self.risk_weights)
        responses = np.argmin(expected, axis=-1)
        risk_part = np.moveaxis(self.risk_weights[:, responses], 0, -2)
        future_part = self.conditioning[:, None] * self.continuation[:, None, :]
        return risk_part + future_part


class StageSolution(NamedTuple):
    kernels: np.ndarray
    values: np.ndarray
    risks: np.ndarray
    stochastic_wins: int


def project_to_simplex(v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Euclidean projection of each last-axis row onto the simplex over its mask"""
    masked = np.where(mask, v, -np.inf)
    ordered = -np.sort(-masked, axis=-1)
    ranks = np.arange(1, v.shape[-1] + 1)
    with np.errstate(invalid='ignore'):
        cumulative = np.cumsum(ordered, axis=-1)
        active = np.isfinite(ordered) & (ordered - (cumulative - 1.0) / ranks > 0)
    last = active.shape[-1] - 1 - np.argmax(active[..., ::-1], axis=-1)
    theta = (np.take_along_axis(cumulative, last[..., None], axis=-1) - 1.0) / (last[..., None] + 1)
    projected = np.where(mask, np.maximum(v - theta, 0.0), 0.0)
    return projected / projected.sum(axis=-1, keepdims=True)


def _narrow(candidates: np.ndarray, key: np.ndarray, tolerance: float) -> np.ndarray:
    """Keep the candidates whose key is within tolerance of the smallest candidate key"""
    keyed = np.where(candidates, key, np.inf)
    return candidates & (keyed <= keyed.min(axis=1, keepdims=True) + tolerance)


def resolve_ties(
    objective: StageObjective,
    kernels: np.ndarray,
    values: np.ndarray,
    tie_tolerance: float
) -> np.ndarray:
    """
    Index of the chosen kernel per energy point among the value-equal optima

    Candidates within tie_tolerance of the best value are narrowed, in order,
    to the kernels whose requested output varies least with the conditioning
    reading, then to the least expected energy loss, then to the most idle rows;
    the lowest enumeration index wins what remains. None of these keys depends
    on the stored energy.
    """
    n_obs = kernels.shape[1]
    best = values.max(axis=1, keepdims=True)
    candidates = np.isfinite(values) & (values >= best - tie_tolerance)

    levels = kernels.astype(float)
    mean = levels @ objective.conditioning
    spread = ((levels - mean[:, None]) ** 2) @ objective.conditioning
    candidates = _narrow(candidates, spread[None, :], SECONDARY_TOLERANCE)

    loss = np.zeros(kernels.shape[0])
    for x in range(n_obs):
        loss += objective.conditioning[x] * objective.expected_loss[kernels[:, x]]
    candidates = _narrow(candidates, loss[None, :], SECONDARY_TOLERANCE)

    idle_count = (kernels == objective.idle_output[None, :]).sum(axis=1)
    return np.where(candidates, idle_count[None, :], -1).argmax(axis=1)


def _deterministic_search(
    objective: StageObjective,
    kernels: np.ndarray,
    tie_tolerance: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Best deterministic kernel per energy point"""
    n_kernels, n_obs = kernels.shape
    n_out = objective.mask.shape[1]

    expected = np.zeros((n_kernels, n_out, objective.risk_weights.shape[1]))
    rows = np.arange(n_kernels)
    for x in range(n_obs):
        expected[rows, kernels[:, x], :] += objective.risk_weights[x]
    risk = expected.min(axis=-1).sum(axis=-1)

    future = np.zeros((objective.continuation.shape[0], n_kernels))
    for x in range(n_obs):
        future += objective.conditioning[x] * objective.continuation[:, kernels[:, x]]

    feasible = objective.mask[:, kernels].all(axis=-1)
    values = np.where(feasible, risk[None, :] + future, -np.inf)

    return kernels[resolve_ties(objective, kernels, values, tie_tolerance)], values.max(axis=1)


def _one_hot(choice: np.ndarray, n_out: int) -> np.ndarray:
    return np.eye(n_out)[choice]


def optimize_stage(
    objective: StageObjective,
    config: OptimizerConfig,
    rng: Optional[np.random.Generator] = None,
    kernels: Optional[np.ndarray] = None
) -> StageSolution:
    """
    Maximize the stage objective over row-stochastic kernels in the envelope

    Runs exhaustive search over deterministic kernels, then multi-start
    projected supergradient ascent over the product of simplices, and keeps the
    ascent result only where it beats the deterministic optimum.

    Args:
        objective: Stage objective for a batch of energy points
        config: Search settings
        rng: Generator for random starts
        kernels: Deterministic kernel table (enumerated when omitted)

    Returns:
        StageSolution with kernels shaped (Z, X, Y)
    """
    n_obs = objective.risk_weights.shape[0]
    n_out = objective.mask.shape[1]
    if kernels is None:
        count = n_out ** n_obs
        if count > config.max_deterministic_kernels:
            raise ValueError(f"{count} deterministic kernels exceed the limit of {config.max_deterministic_kernels}")
        kernels = np.array(list(product(range(n_out), repeat=n_obs)), dtype=int).reshape(count, n_obs)

    choice, det_values = _deterministic_search(objective, kernels, config.tie_tolerance)
    best_mu = _one_hot(choice, n_out)
    values, risks = objective.evaluate(best_mu)
    wins = 0

    if config.stochastic_search and n_out > 1:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        mask = np.broadcast_to(objective.mask[:, None, :], best_mu.shape)

        starts = [best_mu, project_to_simplex(np.zeros_like(best_mu), mask)]
        for _ in range(max(config.starts - 2, 0)):
            draws = np.where(mask, rng.gamma(1.0, size=best_mu.shape), 0.0)
            starts.append(draws / draws.sum(axis=-1, keepdims=True))
        mu = np.stack(starts[:max(config.starts, 1)])

        run_best, _ = objective.evaluate(mu)
        run_mu = mu.copy()
        for t in range(config.iterations):
            rate = config.step_size / math.sqrt(t + 1.0)
            mu = project_to_simplex(mu + rate * objective.supergradient(mu), mask[None])
            current, _ = objective.evaluate(mu)
            better = current > run_best
            run_best = np.where(better, current, run_best)
            run_mu[better] = mu[better]

        winner = run_best.argmax(axis=0)
        points = np.arange(run_mu.shape[1])
        search_mu = run_mu[winner, points]
        search_values = run_best[winner, points]

        improved = search_values > det_values + config.improvement_tolerance
        wins = int(improved.sum())
        if wins:
            best_mu = np.where(improved[:, None, None], search_mu, best_mu)
            values, risks = objective.evaluate(best_mu)
        logger.debug(f"Stochastic search beat the deterministic baseline at {wins}/{len(points)} points")

    return StageSolution(kernels=best_mu, values=values, risks=risks, stochastic_wins=wins)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """
    Per-stage control kernels over the state lattice

    kernels[k, b, z, x, y] is the probability of emitting output y at stage k+1
    from belief point b and energy point z after reading x; stage_risk holds the
    adversary's minimum risk under each stored kernel.
    """
    kernels: np.ndarray
    stage_risk: np.ndarray
    output_grid: np.ndarray
    q: float
    e: float
    belief_resolution: int
    hypothesis_count: int
    d_min: float
    d_max: float
    model_digest: str
    ess_digest: str

    @property
    def horizon(self) -> int:
        return self.kernels.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.kernels.shape)

    def kernel(self, stage: int, belief_index: int, energy_index: int) -> np.ndarray:
        return self.kernels[stage - 1, belief_index, energy_index]


@dataclass(frozen=True, eq=False)
class ValueTable:
    """values[k, b, z] is the optimal accumulated value from stage k+1"""
    values: np.ndarray

    @property
    def horizon(self) -> int:
        return self.values.shape[0]


def successor_distribution(
    pi_index: int,
    z_index: int,
    mu: np.ndarray,
    space: StateSpace
) -> List[Successor]:
    """
    Joint law of the next reading and the emitted output, with the lattice
    points they lead to

    The kernel's conditioning reading is drawn from the belief-induced
    distribution sum_g pi(g) P(x'|g). Outputs whose battery power falls outside
    the envelope are moved to the nearest feasible output.
    """
    model = space.model
    pi = space.belief_grid.points[pi_index]
    z = space.energy_grid[z_index]
    kernel = np.asarray(mu, dtype=float)

    reading = model.emission @ predict(pi, model)
    emitted = (model.emission @ pi) @ kernel
    env = space.envelopes[z_index]
    state = EssState(z)

    merged: Dict[Tuple[int, int], List] = {}
    for xi, x in enumerate(space.observation_grid):
        if reading[xi] <= 0:
            continue
        next_pi = project_belief(belief_update(pi, x, model), space.belief_grid)
        for yi, y in enumerate(space.output_grid):
            if emitted[yi] <= 0:
                continue
            d = min(max(y - x, env.d_lo), env.d_hi)
            key = (xi, space.output_index(x + d))
            if key not in merged:
                next_z = space.project_energy(step(state, d, space.params).z)
                merged[key] = [0.0, next_pi, next_z]
            merged[key][0] += reading[xi] * emitted[yi]

    return [
        Successor(
            x=float(space.observation_grid[xi]),
            y=float(space.output_grid[yi]),
            probability=mass,
            next_pi_index=next_pi,
            next_z_index=next_z,
        )
        for (xi, yi), (mass, next_pi, next_z) in sorted(merged.items())
    ]


def backward_recursion(
    space: StateSpace,
    costs: CostMatrix,
    horizon: int,
    config: OptimizerConfig = OptimizerConfig()
) -> Tuple[PolicyTable, ValueTable]:
    """
    Solve the finite-horizon recursion from the last stage back to the first

    The last stage is initialized with the best single-stage risk; each earlier
    stage adds the expected value of its successors.

    Raises:
        SynthesisError: If the objective is not finite at some lattice point
    """
    if horizon < 1:
        raise ValueError(f"Horizon must be at least 1, got {horizon}")
    if costs.size != space.model.hypothesis_count:
        raise ValueError(f"Cost matrix size {costs.size} does not match {space.model.hypothesis_count} hypotheses")

    n_beliefs, n_energy, n_obs, n_out = space.shape
    kernels = np.zeros((horizon, n_beliefs, n_energy, n_obs, n_out))
    values = np.zeros((horizon, n_beliefs, n_energy))
    risks = np.zeros((horizon, n_beliefs, n_energy))
    deterministic = space.deterministic_kernels(config.max_deterministic_kernels)

    logger.info(f"Synthesizing {horizon} stages over lattice {space.shape}")

    for k in reversed(range(horizon)):
        next_values = values[k + 1] if k + 1 < horizon else None
        wins = 0
        for b in range(n_beliefs):
            objective = space.stage_objective(b, costs, next_values)
            rng = np.random.default_rng([config.seed, k, b])
            solution = optimize_stage(objective, config, rng, deterministic)

            bad = np.flatnonzero(~np.isfinite(solution.values))
            if bad.size:
                raise SynthesisError("Objective is not finite", k + 1, b, int(bad[0]))

            kernels[k, b] = solution.kernels
            values[k, b] = solution.values
            risks[k, b] = solution.risks
            wins += solution.stochastic_wins

        logger.info(
            f"Stage {k + 1}/{horizon}: mean value {values[k].mean():.6f}, "
            f"stochastic kernels at {wins} points"
        )

    policy = PolicyTable(
        kernels=kernels,
        stage_risk=risks,
        output_grid=space.output_grid.copy(),
        q=space.q,
        e=space.e,
        belief_resolution=space.belief_resolution,
        hypothesis_count=space.model.hypothesis_count,
        d_min=space.d_min,
        d_max=space.d_max,
        model_digest=space.model.digest(),
        ess_digest=space.params.digest(),
    )
    return policy, ValueTable(values=values)


def brute_force_policy_search(
    space: StateSpace,
    costs: CostMatrix,
    horizon: int,
    max_size: int = 10 ** 7
) -> ValueTable:
    """
    Exhaustive expectimax over deterministic kernels, for small instances only

    Walks the full decision tree from every lattice point and stage without
    sharing values between branches.

    Raises:
        ValueError: If kernels^horizon * lattice size exceeds max_size
    """
    n_beliefs, n_energy, n_obs, n_out = space.shape
    all_kernels = list(product(range(n_out), repeat=n_obs))
    size = len(all_kernels) ** horizon * n_beliefs * n_energy
    if size > max_size:
        raise ValueError(
            f"Instance too large for exhaustive search: {len(all_kernels)} kernels, "
            f"horizon {horizon}, {n_beliefs * n_energy} lattice points -> {size} > {max_size}"
        )

    feasible = {
        zi: [np.eye(n_out)[list(choice)] for choice in all_kernels if all(space.output_mask[zi, y] for y in choice)]
        for zi in range(n_energy)
    }
    model = space.model
    points = space.belief_grid.points

    def best_value(stage: int, b: int, zi: int) -> float:
        best = -math.inf
        for mu in feasible[zi]:
            value = min_risk_stage(points[b], mu, model, costs).value
            if stage + 1 < horizon:
                for succ in successor_distribution(b, zi, mu, space):
                    value += succ.probability * best_value(stage + 1, succ.next_pi_index, succ.next_z_index)
            best = max(best, value)
        return best

    values = np.zeros((horizon, n_beliefs, n_energy))
    for k in range(horizon):
        for b in range(n_beliefs):
            for zi in range(n_energy):
                values[k, b, zi] = best_value(k, b, zi)
    return ValueTable(values=values)
