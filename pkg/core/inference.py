"""
Belief tracking and Bayesian risk for Quiet Meter
Hidden-chain filter, belief-simplex lattice, adversary risk and the AMBR metric
"""

from dataclasses import dataclass
from itertools import product
from typing import NamedTuple, Optional, Sequence, Union
import logging
import math

import numpy as np

from core.household import HouseholdModel

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-9
TIE_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class Belief:
    """Posterior over hypotheses; predicted_only marks a zero-likelihood update"""
    probs: np.ndarray
    predicted_only: bool = False

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 1 or np.any(probs < -PROBABILITY_TOLERANCE):
            raise ValueError(f"Belief must be a non-negative vector: {probs}")
        if abs(probs.sum() - 1.0) > PROBABILITY_TOLERANCE:
            raise ValueError(f"Belief sums to {probs.sum()}")
        probs = np.clip(probs, 0.0, None)
        probs.setflags(write=False)
        object.__setattr__(self, 'probs', probs)

    def __len__(self) -> int:
        return self.probs.shape[0]


BeliefLike = Union[Belief, np.ndarray, Sequence[float]]


def _probs(pi: BeliefLike) -> np.ndarray:
    return pi.probs if isinstance(pi, Belief) else Belief(pi).probs


def simplex_grid_size(hypothesis_count: int, resolution: int) -> int:
    """Number of lattice points with step 1/(resolution-1) on the simplex"""
    return math.comb(resolution - 1 + hypothesis_count - 1, hypothesis_count - 1)


class BeliefGrid:
    """Uniform lattice on the belief simplex, points in lexicographic order"""

    def __init__(self, hypothesis_count: int, resolution: int):
        if hypothesis_count < 1:
            raise ValueError(f"Need at least one hypothesis, got {hypothesis_count}")
        if resolution < 2:
            raise ValueError(f"Belief resolution must be at least 2, got {resolution}")

        self.hypothesis_count = hypothesis_count
        self.resolution = resolution
        divisions = resolution - 1

        counts = [
            combo for combo in product(range(divisions + 1), repeat=hypothesis_count)
            if sum(combo) == divisions
        ]
        self.points = np.array(counts, dtype=float) / divisions
        self.points.setflags(write=False)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def size(self) -> int:
        return len(self)

    @property
    def step(self) -> float:
        return 1.0 / (self.resolution - 1)

    def belief(self, index: int) -> Belief:
        return Belief(self.points[index])


class CostMatrix:
    """Decision costs; c[i, j] is the cost of deciding i when j is true"""

    def __init__(self, c: Union[np.ndarray, Sequence[Sequence[float]]]):
        matrix = np.array(c, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"Cost matrix must be square, got shape {matrix.shape}")
        if np.any(matrix < 0):
            raise ValueError("Cost matrix entries must be non-negative")
        matrix.setflags(write=False)
        self.c = matrix

    @classmethod
    def zero_one(cls, hypothesis_count: int) -> "CostMatrix":
        return cls(1.0 - np.eye(hypothesis_count))

    @property
    def size(self) -> int:
        return self.c.shape[0]

    @property
    def max_entry(self) -> float:
        return float(self.c.max()) if self.c.size else 0.0

    def scaled(self, factor: float) -> "CostMatrix":
        return CostMatrix(self.c * factor)


class StageRisk(NamedTuple):
    value: float
    best_response: np.ndarray


# ============================================================================
# Filtering
# ============================================================================

def predict(pi: BeliefLike, model: HouseholdModel) -> np.ndarray:
    """One-step prediction sum_g P(h|g) pi(g)"""
    return model.transition @ _probs(pi)


def belief_update(pi: BeliefLike, x: float, model: HouseholdModel) -> Belief:
    """
    Predict with the transition matrix, then weight by the emission of x

    A reading impossible under every hypothesis returns the prediction alone,
    flagged predicted_only.
    """
    predicted = predict(pi, model)
    likelihood = model.emission[model.observation_index(x)]
    posterior = likelihood * predicted
    normalizer = posterior.sum()

    if normalizer <= 0.0:
        logger.debug(f"Observation {x} W has zero likelihood; keeping prediction")
        return Belief(predicted / predicted.sum(), predicted_only=True)
    return Belief(posterior / normalizer)


def project_belief(pi: BeliefLike, grid: BeliefGrid) -> int:
    """Nearest lattice point in L1, ties toward the lexicographically smallest"""
    distances = np.abs(grid.points - _probs(pi)).sum(axis=1)
    return int(np.flatnonzero(distances <= distances.min() + TIE_TOLERANCE)[0])


# ============================================================================
# Risk
# ============================================================================

def observation_joint(pi: BeliefLike, model: HouseholdModel) -> np.ndarray:
    """
    Weights B[x, h] = sum_g P(x|g) P(h|g) pi(g)

    x is the reading conditioning the control kernel, h the hypothesis the
    adversary is after.
    """
    return (model.emission * _probs(pi)) @ model.transition.T


def bayesian_risk(
    decision_rule: Sequence[int],
    joint: np.ndarray,
    costs: CostMatrix
) -> float:
    """
    Expected decision cost of a rule y -> decided hypothesis

    Args:
        decision_rule: Decided hypothesis index for each y
        joint: Table P(y, h) of shape (|Y|, |H|)
        costs: Cost matrix

    Raises:
        ValueError: If the joint table does not sum to one
    """
    table = np.asarray(joint, dtype=float)
    if abs(table.sum() - 1.0) > PROBABILITY_TOLERANCE or np.any(table < 0):
        raise ValueError(f"Joint table is not a distribution (mass {table.sum()})")
    rule = np.asarray(decision_rule, dtype=int)
    if rule.shape[0] != table.shape[0]:
        raise ValueError(f"Rule covers {rule.shape[0]} outputs, table has {table.shape[0]}")
    return float((costs.c[rule] * table).sum())


def _check_kernel(mu: np.ndarray, rows: int):
    if mu.ndim != 2 or mu.shape[0] != rows:
        raise ValueError(f"Kernel must have {rows} rows, got shape {mu.shape}")
    if np.any(mu < -PROBABILITY_TOLERANCE):
        raise ValueError("Kernel has negative entries")
    row_mass = mu.sum(axis=1)
    if np.any(np.abs(row_mass - 1.0) > PROBABILITY_TOLERANCE):
        raise ValueError(f"Kernel rows are not stochastic: {row_mass}")


def min_risk_stage(
    pi: BeliefLike,
    mu: np.ndarray,
    model: HouseholdModel,
    costs: CostMatrix,
    z_index: Optional[int] = None
) -> StageRisk:
    """
    Adversary's minimum risk against one control kernel

    Args:
        pi: Belief over the previous hypothesis
        mu: Kernel P(y | x) of shape (|X|, |Y|), or a stack (|Z|, |X|, |Y|)
            indexed by z_index
        model: Household model
        costs: Cost matrix
        z_index: Energy index when mu is stacked

    Returns:
        StageRisk with the risk value and the minimizing hypothesis per y
        (smallest index on ties)
    """
    kernel = np.asarray(mu, dtype=float)
    if kernel.ndim == 3:
        if z_index is None:
            raise ValueError("Stacked kernels need a z_index")
        kernel = kernel[z_index]
    _check_kernel(kernel, model.observation_count)

    joint = kernel.T @ observation_joint(pi, model)
    expected_cost = joint @ costs.c.T
    best = np.argmin(expected_cost, axis=1)
    return StageRisk(value=float(expected_cost.min(axis=1).sum()), best_response=best)


def passthrough_risk(pi: BeliefLike, model: HouseholdModel, costs: CostMatrix) -> float:
    """Minimum risk when the meter reports the current reading unmodified"""
    joint = model.emission * predict(pi, model)
    return float((joint @ costs.c.T).min(axis=1).sum())


def ambr(stage_values: Sequence[float]) -> float:
    """Accumulated minimum Bayesian risk over the given stages"""
    values = np.asarray(stage_values, dtype=float)
    if np.any(values < -TIE_TOLERANCE):
        raise ValueError("Stage risks must be non-negative")
    return float(values.sum())
