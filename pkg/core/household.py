"""
Household model for Quiet Meter
Appliance hypothesis chain, quantized observation model, estimation and sampling
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Any, List, Optional, Sequence, Tuple, Union
import hashlib
import json
import logging
import math

import numpy as np
import yaml

logger = logging.getLogger(__name__)

DEFAULT_HYPOTHESES = ("OFF", "ON")

# Column masses inside this band are rescaled to one; anything else is rejected
RENORMALIZE_MIN_MASS = 0.4
RENORMALIZE_MAX_MASS = 1.05

STOCHASTIC_TOLERANCE = 1e-9


def default_hypothesis_names(count: int) -> Tuple[str, ...]:
    if count == len(DEFAULT_HYPOTHESES):
        return DEFAULT_HYPOTHESES
    return tuple(f"H{i}" for i in range(count))


def power_grid(q: float, x_max: float) -> np.ndarray:
    """Observation grid {0, q, ..., floor(x_max/q)*q}"""
    if q <= 0 or x_max < 0:
        raise ValueError(f"Invalid power grid: q={q}, x_max={x_max}")
    return np.arange(math.floor(x_max / q + 1e-9) + 1, dtype=float) * q


def quantize_power(w: float, q: float, x_max: float) -> float:
    """
    Nearest multiple of q, ties rounded up, capped at the grid maximum

    Raises:
        ValueError: If w is negative
    """
    if w < 0:
        raise ValueError(f"Power must be non-negative, got {w}")
    top = math.floor(x_max / q + 1e-9)
    return min(math.floor(w / q + 0.5), top) * q


def grid_index(value: float, q: float) -> int:
    """Index of a grid value, rejecting off-grid inputs"""
    units = value / q
    index = int(round(units))
    if abs(units - index) > 1e-9:
        raise ValueError(f"{value} W is not on the {q} W grid")
    return index


def _column_stochastic(
    matrix: np.ndarray,
    name: str,
    renormalize: bool
) -> np.ndarray:
    if np.any(matrix < 0):
        raise ValueError(f"{name} has negative entries")
    masses = matrix.sum(axis=0)
    for j, mass in enumerate(masses):
        if abs(mass - 1.0) <= STOCHASTIC_TOLERANCE:
            continue
        if renormalize and RENORMALIZE_MIN_MASS <= mass <= RENORMALIZE_MAX_MASS:
            logger.warning(f"Renormalizing {name} column {j} with mass {mass:.4f}")
            continue
        raise ValueError(f"{name} column {j} sums to {mass:.6f}")
    return matrix / masses if renormalize else matrix


@dataclass(frozen=True, eq=False)
class HouseholdModel:
    """
    Hidden appliance chain observed through quantized power readings

    Transition entries are P(h | g) stored at [h, g]; emission entries are
    P(x | h) stored at [x_index, h].
    """
    prior: np.ndarray
    transition: np.ndarray
    emission: np.ndarray
    q: float
    x_max: float
    hypothesis_names: Tuple[str, ...] = ()

    def __post_init__(self):
        prior = np.array(self.prior, dtype=float)
        transition = np.array(self.transition, dtype=float)
        emission = np.array(self.emission, dtype=float)
        count = prior.shape[0]

        if transition.shape != (count, count):
            raise ValueError(f"Transition shape {transition.shape} does not match {count} hypotheses")
        grid_size = power_grid(self.q, self.x_max).shape[0]
        if emission.shape != (grid_size, count):
            raise ValueError(f"Emission shape {emission.shape} does not match ({grid_size}, {count})")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > STOCHASTIC_TOLERANCE:
            raise ValueError(f"Prior is not a probability vector: {prior}")
        _column_stochastic(transition, "transition", renormalize=False)
        _column_stochastic(emission, "emission", renormalize=False)

        names = tuple(self.hypothesis_names) or default_hypothesis_names(count)
        if len(names) != count:
            raise ValueError(f"Expected {count} hypothesis names, got {names}")

        for array in (prior, transition, emission):
            array.setflags(write=False)
        object.__setattr__(self, 'prior', prior)
        object.__setattr__(self, 'transition', transition)
        object.__setattr__(self, 'emission', emission)
        object.__setattr__(self, 'hypothesis_names', names)

    @classmethod
    def from_tables(
        cls,
        prior: Sequence[float],
        transition: Sequence[Sequence[float]],
        emission: Sequence[Sequence[float]],
        q: float,
        x_max: float,
        hypothesis_names: Sequence[str] = (),
        renormalize: bool = True
    ) -> "HouseholdModel":
        """Build a model from printed tables, rescaling near-stochastic columns"""
        prior_arr = np.array(prior, dtype=float).reshape(-1, 1)
        prior_arr = _column_stochastic(prior_arr, "prior", renormalize)[:, 0]
        return cls(
            prior=prior_arr,
            transition=_column_stochastic(np.array(transition, dtype=float), "transition", renormalize),
            emission=_column_stochastic(np.array(emission, dtype=float), "emission", renormalize),
            q=q,
            x_max=x_max,
            hypothesis_names=tuple(hypothesis_names),
        )

    @property
    def hypothesis_count(self) -> int:
        return self.prior.shape[0]

    @property
    def power_grid(self) -> np.ndarray:
        return power_grid(self.q, self.x_max)

    @property
    def observation_count(self) -> int:
        return self.emission.shape[0]

    def observation_index(self, x: float) -> int:
        index = grid_index(x, self.q)
        if not 0 <= index < self.observation_count:
            raise ValueError(f"{x} W is outside the observation grid")
        return index

    def stationary(self) -> np.ndarray:
        """Stationary distribution of the hypothesis chain"""
        values, vectors = np.linalg.eig(self.transition)
        vector = np.real(vectors[:, np.argmin(np.abs(values - 1.0))])
        return vector / vector.sum()

    def to_dict(self) -> Dict[str, Any]:
        return {
            'hypothesis_names': list(self.hypothesis_names),
            'q': float(self.q),
            'x_max': float(self.x_max),
            'prior': self.prior.tolist(),
            'transition': self.transition.tolist(),
            'emission': self.emission.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HouseholdModel":
        return cls(
            prior=data['prior'],
            transition=data['transition'],
            emission=data['emission'],
            q=float(data['q']),
            x_max=float(data['x_max']),
            hypothesis_names=tuple(data.get('hypothesis_names', ())),
        )

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def save_model(model: HouseholdModel, path: Union[str, Path]) -> Path:
    """Write a model as a YAML document"""
    model_path = Path(path)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    with open(model_path, 'w') as f:
        yaml.safe_dump(model.to_dict(), f, sort_keys=False)
    logger.info(f"Saved household model to {model_path}")
    return model_path


def load_model(path: Union[str, Path]) -> HouseholdModel:
    model_path = Path(path)
    if not model_path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    with open(model_path, 'r') as f:
        data = yaml.safe_load(f)
    return HouseholdModel.from_dict(data)


@dataclass(frozen=True, eq=False)
class Trace:
    """Per-slot household power with optional ground-truth labels"""
    slots: np.ndarray
    x_watts: np.ndarray
    h_labels: Optional[np.ndarray] = None
    hypothesis_names: Tuple[str, ...] = DEFAULT_HYPOTHESES

    def __post_init__(self):
        slots = np.asarray(self.slots, dtype=int)
        watts = np.asarray(self.x_watts, dtype=float)
        if slots.shape != watts.shape:
            raise ValueError(f"Slots {slots.shape} and watts {watts.shape} disagree")
        if np.any(watts < 0):
            raise ValueError("Trace powers must be non-negative")
        object.__setattr__(self, 'slots', slots)
        object.__setattr__(self, 'x_watts', watts)
        if self.h_labels is not None:
            labels = np.asarray(self.h_labels, dtype=int)
            if labels.shape != watts.shape:
                raise ValueError(f"Labels {labels.shape} and watts {watts.shape} disagree")
            object.__setattr__(self, 'h_labels', labels)

    def __len__(self) -> int:
        return self.x_watts.shape[0]

    @property
    def labeled(self) -> bool:
        return self.h_labels is not None


def slot_runs(slots: np.ndarray) -> List[slice]:
    """Runs of consecutive slot indices"""
    breaks = np.flatnonzero(np.diff(slots) != 1) + 1
    bounds = [0, *breaks.tolist(), slots.shape[0]]
    return [slice(start, stop) for start, stop in zip(bounds[:-1], bounds[1:])]


def estimate_model(
    labeled: Trace,
    q: float,
    x_max: float,
    hypothesis_count: Optional[int] = None,
    hypothesis_names: Sequence[str] = ()
) -> HouseholdModel:
    """
    Estimate prior, transition and emission from labeled data

    Counts start from a Laplace pseudocount of one. Bigrams are only formed
    between consecutive slot indices, so concatenated days do not chain.

    Args:
        labeled: Trace carrying h_labels
        q: Power resolution in W
        x_max: Maximum appliance demand in W
        hypothesis_count: Size of the hypothesis alphabet (inferred when omitted)
        hypothesis_names: Optional names for the alphabet

    Returns:
        HouseholdModel satisfying all stochasticity invariants

    Raises:
        ValueError: If the trace is too short, unlabeled, or uses labels
            beyond hypothesis_count
    """
    if len(labeled) < 2:
        raise ValueError(f"Estimation needs at least 2 slots, got {len(labeled)}")
    if not labeled.labeled:
        raise ValueError("Estimation needs a labeled trace")

    labels = labeled.h_labels
    if np.any(labels < 0):
        raise ValueError("Labels must be non-negative hypothesis indices")
    count = hypothesis_count or max(int(labels.max()) + 1, len(DEFAULT_HYPOTHESES))
    if labels.max() >= count:
        raise ValueError(f"Label {int(labels.max())} exceeds hypothesis count {count}")

    grid_size = power_grid(q, x_max).shape[0]
    x_index = np.array([grid_index(quantize_power(w, q, x_max), q) for w in labeled.x_watts])

    transition_counts = np.ones((count, count))
    for segment in slot_runs(labeled.slots):
        seq = labels[segment]
        np.add.at(transition_counts, (seq[1:], seq[:-1]), 1.0)

    emission_counts = np.ones((grid_size, count))
    np.add.at(emission_counts, (x_index, labels), 1.0)

    occupancy = np.bincount(labels, minlength=count) + 1.0

    names = tuple(hypothesis_names) or (
        labeled.hypothesis_names if len(labeled.hypothesis_names) == count else ()
    )
    logger.info(f"Estimated household model from {len(labeled)} slots, {count} hypotheses")

    return HouseholdModel(
        prior=occupancy / occupancy.sum(),
        transition=transition_counts / transition_counts.sum(axis=0),
        emission=emission_counts / emission_counts.sum(axis=0),
        q=q,
        x_max=x_max,
        hypothesis_names=names,
    )


def sample_trace(
    model: HouseholdModel,
    n: int,
    seed: Union[int, Sequence[int], None],
    start_slot: int = 0
) -> Trace:
    """Forward-simulate n slots of the hypothesis chain and its readings"""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")

    rng = np.random.default_rng(seed)
    count = model.hypothesis_count
    grid = model.power_grid

    labels = np.empty(n, dtype=int)
    labels[0] = rng.choice(count, p=model.prior)
    for k in range(1, n):
        labels[k] = rng.choice(count, p=model.transition[:, labels[k - 1]])

    readings = np.array([rng.choice(grid.shape[0], p=model.emission[:, h]) for h in labels])

    return Trace(
        slots=np.arange(start_slot, start_slot + n),
        x_watts=grid[readings],
        h_labels=labels,
        hypothesis_names=model.hypothesis_names,
    )


def sample_days(model: HouseholdModel, days: int, slots_per_day: int, seed: int, stream: int = 0) -> List[Trace]:
    """Independent days, each seeded from (seed, stream, day)"""
    return [sample_trace(model, slots_per_day, [seed, stream, day]) for day in range(days)]


def concatenate_days(days: Sequence[Trace]) -> Trace:
    """Join days into one trace whose slot indices restart per day"""
    if not days:
        raise ValueError("No days to concatenate")
    labeled = all(day.labeled for day in days)
    return Trace(
        slots=np.concatenate([day.slots for day in days]),
        x_watts=np.concatenate([day.x_watts for day in days]),
        h_labels=np.concatenate([day.h_labels for day in days]) if labeled else None,
        hypothesis_names=days[0].hypothesis_names,
    )
