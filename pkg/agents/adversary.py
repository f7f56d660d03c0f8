"""
Load-monitoring adversary for Quiet Meter
Edge-event detection on meter traces, appliance signatures learned from labeled
data, nearest-signature matching and onset-level F-score
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence
import logging

import numpy as np

from agents.base_agent import MeterAgent
from core.household import Trace, slot_runs

logger = logging.getLogger(__name__)

ON = "on"
OFF = "off"


@dataclass(frozen=True)
class EdgeEvent:
    slot: int
    delta: float


@dataclass(frozen=True)
class ApplianceSignature:
    """Mean switching edges of one appliance; on_delta > 0 > off_delta"""
    index: int
    name: str
    on_delta: float
    off_delta: float
    tolerance: float

    def __post_init__(self):
        if not self.on_delta > 0 > self.off_delta:
            raise ValueError(f"Signature {self.name}: need on > 0 > off, got {self.on_delta}, {self.off_delta}")


@dataclass(frozen=True)
class SignatureDb:
    signatures: tuple
    threshold: float

    def __len__(self) -> int:
        return len(self.signatures)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "appliances": [
                {
                    "name": s.name,
                    "hypothesis": s.index,
                    "on_delta": s.on_delta,
                    "off_delta": s.off_delta,
                    "tolerance": s.tolerance,
                }
                for s in self.signatures
            ],
        }


@dataclass(frozen=True)
class EventAssignment:
    """Matching outcome of one event; appliance is None when discarded"""
    slot: int
    delta: float
    appliance: Optional[int]
    kind: Optional[str]
    distance: Optional[float]


@dataclass(frozen=True)
class DetectedInterval:
    appliance: int
    start: int
    end: int


@dataclass
class DetectionReport:
    tp: int
    fp: int
    fn: int
    assignments: List[EventAssignment] = field(default_factory=list)

    @property
    def f_score(self) -> float:
        return f_score(self.tp, self.fp, self.fn)

    def pooled(self, other: "DetectionReport") -> "DetectionReport":
        """Counts summed over both reports"""
        return DetectionReport(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            assignments=self.assignments + other.assignments,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "f_score": self.f_score,
            "assignments": [
                {"slot": a.slot, "delta": a.delta, "appliance": a.appliance, "kind": a.kind}
                for a in self.assignments
            ],
        }


def f_score(tp: int, fp: int, fn: int) -> float:
    """1 / (1 + (fn + fp) / (2 tp)); 1 when there is nothing to find and nothing found"""
    if tp == 0:
        return 1.0 if fp + fn == 0 else 0.0
    return 1.0 / (1.0 + (fn + fp) / (2.0 * tp))


def extract_events(y_seq: Sequence[float], threshold: float) -> List[EdgeEvent]:
    """Every slot whose step from the previous slot reaches the threshold"""
    if threshold <= 0:
        raise ValueError(f"Detection threshold must be positive, got {threshold}")
    deltas = np.diff(np.asarray(y_seq, dtype=float))
    slots = np.flatnonzero(np.abs(deltas) >= threshold) + 1
    return [EdgeEvent(slot=int(k), delta=float(deltas[k - 1])) for k in slots]


def _tolerance(deltas: List[float], q: float) -> float:
    spread = 2.0 * float(np.std(deltas, ddof=1)) if len(deltas) > 1 else 0.0
    return max(q / 2.0, spread)


def build_signatures(labeled: Trace, q: float, threshold: Optional[float] = None) -> SignatureDb:
    """
    Learn on/off edge signatures for every appliance hypothesis

    Hypothesis 0 is the all-off state; each other hypothesis is one appliance.
    An edge is the power step at a slot whose label switches into (on) or out
    of (off) the appliance, taken only between consecutive slot indices.

    Raises:
        ValueError: If the trace is unlabeled or an appliance never switches
    """
    if not labeled.labeled:
        raise ValueError("Signature construction needs a labeled trace")

    names = labeled.hypothesis_names
    count = max(len(names), int(labeled.h_labels.max()) + 1)
    on_edges: Dict[int, List[float]] = {a: [] for a in range(1, count)}
    off_edges: Dict[int, List[float]] = {a: [] for a in range(1, count)}

    for segment in slot_runs(labeled.slots):
        labels = labeled.h_labels[segment]
        watts = labeled.x_watts[segment]
        for k in range(1, labels.shape[0]):
            before, after = labels[k - 1], labels[k]
            if before == after:
                continue
            delta = float(watts[k] - watts[k - 1])
            if after != 0:
                on_edges[after].append(delta)
            if before != 0:
                off_edges[before].append(delta)

    signatures = []
    for appliance in range(1, count):
        name = names[appliance] if appliance < len(names) else f"H{appliance}"
        if not on_edges[appliance] or not off_edges[appliance]:
            raise ValueError(f"Appliance {name} has no labeled on and off transitions")
        signatures.append(ApplianceSignature(
            index=appliance,
            name=name,
            on_delta=float(np.mean(on_edges[appliance])),
            off_delta=float(np.mean(off_edges[appliance])),
            tolerance=max(_tolerance(on_edges[appliance], q), _tolerance(off_edges[appliance], q)),
        ))
        logger.info(
            f"Signature {name}: on {signatures[-1].on_delta:.1f} W, off {signatures[-1].off_delta:.1f} W "
            f"from {len(on_edges[appliance])}/{len(off_edges[appliance])} edges"
        )

    return SignatureDb(signatures=tuple(signatures), threshold=q / 2.0 if threshold is None else float(threshold))


def assign_events(events: Sequence[EdgeEvent], db: SignatureDb) -> List[EventAssignment]:
    """Nearest signature edge within tolerance; ties go to the lower appliance index"""
    assignments = []
    for event in events:
        best = None
        for signature in db.signatures:
            for kind, mean in ((ON, signature.on_delta), (OFF, signature.off_delta)):
                distance = abs(event.delta - mean)
                if distance <= signature.tolerance and (best is None or distance < best[0]):
                    best = (distance, signature.index, kind)
        if best is None:
            assignments.append(EventAssignment(event.slot, event.delta, None, None, None))
        else:
            assignments.append(EventAssignment(event.slot, event.delta, best[1], best[2], best[0]))
    return assignments


def match_and_detect(
    events: Sequence[EdgeEvent],
    db: SignatureDb,
    n_slots: Optional[int] = None
) -> List[DetectedInterval]:
    """
    Turn matched events into appliance intervals

    An on event opens an interval unless one is already open for that
    appliance; the next off event of the same appliance closes it. Intervals
    still open close at n_slots, or one past the last event.
    """
    assignments = assign_events(events, db)
    end_of_trace = n_slots if n_slots is not None else (max((e.slot for e in events), default=-1) + 1)

    open_since: Dict[int, int] = {}
    detected: List[DetectedInterval] = []
    for a in assignments:
        if a.appliance is None:
            continue
        if a.kind == ON:
            open_since.setdefault(a.appliance, a.slot)
        elif a.appliance in open_since:
            detected.append(DetectedInterval(a.appliance, open_since.pop(a.appliance), a.slot))

    for appliance, start in open_since.items():
        detected.append(DetectedInterval(appliance, start, end_of_trace))
    return sorted(detected, key=lambda d: (d.start, d.appliance))


def label_intervals(labels: Sequence[int], slots: Optional[Sequence[int]] = None) -> List[DetectedInterval]:
    """Ground-truth runs of each non-zero hypothesis, as [start, end) positions"""
    values = np.asarray(labels, dtype=int)
    positions = np.arange(values.shape[0]) if slots is None else np.asarray(slots, dtype=int)
    intervals = []
    start = None
    for i, h in enumerate(values):
        if start is not None and h != values[start]:
            intervals.append(DetectedInterval(int(values[start]), int(positions[start]), int(positions[i])))
            start = None
        if start is None and h != 0:
            start = i
    if start is not None:
        intervals.append(DetectedInterval(int(values[start]), int(positions[start]), int(positions[-1]) + 1))
    return intervals


def score(
    detected: Sequence[DetectedInterval],
    truth: Sequence[DetectedInterval],
    slot_tolerance: int = 1
) -> DetectionReport:
    """
    Onset-level matching of detections to truth

    Detections are taken in onset order and each claims the nearest unmatched
    truth onset of the same appliance within slot_tolerance.
    """
    matched = [False] * len(truth)
    tp = 0
    for interval in sorted(detected, key=lambda d: (d.start, d.appliance)):
        best = None
        for i, t in enumerate(truth):
            if matched[i] or t.appliance != interval.appliance:
                continue
            gap = abs(t.start - interval.start)
            if gap <= slot_tolerance and (best is None or gap < best[0]):
                best = (gap, i)
        if best is not None:
            matched[best[1]] = True
            tp += 1
    return DetectionReport(tp=tp, fp=len(detected) - tp, fn=len(truth) - tp)


class NilmAdversary(MeterAgent):
    """Edge-based load monitor trained on labeled household data"""

    def __init__(self, q: float, threshold: Optional[float] = None, slot_tolerance: int = 1, agent_id: str = "nilm"):
        super().__init__(agent_id=agent_id, role="adversary")
        self.q = q
        self.threshold = q / 2.0 if threshold is None else float(threshold)
        self.slot_tolerance = slot_tolerance
        self.db: Optional[SignatureDb] = None

    def describe(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "slot_tolerance": self.slot_tolerance,
            "signatures": self.db.to_dict()["appliances"] if self.db else [],
        }

    def fit(self, labeled: Trace) -> SignatureDb:
        self.db = build_signatures(labeled, self.q, self.threshold)
        return self.db

    def execute(self, meter: Sequence[float], truth_labels: Sequence[int], day: int = 0) -> DetectionReport:
        """Attack one day of meter readings and score it against the labels"""
        if self.db is None:
            raise RuntimeError("Adversary has no signature database; call fit first")
        readings = np.asarray(meter, dtype=float)
        events = extract_events(readings, self.threshold)
        detected = match_and_detect(events, self.db, n_slots=readings.shape[0])
        report = score(detected, label_intervals(truth_labels), self.slot_tolerance)
        report.assignments = assign_events(events, self.db)
        self.remember("attack", {"day": day, "tp": report.tp, "fp": report.fp, "fn": report.fn})
        return report
