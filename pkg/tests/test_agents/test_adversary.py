"""
Tests for the load-monitoring adversary
"""

import numpy as np
import pytest

from agents.adversary import (
    OFF,
    ON,
    ApplianceSignature,
    DetectedInterval,
    DetectionReport,
    EdgeEvent,
    NilmAdversary,
    SignatureDb,
    assign_events,
    build_signatures,
    extract_events,
    f_score,
    label_intervals,
    match_and_detect,
    score,
)
from core.household import Trace


@pytest.fixture
def kettle_db():
    return SignatureDb(
        signatures=(ApplianceSignature(1, "ON", 1500.0, -1500.0, 250.0),),
        threshold=250.0,
    )


@pytest.fixture
def two_appliance_db():
    return SignatureDb(
        signatures=(
            ApplianceSignature(1, "kettle", 1500.0, -1500.0, 250.0),
            ApplianceSignature(2, "heater", 1600.0, -1600.0, 250.0),
        ),
        threshold=250.0,
    )


@pytest.mark.unit
class TestFScore:
    """Onset F-score"""

    def test_examples(self):
        """Known values"""
        assert f_score(1, 1, 1) == 0.5
        assert f_score(3, 0, 0) == 1.0
        assert f_score(0, 0, 0) == 1.0
        assert f_score(0, 2, 3) == 0.0

    def test_equals_harmonic_mean(self):
        """Identical to the harmonic mean of precision and recall"""
        rng = np.random.default_rng(8)
        for tp, fp, fn in rng.integers(0, 50, size=(1000, 3)):
            if tp == 0:
                continue
            precision, recall = tp / (tp + fp), tp / (tp + fn)
            assert f_score(tp, fp, fn) == pytest.approx(2 * precision * recall / (precision + recall))

    def test_monotone(self):
        """More hits raise the score, more errors lower it"""
        assert f_score(3, 1, 1) > f_score(2, 1, 1)
        assert f_score(2, 2, 1) < f_score(2, 1, 1)
        assert f_score(2, 1, 2) < f_score(2, 1, 1)


@pytest.mark.unit
class TestExtractEvents:
    """Edge detection"""

    def test_constant_trace(self):
        """No steps, no events"""
        assert extract_events([700.0] * 10, 250.0) == []

    def test_pulse(self):
        """A pulse gives one rising and one falling edge"""
        assert extract_events([0, 0, 1500, 1500, 0], 250.0) == [EdgeEvent(2, 1500.0), EdgeEvent(4, -1500.0)]

    def test_staircase(self):
        """Each step at the threshold is an event"""
        assert extract_events([0, 500, 1000], 500.0) == [EdgeEvent(1, 500.0), EdgeEvent(2, 500.0)]

    def test_shift_invariant(self):
        """Adding a constant leaves the events unchanged"""
        trace = np.array([0, 0, 1500, 1000, 0, 500], dtype=float)
        assert extract_events(trace, 250.0) == extract_events(trace + 300.0, 250.0)

    def test_rejects_non_positive_threshold(self):
        """Thresholds are positive"""
        with pytest.raises(ValueError):
            extract_events([0, 1], 0.0)


@pytest.mark.unit
class TestSignatures:
    """Learning appliance edges"""

    def test_pulse(self, pulse_trace):
        """One clean use gives exact edges and the q/2 floor tolerance"""
        db = build_signatures(pulse_trace, q=500.0)
        assert len(db) == 1
        signature = db.signatures[0]
        assert (signature.on_delta, signature.off_delta, signature.tolerance) == (1500.0, -1500.0, 250.0)
        assert db.threshold == 250.0

    def test_spread_widens_tolerance(self):
        """Twice the edge standard deviation when it exceeds q/2"""
        labels = [0, 1, 0, 1, 0]
        trace = Trace(slots=np.arange(5), x_watts=[0, 1000, 0, 2000, 0], h_labels=labels)
        signature = build_signatures(trace, q=500.0).signatures[0]
        assert signature.on_delta == 1500.0
        assert signature.tolerance == pytest.approx(2 * np.std([1000.0, 2000.0], ddof=1))

    def test_never_switched(self):
        """An appliance without transitions is named in the error"""
        trace = Trace(slots=np.arange(4), x_watts=np.zeros(4), h_labels=np.zeros(4, dtype=int))
        with pytest.raises(ValueError, match="ON"):
            build_signatures(trace, q=500.0)

    def test_unlabeled(self):
        """Labels are required"""
        with pytest.raises(ValueError, match="labeled"):
            build_signatures(Trace(slots=[0, 1], x_watts=[0.0, 0.0]), q=500.0)

    def test_signature_signs(self):
        """On edges rise and off edges fall"""
        with pytest.raises(ValueError):
            ApplianceSignature(1, "bad", -100.0, 100.0, 250.0)


@pytest.mark.unit
class TestMatching:
    """Event assignment and interval detection"""

    def test_unmatched_event_is_discarded(self, kettle_db):
        """Events far from every signature are dropped"""
        [assignment] = assign_events([EdgeEvent(3, 700.0)], kettle_db)
        assert assignment.appliance is None
        assert match_and_detect([EdgeEvent(3, 700.0)], kettle_db, n_slots=10) == []

    def test_nearest_signature(self, two_appliance_db):
        """Events go to the nearest mean"""
        [assignment] = assign_events([EdgeEvent(0, 1540.0)], two_appliance_db)
        assert (assignment.appliance, assignment.kind) == (1, ON)
        assert assignment.distance == pytest.approx(40.0)

    def test_tie_goes_to_lower_index(self, two_appliance_db):
        """Equidistant means resolve to the lower appliance index"""
        [assignment] = assign_events([EdgeEvent(0, -1550.0)], two_appliance_db)
        assert (assignment.appliance, assignment.kind) == (1, OFF)

    def test_pulse_interval(self, kettle_db):
        """On then off closes one interval"""
        events = extract_events([0, 0, 1500, 1500, 1500, 0], 250.0)
        assert match_and_detect(events, kettle_db, n_slots=6) == [DetectedInterval(1, 2, 5)]

    def test_repeated_on_is_ignored(self, kettle_db):
        """An on event while already on does not open a second interval"""
        events = [EdgeEvent(2, 1500.0), EdgeEvent(4, 1480.0), EdgeEvent(6, -1500.0)]
        assert match_and_detect(events, kettle_db) == [DetectedInterval(1, 2, 6)]

    def test_unclosed_interval(self, kettle_db):
        """Open intervals close at the end of the trace"""
        assert match_and_detect([EdgeEvent(3, 1500.0)], kettle_db, n_slots=10) == [DetectedInterval(1, 3, 10)]

    def test_orphan_off_is_ignored(self, kettle_db):
        """Off events without an open interval detect nothing"""
        assert match_and_detect([EdgeEvent(1, -1500.0)], kettle_db, n_slots=5) == []


@pytest.mark.unit
class TestScoring:
    """Ground truth and onset matching"""

    def test_label_intervals(self):
        """Runs of each non-zero hypothesis"""
        assert label_intervals([0, 1, 1, 0, 1]) == [DetectedInterval(1, 1, 3), DetectedInterval(1, 4, 5)]
        assert label_intervals([0, 1, 2, 2, 0]) == [DetectedInterval(1, 1, 2), DetectedInterval(2, 2, 4)]

    def test_onset_within_tolerance(self):
        """Onsets one slot apart match"""
        report = score([DetectedInterval(1, 2, 5)], [DetectedInterval(1, 3, 6)], slot_tolerance=1)
        assert (report.tp, report.fp, report.fn) == (1, 0, 0)

    def test_onset_outside_tolerance(self):
        """Distant onsets count once as false positive and once as miss"""
        report = score([DetectedInterval(1, 2, 5)], [DetectedInterval(1, 3, 6)], slot_tolerance=0)
        assert (report.tp, report.fp, report.fn) == (0, 1, 1)

    def test_one_detection_per_truth(self):
        """A truth onset is claimed at most once"""
        detected = [DetectedInterval(1, 2, 3), DetectedInterval(1, 3, 4)]
        report = score(detected, [DetectedInterval(1, 2, 4)], slot_tolerance=1)
        assert (report.tp, report.fp, report.fn) == (1, 1, 0)

    def test_pooled_counts(self):
        """Reports pool by summing counts"""
        pooled = DetectionReport(1, 0, 1).pooled(DetectionReport(2, 1, 0))
        assert (pooled.tp, pooled.fp, pooled.fn) == (3, 1, 1)
        assert pooled.to_dict()["f_score"] == pytest.approx(f_score(3, 1, 1))


@pytest.mark.unit
class TestNilmAdversary:
    """Adversary agent"""

    def test_detects_unprotected_pulse(self, pulse_trace):
        """An unmodified trace gives the use away"""
        adversary = NilmAdversary(q=500.0)
        adversary.fit(pulse_trace)
        report = adversary.execute(pulse_trace.x_watts, pulse_trace.h_labels)
        assert (report.tp, report.fp, report.fn) == (1, 0, 0)
        assert report.f_score == 1.0
        assert adversary.recall("attack")[0]["result"]["tp"] == 1

    def test_flat_meter_hides_pulse(self, pulse_trace):
        """A constant meter reading reveals nothing"""
        adversary = NilmAdversary(q=500.0)
        adversary.fit(pulse_trace)
        report = adversary.execute(np.full(len(pulse_trace), 500.0), pulse_trace.h_labels)
        assert (report.tp, report.fp, report.fn) == (0, 0, 1)
        assert report.f_score == 0.0

    def test_requires_fit(self, pulse_trace):
        """Attacking before training is an error"""
        with pytest.raises(RuntimeError, match="fit"):
            NilmAdversary(q=500.0).execute(pulse_trace.x_watts, pulse_trace.h_labels)

    def test_describe(self, pulse_trace):
        """Threshold defaults to q/2 and signatures appear after fitting"""
        adversary = NilmAdversary(q=500.0, slot_tolerance=2)
        assert adversary.describe() == {"threshold": 250.0, "slot_tolerance": 2, "signatures": []}
        adversary.fit(pulse_trace)
        assert adversary.describe()["signatures"][0]["on_delta"] == 1500.0
