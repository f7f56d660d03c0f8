"""
Orchestrator for Quiet Meter experiments
Runs the estimate, synthesize, run, attack and report stages end to end
"""
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional
import asyncio
import logging

import numpy as np
import pandas as pd

from agents.adversary import DetectionReport, NilmAdversary
from agents.controller import ControlLog, EmuAgent, realized_ambr, summarize
from core.config import (
    ExperimentConfig,
    build_costs,
    build_optimizer,
    build_params,
    build_table_model,
    action_range,
    echo_cardinalities,
)
from core.ess import EssParams
from core.household import (
    HouseholdModel,
    Trace,
    concatenate_days,
    estimate_model,
    load_model,
    quantize_power,
    sample_days,
    save_model,
)
from core.inference import CostMatrix, belief_update, passthrough_risk
from core.outputs import create_output_adapter
from core.policy_store import load_policy, save_policy
from core.synthesis import PolicyTable, StateSpace, backward_recursion
from tools.trace_io import load_alphabet, load_trace, save_days, split_days

STAGES = ("estimate", "synthesize", "run", "attack", "report")
STALE_MARKER = "STALE"
BASELINE_LABEL = "no battery"

# Streams of the data seed: training days and validation days never share draws
TRAINING_STREAM = 0
VALIDATION_STREAM = 1


class StageError(RuntimeError):
    """An experiment stage failed; carries the stage name"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ReportRow:
    label: str
    soc_fraction: Optional[float]
    f_score: float
    tp: int
    fp: int
    fn: int
    total_loss_wh: float
    loss_per_day_wh: float
    ambr: float
    ambr_per_day: float
    clip_rate: float
    soc_file: Optional[str] = None


@dataclass
class ExperimentReport:
    rows: List[ReportRow]
    days: int
    horizon: int
    mode: str
    echo: Dict[str, Any] = field(default_factory=dict)

    @property
    def baseline(self) -> ReportRow:
        return next(row for row in self.rows if row.soc_fraction is None)

    def battery_rows(self) -> List[ReportRow]:
        return [row for row in self.rows if row.soc_fraction is not None]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'days': self.days,
            'horizon': self.horizon,
            'mode': self.mode,
            'rows': [asdict(row) for row in self.rows],
        }


@dataclass
class SocRun:
    """Control logs of one initial SOC over every validation day"""
    fraction: float
    logs: List[ControlLog]


def _soc_tag(fraction: float) -> str:
    return f"soc_{int(round(fraction * 100)):03d}"


def baseline_ambr(day: Trace, model: HouseholdModel, costs: CostMatrix) -> float:
    """Accumulated risk when the meter reports the household demand unmodified"""
    belief = model.prior
    total = 0.0
    for watts in day.x_watts:
        total += passthrough_risk(belief, model, costs)
        belief = belief_update(belief, quantize_power(float(watts), model.q, model.x_max), model).probs
    return total


class ExperimentOrchestrator:
    """Runs one configured experiment, stage by stage"""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.output_dir = Path(config.output.directory)
        self._setup_logging()

        self.params: EssParams = build_params(config)
        self.costs: CostMatrix = build_costs(config)
        self.source_model: Optional[HouseholdModel] = None
        self.model: Optional[HouseholdModel] = None
        self.training: List[Trace] = []
        self.validation: List[Trace] = []
        self.policy: Optional[PolicyTable] = None
        self.adversary: Optional[NilmAdversary] = None
        self.runs: List[SocRun] = []
        self.detections: Dict[str, DetectionReport] = {}
        self.report: Optional[ExperimentReport] = None

        self.logger.info(f"Experiment orchestrator initialized, output in {self.output_dir}")

    def _setup_logging(self):
        """Setup logging based on config"""
        log_config = self.config.logging
        handlers: List[logging.Handler] = []
        if log_config.file:
            Path(log_config.file).parent.mkdir(parents=True, exist_ok=True)
            handlers.append(logging.FileHandler(log_config.file))
        handlers.append(logging.StreamHandler() if log_config.console else logging.NullHandler())

        logging.basicConfig(
            level=getattr(logging, log_config.level),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=handlers
        )
        self.logger = logging.getLogger(__name__)

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def estimate(self) -> HouseholdModel:
        """Resolve the household model and the labeled training days"""
        household = self.config.household
        grids = self.config.grids

        if household.source == "file":
            self.source_model = load_model(household.model_file)
        else:
            self.source_model = build_table_model(self.config)

        self.training = self._training_days()

        if household.source == "estimate":
            self.model = estimate_model(
                concatenate_days(self.training),
                grids.q,
                grids.x_max,
                hypothesis_count=self.config.hypothesis_count,
                hypothesis_names=household.hypothesis_names,
            )
        else:
            self.model = self.source_model

        save_model(self.model, self.output_dir / "model.yaml")
        self.logger.info(f"Household model ready ({household.source}), {len(self.training)} training days")
        return self.model

    def synthesize(self, reuse: bool = False) -> PolicyTable:
        """Build the lattice and solve for the policy; reuse a matching saved policy if asked"""
        grids = self.config.grids
        d_min, d_max = action_range(self.config, self.params)
        policy_path = self.output_dir / "policy.npz"

        space = StateSpace(self.model, self.params, grids.e, grids.belief_resolution, d_min, d_max)
        expected = (grids.horizon, *space.shape)

        if reuse and policy_path.exists():
            policy = load_policy(policy_path, expected_shape=expected)
            if policy.model_digest == self.model.digest() and policy.ess_digest == self.params.digest():
                self.logger.info(f"Reusing policy {policy_path}")
                self.policy = policy
                return policy
            self.logger.info("Saved policy belongs to another model or battery; resynthesizing")

        self.policy, _ = backward_recursion(space, self.costs, grids.horizon, build_optimizer(self.config))
        save_policy(self.policy, policy_path)
        return self.policy

    async def run(self) -> List[SocRun]:
        """Run the controller from every configured initial SOC, concurrently"""
        self.validation = self._validation_days()
        loop = asyncio.get_running_loop()
        tasks = [
            loop.run_in_executor(None, self._run_fraction, fraction)
            for fraction in self.config.soc_fractions
        ]
        self.runs = list(await asyncio.gather(*tasks))
        for run in self.runs:
            self._write_logs(run)
        return self.runs

    def attack(self) -> Dict[str, DetectionReport]:
        """Fit the adversary on training days and attack every meter trace"""
        attacker = self.config.attacker
        self.adversary = NilmAdversary(
            q=self.config.grids.q,
            threshold=attacker.threshold,
            slot_tolerance=attacker.slot_tolerance,
        )
        self.adversary.fit(concatenate_days(self.training))

        for day in self.validation:
            if not day.labeled:
                raise ValueError("Validation days need ground-truth labels for scoring")

        self.detections = {BASELINE_LABEL: self._attack_days([self._demand(day) for day in self.validation])}
        for run in self.runs:
            self.detections[_soc_tag(run.fraction)] = self._attack_days([log.outputs for log in run.logs])
        return self.detections

    async def build_report(self) -> ExperimentReport:
        days = len(self.validation)
        rows = [self._baseline_row(days)]
        for run in self.runs:
            rows.append(self._battery_row(run, days))

        self.report = ExperimentReport(
            rows=rows,
            days=days,
            horizon=self.config.grids.horizon,
            mode=self.config.mode,
            echo=self.config_echo(),
        )
        await self.save_results(self.report)
        return self.report

    async def execute(self, stop_after: str = "report", reuse_policy: bool = False) -> Optional[ExperimentReport]:
        """
        Run the stages in order, up to and including stop_after

        On failure a STALE marker naming the stage is written into the output
        directory and the error is re-raised as StageError.
        """
        if stop_after not in STAGES:
            raise ValueError(f"Unknown stage {stop_after!r}, expected one of {STAGES}")
        self.output_dir.mkdir(parents=True, exist_ok=True)

        steps = {
            "estimate": self.estimate,
            "synthesize": lambda: self.synthesize(reuse=reuse_policy),
            "run": self.run,
            "attack": self.attack,
            "report": self.build_report,
        }
        for stage in STAGES:
            self.logger.info(f"Stage {stage}")
            try:
                result = steps[stage]()
                if asyncio.iscoroutine(result):
                    await result
            except Exception as e:
                self._mark_stale(stage, e)
                raise StageError(stage, e) from e
            if stage == stop_after:
                break

        marker = self.output_dir / STALE_MARKER
        if marker.exists():
            marker.unlink()
        return self.report

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    def _alphabet(self):
        household = self.config.household
        if household.alphabet_file:
            return load_alphabet(household.alphabet_file)
        return tuple(household.hypothesis_names)

    def _training_days(self) -> List[Trace]:
        household = self.config.household
        if household.training_trace:
            return split_days(load_trace(household.training_trace, self._alphabet()))
        days = sample_days(
            self.source_model,
            household.training_days,
            self.config.grids.horizon,
            self.config.seeds.data,
            stream=TRAINING_STREAM,
        )
        save_days(days, self.output_dir / "data" / "training.csv")
        return days

    def _validation_days(self) -> List[Trace]:
        validation = self.config.validation
        if validation.trace:
            return split_days(load_trace(validation.trace, self._alphabet()))
        days = sample_days(
            self.source_model,
            validation.days,
            self.config.grids.horizon,
            self.config.seeds.data,
            stream=VALIDATION_STREAM,
        )
        save_days(days, self.output_dir / "data" / "validation.csv")
        return days

    def _run_fraction(self, fraction: float) -> SocRun:
        agent = EmuAgent(
            self.policy,
            self.model,
            self.params,
            mode=self.config.mode,
            seed=self.config.seeds.controller,
            agent_id=f"emu_{_soc_tag(fraction)}",
        )
        z0 = fraction * self.params.z_max
        logs = [agent.execute(day, z0, day=index) for index, day in enumerate(self.validation)]
        self.logger.info(f"Controller from SOC {fraction:.2f}: {len(logs)} days")
        return SocRun(fraction=fraction, logs=logs)

    def _write_logs(self, run: SocRun):
        tag = _soc_tag(run.fraction)
        frames = []
        for index, log in enumerate(run.logs):
            log.to_csv(self.output_dir / "logs" / tag / f"day_{index:03d}.csv")
            summary = summarize(log, self.params)
            frames.append(pd.DataFrame({
                "day": index,
                "step": np.arange(summary.soc_trajectory.shape[0]),
                "soc": summary.soc_trajectory,
            }))
        soc_path = self.output_dir / "soc" / f"{tag}.csv"
        soc_path.parent.mkdir(parents=True, exist_ok=True)
        pd.concat(frames, ignore_index=True).to_csv(soc_path, index=False, float_format="%.10g")

    def _demand(self, day: Trace) -> np.ndarray:
        return np.array([quantize_power(float(w), self.model.q, self.model.x_max) for w in day.x_watts])

    def _attack_days(self, meter_days: List[np.ndarray]) -> DetectionReport:
        pooled = DetectionReport(tp=0, fp=0, fn=0)
        for index, (meter, day) in enumerate(zip(meter_days, self.validation)):
            pooled = pooled.pooled(self.adversary.execute(meter, day.h_labels, day=index))
        return pooled

    def _baseline_row(self, days: int) -> ReportRow:
        detection = self.detections[BASELINE_LABEL]
        ambr = sum(baseline_ambr(day, self.model, self.costs) for day in self.validation)
        return ReportRow(
            label=BASELINE_LABEL,
            soc_fraction=None,
            f_score=detection.f_score,
            tp=detection.tp,
            fp=detection.fp,
            fn=detection.fn,
            total_loss_wh=0.0,
            loss_per_day_wh=0.0,
            ambr=ambr,
            ambr_per_day=ambr / days if days else 0.0,
            clip_rate=0.0,
        )

    def _battery_row(self, run: SocRun, days: int) -> ReportRow:
        tag = _soc_tag(run.fraction)
        detection = self.detections[tag]
        summaries = [summarize(log, self.params) for log in run.logs]
        total_loss = float(sum(s.total_loss for s in summaries))
        slots = sum(s.slots for s in summaries)
        ambr = float(sum(realized_ambr(log, self.policy) for log in run.logs))
        return ReportRow(
            label=f"SOC {run.fraction:.0%}",
            soc_fraction=run.fraction,
            f_score=detection.f_score,
            tp=detection.tp,
            fp=detection.fp,
            fn=detection.fn,
            total_loss_wh=total_loss,
            loss_per_day_wh=total_loss / days if days else 0.0,
            ambr=ambr,
            ambr_per_day=ambr / days if days else 0.0,
            clip_rate=sum(s.clip_count for s in summaries) / slots if slots else 0.0,
            soc_file=f"soc/{tag}.csv",
        )

    def config_echo(self) -> Dict[str, Any]:
        """Resolved inputs the report was computed from"""
        return {
            'cardinalities': echo_cardinalities(self.config),
            'ess': self.config.ess.model_dump(),
            'grids': self.config.grids.model_dump(),
            'household': self.model.to_dict() if self.model else None,
            'household_source': self.config.household.source,
            'costs': self.costs.c.tolist(),
            'attacker': self.adversary.describe() if self.adversary else self.config.attacker.model_dump(),
            'seeds': self.config.seeds.model_dump(),
            'optimizer': self.config.optimizer.model_dump(),
        }

    async def save_results(self, report: ExperimentReport) -> List[Dict]:
        """Save the report to all enabled output formats"""
        output_locations = []
        for format_name in self.config.output.formats:
            adapter = create_output_adapter(format_name, {'output_directory': str(self.output_dir)})
            location = await adapter.export_report(report.to_dict(), report.echo)
            output_locations.append({'format': format_name, 'location': location})
            self.logger.info(f"Saved {format_name} report to {location}")
        return output_locations

    def _mark_stale(self, stage: str, error: Exception):
        self.output_dir.mkdir(parents=True, exist_ok=True)
        (self.output_dir / STALE_MARKER).write_text(f"stage: {stage}\nerror: {error}\n", encoding='utf-8')
        self.logger.error(f"Stage {stage} failed: {error}")


def run_experiment(
    config: ExperimentConfig,
    stop_after: str = "report",
    reuse_policy: bool = False
) -> Optional[ExperimentReport]:
    """Run a full experiment synchronously and return its report"""
    orchestrator = ExperimentOrchestrator(config)
    return asyncio.run(orchestrator.execute(stop_after=stop_after, reuse_policy=reuse_policy))
