#!/usr/bin/env python3
"""
Closed-loop driving of one system on one track

Shared by data collection and the benchmark. The loop steps the simulator
at 10 Hz under MPPI, checks the executed state against the track and
lateral-acceleration limits, and resets the vehicle to the centerline at
its best progress so far on a violation or when progress stalls.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Any, List, Optional

import numpy as np

from config import BENCH_CONFIG, DT, LATERAL_ACCEL_LIMIT
from controller import MPPIConfig, Solution, mppi_step, seed_words
from models import DynamicsModel, History, sit_encode
from track import Track, lap_complete, lateral_accel, project, track_point
from vehicle_sim import Action, SystemParams, Transition, VehicleSimulator, VehicleState

logger = logging.getLogger(__name__)


class PolicyMode(str, Enum):
    ADAPTIVE_RISK_AWARE = "adaptive-risk-aware"
    ADAPTIVE_RISK_UNAWARE = "adaptive-risk-unaware"
    ZERO_CONTEXT = "zero-context"
    NOMINAL_FIXED = "nominal-fixed"

    @property
    def use_context(self) -> bool:
        return self in (PolicyMode.ADAPTIVE_RISK_AWARE, PolicyMode.ADAPTIVE_RISK_UNAWARE)

    @property
    def risk_aware(self) -> bool:
        return self is not PolicyMode.ADAPTIVE_RISK_UNAWARE


@dataclass(frozen=True)
class EpisodeSettings:
    step_budget: int = BENCH_CONFIG["step_budget"]
    no_progress_window: int = BENCH_CONFIG["no_progress_window"]
    no_progress_distance: float = BENCH_CONFIG["no_progress_distance"]
    reset_penalty_steps: int = BENCH_CONFIG["reset_penalty_steps"]
    apply_reset_penalty: bool = BENCH_CONFIG["apply_reset_penalty"]
    accel_limit: float = LATERAL_ACCEL_LIMIT

    @classmethod
    def from_config(cls, bench: Dict[str, Any], **overrides) -> "EpisodeSettings":
        keys = ("step_budget", "no_progress_window", "no_progress_distance",
                "reset_penalty_steps", "apply_reset_penalty")
        return cls(**{**{k: bench[k] for k in keys if k in bench}, **overrides})


@dataclass
class StepRecord:
    step: int
    state: List[float]
    action: List[float]
    context_norm: float
    min_cost: float
    mean_cost: float
    ess: float
    progress: float
    offset: float
    lateral_accel: float
    no_solution: bool = False
    event: str = ""


@dataclass
class RunMetrics:
    lap_time: int = 0
    completed: bool = False
    steps: int = 0
    off_track: int = 0
    lateral_accel_violations: int = 0
    no_progress: int = 0
    no_solution: int = 0
    resets: int = 0
    max_progress: float = 0.0
    reset_penalty_steps: int = 0
    log: List[StepRecord] = field(default_factory=list, repr=False)
    segments: List[List[Transition]] = field(default_factory=list, repr=False)

    @property
    def violations(self) -> int:
        return self.off_track + self.lateral_accel_violations

    @property
    def penalized_lap_time(self) -> int:
        return self.lap_time + self.resets * self.reset_penalty_steps

    @property
    def success(self) -> bool:
        return self.completed and self.violations == 0

    def row(self) -> Dict[str, Any]:
        return {
            "lap_time": self.lap_time,
            "penalized_lap_time": self.penalized_lap_time,
            "completed": int(self.completed),
            "success": int(self.success),
            "violations": self.violations,
            "off_track": self.off_track,
            "lateral_accel": self.lateral_accel_violations,
            "no_progress": self.no_progress,
            "resets": self.resets,
            "steps": self.steps,
            "max_progress": repr(round(self.max_progress, 6)),
        }


Policy = Callable[[VehicleState], Action]


def drive(params: SystemParams, track: Track, model: DynamicsModel, mode: PolicyMode,
          mppi: MPPIConfig, settings: EpisodeSettings, seed,
          history: Optional[History] = None, adapt: bool = True,
          policy: Optional[Policy] = None, continue_after_lap: bool = False,
          record_transitions: bool = False, keep_log: bool = True) -> RunMetrics:
    """
    Drive until the lap completes or the step budget runs out.

    Args:
        history: observations carried in from earlier runs; appended to while
            adapting. Ignored by the zero-context and nominal-fixed modes.
        adapt: recompute the context from the growing history every step
        policy: replaces MPPI (for degenerate-policy checks)
        continue_after_lap: start a new lap at the track start instead of
            stopping (collection uses every step of its budget)
        record_transitions: keep executed transitions, split at resets

    Raises:
        SimulationDivergence: propagated from the simulator
    """
    words = seed_words(seed)
    mppi = MPPIConfig.from_dict(vars(mppi), risk_aware=mode.risk_aware, accel_limit=settings.accel_limit)
    if history is None:
        history = History(params.system_id, model.history_cap)
    use_context = mode.use_context

    sim = VehicleSimulator(params, track_point(track, 0.0))
    solution = Solution.initial(mppi.horizon)
    recent = [sim.state]
    prev_action: Optional[Action] = None
    metrics = RunMetrics(lap_time=settings.step_budget, reset_penalty_steps=(
        settings.reset_penalty_steps if settings.apply_reset_penalty else 0))
    segment: List[Transition] = []
    best = 0.0
    window_start, window_progress = 0, 0.0
    context = model.zero_context()
    if use_context:
        context = sit_encode(history, model, seed=words + [1, 0])

    def restart(at: float, step: int) -> None:
        nonlocal solution, recent, prev_action, segment, window_start, window_progress
        sim.reset_to(track_point(track, at))
        solution = Solution.initial(mppi.horizon)
        recent = [sim.state]
        prev_action = None
        if segment:
            metrics.segments.append(segment)
        segment = []
        window_start, window_progress = step + 1, at

    for step in range(settings.step_budget):
        if use_context and adapt and step > 0:
            context = sit_encode(history, model, seed=words + [1, step])

        if policy is not None:
            action = policy(sim.state).clamped()
        else:
            action, solution = mppi_step(sim.state, context, solution, mppi, model, track,
                                         words + [2, step], prev_action)

        transition = sim.step(action, noise_seed=words + [3, step])
        if use_context and adapt:
            history.append(transition)
        if record_transitions:
            segment.append(transition)
        recent = (recent + [sim.state])[-3:]
        a_lat = lateral_accel(recent)
        along, away = (float(v) for v in project(track, np.array([sim.state.x, sim.state.y])))
        if away <= track.width:
            best = max(best, along)
        metrics.steps = step + 1

        lap = away <= track.width and lap_complete(track, along)
        events = ["lap"] if lap else []
        if away > track.width:
            metrics.off_track += 1
            events.append("off_track")
        if abs(a_lat) > settings.accel_limit:
            metrics.lateral_accel_violations += 1
            events.append("lateral_accel")
        if solution.no_solution:
            metrics.no_solution += 1
        if not events and step + 1 - window_start >= settings.no_progress_window:
            if best - window_progress < settings.no_progress_distance:
                metrics.no_progress += 1
                events.append("no_progress")
            else:
                window_start, window_progress = step + 1, best
        event = "+".join(events)

        if keep_log:
            metrics.log.append(StepRecord(
                step=step, state=sim.state.as_array().tolist(), action=[action.steer, action.throttle],
                context_norm=float(np.linalg.norm(context)), min_cost=solution.min_cost,
                mean_cost=solution.mean_cost, ess=solution.ess, progress=along, offset=away,
                lateral_accel=a_lat, no_solution=solution.no_solution, event=event))

        if lap:
            if not metrics.completed:
                metrics.completed = True
                metrics.lap_time = step + 1
            if not continue_after_lap:
                break
            metrics.max_progress = max(metrics.max_progress, best)
            best = 0.0
            restart(0.0, step)
            continue
        if event:
            metrics.resets += 1
            logger.debug(f"{params.system_id} step {step}: {event}, reset to {best:.2f} m")
            restart(best, step)
            continue
        prev_action = action

    if segment:
        metrics.segments.append(segment)
    metrics.max_progress = max(metrics.max_progress, best)
    if not metrics.completed:
        metrics.lap_time = settings.step_budget
    return metrics


def lower_bound_lap_time(track: Track, max_speed: float) -> int:
    """Fewest control steps any vehicle capped at max_speed could need."""
    return int(math.floor(track.total_length / (max_speed * DT)))
