import numpy as np
import pytest

import episode
from controller import MPPIConfig, Solution
from episode import EpisodeSettings, PolicyMode, RunMetrics, drive, lower_bound_lap_time
from models import History
from track import offset, progress, straight_track
from vehicle_sim import Action, SimulationDivergence

SMALL_MPPI = MPPIConfig(horizon=4, candidates=6, stochastic_evals=2)


def recording(policy):
    seen = []

    def wrapped(state):
        seen.append(state)
        return policy(state)

    return wrapped, seen


class TestPolicyMode:

    def test_flags(self):
        assert PolicyMode.ADAPTIVE_RISK_AWARE.use_context and PolicyMode.ADAPTIVE_RISK_AWARE.risk_aware
        assert PolicyMode.ADAPTIVE_RISK_UNAWARE.use_context and not PolicyMode.ADAPTIVE_RISK_UNAWARE.risk_aware
        assert not PolicyMode.ZERO_CONTEXT.use_context and PolicyMode.ZERO_CONTEXT.risk_aware
        assert not PolicyMode.NOMINAL_FIXED.use_context and PolicyMode.NOMINAL_FIXED.risk_aware

    def test_string_values(self):
        assert PolicyMode("zero-context") is PolicyMode.ZERO_CONTEXT


class TestScriptedPolicies:

    def test_standing_still_triggers_no_progress(self, easy_system, straight, tiny_model):
        settings = EpisodeSettings(step_budget=60, no_progress_window=20)
        metrics = drive(easy_system, straight, tiny_model, PolicyMode.NOMINAL_FIXED, SMALL_MPPI, settings,
                        seed=[1], policy=lambda s: Action(0.0, 0.0))
        assert not metrics.completed
        assert metrics.lap_time == 60
        assert metrics.no_progress == 3
        assert metrics.resets == 3
        assert metrics.violations == 0
        assert [r.step for r in metrics.log if r.event == "no_progress"] == [19, 39, 59]

    def test_full_throttle_finishes_straight(self, easy_system, straight, tiny_model):
        settings = EpisodeSettings(step_budget=300)
        metrics = drive(easy_system, straight, tiny_model, PolicyMode.NOMINAL_FIXED, SMALL_MPPI, settings,
                        seed=[2], policy=lambda s: Action(0.0, 1.0))
        assert metrics.completed and metrics.success
        assert metrics.lap_time == metrics.steps < 300
        assert metrics.lap_time >= lower_bound_lap_time(straight, 50.0)
        assert metrics.log[-1].event == "lap"
        assert metrics.max_progress >= straight.total_length - 0.1

    def test_continue_after_lap_records_every_step(self, easy_system, straight, tiny_model):
        settings = EpisodeSettings(step_budget=150)
        metrics = drive(easy_system, straight, tiny_model, PolicyMode.NOMINAL_FIXED, SMALL_MPPI, settings,
                        seed=[3], policy=lambda s: Action(0.0, 1.0), continue_after_lap=True,
                        record_transitions=True)
        assert metrics.steps == 150
        assert metrics.completed and metrics.lap_time < 150
        assert sum(len(segment) for segment in metrics.segments) == 150
        for segment in metrics.segments:
            for a, b in zip(segment, segment[1:]):
                assert a.s_next == b.s

    def test_violation_resets_to_centerline_at_rest(self, easy_system, straight, tiny_model):
        policy, seen = recording(lambda s: Action(1.0, 1.0))
        settings = EpisodeSettings(step_budget=80)
        metrics = drive(easy_system, straight, tiny_model, PolicyMode.NOMINAL_FIXED, SMALL_MPPI, settings,
                        seed=[4], policy=policy)
        assert metrics.resets >= 1
        assert metrics.violations >= 1
        for record in metrics.log:
            if record.event and record.step + 1 < len(seen):
                restart = seen[record.step + 1]
                assert restart.speed == 0.0
                assert offset(straight, restart) == pytest.approx(0.0, abs=1e-9)
                assert progress(straight, restart) <= straight.total_length

    def test_violation_on_the_finishing_step_is_counted(self, easy_system, tiny_model, monkeypatch):
        short = straight_track(3.0)
        finish = short.total_length - 0.1
        monkeypatch.setattr(episode, "lateral_accel", lambda states: 99.0 if states[-1].x >= finish else 0.0)
        metrics = drive(easy_system, short, tiny_model, PolicyMode.NOMINAL_FIXED, SMALL_MPPI,
                        EpisodeSettings(step_budget=100), seed=[11], policy=lambda s: Action(0.0, 1.0))
        assert metrics.completed
        assert metrics.log[-1].event == "lap+lateral_accel"
        assert metrics.lateral_accel_violations == 1
        assert metrics.violations == 1 and not metrics.success
        assert metrics.resets == 0

    def test_divergence_propagates(self, easy_system, straight, tiny_model):
        settings = EpisodeSettings(step_budget=5)
        with pytest.raises(SimulationDivergence):
            drive(easy_system, straight, tiny_model, PolicyMode.NOMINAL_FIXED, SMALL_MPPI, settings,
                  seed=[5], policy=lambda s: Action(float("nan"), 0.0))


class TestControlledRuns:

    def test_deterministic_given_seed(self, easy_system, straight, tiny_model):
        settings = EpisodeSettings(step_budget=6)
        runs = [drive(easy_system, straight, tiny_model, PolicyMode.ADAPTIVE_RISK_AWARE, SMALL_MPPI, settings,
                      seed=[6, 1]) for _ in range(2)]
        assert [r.state for r in runs[0].log] == [r.state for r in runs[1].log]
        assert runs[0].row() == runs[1].row()

    def test_adaptive_mode_grows_history(self, easy_system, straight, tiny_model):
        history = History(easy_system.system_id, tiny_model.history_cap)
        drive(easy_system, straight, tiny_model, PolicyMode.ADAPTIVE_RISK_UNAWARE, SMALL_MPPI,
              EpisodeSettings(step_budget=5), seed=[7], history=history)
        assert len(history) == 5

    def test_fixed_modes_leave_history_alone(self, easy_system, straight, tiny_model):
        history = History(easy_system.system_id, tiny_model.history_cap)
        drive(easy_system, straight, tiny_model, PolicyMode.ZERO_CONTEXT, SMALL_MPPI,
              EpisodeSettings(step_budget=3), seed=[8], history=history)
        assert len(history) == 0

    def test_zero_context_logs_zero_norm(self, easy_system, straight, tiny_model):
        metrics = drive(easy_system, straight, tiny_model, PolicyMode.ZERO_CONTEXT, SMALL_MPPI,
                        EpisodeSettings(step_budget=3), seed=[9])
        assert all(r.context_norm == 0.0 for r in metrics.log)
        assert all(abs(a) <= 1.0 for r in metrics.log for a in r.action)


    def test_no_solution_steps_are_flagged(self, easy_system, straight, tiny_model, monkeypatch):
        def stuck(state, context, solution, mppi, *args):
            return Action(0.0, 0.0), Solution(np.zeros((mppi.horizon, 2)), no_solution=True)

        monkeypatch.setattr(episode, "mppi_step", stuck)
        metrics = drive(easy_system, straight, tiny_model, PolicyMode.ADAPTIVE_RISK_AWARE, SMALL_MPPI,
                        EpisodeSettings(step_budget=10, no_progress_window=20), seed=[12])
        assert metrics.no_solution == 10
        assert all(r.no_solution for r in metrics.log)


class TestModeAblation:

    @pytest.mark.parametrize("mode", list(PolicyMode))
    def test_each_mode_differs_from_full_method_in_one_switch(self, mode):
        full = PolicyMode.ADAPTIVE_RISK_AWARE
        switches = [mode.use_context != full.use_context, mode.risk_aware != full.risk_aware]
        assert sum(switches) == (0 if mode is full else 1)

    @pytest.mark.parametrize("mode, context_on, risk_on", [
        (PolicyMode.ADAPTIVE_RISK_AWARE, True, True),
        (PolicyMode.ADAPTIVE_RISK_UNAWARE, True, False),
        (PolicyMode.ZERO_CONTEXT, False, True),
        (PolicyMode.NOMINAL_FIXED, False, True),
    ])
    def test_controller_sees_mode_switches(self, mode, context_on, risk_on, easy_system, straight, tiny_model,
                                           monkeypatch):
        seen = []
        real_step = episode.mppi_step

        def watched(state, context, solution, mppi, *args):
            seen.append((bool(np.any(context != 0.0)), mppi.risk_aware))
            return real_step(state, context, solution, mppi, *args)

        monkeypatch.setattr(episode, "mppi_step", watched)
        drive(easy_system, straight, tiny_model, mode, SMALL_MPPI, EpisodeSettings(step_budget=2), seed=[13])
        assert seen == [(context_on, risk_on)] * 2


class TestRunMetrics:

    def test_penalized_lap_time(self):
        metrics = RunMetrics(lap_time=120, completed=True, resets=2, reset_penalty_steps=100)
        assert metrics.penalized_lap_time == 320
        assert metrics.row()["penalized_lap_time"] == 320

    def test_success_requires_no_violations(self):
        assert RunMetrics(completed=True).success
        assert not RunMetrics(completed=True, off_track=1).success
        assert not RunMetrics(completed=False).success

    def test_lower_bound(self, straight):
        assert lower_bound_lap_time(straight, 5.0) == 40
