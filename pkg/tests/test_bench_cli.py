import csv
import json
import os

import pytest

from bench_cli import (
    EXIT_RUNTIME,
    METRICS_HEADER,
    ModelSet,
    ablation_summary,
    ablation_table,
    acceptance_failures,
    build_parser,
    curve_table,
    emit_report,
    experiment_adaptation_curve,
    experiment_risk_ablation,
    format_row,
    generate_report,
    main,
    run_trial,
    trial_row,
    write_provenance,
)
from config import ConfigurationError, default_config
from episode import PolicyMode
from models import History
from track import straight_track
from vehicle_sim import sample_system

from conftest import TINY_MODEL


def make_row(experiment="curve", method="adaptive", mode="adaptive-risk-aware", budget=0, run_index=0,
             system_id="sys-1", lap_time=300, violations=0, no_progress=0, completed=1):
    return {
        "experiment": experiment, "method": method, "mode": mode, "system_id": system_id,
        "track_id": "track-1", "run_index": run_index, "budget": budget, "seed": "0-1",
        "penalty_applied": 0, "lap_time": lap_time, "penalized_lap_time": lap_time,
        "completed": completed, "success": int(completed and not violations), "violations": violations,
        "off_track": violations, "lateral_accel": 0, "no_progress": no_progress, "resets": violations + no_progress,
        "steps": lap_time, "max_progress": "30.0",
    }


def passing_curve_rows():
    rows = []
    for system_id in ("sys-1", "sys-2"):
        rows.append(make_row(system_id=system_id, budget=0, lap_time=300, violations=1, no_progress=1))
        rows.append(make_row(system_id=system_id, budget=500, lap_time=200))
        rows.append(make_row(method="scratch-baseline", mode="zero-context", system_id=system_id, budget=500,
                             lap_time=500, violations=4, no_progress=5))
        rows.append(make_row(method="nominal-fixed", mode="nominal-fixed", system_id=system_id, lap_time=400))
    return rows


def tiny_cfg():
    cfg = default_config()
    cfg["model"].update(TINY_MODEL)
    cfg["mppi"].update(horizon=3, candidates=4, stochastic_evals=2)
    cfg["bench"].update(step_budget=3, curve_budgets=[0, 4], ablation_runs=2)
    cfg["training"].update(scratch_retrain_interval=4, scratch_updates=1, batch_size=2, target_window=2)
    return cfg


class TestAggregation:

    def test_curve_table_mean_and_standard_error(self):
        rows = [make_row(system_id="a", lap_time=100), make_row(system_id="b", lap_time=200)]
        (entry,) = curve_table(rows)
        assert entry["method"] == "adaptive" and entry["n"] == 2
        assert float(entry["lap_time_mean"]) == pytest.approx(150.0)
        assert float(entry["lap_time_se"]) == pytest.approx(50.0)
        assert float(entry["completion_rate"]) == 1.0

    def test_single_row_has_zero_standard_error(self):
        (entry,) = curve_table([make_row()])
        assert entry["lap_time_se"] == "0"

    def test_ablation_table_groups_by_mode_and_run(self):
        rows = [make_row(experiment="ablation", mode=mode, run_index=run)
                for mode in ("adaptive-risk-aware", "adaptive-risk-unaware") for run in (0, 1)]
        table = ablation_table(rows)
        assert [(e["mode"], e["run_index"]) for e in table] == [
            ("adaptive-risk-aware", 0), ("adaptive-risk-aware", 1),
            ("adaptive-risk-unaware", 0), ("adaptive-risk-unaware", 1)]

    def test_ablation_summary(self):
        rows = []
        for i, sid in enumerate(("s1", "s2", "s3")):
            for run, lap in ((0, 300 + 10 * i), (1, 250 + 20 * i)):
                rows.append(make_row(experiment="ablation", mode="adaptive-risk-aware", run_index=run,
                                     system_id=sid, lap_time=lap, violations=0 if run else 1))
                rows.append(make_row(experiment="ablation", mode="adaptive-risk-unaware", run_index=run,
                                     system_id=sid, lap_time=lap, violations=2))
        summary = ablation_summary(rows)
        assert summary["violation_ratio"] == pytest.approx(0.25)
        assert summary["adaptive-risk-aware"]["first_run_violations"] == 1.0
        assert summary["adaptive-risk-aware"]["last_run_violations"] == 0.0
        assert "run1_vs_run2" in summary["adaptive-risk-aware"]
        assert summary["reference_violation_ratio"] == pytest.approx(0.015 / 0.49)


class TestAcceptance:

    def test_passing_rows(self):
        assert acceptance_failures(passing_curve_rows(), default_config()) == []

    def test_low_completion_fails(self):
        rows = passing_curve_rows()
        for row in rows:
            if row["method"] == "adaptive" and row["budget"] == 0:
                row["completed"] = 0
        failures = acceptance_failures(rows, default_config())
        assert any("completion" in f for f in failures)

    def test_no_lap_time_improvement_fails(self):
        rows = passing_curve_rows()
        for row in rows:
            if row["method"] == "adaptive":
                row["lap_time"] = row["penalized_lap_time"] = 380
        failures = acceptance_failures(rows, default_config())
        assert any("lap time" in f for f in failures)
        assert any("nominal-fixed" in f for f in failures)

    def test_risk_ratio(self):
        aware = [make_row(experiment="ablation", mode="adaptive-risk-aware", violations=3)]
        unaware = [make_row(experiment="ablation", mode="adaptive-risk-unaware", violations=4)]
        assert acceptance_failures(aware + unaware, default_config())
        aware[0]["violations"] = 1
        assert acceptance_failures(aware + unaware, default_config()) == []


class TestReporting:

    def test_emit_report_writes_outputs(self, tmp_path):
        failures = emit_report({"metrics": passing_curve_rows()}, default_config(), str(tmp_path))
        assert failures == []
        for name in ("metrics.csv", "curve.csv", "curve_adaptive.dat", "curve_scratch-baseline.dat", "summary.json"):
            assert (tmp_path / name).exists(), name
        with open(tmp_path / "metrics.csv") as f:
            reader = csv.DictReader(f)
            assert reader.fieldnames == METRICS_HEADER
            assert len(list(reader)) == 8
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["acceptance_failures"] == []

    def test_format_row_follows_header(self):
        line = format_row(make_row())
        assert line.endswith("\n")
        assert line.split(",")[0] == "curve"
        assert len(line.strip().split(",")) == len(METRICS_HEADER)

    def test_generate_report_lists_failures(self):
        text = generate_report("curve", passing_curve_rows(), ["threshold missed"])
        assert "CURVE" in text and "threshold missed" in text

    def test_provenance(self, tmp_path):
        path = write_provenance(str(tmp_path), "curve", default_config(), 3, {"ckpt.json": "abc"})
        data = json.loads(open(path).read())
        assert data["seed"] == 3 and data["checkpoints"] == {"ckpt.json": "abc"}
        assert len(data["config_hash"]) == 64


class TestTrials:

    def test_trial_row_has_every_column(self, tiny_model, easy_system):
        cfg = tiny_cfg()
        track = straight_track(20.0)
        metrics = run_trial(easy_system, track, PolicyMode.ZERO_CONTEXT, False, [1], tiny_model, cfg)
        assert metrics.steps == 3
        row = trial_row("eval", "zero-context", PolicyMode.ZERO_CONTEXT, easy_system, track, 0, 0, [1, 2],
                        metrics, cfg)
        assert set(row) == set(METRICS_HEADER)
        assert row["seed"] == "1-2"

    def test_repeated_trial_writes_identical_csv_row(self, tiny_model):
        cfg = tiny_cfg()
        system = sample_system([12, 1])
        track = straight_track(20.0)
        lines = []
        for _ in range(2):
            history = History(system.system_id, tiny_model.history_cap)
            metrics = run_trial(system, track, PolicyMode.ADAPTIVE_RISK_AWARE, True, [12, 2], tiny_model, cfg,
                                history)
            row = trial_row("eval", "adaptive-risk-aware", PolicyMode.ADAPTIVE_RISK_AWARE, system, track, 0, 0,
                            [12, 2], metrics, cfg)
            lines.append(format_row(row).encode())
        assert lines[0] == lines[1]

    def test_nominal_mode_needs_nominal_model(self, tiny_model):
        with pytest.raises(ConfigurationError):
            ModelSet(tiny_model).for_mode(PolicyMode.NOMINAL_FIXED)
        assert ModelSet(tiny_model).for_mode(PolicyMode.ZERO_CONTEXT) is tiny_model

    def test_risk_ablation_rows(self, tiny_model):
        rows = experiment_risk_ablation(1, 2, ModelSet(tiny_model), 0, tiny_cfg())
        assert len(rows) == 4
        assert {(r["mode"], r["run_index"]) for r in rows} == {
            ("adaptive-risk-aware", 0), ("adaptive-risk-aware", 1),
            ("adaptive-risk-unaware", 0), ("adaptive-risk-unaware", 1)}

    def test_adaptation_curve_rows(self, tiny_model):
        rows = experiment_adaptation_curve(1, ModelSet(tiny_model, tiny_model), 0, tiny_cfg())
        methods = sorted((r["method"], r["budget"]) for r in rows)
        assert methods == [("adaptive", 0), ("adaptive", 4), ("nominal-fixed", 0),
                           ("scratch-baseline", 0), ("scratch-baseline", 4)]


class TestCommandLine:

    def test_parser(self):
        args = build_parser().parse_args(["eval", "cfg.json", "--mode", "zero-context", "--budget", "50"])
        assert args.command == "eval" and args.mode == "zero-context" and args.budget == 50
        assert not args.publish

    def test_missing_config_is_runtime_error(self, tmp_path):
        assert main(["curve", str(tmp_path / "missing.json")]) == EXIT_RUNTIME

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, monkeypatch):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"bench": {"curve_systems": 1}}))
        monkeypatch.setenv("SIM2REAL_OUTPUT_DIR", str(tmp_path / "out"))
        assert main(["eval", str(config_path)]) == EXIT_RUNTIME
        assert os.path.isdir(tmp_path / "out")
