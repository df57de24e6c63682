#!/usr/bin/env python3
"""
Experiment harness and command line for the sim2real adaptation testbed

Subcommands:
    train     collect/train cycles for the adaptive model and the nominal baseline
    eval      drive held-out systems in one policy mode after a history budget
    curve     lap time and violations against collected-history budget, adaptive
              vs. from-scratch baseline vs. nominal-fixed
    ablation  risk-aware vs. risk-unaware over repeated runs on one track
    replay    rerun a trial written by eval and compare its metrics row

Usage:
    python bench_cli.py train default_config.json [--seed 0] [--which both]
    python bench_cli.py eval default_config.json [--mode adaptive-risk-aware] [--budget 0] [--publish]
    python bench_cli.py curve default_config.json [--seed 0] [--publish]
    python bench_cli.py ablation default_config.json [--seed 0] [--publish]
    python bench_cli.py replay default_config.json --trial results/trials/<trial>.json

Outputs land in bench.output_dir (SIM2REAL_OUTPUT_DIR overrides it):
metrics.csv (one row per run), curve.csv, ablation.csv, gnuplot .dat files,
summary.json and provenance.json.

Exit codes: 0 success, 2 an acceptance threshold is unmet, 3 runtime error.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Dict, Any, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

# Add current directory to path for config import
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import LOG_FILE, REFERENCE_FIGURES, ConfigurationError, config_hash, get_log_level, load_config
from controller import MPPIConfig, seed_words
from episode import EpisodeSettings, PolicyMode, RunMetrics, drive
from metrics_publisher import publish_rows
from models import DynamicsModel, History
from tensor_autodiff import file_sha256
from track import Track, generate_track
from training import model_at_budget, run_scratch_baseline, run_training
from vehicle_sim import SimulationDivergence, SystemParams, sample_system

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ACCEPTANCE = 2
EXIT_RUNTIME = 3

CURVE_SEED, ABLATION_SEED, EVAL_SEED = 1000, 2000, 3000

METRICS_HEADER = [
    "experiment", "method", "mode", "system_id", "track_id", "run_index", "budget", "seed",
    "penalty_applied", "lap_time", "penalized_lap_time", "completed", "success", "violations",
    "off_track", "lateral_accel", "no_progress", "resets", "steps", "max_progress",
]
CURVE_HEADER = [
    "method", "budget", "n", "lap_time_mean", "lap_time_se", "penalized_lap_time_mean",
    "penalized_lap_time_se", "violations_mean", "violations_se", "no_progress_mean",
    "no_progress_se", "completion_rate", "success_rate",
]
ABLATION_HEADER = [
    "mode", "run_index", "n", "lap_time_mean", "lap_time_se", "penalized_lap_time_mean",
    "penalized_lap_time_se", "violations_mean", "violations_se", "completion_rate", "success_rate",
]
STEP_HEADER = [
    "system_id", "step", "x", "y", "yaw", "v_long", "v_lat", "yaw_rate", "steer", "throttle",
    "context_norm", "min_cost", "mean_cost", "ess", "progress", "offset", "lateral_accel", "no_solution", "event",
]


@dataclass
class ModelSet:
    adaptive: DynamicsModel
    nominal: Optional[DynamicsModel] = None
    checkpoints: Optional[Dict[str, str]] = None

    def for_mode(self, mode: PolicyMode) -> DynamicsModel:
        if mode is PolicyMode.NOMINAL_FIXED:
            if self.nominal is None:
                raise ConfigurationError("nominal-fixed mode needs the nominal checkpoint; run 'train' first")
            return self.nominal
        return self.adaptive

# ============================================================================
# TRIALS
# ============================================================================

def run_trial(system: SystemParams, track: Track, mode: PolicyMode, adapt: bool, seeds,
              model: DynamicsModel, cfg: Dict[str, Any], history: Optional[History] = None,
              keep_log: bool = False) -> RunMetrics:
    """One test run; a diverging simulation counts as an incomplete lap."""
    mppi = MPPIConfig.from_dict(cfg["mppi"])
    settings = EpisodeSettings.from_config(cfg["bench"])
    try:
        return drive(system, track, model.snapshot(), mode, mppi, settings, seeds,
                     history=history, adapt=adapt, keep_log=keep_log)
    except SimulationDivergence as e:
        logger.error(f"Trial on {system.system_id} diverged: {e}")
        return RunMetrics(lap_time=settings.step_budget, steps=settings.step_budget)


def collect_history(system: SystemParams, track: Track, model: DynamicsModel, cfg: Dict[str, Any],
                    steps: int, seeds) -> History:
    """Drive the adaptive controller for a fixed number of steps, keeping every transition."""
    history = History(system.system_id, model.history_cap)
    if steps <= 0:
        return history
    mppi = MPPIConfig.from_dict(cfg["mppi"])
    settings = EpisodeSettings.from_config(cfg["bench"], step_budget=steps)
    drive(system, track, model.snapshot(), PolicyMode.ADAPTIVE_RISK_AWARE, mppi, settings, seeds,
          history=history, continue_after_lap=True, keep_log=False)
    return history


def trial_row(experiment: str, method: str, mode: PolicyMode, system: SystemParams, track: Track,
              run_index: int, budget: int, seeds, metrics: RunMetrics, cfg: Dict[str, Any]) -> Dict[str, Any]:
    row = {
        "experiment": experiment,
        "method": method,
        "mode": mode.value,
        "system_id": system.system_id,
        "track_id": track.track_id,
        "run_index": run_index,
        "budget": budget,
        "seed": "-".join(str(s) for s in seed_words(seeds)),
        "penalty_applied": int(bool(cfg["bench"]["apply_reset_penalty"])),
    }
    row.update(metrics.row())
    return row


def format_row(row: Dict[str, Any], header: Sequence[str] = METRICS_HEADER) -> str:
    buffer = io.StringIO()
    csv.DictWriter(buffer, fieldnames=header, lineterminator="\n").writerow(row)
    return buffer.getvalue()


def _map(fn: Callable, jobs: List[Any], workers: int) -> List[Any]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]

# ============================================================================
# EXPERIMENTS
# ============================================================================

def _curve_system(job) -> List[Dict[str, Any]]:
    index, words, cfg, models = job
    params = sample_system(words + [index], cfg["randomization"])
    collect_track = generate_track(words + [index, 1], cfg["track"])
    test_track = generate_track(words + [index, 2], cfg["track"])
    budgets = sorted(int(b) for b in cfg["bench"]["curve_budgets"])
    full_history = collect_history(params, collect_track, models.adaptive, cfg, budgets[-1], words + [index, 3])
    scratch_models, _ = run_scratch_baseline(params, collect_track, cfg, budgets[-1], words + [index, 5])
    rows = []
    for budget in budgets:
        seeds = words + [index, 4, budget]
        metrics = run_trial(params, test_track, PolicyMode.ADAPTIVE_RISK_AWARE, True, seeds,
                            models.adaptive, cfg, full_history.prefix(budget))
        rows.append(trial_row("curve", "adaptive", PolicyMode.ADAPTIVE_RISK_AWARE, params, test_track,
                              0, budget, seeds, metrics, cfg))

        seeds = words + [index, 6, budget]
        metrics = run_trial(params, test_track, PolicyMode.ZERO_CONTEXT, False, seeds,
                            model_at_budget(scratch_models, budget), cfg)
        rows.append(trial_row("curve", "scratch-baseline", PolicyMode.ZERO_CONTEXT, params, test_track,
                              0, budget, seeds, metrics, cfg))

    if models.nominal is not None:
        seeds = words + [index, 7]
        metrics = run_trial(params, test_track, PolicyMode.NOMINAL_FIXED, False, seeds, models.nominal, cfg)
        rows.append(trial_row("curve", "nominal-fixed", PolicyMode.NOMINAL_FIXED, params, test_track,
                              0, 0, seeds, metrics, cfg))
    logger.info(f"Curve trials done for {params.system_id}")
    return rows


def experiment_adaptation_curve(n_systems: int, models: ModelSet, seed: int,
                                cfg: Dict[str, Any]) -> List[Dict[str, Any]]:
    """
    Per held-out system: collect history on one track, then test on another
    at each history budget. The adaptive controller keeps adapting during
    the test run. The baseline drives itself on the collection track and is
    retrained from scratch on its own data every retrain interval.
    """
    jobs = [(i, [seed, CURVE_SEED], cfg, models) for i in range(n_systems)]
    return [row for rows in _map(_curve_system, jobs, cfg["bench"]["workers"]) for row in rows]


def _ablation_system(job) -> List[Dict[str, Any]]:
    index, words, cfg, models = job
    params = sample_system(words + [index], cfg["randomization"])
    track = generate_track(words + [index, 1], cfg["track"])
    rows = []
    for mode in (PolicyMode.ADAPTIVE_RISK_AWARE, PolicyMode.ADAPTIVE_RISK_UNAWARE):
        history = History(params.system_id, models.adaptive.history_cap)
        for run in range(cfg["bench"]["ablation_runs"]):
            seeds = words + [index, 2, run]
            metrics = run_trial(params, track, mode, True, seeds, models.adaptive, cfg, history)
            rows.append(trial_row("ablation", "adaptive", mode, params, track, run, 0, seeds, metrics, cfg))
    logger.info(f"Ablation runs done for {params.system_id}")
    return rows


def experiment_risk_ablation(n_systems: int, runs_per_system: int, models: ModelSet, seed: int,
                             cfg: Dict[str, Any]) -> List[Dict[str, Any]]:
    """Risk-aware vs. risk-unaware, repeated runs per system with the history carried over."""
    cfg = {**cfg, "bench": {**cfg["bench"], "ablation_runs": runs_per_system}}
    jobs = [(i, [seed, ABLATION_SEED], cfg, models) for i in range(n_systems)]
    return [row for rows in _map(_ablation_system, jobs, cfg["bench"]["workers"]) for row in rows]

# ============================================================================
# AGGREGATION AND REPORTING
# ============================================================================

def _select(rows: List[Dict[str, Any]], **match) -> List[Dict[str, Any]]:
    return [r for r in rows if all(r[k] == v for k, v in match.items())]


def _mean_se(values: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return float('nan'), float('nan')
    se = float(stats.sem(values)) if len(values) > 1 else 0.0
    return float(values.mean()), se


def _fmt(value: float) -> str:
    return "nan" if not math.isfinite(value) else f"{value:.6g}"


def _aggregate(rows: List[Dict[str, Any]], fields: Sequence[str]) -> Dict[str, Any]:
    out: Dict[str, Any] = {"n": len(rows)}
    for name in fields:
        mean_, se = _mean_se([float(r[name]) for r in rows])
        out[f"{name}_mean"], out[f"{name}_se"] = _fmt(mean_), _fmt(se)
    out["completion_rate"] = _fmt(np.mean([r["completed"] for r in rows]) if rows else float('nan'))
    out["success_rate"] = _fmt(np.mean([r["success"] for r in rows]) if rows else float('nan'))
    return out


def curve_table(rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    table = []
    curve = _select(rows, experiment="curve")
    for method in sorted({r["method"] for r in curve}):
        for budget in sorted({r["budget"] for r in _select(curve, method=method)}):
            group = sorted(_select(curve, method=method, budget=budget), key=lambda r: r["system_id"])
            entry = {"method": method, "budget": budget}
            entry.update(_aggregate(group, ("lap_time", "penalized_lap_time", "violations", "no_progress")))
            table.append(entry)
    return table


def ablation_table(rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    table = []
    ablation = _select(rows, experiment="ablation")
    for mode in sorted({r["mode"] for r in ablation}):
        for run in sorted({r["run_index"] for r in _select(ablation, mode=mode)}):
            group = sorted(_select(ablation, mode=mode, run_index=run), key=lambda r: r["system_id"])
            entry = {"mode": mode, "run_index": run}
            entry.update(_aggregate(group, ("lap_time", "penalized_lap_time", "violations")))
            table.append(entry)
    return table


def ablation_summary(rows: List[Dict[str, Any]]) -> Dict[str, Any]:
    """Violation ratio, first/last-run violations and run 1 vs run 2 paired t-tests."""
    ablation = _select(rows, experiment="ablation")
    summary: Dict[str, Any] = {"reference": dict(REFERENCE_FIGURES)}
    if not ablation:
        return summary
    last_run = max(r["run_index"] for r in ablation)
    for mode in sorted({r["mode"] for r in ablation}):
        group = _select(ablation, mode=mode)
        first = sorted(_select(group, run_index=0), key=lambda r: r["system_id"])
        second = sorted(_select(group, run_index=min(1, last_run)), key=lambda r: r["system_id"])
        entry = {
            "mean_violations": float(np.mean([r["violations"] for r in group])),
            "first_run_violations": float(np.mean([r["violations"] for r in first])),
            "last_run_violations": float(np.mean([r["violations"] for r in _select(group, run_index=last_run)])),
        }
        if last_run >= 1 and len(first) > 1:
            a = np.array([r["penalized_lap_time"] for r in first], dtype=np.float64)
            b = np.array([r["penalized_lap_time"] for r in second], dtype=np.float64)
            if np.any(a != b):
                result = stats.ttest_rel(a, b)
                entry["run1_vs_run2"] = {"t": float(result.statistic), "p": float(result.pvalue)}
        summary[mode] = entry

    aware = summary.get(PolicyMode.ADAPTIVE_RISK_AWARE.value, {}).get("mean_violations")
    unaware = summary.get(PolicyMode.ADAPTIVE_RISK_UNAWARE.value, {}).get("mean_violations")
    if aware is not None and unaware:
        summary["violation_ratio"] = aware / unaware
    summary["reference_violation_ratio"] = (REFERENCE_FIGURES["risk_aware_violations"]
                                            / REFERENCE_FIGURES["risk_unaware_violations"])
    return summary


def _mean_of(rows: List[Dict[str, Any]], name: str) -> float:
    return float(np.mean([float(r[name]) for r in rows])) if rows else float('nan')


def acceptance_failures(rows: List[Dict[str, Any]], cfg: Dict[str, Any]) -> List[str]:
    """Every acceptance threshold the rows fail, as readable messages."""
    acc = cfg["acceptance"]
    failures = []

    curve = _select(rows, experiment="curve")
    adaptive = _select(curve, method="adaptive")
    if adaptive:
        budgets = sorted({r["budget"] for r in adaptive})
        first, last = budgets[0], budgets[-1]
        a_first = _select(adaptive, budget=first)
        a_last = _select(adaptive, budget=last)
        scratch_last = _select(curve, method="scratch-baseline", budget=last)

        completion = _mean_of(a_first, "completed")
        if completion < acc["min_zero_history_completion"]:
            failures.append(f"adaptive completion at {first}-step history is {completion:.2f}, "
                            f"needs {acc['min_zero_history_completion']:.2f}")
        if scratch_last and not (_mean_of(scratch_last, "violations") > _mean_of(a_first, "violations")
                                 and _mean_of(scratch_last, "no_progress") > _mean_of(a_first, "no_progress")):
            failures.append(f"scratch baseline at {last} steps does not exceed the adaptive controller at "
                            f"{first} steps in both violations and no-progress incidents")
        if len(budgets) > 1 and not _mean_of(a_last, "lap_time") < _mean_of(a_first, "lap_time"):
            failures.append(f"adaptive lap time at {last} steps is not below the {first}-step lap time")

        nominal = _select(curve, method="nominal-fixed")
        if nominal:
            target = (1.0 - acc["min_nominal_lap_improvement"]) * _mean_of(nominal, "penalized_lap_time")
            if not _mean_of(a_last, "penalized_lap_time") <= target:
                failures.append(f"adaptive penalized lap time {_mean_of(a_last, 'penalized_lap_time'):.1f} "
                                f"misses the nominal-fixed improvement target {target:.1f}")

    ablation = _select(rows, experiment="ablation")
    if ablation:
        aware = _mean_of(_select(ablation, mode=PolicyMode.ADAPTIVE_RISK_AWARE.value), "violations")
        unaware = _mean_of(_select(ablation, mode=PolicyMode.ADAPTIVE_RISK_UNAWARE.value), "violations")
        if not aware <= acc["max_risk_violation_ratio"] * unaware:
            failures.append(f"risk-aware violations {aware:.3f} exceed "
                            f"{acc['max_risk_violation_ratio']} x risk-unaware {unaware:.3f}")
    return failures


def _write_csv(path: str, header: Sequence[str], rows: List[Dict[str, Any]]) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=header, lineterminator="\n", extrasaction='ignore')
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.info(f"Wrote {len(rows)} rows to {path}")


def _write_dat(path: str, columns: Sequence[str], rows: List[Dict[str, Any]]) -> None:
    with open(path, 'w') as f:
        f.write("# " + " ".join(columns) + "\n")
        for row in rows:
            f.write(" ".join(str(row[c]) for c in columns) + "\n")


def emit_report(tables: Dict[str, Any], cfg: Dict[str, Any], output_dir: str) -> List[str]:
    """
    Write metrics.csv, curve.csv, ablation.csv, gnuplot data and summary.json.

    Args:
        tables: {"metrics": trial rows, "steps": optional per-step rows}

    Returns:
        Acceptance failures (empty when every applicable threshold holds)
    """
    os.makedirs(output_dir, exist_ok=True)
    rows = tables.get("metrics", [])
    _write_csv(os.path.join(output_dir, "metrics.csv"), METRICS_HEADER, rows)
    if tables.get("steps"):
        _write_csv(os.path.join(output_dir, "steps.csv"), STEP_HEADER, tables["steps"])

    summary: Dict[str, Any] = {}
    curve = curve_table(rows)
    if curve:
        _write_csv(os.path.join(output_dir, "curve.csv"), CURVE_HEADER, curve)
        for method in sorted({r["method"] for r in curve}):
            _write_dat(os.path.join(output_dir, f"curve_{method}.dat"),
                       ("budget", "penalized_lap_time_mean", "penalized_lap_time_se",
                        "violations_mean", "violations_se", "no_progress_mean", "no_progress_se"),
                       _select(curve, method=method))
        summary["curve"] = curve
    ablation = ablation_table(rows)
    if ablation:
        _write_csv(os.path.join(output_dir, "ablation.csv"), ABLATION_HEADER, ablation)
        for mode in sorted({r["mode"] for r in ablation}):
            _write_dat(os.path.join(output_dir, f"ablation_{mode}.dat"),
                       ("run_index", "penalized_lap_time_mean", "penalized_lap_time_se",
                        "violations_mean", "violations_se"),
                       _select(ablation, mode=mode))
        summary["ablation"] = ablation_summary(rows)

    failures = acceptance_failures(rows, cfg)
    summary["acceptance_failures"] = failures
    with open(os.path.join(output_dir, "summary.json"), 'w') as f:
        json.dump(summary, f, indent=2, default=str)
    for failure in failures:
        logger.warning(f"Acceptance: {failure}")
    return failures


def generate_report(title: str, rows: List[Dict[str, Any]], failures: List[str]) -> str:
    """Console summary of a finished command."""
    completed = sum(int(r["completed"]) for r in rows)
    violations = sum(int(r["violations"]) for r in rows)
    report = f"""
╔══════════════════════════════════════════════════════════════════════╗
║ {title.upper():^68} ║
╠══════════════════════════════════════════════════════════════════════╣
║ Runs: {len(rows):>62} ║
║ Completed laps: {completed:>52} ║
║ Constraint violations: {violations:>45} ║
║ Acceptance failures: {len(failures):>47} ║
╚══════════════════════════════════════════════════════════════════════╝
"""
    if failures:
        report += "\nUnmet thresholds:\n"
        for failure in failures:
            report += f"  ❌ {failure}\n"
    else:
        report += "\n✅ All applicable thresholds met\n"
    return report


def write_provenance(output_dir: str, command: str, cfg: Dict[str, Any], seed: int,
                     checkpoints: Optional[Dict[str, str]] = None, extra: Optional[Dict[str, Any]] = None) -> str:
    path = os.path.join(output_dir, "provenance.json")
    provenance = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "checkpoints": checkpoints or {},
        "created_at": datetime.now(timezone.utc).isoformat(),
        **(extra or {}),
    }
    with open(path, 'w') as f:
        json.dump(provenance, f, indent=2, default=str)
    logger.info(f"Provenance saved to {path}")
    return path

# ============================================================================
# COMMANDS
# ============================================================================

def load_models(cfg: Dict[str, Any], output_dir: str, need_nominal: bool = False) -> ModelSet:
    """Load the adaptive checkpoint and, if present, the nominal one."""
    adaptive_path = os.path.join(output_dir, cfg["bench"]["checkpoint"])
    nominal_path = os.path.join(output_dir, cfg["bench"]["nominal_checkpoint"])
    if not os.path.exists(adaptive_path):
        raise FileNotFoundError(f"Adaptive checkpoint {adaptive_path} not found; run 'train' first")
    adaptive, _ = DynamicsModel.load(adaptive_path)
    checkpoints = {adaptive_path: file_sha256(adaptive_path)}
    nominal = None
    if os.path.exists(nominal_path):
        nominal, _ = DynamicsModel.load(nominal_path)
        checkpoints[nominal_path] = file_sha256(nominal_path)
    elif need_nominal:
        raise FileNotFoundError(f"Nominal checkpoint {nominal_path} not found; run 'train' first")
    else:
        logger.warning("No nominal checkpoint; nominal-fixed rows are skipped")
    return ModelSet(adaptive.snapshot(), nominal.snapshot() if nominal else None, checkpoints)


def _publish(args, rows: List[Dict[str, Any]], cfg: Dict[str, Any], output_dir: str) -> None:
    if args.publish:
        run_id = f"{args.command}-{args.seed}-{config_hash(cfg)[:12]}"
        publish_rows(rows, run_id, config_hash(cfg), output_dir)


def cmd_train(args, cfg: Dict[str, Any], output_dir: str) -> int:
    reports = {}
    if args.which in ("adaptive", "both"):
        reports["adaptive"] = run_training(cfg, args.seed, output_dir, nominal=False)
    if args.which in ("nominal", "both"):
        reports["nominal"] = run_training(cfg, args.seed, output_dir, nominal=True)

    checkpoints = {r.checkpoint: r.checkpoint_sha256 for r in reports.values()}
    write_provenance(output_dir, "train", cfg, args.seed, checkpoints, {
        label: {"initial_heldout_nll": r.initial_heldout_nll, "final_heldout_nll": r.final_heldout_nll,
                "transitions": r.transitions}
        for label, r in reports.items()})

    failures = []
    adaptive = reports.get("adaptive")
    if adaptive and not adaptive.final_heldout_nll < adaptive.initial_heldout_nll:
        failures.append(f"held-out NLL did not decrease ({adaptive.initial_heldout_nll:.4f} -> "
                        f"{adaptive.final_heldout_nll:.4f})")
    for label, r in reports.items():
        print(f"📊 {label}: held-out NLL {r.initial_heldout_nll:.4f} -> {r.final_heldout_nll:.4f}, "
              f"{r.transitions} transitions, checkpoint {r.checkpoint}")
    for failure in failures:
        print(f"❌ {failure}")
    return EXIT_ACCEPTANCE if failures else EXIT_OK


def _eval_trial(params: SystemParams, collect_track: Track, test_track: Track, mode: PolicyMode,
                budget: int, words: List[int], cfg: Dict[str, Any], models: ModelSet) -> RunMetrics:
    model = models.for_mode(mode)
    history = None
    if mode.use_context:
        history = collect_history(params, collect_track, models.adaptive, cfg, budget, words + [3])
    return run_trial(params, test_track, mode, True, words + [4], model, cfg, history, keep_log=True)


def _eval_system(job) -> Tuple[Dict[str, Any], Dict[str, Any], List[Dict[str, Any]]]:
    index, words, mode, budget, cfg, models = job
    params = sample_system(words + [index], cfg["randomization"])
    collect_track = generate_track(words + [index, 1], cfg["track"])
    test_track = generate_track(words + [index, 2], cfg["track"])
    trial_words = words + [index]
    metrics = _eval_trial(params, collect_track, test_track, mode, budget, trial_words, cfg, models)
    row = trial_row("eval", mode.value, mode, params, test_track, 0, budget, trial_words + [4], metrics, cfg)
    trial = {
        "system": params.to_dict(),
        "collect_track": collect_track.to_dict(),
        "test_track": test_track.to_dict(),
        "mode": mode.value,
        "budget": budget,
        "seed": trial_words,
        "checkpoints": models.checkpoints,
        "row": format_row(row),
    }
    steps = [{
        "system_id": params.system_id, "step": r.step,
        **dict(zip(("x", "y", "yaw", "v_long", "v_lat", "yaw_rate"), r.state)),
        "steer": r.action[0], "throttle": r.action[1], "context_norm": r.context_norm,
        "min_cost": r.min_cost, "mean_cost": r.mean_cost, "ess": r.ess, "progress": r.progress,
        "offset": r.offset, "lateral_accel": r.lateral_accel, "no_solution": int(r.no_solution),
        "event": r.event,
    } for r in metrics.log]
    return row, trial, steps


def cmd_eval(args, cfg: Dict[str, Any], output_dir: str) -> int:
    mode = PolicyMode(args.mode)
    models = load_models(cfg, output_dir, need_nominal=mode is PolicyMode.NOMINAL_FIXED)
    n_systems = args.systems or cfg["bench"]["curve_systems"]
    jobs = [(i, [args.seed, EVAL_SEED], mode, args.budget, cfg, models) for i in range(n_systems)]
    results = _map(_eval_system, jobs, cfg["bench"]["workers"])

    trial_dir = os.path.join(output_dir, "trials")
    os.makedirs(trial_dir, exist_ok=True)
    for row, trial, _ in results:
        with open(os.path.join(trial_dir, f"{row['system_id']}-{row['mode']}-{row['budget']}.json"), 'w') as f:
            json.dump(trial, f, indent=2)

    rows = [r for r, _, _ in results]
    steps = [s for _, _, trial_steps in results for s in trial_steps]
    emit_report({"metrics": rows, "steps": steps}, cfg, output_dir)
    write_provenance(output_dir, "eval", cfg, args.seed, models.checkpoints,
                     {"mode": mode.value, "budget": args.budget, "systems": n_systems})
    _publish(args, rows, cfg, output_dir)
    print(generate_report(f"eval {mode.value}", rows, []))
    return EXIT_OK


def cmd_curve(args, cfg: Dict[str, Any], output_dir: str) -> int:
    models = load_models(cfg, output_dir)
    rows = experiment_adaptation_curve(cfg["bench"]["curve_systems"], models, args.seed, cfg)
    failures = emit_report({"metrics": rows}, cfg, output_dir)
    write_provenance(output_dir, "curve", cfg, args.seed, models.checkpoints)
    _publish(args, rows, cfg, output_dir)
    print(generate_report("adaptation curve", rows, failures))
    return EXIT_ACCEPTANCE if failures else EXIT_OK


def cmd_ablation(args, cfg: Dict[str, Any], output_dir: str) -> int:
    models = load_models(cfg, output_dir)
    rows = experiment_risk_ablation(cfg["bench"]["ablation_systems"], cfg["bench"]["ablation_runs"],
                                    models, args.seed, cfg)
    failures = emit_report({"metrics": rows}, cfg, output_dir)
    write_provenance(output_dir, "ablation", cfg, args.seed, models.checkpoints)
    _publish(args, rows, cfg, output_dir)
    summary = ablation_summary(rows)
    if "violation_ratio" in summary:
        print(f"📊 Violation ratio risk-aware/risk-unaware: {summary['violation_ratio']:.3f} "
              f"(reference {summary['reference_violation_ratio']:.3f})")
    print(generate_report("risk ablation", rows, failures))
    return EXIT_ACCEPTANCE if failures else EXIT_OK


def cmd_replay(args, cfg: Dict[str, Any], output_dir: str) -> int:
    with open(args.trial, 'r') as f:
        trial = json.load(f)
    models = load_models(cfg, output_dir, need_nominal=trial["mode"] == PolicyMode.NOMINAL_FIXED.value)
    if trial.get("checkpoints") and trial["checkpoints"] != models.checkpoints:
        logger.warning("Checkpoint hashes differ from the recorded trial; the replay may not match")

    params = SystemParams.from_dict(trial["system"])
    collect_track = Track.from_dict(trial["collect_track"])
    test_track = Track.from_dict(trial["test_track"])
    mode = PolicyMode(trial["mode"])
    words = [int(w) for w in trial["seed"]]
    metrics = _eval_trial(params, collect_track, test_track, mode, int(trial["budget"]), words, cfg, models)
    row = format_row(trial_row("eval", mode.value, mode, params, test_track, 0, int(trial["budget"]),
                               words + [4], metrics, cfg))
    if row == trial["row"]:
        print("✅ Replay matches the recorded metrics row")
        return EXIT_OK
    print("❌ Replay differs from the recorded metrics row")
    print(f"  recorded: {trial['row'].strip()}")
    print(f"  replayed: {row.strip()}")
    return EXIT_ACCEPTANCE


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "curve": cmd_curve,
    "ablation": cmd_ablation,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Sim2real adaptation testbed")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="Path to the JSON config file")
        p.add_argument("--seed", type=int, default=0, help="Base seed for every random stream")
        p.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging")
        if name in ("eval", "curve", "ablation"):
            p.add_argument("--publish", action="store_true", help="Bulk-index metrics rows to Elasticsearch")
    sub.choices["train"].add_argument("--which", choices=("adaptive", "nominal", "both"), default="both")
    sub.choices["eval"].add_argument("--mode", choices=[m.value for m in PolicyMode],
                                     default=PolicyMode.ADAPTIVE_RISK_AWARE.value)
    sub.choices["eval"].add_argument("--budget", type=int, default=0, help="Steps of history collected first")
    sub.choices["eval"].add_argument("--systems", type=int, default=0, help="Override bench.curve_systems")
    sub.choices["replay"].add_argument("--trial", required=True, help="Trial JSON written by eval")
    return parser


def setup_logging(output_dir: str, verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, get_log_level(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(output_dir, LOG_FILE)),
            logging.StreamHandler(sys.stdout)
        ],
        force=True
    )


def main(argv: Optional[List[str]] = None) -> int:
    """Main execution function."""
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigurationError, OSError, json.JSONDecodeError) as e:
        print(f"Error: could not load config '{args.config}': {e}")
        return EXIT_RUNTIME

    output_dir = cfg["bench"]["output_dir"]
    os.makedirs(output_dir, exist_ok=True)
    setup_logging(output_dir, args.verbose)
    logger.info(f"Starting {args.command} with config {args.config} (seed {args.seed})")

    try:
        return COMMANDS[args.command](args, cfg, output_dir)
    except KeyboardInterrupt:
        print("\nCancelled by user.")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"{args.command} failed: {str(e)}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
