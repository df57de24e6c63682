#!/usr/bin/env python3
"""
Configuration module for the sim2real adaptation testbed

This module holds the default settings for every part of the testbed
(simulator randomization, tracks, networks, controller, training and the
benchmark harness), loads the human-editable JSON config file on top of
them, and validates the result. Elasticsearch settings for optional metrics
publishing are read from environment variables.
"""

import copy
import hashlib
import json
import os
from typing import Dict, Any, Tuple, Optional


class ConfigurationError(ValueError):
    """Raised when a configuration value violates its contract."""


# ============================================================================
# SIMULATOR (vehicle_sim)
# ============================================================================

DT = 0.1               # control period in seconds (10 Hz)
GRAVITY = 9.81
MAX_ACTUATION_DELAY = 3

# key -> [lo, hi]; log-uniform keys are listed in LOG_UNIFORM_KEYS
RANDOMIZATION_RANGES = {
    "mass": [2.0, 6.0],
    "yaw_inertia_per_kg": [0.015, 0.03],
    "wheelbase": [0.25, 0.40],
    "cg_front_fraction": [0.40, 0.60],
    "cornering_stiffness_front": [20.0, 60.0],
    "cornering_stiffness_rear": [25.0, 70.0],
    "friction_coeff": [0.4, 1.2],
    "steer_scale": [0.25, 0.55],
    "steer_bias": [-0.05, 0.05],
    "throttle_gain": [8.0, 30.0],
    "motor_time_constant": [0.05, 0.5],
    "rolling_drag": [3.0, 8.0],
    "actuation_delay_steps": [0, 3],
    "process_noise_level": [0.2, 1.0],
}

LOG_UNIFORM_KEYS = (
    "cornering_stiffness_front",
    "cornering_stiffness_rear",
    "friction_coeff",
    "throttle_gain",
    "rolling_drag",
)

# per-state std at process_noise_level = 1: x, y, yaw, v_long, v_lat, yaw_rate
BASE_PROCESS_NOISE = [0.004, 0.004, 0.004, 0.02, 0.02, 0.03]

# ============================================================================
# TRACK
# ============================================================================

TRACK_CONFIG = {
    "length_range": [25.0, 40.0],
    "max_curvature": 0.4,       # 1/m, i.e. minimum turn radius 2.5 m
    "curvature_step_std": 0.08,
    "resolution": 0.25,
    "width": 1.0,
    "lead_in": 2.0,
    "max_attempts": 50,
}

LATERAL_ACCEL_LIMIT = 4.0
LAP_COMPLETION_MARGIN = 0.1

# ============================================================================
# NETWORKS (models / tensor_autodiff)
# ============================================================================

MODEL_CONFIG = {
    "context_dim": 32,
    "sit_width": 64,
    "sit_heads": 4,
    "sit_layers": 2,
    "sit_ffn_width": 128,
    "adm_hidden": 64,
    "adm_head_width": 64,
    "history_cap": 512,
    "scale_floor": 1e-4,
    "divergence_bound": 1e3,
}

# ============================================================================
# CONTROLLER (Risk-Aware MPPI)
# ============================================================================

MPPI_CONFIG = {
    "horizon": 25,
    "candidates": 256,
    "stochastic_evals": 8,
    "confidence": 0.2,
    "temperature": 0.5,
    "noise_std": [0.3, 0.3],
    "barrier_delta": 0.05,
    "track_barrier_weight": 1.0,
    "accel_barrier_weight": 1.0,
    "progress_weight": 10.0,
    "smoothness_weight": 0.1,
    "rollout_noise_scale": 1.0,
    "risk_aware": True,
}

# ============================================================================
# TRAINING
# ============================================================================

TRAINING_CONFIG = {
    "cycles": 10,
    "systems_per_cycle": 8,
    "steps_per_system": 300,
    "updates_per_cycle": 200,
    "batch_size": 32,
    "learning_rate": 3e-4,
    "target_window": 5,
    "max_nan_failures": 3,
    "scratch_retrain_interval": 250,
    "scratch_updates": 150,
    "collect_candidates": 64,
    "collect_stochastic_evals": 4,
    "heldout_systems": 4,
}

# ============================================================================
# BENCHMARK HARNESS
# ============================================================================

BENCH_CONFIG = {
    "step_budget": 600,
    "no_progress_window": 20,
    "no_progress_distance": 0.05,
    "reset_penalty_steps": 100,
    "apply_reset_penalty": False,
    "curve_systems": 20,
    "curve_budgets": [0, 50, 100, 250, 500],
    "ablation_systems": 30,
    "ablation_runs": 5,
    "workers": 1,
    "output_dir": "results",
    "checkpoint": "checkpoints/adaptive_latest.json",
    "nominal_checkpoint": "checkpoints/nominal_latest.json",
}

ACCEPTANCE_CONFIG = {
    "min_zero_history_completion": 0.9,
    "max_risk_violation_ratio": 0.5,
    "min_nominal_lap_improvement": 0.15,
}

# Reference figures printed next to measured results
REFERENCE_FIGURES = {
    "risk_aware_violations": 0.015,
    "risk_unaware_violations": 0.49,
    "lap_time_improvement": 0.41,
}

DEFAULTS = {
    "randomization": RANDOMIZATION_RANGES,
    "track": TRACK_CONFIG,
    "model": MODEL_CONFIG,
    "mppi": MPPI_CONFIG,
    "training": TRAINING_CONFIG,
    "bench": BENCH_CONFIG,
    "acceptance": ACCEPTANCE_CONFIG,
}

# Logging Configuration
LOG_LEVEL = "INFO"
LOG_FILE = "sim2real.log"

# ============================================================================
# ELASTICSEARCH (optional metrics publishing)
# ============================================================================

ES_INDEX = "sim2real-runs"
ES_VERIFY_CERTS = False

INDEX_MAPPING = {
    "mappings": {
        "properties": {
            "run_id": {"type": "keyword"},
            "experiment": {"type": "keyword"},
            "mode": {"type": "keyword"},
            "system_id": {"type": "keyword"},
            "run_index": {"type": "integer"},
            "budget": {"type": "integer"},
            "lap_time": {"type": "double"},
            "completed": {"type": "boolean"},
            "violations": {"type": "integer"},
            "off_track": {"type": "integer"},
            "lateral_accel": {"type": "integer"},
            "no_progress": {"type": "integer"},
            "resets": {"type": "integer"},
            "config_hash": {"type": "keyword"},
            "indexed_at": {"type": "date"},
        }
    }
}

# ============================================================================
# LOADING AND MERGING
# ============================================================================

def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def default_config() -> Dict[str, Any]:
    """Return a fresh copy of the built-in configuration."""
    return copy.deepcopy(DEFAULTS)


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """
    Load a JSON config file over the defaults and apply env overrides.

    Args:
        path: Path to a JSON config file, or None for defaults only

    Returns:
        Merged configuration dictionary

    Raises:
        ConfigurationError: unknown section or invalid values
    """
    cfg = default_config()
    if path:
        with open(path, 'r') as f:
            user_cfg = json.load(f)
        unknown = sorted(set(user_cfg) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"Unknown config sections: {', '.join(unknown)}")
        cfg = _deep_merge(cfg, user_cfg)

    output_dir = os.environ.get('SIM2REAL_OUTPUT_DIR')
    if output_dir:
        cfg['bench']['output_dir'] = output_dir
    workers = os.environ.get('SIM2REAL_WORKERS')
    if workers:
        cfg['bench']['workers'] = int(workers)

    is_valid, error_msg = validate_config(cfg)
    if not is_valid:
        raise ConfigurationError(f"Invalid configuration: {error_msg}")
    return cfg


def config_hash(cfg: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a config."""
    canonical = json.dumps(cfg, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def get_log_level() -> str:
    return os.environ.get('SIM2REAL_LOG_LEVEL', LOG_LEVEL).upper()

# ============================================================================
# CONFIGURATION VALIDATION
# ============================================================================

def validate_ranges(ranges: Dict[str, Any]) -> Tuple[bool, str]:
    """Check every randomization range is a nonempty [lo, hi] interval."""
    for key, bounds in ranges.items():
        if not isinstance(bounds, (list, tuple)) or len(bounds) != 2:
            return False, f"Range '{key}' must be [lo, hi]"
        lo, hi = bounds
        if lo > hi:
            return False, f"Range '{key}' is inverted: [{lo}, {hi}]"
        if key in LOG_UNIFORM_KEYS and lo <= 0:
            return False, f"Range '{key}' must be strictly positive for log-uniform sampling"
    cg = ranges.get("cg_front_fraction", [0.5, 0.5])
    if not (0 < cg[0] and cg[1] < 1):
        return False, "cg_front_fraction must lie inside (0, 1)"
    delay = ranges.get("actuation_delay_steps", [0, 0])
    if delay[0] < 0 or delay[1] > MAX_ACTUATION_DELAY:
        return False, f"actuation_delay_steps must lie in [0, {MAX_ACTUATION_DELAY}]"
    return True, "Ranges are valid"


def validate_config(cfg: Dict[str, Any]) -> Tuple[bool, str]:
    """
    Validate a merged configuration.

    Returns:
        Tuple of (is_valid: bool, error_message: str)
    """
    ok, msg = validate_ranges(cfg['randomization'])
    if not ok:
        return ok, msg

    track = cfg['track']
    if track['width'] <= 0:
        return False, "Track width must be positive"
    if track['resolution'] <= 0 or track['resolution'] > 0.25:
        return False, "Track resolution must lie in (0, 0.25] m"
    lo, hi = track['length_range']
    if lo <= 0 or lo > hi:
        return False, "Track length_range must be a positive nonempty interval"
    if track['max_curvature'] < 0:
        return False, "Track max_curvature must be nonnegative"

    model = cfg['model']
    if model['sit_width'] % model['sit_heads'] != 0:
        return False, "SIT width must be divisible by the head count"
    if model['history_cap'] < 1:
        return False, "history_cap must be at least 1"

    mppi = cfg['mppi']
    for key in ('horizon', 'candidates', 'stochastic_evals'):
        if mppi[key] < 1:
            return False, f"mppi.{key} must be at least 1"
    if not 0 < mppi['confidence'] <= 1:
        return False, "mppi.confidence must lie in (0, 1]"
    if mppi['temperature'] <= 0 or mppi['barrier_delta'] <= 0:
        return False, "mppi.temperature and mppi.barrier_delta must be positive"
    if len(mppi['noise_std']) != 2:
        return False, "mppi.noise_std needs one entry per action channel"

    training = cfg['training']
    if training['batch_size'] < 1 or training['target_window'] < 1:
        return False, "training.batch_size and training.target_window must be at least 1"
    if training['learning_rate'] < 0:
        return False, "training.learning_rate must be nonnegative"

    bench = cfg['bench']
    if bench['no_progress_window'] < 1 or bench['step_budget'] < 1:
        return False, "bench.no_progress_window and bench.step_budget must be at least 1"

    return True, "Configuration is valid"

# ============================================================================
# PUBLISHING CONFIGURATION
# ============================================================================

PUBLISH_ENV_PREFIX = "SIM2REAL_ES_"
INDEX_FORBIDDEN_CHARS = set(' "*\\<|,>/?#:')


def publishing_config_from_env() -> Dict[str, Any]:
    """
    Cluster settings for --publish, read from SIM2REAL_ES_* variables.

    SIM2REAL_ES_URL, SIM2REAL_ES_INDEX (default sim2real-runs),
    SIM2REAL_ES_VERIFY_CERTS (1/true/yes), and either SIM2REAL_ES_API_KEY or
    SIM2REAL_ES_USERNAME plus SIM2REAL_ES_PASSWORD. An API key takes
    precedence over basic credentials.
    """
    env = {key[len(PUBLISH_ENV_PREFIX):].lower(): value
           for key, value in os.environ.items() if key.startswith(PUBLISH_ENV_PREFIX)}
    verify = env.get('verify_certs')
    config = {
        'cluster_url': env.get('url'),
        'index': env.get('index', ES_INDEX),
        'verify_certs': ES_VERIFY_CERTS if verify is None else verify.strip().lower() in ('1', 'true', 'yes'),
    }
    if env.get('api_key'):
        config.update(auth_type='api_key', api_key=env['api_key'])
    else:
        config.update(auth_type='basic', username=env.get('username'), password=env.get('password'))
    return config


def validate_publishing_config(config: Dict[str, Any]) -> Tuple[bool, str]:
    """(ok, reason) for a publishing config; reason names the variable to fix."""
    url = config.get('cluster_url')
    if not url:
        return False, "SIM2REAL_ES_URL is not set; metrics stay local"
    if not url.startswith(('http://', 'https://')):
        return False, f"SIM2REAL_ES_URL needs an http(s) scheme, got {url!r}"

    if config.get('auth_type', 'basic') == 'api_key':
        if not config.get('api_key'):
            return False, "SIM2REAL_ES_API_KEY is empty"
    else:
        missing = [name for name in ('username', 'password') if not config.get(name)]
        if missing:
            names = " and ".join(f"SIM2REAL_ES_{name.upper()}" for name in missing)
            return False, f"{names} missing for basic auth (or set SIM2REAL_ES_API_KEY)"

    index = config.get('index') or ''
    if not index:
        return False, "SIM2REAL_ES_INDEX is empty"
    if index != index.lower():
        return False, f"Run index {index!r} must be lowercase"
    bad = sorted(INDEX_FORBIDDEN_CHARS & set(index))
    if bad or index.startswith(('-', '_', '+')):
        return False, f"Run index {index!r} has characters Elasticsearch rejects: {''.join(bad) or index[0]}"

    return True, f"Publishing to {index} at {url}"
