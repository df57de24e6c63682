#!/usr/bin/env python3
"""
Risk-aware MPPI controller

Each control step shifts the previous nominal action sequence, samples K
perturbed candidates around it, and scores every candidate. Risk-aware
scoring runs N stochastic ADM rollouts per candidate and takes the CVaR
(mean of the worst ceil(alpha * N) costs); risk-unaware scoring runs a
single mean rollout. The nominal sequence becomes the exp(-(J - J_min) / lambda)
weighted average of the candidates, and its first action is executed.

Random substreams are keyed by (seed, 0) for candidate noise and
(seed, 1, k) for candidate k's rollout noise, so results do not depend
on evaluation order.
"""

import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, Any, Optional, Tuple

import numpy as np

from config import LATERAL_ACCEL_LIMIT, MPPI_CONFIG, ConfigurationError
from models import DynamicsModel, rollout_batch
from track import Track, lateral_accel_series, project
from vehicle_sim import ACTION_DIM, STATE_DIM, Action, VehicleState

logger = logging.getLogger(__name__)

DIVERGENCE_COST = 1e9


def seed_words(seed) -> list:
    """Flatten an int or nested tuple seed into a list of nonnegative ints."""
    if seed is None:
        return []
    return [int(s) for s in np.atleast_1d(np.asarray(seed, dtype=np.int64)).reshape(-1)]


@dataclass(frozen=True)
class MPPIConfig:
    horizon: int = MPPI_CONFIG["horizon"]
    candidates: int = MPPI_CONFIG["candidates"]
    stochastic_evals: int = MPPI_CONFIG["stochastic_evals"]
    confidence: float = MPPI_CONFIG["confidence"]
    temperature: float = MPPI_CONFIG["temperature"]
    noise_std: Tuple[float, float] = tuple(MPPI_CONFIG["noise_std"])
    barrier_delta: float = MPPI_CONFIG["barrier_delta"]
    track_barrier_weight: float = MPPI_CONFIG["track_barrier_weight"]
    accel_barrier_weight: float = MPPI_CONFIG["accel_barrier_weight"]
    progress_weight: float = MPPI_CONFIG["progress_weight"]
    smoothness_weight: float = MPPI_CONFIG["smoothness_weight"]
    rollout_noise_scale: float = MPPI_CONFIG["rollout_noise_scale"]
    risk_aware: bool = MPPI_CONFIG["risk_aware"]
    accel_limit: float = LATERAL_ACCEL_LIMIT

    def __post_init__(self):
        if min(self.horizon, self.candidates, self.stochastic_evals) < 1:
            raise ConfigurationError("horizon, candidates and stochastic_evals must all be >= 1")
        if not 0 < self.confidence <= 1:
            raise ConfigurationError(f"confidence must be in (0, 1], got {self.confidence}")
        if self.temperature <= 0 or self.barrier_delta <= 0:
            raise ConfigurationError("temperature and barrier_delta must be positive")
        if len(self.noise_std) != ACTION_DIM or min(self.noise_std) < 0:
            raise ConfigurationError(f"noise_std needs {ACTION_DIM} nonnegative entries")

    @property
    def tail_count(self) -> int:
        return tail_count(self.confidence, self.stochastic_evals)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], **overrides) -> "MPPIConfig":
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in {**data, **overrides}.items() if k in known}
        if "noise_std" in values:
            values["noise_std"] = tuple(float(v) for v in values["noise_std"])
        return cls(**values)


@dataclass(frozen=True)
class Solution:
    nominal: np.ndarray          # (H, 2)
    min_cost: float = 0.0
    mean_cost: float = 0.0
    ess: float = 0.0
    no_solution: bool = False

    @classmethod
    def initial(cls, horizon: int) -> "Solution":
        return cls(np.zeros((horizon, ACTION_DIM)))

# ============================================================================
# COST TERMS
# ============================================================================

def relaxed_barrier(z, delta: float):
    """-ln z above delta, exp(1 - z/delta) - 1 - ln delta at or below; defined for all z."""
    z = np.asarray(z, dtype=np.float64)
    inside = -np.log(np.maximum(z, delta))
    outside = np.exp(np.minimum(1.0 - z / delta, 700.0)) - 1.0 - math.log(delta)
    result = np.where(z > delta, inside, outside)
    return float(result) if result.ndim == 0 else result


def tail_count(alpha: float, n: int) -> int:
    # round first so that e.g. 0.2 * 5 does not ceil to 2
    return max(1, int(math.ceil(round(alpha * n, 9))))


def cvar_of(costs, alpha: float) -> float:
    """Mean of the ceil(alpha * N) largest costs."""
    costs = np.sort(np.asarray(costs, dtype=np.float64).reshape(-1))
    return float(np.mean(costs[-tail_count(alpha, len(costs)):]))


def trajectory_costs(s0: np.ndarray, states: np.ndarray, actions: np.ndarray, track: Track,
                     cfg: MPPIConfig, diverged: Optional[np.ndarray] = None,
                     prev_action: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Stage-cost sums for a batch of predicted trajectories.

    Args:
        s0: (6,) state the rollouts start from
        states: (B, H, 6) predicted successors
        actions: (B, H, 2)
        diverged: (B,) rollouts that get DIVERGENCE_COST
        prev_action: action executed before this sequence (smoothness of step 0)

    Returns:
        (B,) costs
    """
    batch, horizon = states.shape[:2]
    path = np.concatenate([np.broadcast_to(s0, (batch, 1, STATE_DIM)), states], axis=1)
    along, away = project(track, path[..., :2])
    progress_gain = along[:, -1] - along[:, 0]

    track_term = relaxed_barrier(track.width - away[:, 1:], cfg.barrier_delta)

    a_lat = np.zeros((batch, horizon))
    if horizon >= 2:
        a_lat[:, :-1] = lateral_accel_series(path[..., :2], path[..., 2])
        a_lat[:, -1] = a_lat[:, -2]
    accel_term = relaxed_barrier(cfg.accel_limit - np.abs(a_lat), cfg.barrier_delta)

    previous = actions[:, :1] if prev_action is None else np.broadcast_to(prev_action, (batch, 1, ACTION_DIM))
    jumps = np.diff(np.concatenate([previous, actions], axis=1), axis=1)
    smooth_term = np.sum(jumps * jumps, axis=(1, 2))

    cost = (-cfg.progress_weight * progress_gain
            + cfg.track_barrier_weight * np.sum(track_term, axis=1)
            + cfg.accel_barrier_weight * np.sum(accel_term, axis=1)
            + cfg.smoothness_weight * smooth_term)
    if diverged is not None:
        cost = np.where(diverged, DIVERGENCE_COST, cost)
    return np.minimum(cost, DIVERGENCE_COST)


def trajectory_cost(s0: VehicleState, states: np.ndarray, actions: np.ndarray, track: Track,
                    cfg: Optional[MPPIConfig] = None) -> float:
    """Cost of one (H, 6) trajectory driven by (H, 2) actions."""
    cfg = cfg or MPPIConfig()
    return float(trajectory_costs(s0.as_array(), np.asarray(states)[None], np.asarray(actions)[None],
                                  track, cfg)[0])


def cvar_cost(s0: VehicleState, c: np.ndarray, actions: np.ndarray, n: int, alpha: float, seed,
              model: DynamicsModel, track: Track, cfg: Optional[MPPIConfig] = None) -> float:
    """CVaR over n stochastic rollouts of one (H, 2) action sequence."""
    cfg = cfg or MPPIConfig()
    actions = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
    eps = np.random.default_rng(seed_words(seed)).standard_normal((n,) + actions.shape[:1] + (STATE_DIM,))
    batch = np.broadcast_to(actions, (n,) + actions.shape)
    states, diverged = rollout_batch(s0.as_array(), batch, c, model, eps, cfg.rollout_noise_scale)
    if diverged.all():
        return DIVERGENCE_COST
    return cvar_of(trajectory_costs(s0.as_array(), states, batch, track, cfg, diverged), alpha)

# ============================================================================
# MPPI UPDATE
# ============================================================================

def mppi_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    w = np.exp(-(costs - costs.min()) / temperature)
    return w / w.sum()


def shift_nominal(nominal: np.ndarray) -> np.ndarray:
    return np.concatenate([nominal[1:], nominal[-1:]], axis=0)


def score_candidates(s0: np.ndarray, c: np.ndarray, candidates: np.ndarray, cfg: MPPIConfig,
                     model: DynamicsModel, track: Track, seed,
                     prev_action: Optional[np.ndarray] = None) -> np.ndarray:
    """(K, H, 2) candidates -> (K,) CVaR costs (risk-aware) or mean-rollout costs."""
    k, horizon = candidates.shape[:2]
    if not cfg.risk_aware:
        states, diverged = rollout_batch(s0, candidates, c, model)
        return trajectory_costs(s0, states, candidates, track, cfg, diverged, prev_action)

    n = cfg.stochastic_evals
    words = seed_words(seed)
    eps = np.stack([np.random.default_rng(words + [1, i]).standard_normal((n, horizon, STATE_DIM))
                    for i in range(k)])
    batch = np.repeat(candidates, n, axis=0)
    states, diverged = rollout_batch(s0, batch, c, model, eps.reshape(k * n, horizon, STATE_DIM),
                                     cfg.rollout_noise_scale)
    costs = trajectory_costs(s0, states, batch, track, cfg, diverged, prev_action).reshape(k, n)
    tail = np.sort(costs, axis=1)[:, -cfg.tail_count:]
    return tail.mean(axis=1)


def mppi_step(s0: VehicleState, c: np.ndarray, prev: Solution, cfg: MPPIConfig, model: DynamicsModel,
              track: Track, seed, prev_action: Optional[Action] = None) -> Tuple[Action, Solution]:
    """
    One receding-horizon update.

    Returns:
        (action to execute, updated Solution). When every candidate scores
        at the divergence sentinel the action is zero and no_solution is set.
    """
    if prev.nominal.shape != (cfg.horizon, ACTION_DIM):
        raise ConfigurationError(f"Previous solution has shape {prev.nominal.shape}, "
                                 f"expected {(cfg.horizon, ACTION_DIM)}")
    words = seed_words(seed)
    rng = np.random.default_rng(words + [0])
    shifted = shift_nominal(prev.nominal)
    noise = rng.standard_normal((cfg.candidates, cfg.horizon, ACTION_DIM)) * np.asarray(cfg.noise_std)
    candidates = np.clip(shifted[None] + noise, -1.0, 1.0)

    state = s0.as_array()
    last = None if prev_action is None else prev_action.as_array()
    costs = score_candidates(state, c, candidates, cfg, model, track, words, last)

    if np.all(costs >= DIVERGENCE_COST):
        logger.warning("Every MPPI candidate diverged; emitting zero action")
        return Action(0.0, 0.0), Solution(np.zeros_like(shifted), DIVERGENCE_COST, DIVERGENCE_COST, 0.0, True)

    weights = mppi_weights(costs, cfg.temperature)
    nominal = np.clip(np.einsum('k,kha->ha', weights, candidates), -1.0, 1.0)
    solution = Solution(
        nominal=nominal,
        min_cost=float(costs.min()),
        mean_cost=float(costs.mean()),
        ess=float(1.0 / np.sum(weights * weights)),
    )
    return Action.from_array(nominal[0]), solution
