#!/usr/bin/env python3
"""
Learned components: the system-identification transformer (SIT) and the
adaptive dynamics model (ADM), plus probabilistic rollouts through the ADM.

The SIT maps an unordered set of observed transitions to a fixed-size
context vector. The ADM is an LSTM conditioned on that context which
predicts a Gaussian over the body-frame state delta, parameterized by its
mean and a lower-triangular scale factor with a floored softplus diagonal.

Transition feature layout (FEATURE_DIM = 11), all in the frame of s:
    0 v_long   1 v_lat   2 yaw_rate   3 steer   4 throttle
    5 dx_body  6 dy_body  7 dyaw  8 dv_long  9 dv_lat  10 dyaw_rate

ADM input layout: v_long, v_lat, yaw_rate, steer, throttle, context[0:C]
"""

import logging
from dataclasses import dataclass
from typing import Dict, Any, List, Optional, Sequence, Tuple

import numpy as np

from config import MODEL_CONFIG, ConfigurationError
from tensor_autodiff import (
    EncoderLayer,
    LSTMCell,
    Linear,
    Module,
    Tensor,
    concat,
    load_checkpoint,
    mean,
    relu,
    reshape,
    save_checkpoint,
    softplus,
    tril_pairs,
)
from vehicle_sim import STATE_DIM, Action, Transition, VehicleState, wrap_angle

logger = logging.getLogger(__name__)

FEATURE_DIM = 11
DYNAMICS_INPUT_DIM = 5
LOWER_DIM = STATE_DIM * (STATE_DIM - 1) // 2
_TRIL_ROWS, _TRIL_COLS = (np.array(ix) for ix in zip(*tril_pairs(STATE_DIM)))


class ModelDivergence(RuntimeError):
    """Raised when a network produces non-finite output."""

# ============================================================================
# FEATURES AND FRAMES
# ============================================================================

def body_delta(s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    """s_next relative to s, positions rotated into s's frame. Works on (..., 6)."""
    dx = s_next[..., 0] - s[..., 0]
    dy = s_next[..., 1] - s[..., 1]
    cos_y, sin_y = np.cos(s[..., 2]), np.sin(s[..., 2])
    return np.stack([
        cos_y * dx + sin_y * dy,
        -sin_y * dx + cos_y * dy,
        wrap_angle(s_next[..., 2] - s[..., 2]),
        s_next[..., 3] - s[..., 3],
        s_next[..., 4] - s[..., 4],
        s_next[..., 5] - s[..., 5],
    ], axis=-1)


def apply_body_delta(s: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Inverse of body_delta: compose a body-frame delta onto (..., 6) states."""
    cos_y, sin_y = np.cos(s[..., 2]), np.sin(s[..., 2])
    return np.stack([
        s[..., 0] + cos_y * delta[..., 0] - sin_y * delta[..., 1],
        s[..., 1] + sin_y * delta[..., 0] + cos_y * delta[..., 1],
        wrap_angle(s[..., 2] + delta[..., 2]),
        s[..., 3] + delta[..., 3],
        s[..., 4] + delta[..., 4],
        s[..., 5] + delta[..., 5],
    ], axis=-1)


def featurize_arrays(s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    return np.concatenate([s[..., 3:6], a, body_delta(s, s_next)], axis=-1)


def featurize_transition(t: Transition) -> np.ndarray:
    return featurize_arrays(t.s.as_array(), t.a.as_array(), t.s_next.as_array())


class History:
    """Transitions observed on one target system, in time order."""

    def __init__(self, system_id: str = "", capacity: int = MODEL_CONFIG["history_cap"]):
        self.system_id = system_id
        self.capacity = capacity
        self._transitions: List[Transition] = []
        self._features: List[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._transitions)

    def append(self, t: Transition) -> None:
        self._transitions.append(t)
        self._features.append(featurize_transition(t))

    def extend(self, transitions: Sequence[Transition]) -> None:
        for t in transitions:
            self.append(t)

    def prefix(self, n: int) -> "History":
        clone = History(self.system_id, self.capacity)
        clone._transitions = self._transitions[:n]
        clone._features = self._features[:n]
        return clone

    @property
    def transitions(self) -> Tuple[Transition, ...]:
        return tuple(self._transitions)

    def features(self, seed=None) -> np.ndarray:
        """(n, FEATURE_DIM) features, uniformly subsampled to capacity when longer."""
        if not self._features:
            return np.zeros((0, FEATURE_DIM))
        return subsample(np.stack(self._features), self.capacity, seed)


def subsample(features: np.ndarray, cap: int, seed=None) -> np.ndarray:
    if len(features) <= cap:
        return features
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(features), size=cap, replace=False))
    return features[keep]

# ============================================================================
# NETWORKS
# ============================================================================

class SystemIdentificationTransformer(Module):
    """[SYS] token + embedded transitions -> encoder stack -> mean pool -> context."""

    def __init__(self, cfg: Dict[str, Any], rng: np.random.Generator):
        width = cfg["sit_width"]
        self.embed = Linear(FEATURE_DIM, width, rng)
        self.sys_token = Tensor(rng.normal(0.0, 1.0, size=(1, width)), requires_grad=True)
        self.layers = [EncoderLayer(width, cfg["sit_heads"], cfg["sit_ffn_width"], rng)
                       for _ in range(cfg["sit_layers"])]
        self.project = Linear(width, cfg["context_dim"], rng)

    def __call__(self, features: np.ndarray) -> Tensor:
        """(n, FEATURE_DIM) -> (1, context_dim); n may be 0."""
        tokens = self.sys_token
        if len(features):
            tokens = concat([self.sys_token, self.embed(features)], axis=0)
        for layer in self.layers:
            tokens = layer(tokens)
        return self.project(mean(tokens, axis=0, keepdims=True))


class AdaptiveDynamicsModel(Module):
    def __init__(self, cfg: Dict[str, Any], rng: np.random.Generator):
        self.context_dim = cfg["context_dim"]
        self.scale_floor = cfg["scale_floor"]
        self.lstm = LSTMCell(DYNAMICS_INPUT_DIM + cfg["context_dim"], cfg["adm_hidden"], rng)
        self.hidden_layer = Linear(cfg["adm_hidden"], cfg["adm_head_width"], rng)
        self.head = Linear(cfg["adm_head_width"], 2 * STATE_DIM + LOWER_DIM, rng)

    def __call__(self, inputs, context, hidden) -> Tuple[Tensor, Tensor, Tensor, Tuple[Tensor, Tensor]]:
        """
        Args:
            inputs: (B, 5) velocities and action
            context: (B, context_dim)
            hidden: LSTM (h, c), each (B, adm_hidden)

        Returns:
            (mean (B, 6), diag (B, 6), lower (B, 15), hidden')
        """
        out, hidden = self.lstm(concat([inputs, context], axis=-1), hidden)
        raw = self.head(relu(self.hidden_layer(out)))
        mean_ = raw[:, :STATE_DIM]
        diag = softplus(raw[:, STATE_DIM:2 * STATE_DIM]) + self.scale_floor
        lower = raw[:, 2 * STATE_DIM:]
        return mean_, diag, lower, hidden


@dataclass(frozen=True)
class GaussianTransition:
    mean: np.ndarray        # (..., 6) body-frame delta
    scale_tril: np.ndarray  # (..., 6, 6)

    @classmethod
    def from_parts(cls, mean_: np.ndarray, diag: np.ndarray, lower: np.ndarray) -> "GaussianTransition":
        return cls(mean_, scale_tril(diag, lower))

    @property
    def covariance(self) -> np.ndarray:
        return self.scale_tril @ np.swapaxes(self.scale_tril, -1, -2)


def scale_tril(diag: np.ndarray, lower: np.ndarray) -> np.ndarray:
    tril = np.zeros(diag.shape[:-1] + (STATE_DIM, STATE_DIM))
    idx = np.arange(STATE_DIM)
    tril[..., idx, idx] = diag
    tril[..., _TRIL_ROWS, _TRIL_COLS] = lower
    return tril


class DynamicsModel(Module):
    """SIT and ADM trained jointly; parameters are named sit.* and adm.*."""

    def __init__(self, cfg: Optional[Dict[str, Any]] = None, seed: int = 0):
        cfg = {**MODEL_CONFIG, **(cfg or {})}
        if cfg["context_dim"] < 1 or cfg["history_cap"] < 1:
            raise ConfigurationError("context_dim and history_cap must be positive")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.sit = SystemIdentificationTransformer(cfg, rng)
        self.adm = AdaptiveDynamicsModel(cfg, rng)

    @property
    def context_dim(self) -> int:
        return self.cfg["context_dim"]

    @property
    def history_cap(self) -> int:
        return self.cfg["history_cap"]

    @property
    def divergence_bound(self) -> float:
        return self.cfg["divergence_bound"]

    def zero_context(self) -> np.ndarray:
        return np.zeros(self.context_dim)

    def snapshot(self) -> "DynamicsModel":
        """Read-only copy for control and collection; shares nothing with self."""
        return self.frozen_copy()

    def save(self, path: str, metadata: Optional[Dict[str, Any]] = None) -> str:
        return save_checkpoint(path, self.named_parameters(), {"model_config": self.cfg, **(metadata or {})})

    @classmethod
    def load(cls, path: str) -> Tuple["DynamicsModel", Dict[str, Any]]:
        state, metadata = load_checkpoint(path)
        model = cls(metadata.get("model_config"))
        model.load_state_dict(state)
        return model, metadata

# ============================================================================
# ENCODING, PREDICTION, ROLLOUT
# ============================================================================

def sit_encode(h: History, model: DynamicsModel, seed=None) -> np.ndarray:
    """Context vector for a history; never modifies it."""
    features = h.features(seed)
    if len(features) > model.history_cap:
        features = subsample(features, model.history_cap, seed)
    context = model.sit(features).data.reshape(-1)
    if not np.all(np.isfinite(context)):
        raise ModelDivergence(f"Non-finite context for history of {len(h)} transitions")
    return context


def adm_predict(s: VehicleState, a: Action, c: np.ndarray, model: DynamicsModel,
                hidden=None) -> Tuple[GaussianTransition, Tuple[Tensor, Tensor]]:
    """Single-step prediction; hidden=None starts from the zero LSTM state."""
    if hidden is None:
        hidden = model.adm.lstm.zero_state(1)
    inputs = np.concatenate([s.as_array()[3:6], a.clamped().as_array()])[None, :]
    mean_, diag, lower, hidden = model.adm(inputs, np.asarray(c, dtype=np.float64).reshape(1, -1), hidden)
    if not (np.all(np.isfinite(mean_.data)) and np.all(np.isfinite(lower.data)) and np.all(np.isfinite(diag.data))):
        raise ModelDivergence("ADM produced non-finite output")
    return GaussianTransition.from_parts(mean_.data[0], diag.data[0], lower.data[0]), hidden


def rollout_batch(s0: np.ndarray, actions: np.ndarray, c: np.ndarray, model: DynamicsModel,
                  eps: Optional[np.ndarray] = None,
                  noise_scale: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Chain ADM predictions over B action sequences at once.

    Args:
        s0: (6,) or (B, 6) start states
        actions: (B, H, 2), clamped to [-1, 1] here
        c: (context_dim,) or (B, context_dim)
        eps: (B, H, 6) standard normal draws, or None for mean chaining
        noise_scale: multiplier on the predicted scale factor

    Returns:
        states (B, H, 6); diverged (B,) bool. A diverged rollout holds its
        last sane state for the remaining steps.
    """
    actions = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
    batch, horizon = actions.shape[:2]
    state = np.array(np.broadcast_to(s0, (batch, STATE_DIM)), dtype=np.float64)
    context = np.broadcast_to(np.asarray(c, dtype=np.float64), (batch, model.context_dim))
    hidden = model.adm.lstm.zero_state(batch)
    bound = model.divergence_bound

    states = np.empty((batch, horizon, STATE_DIM))
    diverged = np.zeros(batch, dtype=bool)
    for t in range(horizon):
        inputs = np.concatenate([state[:, 3:6], actions[:, t]], axis=1)
        mean_, diag, lower, hidden = model.adm(inputs, context, hidden)
        delta = mean_.data
        if eps is not None and noise_scale > 0:
            tril = scale_tril(diag.data, lower.data)
            delta = delta + noise_scale * np.einsum('bij,bj->bi', tril, eps[:, t])
        proposed = apply_body_delta(state, delta)
        bad = ~np.all(np.isfinite(proposed), axis=1) | np.any(np.abs(proposed) > bound, axis=1)
        diverged |= bad
        state = np.where(diverged[:, None], state, proposed)
        if np.any(bad):
            h, cell = hidden
            hidden = (Tensor(np.nan_to_num(h.data)), Tensor(np.nan_to_num(cell.data)))
        states[:, t] = state
    if diverged.any():
        logger.debug(f"{int(diverged.sum())}/{batch} rollouts diverged")
    return states, diverged


def rollout_sample(s0: VehicleState, actions: np.ndarray, c: np.ndarray, model: DynamicsModel,
                   seed=None) -> Tuple[np.ndarray, bool]:
    """One stochastic rollout of an (H, 2) action sequence; deterministic per seed."""
    actions = np.asarray(actions, dtype=np.float64)[None]
    eps = np.random.default_rng(seed).standard_normal((1, actions.shape[1], STATE_DIM))
    states, diverged = rollout_batch(s0.as_array(), actions, c, model, eps)
    return states[0], bool(diverged[0])


def rollout_mean(s0: VehicleState, actions: np.ndarray, c: np.ndarray,
                 model: DynamicsModel) -> Tuple[np.ndarray, bool]:
    states, diverged = rollout_batch(s0.as_array(), np.asarray(actions, dtype=np.float64)[None], c, model)
    return states[0], bool(diverged[0])
