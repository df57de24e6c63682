#!/usr/bin/env python3
"""
Parametric planar vehicle simulator with randomized physics

A dynamic bicycle model stands in for a full multibody simulator. Each
sampled SystemParams is one member of the distribution of transition
functions: mass, inertia, geometry, tire stiffness, friction, actuator
scale/bias/lag/delay, rolling drag and process noise all vary per system.

The model runs at the 10 Hz control period with internal substeps:
    - steering passes through a FIFO of actuation_delay_steps commands,
      then steer_scale * command + steer_bias
    - the longitudinal motor force follows a first-order lag toward
      throttle_gain * throttle (exact exponential discretization per step)
    - linear tire forces, each axle saturated at its share of mu * m * g
    - semi-implicit Euler on the body-frame velocities, then the pose
    - additive Gaussian process noise scaled per state component
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Any, Optional, Sequence, Tuple, Union

import numpy as np

from config import (
    BASE_PROCESS_NOISE,
    DT,
    GRAVITY,
    LOG_UNIFORM_KEYS,
    RANDOMIZATION_RANGES,
    ConfigurationError,
)

logger = logging.getLogger(__name__)

STATE_DIM = 6
ACTION_DIM = 2
SUBSTEPS = 20
LOW_SPEED_BLEND = 1.0   # m/s; tire forces fade out below this speed
MAX_SPEED = 50.0        # m/s; anything faster is treated as divergence

NoiseSeed = Optional[Union[int, Sequence[int]]]


class SimulationDivergence(RuntimeError):
    """Raised when a simulator step produces a non-finite or runaway state."""


def wrap_angle(angle):
    """Map angles to (-pi, pi]; works on floats and arrays."""
    return np.pi - np.mod(np.pi - angle, 2.0 * np.pi)


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    v_long: float = 0.0
    v_lat: float = 0.0
    yaw_rate: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.v_long, self.v_lat, self.yaw_rate])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "VehicleState":
        x, y, yaw, v_long, v_lat, yaw_rate = (float(v) for v in values)
        return cls(x, y, float(wrap_angle(yaw)), v_long, v_lat, yaw_rate)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))

    @property
    def speed(self) -> float:
        return math.hypot(self.v_long, self.v_lat)


@dataclass(frozen=True)
class Action:
    steer: float = 0.0
    throttle: float = 0.0

    def clamped(self) -> "Action":
        return Action(float(np.clip(self.steer, -1.0, 1.0)), float(np.clip(self.throttle, -1.0, 1.0)))

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.throttle])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Action":
        return cls(float(values[0]), float(values[1])).clamped()


@dataclass(frozen=True)
class SystemParams:
    mass: float
    yaw_inertia: float
    wheelbase: float
    cg_to_front: float
    cornering_stiffness_front: float
    cornering_stiffness_rear: float
    friction_coeff: float
    steer_scale: float
    steer_bias: float
    throttle_gain: float
    motor_time_constant: float
    actuation_delay_steps: int
    process_noise_scale: Tuple[float, ...]
    rolling_drag: float
    system_id: str = ""

    @property
    def cg_to_rear(self) -> float:
        return self.wheelbase - self.cg_to_front

    def validate(self) -> None:
        positive = ("mass", "yaw_inertia", "wheelbase", "cg_to_front", "cornering_stiffness_front",
                    "cornering_stiffness_rear", "friction_coeff", "steer_scale", "throttle_gain",
                    "motor_time_constant", "rolling_drag")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"SystemParams.{name} must be strictly positive")
        if self.cg_to_front >= self.wheelbase:
            raise ConfigurationError("SystemParams.cg_to_front must be shorter than the wheelbase")
        if self.actuation_delay_steps < 0:
            raise ConfigurationError("SystemParams.actuation_delay_steps must be nonnegative")
        if len(self.process_noise_scale) != STATE_DIM or min(self.process_noise_scale) < 0:
            raise ConfigurationError(f"SystemParams.process_noise_scale needs {STATE_DIM} nonnegative entries")

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["process_noise_scale"] = list(self.process_noise_scale)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SystemParams":
        values = dict(data)
        values["process_noise_scale"] = tuple(float(v) for v in values["process_noise_scale"])
        values["actuation_delay_steps"] = int(values["actuation_delay_steps"])
        params = cls(**values)
        params.validate()
        return params

    def noise_free(self) -> "SystemParams":
        return dataclasses.replace(self, process_noise_scale=(0.0,) * STATE_DIM)


@dataclass(frozen=True)
class ActuatorState:
    """Steering commands still in the delay line, and the lagged motor force."""
    pending_steer: Tuple[float, ...] = ()
    motor_force: float = 0.0

    @classmethod
    def initial(cls, params: SystemParams) -> "ActuatorState":
        return cls(pending_steer=(0.0,) * params.actuation_delay_steps, motor_force=0.0)


@dataclass(frozen=True)
class Transition:
    s: VehicleState
    a: Action
    s_next: VehicleState

# ============================================================================
# SYSTEM SAMPLING
# ============================================================================

def _check_ranges(ranges: Dict[str, Sequence[float]]) -> None:
    missing = sorted(set(RANDOMIZATION_RANGES) - set(ranges))
    if missing:
        raise ConfigurationError(f"Randomization ranges missing: {', '.join(missing)}")
    for key, (lo, hi) in ranges.items():
        if lo > hi:
            raise ConfigurationError(f"Randomization range '{key}' is inverted: [{lo}, {hi}]")
        if key in LOG_UNIFORM_KEYS and lo <= 0:
            raise ConfigurationError(f"Randomization range '{key}' must be positive for log-uniform draws")


def _build_system(draws: Dict[str, float], system_id: str) -> SystemParams:
    level = draws["process_noise_level"]
    params = SystemParams(
        mass=draws["mass"],
        yaw_inertia=draws["yaw_inertia_per_kg"] * draws["mass"],
        wheelbase=draws["wheelbase"],
        cg_to_front=draws["cg_front_fraction"] * draws["wheelbase"],
        cornering_stiffness_front=draws["cornering_stiffness_front"],
        cornering_stiffness_rear=draws["cornering_stiffness_rear"],
        friction_coeff=draws["friction_coeff"],
        steer_scale=draws["steer_scale"],
        steer_bias=draws["steer_bias"],
        throttle_gain=draws["throttle_gain"],
        motor_time_constant=draws["motor_time_constant"],
        actuation_delay_steps=int(draws["actuation_delay_steps"]),
        process_noise_scale=tuple(level * s for s in BASE_PROCESS_NOISE),
        rolling_drag=draws["rolling_drag"],
        system_id=system_id,
    )
    params.validate()
    return params


def sample_system(seed, ranges: Optional[Dict[str, Sequence[float]]] = None) -> SystemParams:
    """
    Draw one system from the randomization ranges.

    Stiffness, gain, friction and drag are log-uniform; everything else is
    uniform (the delay is a uniform integer). Deterministic per seed.
    """
    ranges = ranges or RANDOMIZATION_RANGES
    _check_ranges(ranges)
    rng = np.random.default_rng(seed)

    draws = {}
    for key in sorted(RANDOMIZATION_RANGES):
        lo, hi = ranges[key]
        if key == "actuation_delay_steps":
            draws[key] = int(rng.integers(int(lo), int(hi) + 1))
        elif key in LOG_UNIFORM_KEYS:
            draws[key] = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        else:
            draws[key] = float(rng.uniform(lo, hi))

    seed_label = "-".join(str(s) for s in np.atleast_1d(seed)) if seed is not None else "none"
    return _build_system(draws, f"sys-{seed_label}")


def nominal_system(ranges: Optional[Dict[str, Sequence[float]]] = None) -> SystemParams:
    """The fixed nominal dynamics: range centers, no steering bias, no delay."""
    ranges = ranges or RANDOMIZATION_RANGES
    _check_ranges(ranges)
    draws = {}
    for key, (lo, hi) in ranges.items():
        if key in LOG_UNIFORM_KEYS:
            draws[key] = math.sqrt(lo * hi)
        else:
            draws[key] = 0.5 * (lo + hi)
    draws["steer_bias"] = 0.0
    draws["actuation_delay_steps"] = 0
    draws["process_noise_level"] = ranges["process_noise_level"][0]
    return _build_system(draws, "sys-nominal")

# ============================================================================
# DYNAMICS
# ============================================================================

def lateral_tire_forces(v_long: float, v_lat: float, yaw_rate: float, wheel_angle: float,
                        params: SystemParams) -> Tuple[float, float]:
    """Front and rear lateral tire forces, each clipped to its axle's friction share."""
    lf, lr = params.cg_to_front, params.cg_to_rear
    normal = params.friction_coeff * params.mass * GRAVITY
    cap_front = normal * lr / params.wheelbase
    cap_rear = normal * lf / params.wheelbase

    speed = abs(v_long)
    gate = min(1.0, speed / LOW_SPEED_BLEND)
    denom = max(speed, LOW_SPEED_BLEND)
    slip_front = wheel_angle - (v_lat + lf * yaw_rate) / denom
    slip_rear = -(v_lat - lr * yaw_rate) / denom
    front = float(np.clip(gate * params.cornering_stiffness_front * slip_front, -cap_front, cap_front))
    rear = float(np.clip(gate * params.cornering_stiffness_rear * slip_rear, -cap_rear, cap_rear))
    return front, rear


def step(s: VehicleState, a: Action, p: SystemParams, noise_seed: NoiseSeed = None,
         actuator: Optional[ActuatorState] = None) -> Tuple[VehicleState, ActuatorState]:
    """
    Advance the vehicle by one control period.

    Args:
        s: current state
        a: command, clamped to [-1, 1] here
        p: system parameters
        noise_seed: seed for the process noise draw; None means noise-free
        actuator: delay line and motor force; None starts from rest

    Returns:
        (next state, next actuator state)

    Raises:
        SimulationDivergence: non-finite or runaway successor
    """
    a = a.clamped()
    if actuator is None:
        actuator = ActuatorState.initial(p)

    if p.actuation_delay_steps > 0:
        line = actuator.pending_steer + (a.steer,)
        applied_steer, pending = line[0], line[1:]
    else:
        applied_steer, pending = a.steer, ()
    wheel_angle = p.steer_scale * applied_steer + p.steer_bias

    target = p.throttle_gain * a.throttle
    force = target + (actuator.motor_force - target) * math.exp(-DT / p.motor_time_constant)

    h = DT / SUBSTEPS
    lf, lr = p.cg_to_front, p.cg_to_rear
    cos_d, sin_d = math.cos(wheel_angle), math.sin(wheel_angle)
    x, y, yaw = s.x, s.y, s.yaw
    vx, vy, r = s.v_long, s.v_lat, s.yaw_rate
    for _ in range(SUBSTEPS):
        front, rear = lateral_tire_forces(vx, vy, r, wheel_angle, p)
        # body-frame rotation of the velocity vector, applied exactly
        turn = -r * h
        vx, vy = vx * math.cos(turn) - vy * math.sin(turn), vx * math.sin(turn) + vy * math.cos(turn)
        vx += h * (force - front * sin_d - p.rolling_drag * vx) / p.mass
        vy += h * (rear + front * cos_d) / p.mass
        r += h * (lf * front * cos_d - lr * rear) / p.yaw_inertia
        cos_y, sin_y = math.cos(yaw), math.sin(yaw)
        x += h * (vx * cos_y - vy * sin_y)
        y += h * (vx * sin_y + vy * cos_y)
        yaw += h * r

    values = np.array([x, y, yaw, vx, vy, r])
    if noise_seed is not None:
        rng = np.random.default_rng(noise_seed)
        values = values + rng.standard_normal(STATE_DIM) * np.asarray(p.process_noise_scale)

    if not np.all(np.isfinite(values)) or math.hypot(values[3], values[4]) > MAX_SPEED:
        raise SimulationDivergence(f"Simulator diverged for {p.system_id}: {values}")

    return VehicleState.from_array(values), ActuatorState(pending_steer=tuple(pending), motor_force=force)


class VehicleSimulator:
    """Stateful wrapper that carries the actuator state between steps."""

    def __init__(self, params: SystemParams, state: Optional[VehicleState] = None):
        self.params = params
        self.state = state or VehicleState()
        self.actuator = ActuatorState.initial(params)

    def reset_to(self, state: VehicleState) -> None:
        self.state = state
        self.actuator = ActuatorState.initial(self.params)

    def step(self, action: Action, noise_seed: NoiseSeed = None) -> Transition:
        previous = self.state
        self.state, self.actuator = step(previous, action, self.params, noise_seed, self.actuator)
        return Transition(previous, action.clamped(), self.state)
