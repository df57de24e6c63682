#!/usr/bin/env python3
"""
Track generation and track geometry

Tracks are open centerlines (start to finish) with a fixed width. The
functionals here define the task: progress along the centerline, unsigned
distance from it, and lateral acceleration from consecutive positions.
All of them are pure; a Track is never mutated after generation.

JSON form (for replay and cross-run comparison):
    {"track_id": str, "width": float, "max_curvature": float,
     "points": [[x, y], ...]}
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Any, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from config import DT, LAP_COMPLETION_MARGIN, TRACK_CONFIG, ConfigurationError
from vehicle_sim import VehicleState

logger = logging.getLogger(__name__)

PROJECTION_CHUNK = 4096
TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class Track:
    points: np.ndarray        # (n, 2) waypoints
    arclength: np.ndarray     # (n,) cumulative, starts at 0
    width: float
    max_curvature: float = 0.0
    track_id: str = ""

    @property
    def total_length(self) -> float:
        return float(self.arclength[-1])

    @classmethod
    def from_points(cls, points: np.ndarray, width: float, max_curvature: float = 0.0,
                    track_id: str = "") -> "Track":
        points = np.array(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
            raise ConfigurationError(f"Track needs at least two (x, y) waypoints, got shape {points.shape}")
        seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
        if np.any(seg <= 0):
            raise ConfigurationError("Track waypoints must be distinct")
        arclength = np.concatenate([[0.0], np.cumsum(seg)])
        points.setflags(write=False)
        arclength.setflags(write=False)
        return cls(points, arclength, float(width), float(max_curvature), track_id)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "track_id": self.track_id,
            "width": self.width,
            "max_curvature": self.max_curvature,
            "points": self.points.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Track":
        return cls.from_points(data["points"], data["width"], data.get("max_curvature", 0.0),
                               data.get("track_id", ""))


def straight_track(length: float, width: float = 1.0, resolution: float = 0.25,
                   track_id: str = "straight") -> Track:
    """A straight track along +x from the origin."""
    n = max(1, int(math.ceil(length / resolution)))
    xs = np.linspace(0.0, length, n + 1)
    return Track.from_points(np.stack([xs, np.zeros_like(xs)], axis=1), width, 0.0, track_id)


def curvature(track: Track) -> np.ndarray:
    """Discrete curvature at interior waypoints: heading change per unit arclength."""
    d = np.diff(track.points, axis=0)
    heading = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    seg = np.diff(track.arclength)
    return np.diff(heading) / (0.5 * (seg[:-1] + seg[1:]))

# ============================================================================
# GENERATION
# ============================================================================

def _check_track_config(config: Dict[str, Any]) -> None:
    lo, hi = config["length_range"]
    if lo > hi:
        raise ConfigurationError(f"Track length range is inverted: [{lo}, {hi}]")
    if lo <= config["lead_in"]:
        raise ConfigurationError("Track length must exceed the straight lead-in")
    if not 0 < config["resolution"] <= 0.25:
        raise ConfigurationError("Track resolution must be in (0, 0.25] m")
    if config["width"] <= 0 or config["max_curvature"] < 0:
        raise ConfigurationError("Track width must be positive and curvature bound nonnegative")
    if config["max_curvature"] * config["width"] >= 1.0:
        raise ConfigurationError(
            f"Curvature bound {config['max_curvature']} is too tight for width {config['width']}: "
            f"inner edge would fold over")


def _self_clearance_ok(points: np.ndarray, arclength: np.ndarray, width: float) -> bool:
    # Pairs far apart along the centerline must stay two widths apart in the plane.
    distances = cdist(points, points)
    separation = np.abs(arclength[:, None] - arclength[None, :])
    return not np.any((separation > math.pi * width) & (distances < 2.0 * width))


def generate_track(seed, config: Optional[Dict[str, Any]] = None) -> Track:
    """
    Generate a random drivable track.

    Headings follow a random walk in curvature, clipped to the curvature
    bound, after a straight lead-in. Layouts that fold back onto themselves
    are rejected and redrawn.

    Raises:
        ConfigurationError: inconsistent config, or no valid layout within max_attempts
    """
    config = {**TRACK_CONFIG, **(config or {})}
    _check_track_config(config)
    rng = np.random.default_rng(seed)
    lo, hi = config["length_range"]
    k_max = float(config["max_curvature"])
    width = float(config["width"])
    label = "-".join(str(s) for s in np.atleast_1d(seed)) if seed is not None else "none"

    for attempt in range(int(config["max_attempts"])):
        length = float(rng.uniform(lo, hi))
        n = int(math.ceil(length / config["resolution"]))
        ds = length / n
        lead_in_steps = min(n, int(round(config["lead_in"] / ds)))

        kappa = np.zeros(n)
        current = 0.0
        for i in range(lead_in_steps, n):
            current = float(np.clip(current + rng.normal(0.0, config["curvature_step_std"]), -k_max, k_max))
            kappa[i] = current
        heading = np.concatenate([[0.0], np.cumsum(kappa[1:] * ds)])
        steps = ds * np.stack([np.cos(heading), np.sin(heading)], axis=1)
        points = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
        arclength = np.arange(n + 1) * ds

        if _self_clearance_ok(points, arclength, width):
            logger.debug(f"Track {label}: {length:.1f} m after {attempt + 1} attempt(s)")
            return Track.from_points(points, width, k_max, f"track-{label}")

    raise ConfigurationError(
        f"No self-clearing track found in {config['max_attempts']} attempts for seed {label}; "
        f"loosen length_range or max_curvature")

# ============================================================================
# GEOMETRIC FUNCTIONALS
# ============================================================================

def project(track: Track, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest-segment projection of many points onto the centerline.

    Args:
        xy: (..., 2) positions

    Returns:
        (progress, offset), each shaped like xy[..., 0]
    """
    xy = np.asarray(xy, dtype=np.float64)
    flat = xy.reshape(-1, 2)
    start = track.points[:-1]
    seg = np.diff(track.points, axis=0)
    seg_len2 = np.sum(seg * seg, axis=1)
    seg_len = np.sqrt(seg_len2)
    last = len(seg) - 1

    progress = np.empty(len(flat))
    offset = np.empty(len(flat))
    for lo in range(0, len(flat), PROJECTION_CHUNK):
        chunk = flat[lo:lo + PROJECTION_CHUNK]
        rel = chunk[:, None, :] - start[None, :, :]
        t = np.clip(np.sum(rel * seg[None], axis=2) / seg_len2, 0.0, 1.0)
        gap = rel - t[..., None] * seg[None]
        dist = np.sqrt(np.sum(gap * gap, axis=2))
        best = dist.min(axis=1, keepdims=True)
        # the last segment within tolerance wins, so ties go to greater arclength
        idx = last - np.argmax((dist <= best + TIE_TOLERANCE)[:, ::-1], axis=1)
        rows = np.arange(len(chunk))
        progress[lo:lo + len(chunk)] = track.arclength[idx] + t[rows, idx] * seg_len[idx]
        offset[lo:lo + len(chunk)] = dist[rows, idx]
    return progress.reshape(xy.shape[:-1]), offset.reshape(xy.shape[:-1])


def progress(track: Track, s: VehicleState) -> float:
    return float(project(track, np.array([s.x, s.y]))[0])


def offset(track: Track, s: VehicleState) -> float:
    return float(project(track, np.array([s.x, s.y]))[1])


def track_point(track: Track, at_progress: float) -> VehicleState:
    """Centerline pose at an arclength, at rest; clamped to the track ends."""
    at = float(np.clip(at_progress, 0.0, track.total_length))
    i = int(np.clip(np.searchsorted(track.arclength, at, side='right') - 1, 0, len(track.points) - 2))
    a, b = track.points[i], track.points[i + 1]
    frac = (at - track.arclength[i]) / (track.arclength[i + 1] - track.arclength[i])
    x, y = a + frac * (b - a)
    heading = math.atan2(b[1] - a[1], b[0] - a[0])
    return VehicleState(x=float(x), y=float(y), yaw=heading)


def lateral_accel(states: Sequence[VehicleState], dt: float = DT) -> float:
    """
    Lateral acceleration at the middle of the last three states.

    Second central difference of position, projected onto the body lateral
    axis of the middle state. Returns 0.0 with fewer than three states.
    """
    if len(states) < 3:
        return 0.0
    s0, s1, s2 = states[-3], states[-2], states[-1]
    ax = (s2.x - 2.0 * s1.x + s0.x) / (dt * dt)
    ay = (s2.y - 2.0 * s1.y + s0.y) / (dt * dt)
    return -math.sin(s1.yaw) * ax + math.cos(s1.yaw) * ay


def lateral_accel_series(xy: np.ndarray, yaw: np.ndarray, dt: float = DT) -> np.ndarray:
    """
    Vectorized lateral_accel over trajectories.

    Args:
        xy: (..., T, 2) positions, T >= 3
        yaw: (..., T) headings

    Returns:
        (..., T - 2) values at the interior states 1..T-2
    """
    accel = (xy[..., 2:, :] - 2.0 * xy[..., 1:-1, :] + xy[..., :-2, :]) / (dt * dt)
    mid = yaw[..., 1:-1]
    return -np.sin(mid) * accel[..., 0] + np.cos(mid) * accel[..., 1]


def off_track(track: Track, s: VehicleState) -> bool:
    return offset(track, s) > track.width


def accel_exceeded(a_lat: float, limit: float) -> bool:
    return abs(a_lat) > limit


def lap_complete(track: Track, at_progress: float) -> bool:
    return at_progress >= track.total_length - LAP_COMPLETION_MARGIN
