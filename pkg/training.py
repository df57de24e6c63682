#!/usr/bin/env python3
"""
Collect/train cycles for the SIT and ADM

Each cycle drives freshly randomized systems with the current frozen
model under risk-aware MPPI, appends every executed transition to the
dataset, then trains both networks jointly on Gaussian NLL with Adam.
The same machinery, with the context zeroed, trains the non-adaptive
baselines: the nominal-fixed model and the per-system from-scratch model.

Dataset file (JSON lines, append-only), two record kinds:
    {"record": "system", "system_id": str, "params": {...SystemParams}}
    {"record": "transition", "system_id": str, "track_id": str,
     "trajectory": int, "step": int, "s": [6], "a": [2], "s_next": [6]}
"""

import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Any, List, Optional, Tuple

import numpy as np

from config import TRAINING_CONFIG, default_config
from controller import MPPIConfig, seed_words
from episode import EpisodeSettings, PolicyMode, drive
from models import (
    DYNAMICS_INPUT_DIM,
    DynamicsModel,
    History,
    featurize_arrays,
    subsample,
)
from tensor_autodiff import (
    AdamState,
    NumericalFailure,
    Tensor,
    adam_step,
    concat,
    forward_backward,
    gaussian_nll,
)
from track import generate_track
from vehicle_sim import SimulationDivergence, SystemParams, Transition, nominal_system, sample_system

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when training keeps producing non-finite losses."""


@dataclass
class TrajectoryRecord:
    """Contiguous executed transitions; start is the index of the first one in its system's timeline."""
    system_id: str
    track_id: str
    start: int
    states: np.ndarray       # (T, 6)
    actions: np.ndarray      # (T, 2)
    next_states: np.ndarray  # (T, 6)

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_transitions(cls, system_id: str, track_id: str, start: int,
                         transitions: List[Transition]) -> "TrajectoryRecord":
        return cls(system_id, track_id, start,
                   np.array([t.s.as_array() for t in transitions]),
                   np.array([t.a.as_array() for t in transitions]),
                   np.array([t.s_next.as_array() for t in transitions]))


@dataclass
class Dataset:
    systems: Dict[str, SystemParams] = field(default_factory=dict)
    trajectories: List[TrajectoryRecord] = field(default_factory=list)
    _features: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def system_length(self, system_id: str) -> int:
        return sum(len(t) for t in self.trajectories if t.system_id == system_id)

    def add(self, params: SystemParams, track_id: str, segments: List[List[Transition]]) -> None:
        self.systems[params.system_id] = params
        start = self.system_length(params.system_id)
        for segment in segments:
            if segment:
                self.trajectories.append(TrajectoryRecord.from_transitions(
                    params.system_id, track_id, start, segment))
                start += len(segment)
        self._features.pop(params.system_id, None)

    def extend(self, other: "Dataset") -> None:
        for system_id, params in other.systems.items():
            self.systems[system_id] = params
            self._features.pop(system_id, None)
        offset = {sid: self.system_length(sid) for sid in other.systems}
        for record in other.trajectories:
            self.trajectories.append(dataclasses.replace(record, start=record.start + offset.get(record.system_id, 0)))

    def system_features(self, system_id: str) -> np.ndarray:
        """Featurized transitions of one system in time order."""
        if system_id not in self._features:
            records = sorted((t for t in self.trajectories if t.system_id == system_id), key=lambda t: t.start)
            self._features[system_id] = np.concatenate(
                [featurize_arrays(t.states, t.actions, t.next_states) for t in records])
        return self._features[system_id]

# ============================================================================
# PERSISTENCE
# ============================================================================

def save_dataset(path: str, dataset: Dataset, append: bool = True) -> None:
    """Write system records then transition records as JSON lines."""
    mode = 'a' if append else 'w'
    with open(path, mode) as f:
        for system_id, params in dataset.systems.items():
            f.write(json.dumps({"record": "system", "system_id": system_id, "params": params.to_dict()}) + "\n")
        for i, record in enumerate(dataset.trajectories):
            for j in range(len(record)):
                f.write(json.dumps({
                    "record": "transition",
                    "system_id": record.system_id,
                    "track_id": record.track_id,
                    "trajectory": i,
                    "step": record.start + j,
                    "s": record.states[j].tolist(),
                    "a": record.actions[j].tolist(),
                    "s_next": record.next_states[j].tolist(),
                }) + "\n")
    logger.info(f"Wrote {len(dataset)} transitions from {len(dataset.systems)} systems to {path}")


def load_dataset(path: str) -> Dataset:
    """Rebuild a dataset; a gap in step indices starts a new trajectory."""
    dataset = Dataset()
    rows: Dict[str, List[Dict[str, Any]]] = {}
    with open(path, 'r') as f:
        for line in f:
            if not line.strip():
                continue
            entry = json.loads(line)
            if entry["record"] == "system":
                dataset.systems[entry["system_id"]] = SystemParams.from_dict(entry["params"])
            else:
                rows.setdefault(entry["system_id"], []).append(entry)

    for system_id, entries in rows.items():
        entries.sort(key=lambda e: e["step"])
        chunk: List[Dict[str, Any]] = []
        for entry in entries:
            if chunk and (entry["step"] != chunk[-1]["step"] + 1 or entry["trajectory"] != chunk[-1]["trajectory"]):
                dataset.trajectories.append(_record_from_rows(chunk))
                chunk = []
            chunk.append(entry)
        if chunk:
            dataset.trajectories.append(_record_from_rows(chunk))
    return dataset


def _record_from_rows(rows: List[Dict[str, Any]]) -> TrajectoryRecord:
    return TrajectoryRecord(
        rows[0]["system_id"], rows[0]["track_id"], rows[0]["step"],
        np.array([r["s"] for r in rows], dtype=np.float64),
        np.array([r["a"] for r in rows], dtype=np.float64),
        np.array([r["s_next"] for r in rows], dtype=np.float64))

# ============================================================================
# COLLECTION
# ============================================================================

@dataclass(frozen=True)
class CollectSettings:
    mppi: MPPIConfig
    episode: EpisodeSettings
    ranges: Dict[str, Any]
    track: Dict[str, Any]
    nominal: bool = False


def collect_settings_from_config(cfg: Dict[str, Any], steps_per_system: int, nominal: bool = False) -> CollectSettings:
    training = cfg["training"]
    mppi = MPPIConfig.from_dict(cfg["mppi"], candidates=training["collect_candidates"],
                                stochastic_evals=training["collect_stochastic_evals"])
    episode = EpisodeSettings.from_config(cfg["bench"], step_budget=steps_per_system)
    return CollectSettings(mppi, episode, cfg["randomization"], cfg["track"], nominal)


def _collect_system(args: Tuple[int, List[int], DynamicsModel, CollectSettings]) -> Optional[Tuple[SystemParams, str, List[List[Transition]]]]:
    index, words, snapshot, settings = args
    if settings.nominal:
        params = dataclasses.replace(nominal_system(settings.ranges),
                                     system_id=f"sys-nominal-{'-'.join(map(str, words + [index]))}")
        mode = PolicyMode.NOMINAL_FIXED
    else:
        params = sample_system(words + [index], settings.ranges)
        mode = PolicyMode.ADAPTIVE_RISK_AWARE
    track = generate_track(words + [index, 1], settings.track)
    history = History(params.system_id, snapshot.history_cap)
    try:
        metrics = drive(params, track, snapshot, mode, settings.mppi, settings.episode, words + [index, 2],
                        history=history, continue_after_lap=True, record_transitions=True, keep_log=False)
    except SimulationDivergence as e:
        logger.warning(f"Skipping {params.system_id}: {e}")
        return None
    logger.debug(f"Collected {metrics.steps} steps on {params.system_id} "
                 f"({metrics.violations} violations, {metrics.resets} resets)")
    return params, track.track_id, metrics.segments


def collect_phase(n_systems: int, steps_per_system: int, snapshot: DynamicsModel, seed,
                  settings: Optional[CollectSettings] = None, workers: int = 1) -> Dataset:
    """
    Drive n_systems fresh systems with a frozen model and record every transition.

    Systems whose simulation diverges are logged and skipped.
    """
    if settings is None:
        settings = collect_settings_from_config(default_config(), steps_per_system)
    settings = dataclasses.replace(settings, episode=dataclasses.replace(settings.episode,
                                                                         step_budget=steps_per_system))
    words = seed_words(seed)
    jobs = [(i, words, snapshot, settings) for i in range(n_systems)]
    if workers > 1 and n_systems > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_collect_system, jobs))
    else:
        results = [_collect_system(job) for job in jobs]

    dataset = Dataset()
    for result in results:
        if result is not None:
            dataset.add(*result)
    logger.info(f"Collected {len(dataset)} transitions from {len(dataset.systems)} systems")
    return dataset

# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class TrainBatch:
    histories: List[np.ndarray]   # per sample, (n_i, FEATURE_DIM)
    states: np.ndarray            # (B, W, 6)
    actions: np.ndarray           # (B, W, 2)
    targets: np.ndarray           # (B, W, 6) body-frame deltas


def sample_batch(dataset: Dataset, batch_size: int, window: int, rng: np.random.Generator,
                 history_cap: int) -> TrainBatch:
    """
    Sample (trajectory, t) pairs with a full target window after t.

    The history for a sample starting at system-timeline index t holds the
    transitions with index < t - 1, subsampled to history_cap.
    """
    eligible = [r for r in dataset.trajectories if len(r) >= window]
    if not eligible:
        raise ValueError(f"No trajectory is long enough for a target window of {window}")
    weights = np.array([len(r) - window + 1 for r in eligible], dtype=np.float64)
    picks = rng.choice(len(eligible), size=batch_size, p=weights / weights.sum())

    histories, states, actions, targets = [], [], [], []
    for pick in picks:
        record = eligible[pick]
        t = int(rng.integers(0, len(record) - window + 1))
        index = record.start + t
        prior = dataset.system_features(record.system_id)[:max(0, index - 1)]
        histories.append(subsample(prior, history_cap, int(rng.integers(0, 2**31))))
        features = featurize_arrays(record.states[t:t + window], record.actions[t:t + window],
                                    record.next_states[t:t + window])
        states.append(record.states[t:t + window])
        actions.append(record.actions[t:t + window])
        targets.append(features[:, DYNAMICS_INPUT_DIM:])
    return TrainBatch(histories, np.array(states), np.array(actions), np.array(targets))


def batch_loss(model: DynamicsModel, batch: TrainBatch, use_context: bool = True) -> Tensor:
    """Mean per-step Gaussian NLL over the target window, with teacher forcing."""
    size, window = batch.actions.shape[:2]
    if use_context:
        context = concat([model.sit(h) for h in batch.histories], axis=0)
    else:
        context = Tensor(np.zeros((size, model.context_dim)))
    hidden = model.adm.lstm.zero_state(size)
    total = None
    for j in range(window):
        inputs = np.concatenate([batch.states[:, j, 3:6], batch.actions[:, j]], axis=1)
        mean_, diag, lower, hidden = model.adm(inputs, context, hidden)
        step_loss = gaussian_nll(batch.targets[:, j], mean_, diag, lower)
        total = step_loss if total is None else total + step_loss
    return total * (1.0 / window)


@dataclass
class TrainResult:
    losses: List[float]
    adam: AdamState
    skipped: int = 0


def train_phase(dataset: Dataset, model: DynamicsModel, n_updates: int, batch_size: int, seed,
                adam: Optional[AdamState] = None, learning_rate: float = TRAINING_CONFIG["learning_rate"],
                window: int = TRAINING_CONFIG["target_window"], use_context: bool = True,
                max_nan_failures: int = TRAINING_CONFIG["max_nan_failures"]) -> TrainResult:
    """
    Adam on all SIT and ADM parameters jointly.

    A non-finite loss or gradient skips the batch; the first one halves the
    learning rate. Reaching max_nan_failures raises TrainingDiverged.
    """
    if len(dataset) == 0:
        raise ValueError("Cannot train on an empty dataset")
    params = model.named_parameters()
    adam = adam or AdamState.create(params, lr=learning_rate)
    rng = np.random.default_rng(seed_words(seed))
    losses: List[float] = []
    failures = 0

    for update in range(n_updates):
        batch = sample_batch(dataset, batch_size, window, rng, model.history_cap)
        loss = batch_loss(model, batch, use_context)
        try:
            if not math.isfinite(loss.item()):
                raise NumericalFailure(f"Non-finite loss at update {update}")
            grads = forward_backward(loss, params)
            adam_step(params, grads, adam)
        except NumericalFailure as e:
            failures += 1
            if failures >= max_nan_failures:
                raise TrainingDiverged(f"{failures} non-finite updates; last: {e}") from e
            if failures == 1:
                adam.lr *= 0.5
            logger.warning(f"Skipping batch: {e} (learning rate now {adam.lr:.2e})")
            continue
        losses.append(loss.item())
        if (update + 1) % 50 == 0:
            logger.debug(f"Update {update + 1}/{n_updates}: loss {np.mean(losses[-50:]):.4f}")
    return TrainResult(losses, adam, failures)


def evaluate_nll(dataset: Dataset, model: DynamicsModel, n_batches: int = 8, batch_size: int = 32,
                 seed=0, window: int = TRAINING_CONFIG["target_window"], use_context: bool = True) -> float:
    """Mean NLL on sampled windows, no gradients."""
    frozen = model.snapshot()
    rng = np.random.default_rng(seed_words(seed))
    values = [batch_loss(frozen, sample_batch(dataset, batch_size, window, rng, frozen.history_cap),
                         use_context).item()
              for _ in range(n_batches)]
    return float(np.mean(values))


def train_from_scratch(dataset: Dataset, budget: int, cfg: Dict[str, Any], seed) -> DynamicsModel:
    """
    Non-adaptive per-system baseline.

    The model is retrained from a fresh initialization every
    scratch_retrain_interval collected steps, context zeroed; with budget
    below the first interval it is the untrained initialization.
    """
    training = cfg["training"]
    interval = training["scratch_retrain_interval"]
    words = seed_words(seed)
    model = DynamicsModel(cfg["model"], seed=words[0] if words else 0)
    usable = (budget // interval) * interval
    if usable == 0:
        return model
    subset = Dataset(systems=dict(dataset.systems))
    remaining = usable
    for record in sorted(dataset.trajectories, key=lambda r: r.start):
        if remaining <= 0:
            break
        take = min(len(record), remaining)
        subset.trajectories.append(dataclasses.replace(
            record, states=record.states[:take], actions=record.actions[:take],
            next_states=record.next_states[:take]))
        remaining -= take
    window = min(training["target_window"], max(len(r) for r in subset.trajectories))
    train_phase(subset, model, training["scratch_updates"], training["batch_size"], words + [usable],
                learning_rate=training["learning_rate"], window=window, use_context=False,
                max_nan_failures=training["max_nan_failures"])
    logger.info(f"Scratch baseline retrained on {usable} steps")
    return model


def run_scratch_baseline(params: SystemParams, track, cfg: Dict[str, Any], budget: int,
                         seed) -> Tuple[Dict[int, DynamicsModel], Dataset]:
    """
    From-scratch baseline that collects its own data.

    The current baseline model drives (context zeroed) for one retrain
    interval, then is retrained from a fresh initialization on everything
    it has collected so far. Repeats until budget steps are collected.

    Returns:
        The model in force after each interval, keyed by steps collected
        (0 is the untrained initialization), and the collected dataset
    """
    interval = cfg["training"]["scratch_retrain_interval"]
    words = seed_words(seed)
    mppi = MPPIConfig.from_dict(cfg["mppi"])
    settings = EpisodeSettings.from_config(cfg["bench"], step_budget=interval)
    dataset = Dataset()
    model = train_from_scratch(dataset, 0, cfg, words)
    models = {0: model}
    collected = 0
    while collected + interval <= budget:
        try:
            metrics = drive(params, track, model.snapshot(), PolicyMode.ZERO_CONTEXT, mppi, settings,
                            words + [6, collected], continue_after_lap=True, record_transitions=True,
                            keep_log=False)
        except SimulationDivergence as e:
            logger.warning(f"Baseline collection on {params.system_id} stopped at {collected} steps: {e}")
            break
        dataset.add(params, track.track_id, metrics.segments)
        collected += interval
        model = train_from_scratch(dataset, collected, cfg, words)
        models[collected] = model
    return models, dataset


def model_at_budget(models: Dict[int, DynamicsModel], budget: int) -> DynamicsModel:
    """The latest baseline model trained on no more than budget steps."""
    return models[max(k for k in models if k <= budget)]

# ============================================================================
# FULL RUN
# ============================================================================

@dataclass
class TrainingReport:
    checkpoint: str
    checkpoint_sha256: str
    initial_heldout_nll: float
    final_heldout_nll: float
    losses: List[float]
    transitions: int


def run_training(cfg: Dict[str, Any], seed: int, output_dir: str, nominal: bool = False) -> TrainingReport:
    """
    Alternate collection and training for the configured number of cycles.

    nominal=True trains the nominal-fixed baseline: every system is the
    nominal system and the context stays zero.
    """
    training = cfg["training"]
    workers = cfg["bench"]["workers"]
    steps = training["steps_per_system"]
    use_context = not nominal
    label = "nominal" if nominal else "adaptive"
    checkpoint = os.path.join(output_dir, cfg["bench"]["nominal_checkpoint" if nominal else "checkpoint"])
    os.makedirs(os.path.dirname(checkpoint) or ".", exist_ok=True)
    dataset_path = os.path.join(output_dir, f"{label}_dataset.jsonl")
    if os.path.exists(dataset_path):
        os.remove(dataset_path)

    model = DynamicsModel(cfg["model"], seed=seed)
    settings = collect_settings_from_config(cfg, steps, nominal)
    heldout = collect_phase(training["heldout_systems"], steps, model.snapshot(), [seed, 9999],
                            dataclasses.replace(settings, nominal=False), workers)
    initial_nll = evaluate_nll(heldout, model, seed=[seed, 1], use_context=use_context)
    logger.info(f"[{label}] held-out NLL at initialization: {initial_nll:.4f}")

    dataset = Dataset()
    adam = None
    losses: List[float] = []
    digest = ""
    for cycle in range(training["cycles"]):
        increment = collect_phase(training["systems_per_cycle"], steps, model.snapshot(),
                                  [seed, cycle], settings, workers)
        save_dataset(dataset_path, increment)
        dataset.extend(increment)
        result = train_phase(dataset, model, training["updates_per_cycle"], training["batch_size"],
                             [seed, cycle, 7], adam, training["learning_rate"],
                             training["target_window"], use_context, training["max_nan_failures"])
        adam = result.adam
        losses.extend(result.losses)
        digest = model.save(checkpoint, {"cycle": cycle, "seed": seed, "mode": label,
                                         "transitions": len(dataset)})
        recent = np.mean(result.losses[-20:]) if result.losses else float('nan')
        logger.info(f"[{label}] cycle {cycle + 1}/{training['cycles']}: "
                    f"{len(dataset)} transitions, recent loss {recent:.4f}")

    final_nll = evaluate_nll(heldout, model, seed=[seed, 1], use_context=use_context)
    logger.info(f"[{label}] held-out NLL after training: {final_nll:.4f} (was {initial_nll:.4f})")
    return TrainingReport(checkpoint, digest, initial_nll, final_nll, losses, len(dataset))
