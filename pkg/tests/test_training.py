import dataclasses

import numpy as np
import pytest

import training
from config import default_config
from controller import MPPIConfig
from episode import PolicyMode
from models import DynamicsModel, featurize_arrays
from tensor_autodiff import AdamState
from training import (
    Dataset,
    TrainingDiverged,
    collect_phase,
    collect_settings_from_config,
    evaluate_nll,
    load_dataset,
    model_at_budget,
    run_scratch_baseline,
    sample_batch,
    save_dataset,
    train_from_scratch,
    train_phase,
)
from vehicle_sim import Action, VehicleSimulator, VehicleState, sample_system

from conftest import TINY_MODEL


def synthetic_dataset(n_systems=2, steps=30, reset_every=12, seed=0):
    """Random-action driving, split into segments at fixed reset points."""
    dataset = Dataset()
    rng = np.random.default_rng(seed)
    for i in range(n_systems):
        params = sample_system([seed, i])
        sim = VehicleSimulator(params, VehicleState(v_long=1.0))
        segments, segment = [], []
        for k in range(steps):
            if k and k % reset_every == 0:
                segments.append(segment)
                segment = []
                sim.reset_to(VehicleState(v_long=1.0))
            segment.append(sim.step(Action(*rng.uniform(-1, 1, 2)), noise_seed=[seed, i, k]))
        segments.append(segment)
        dataset.add(params, f"track-{i}", segments)
    return dataset


def small_settings(steps):
    cfg = default_config()
    settings = collect_settings_from_config(cfg, steps)
    return dataclasses.replace(settings, mppi=MPPIConfig(horizon=3, candidates=4, stochastic_evals=2))


class TestDataset:

    def test_segments_are_adjacent(self):
        dataset = synthetic_dataset()
        assert len(dataset) == 60
        for record in dataset.trajectories:
            np.testing.assert_array_equal(record.states[1:], record.next_states[:-1])

    def test_start_indices_follow_system_timeline(self):
        dataset = synthetic_dataset(n_systems=1, steps=30, reset_every=12)
        assert [r.start for r in dataset.trajectories] == [0, 12, 24]
        assert dataset.system_length(dataset.trajectories[0].system_id) == 30

    def test_system_features_in_time_order(self):
        dataset = synthetic_dataset(n_systems=1)
        system_id = dataset.trajectories[0].system_id
        features = dataset.system_features(system_id)
        first = dataset.trajectories[0]
        np.testing.assert_array_equal(features[:12], featurize_arrays(first.states, first.actions, first.next_states))

    def test_extend_offsets_repeat_systems(self):
        a = synthetic_dataset(n_systems=1, steps=10, reset_every=100)
        b = synthetic_dataset(n_systems=1, steps=10, reset_every=100)
        a.extend(b)
        assert [r.start for r in a.trajectories] == [0, 10]
        assert len(a.system_features(a.trajectories[0].system_id)) == 20

    def test_save_load_round_trip(self, tmp_path):
        dataset = synthetic_dataset()
        path = str(tmp_path / "data.jsonl")
        save_dataset(path, dataset, append=False)
        loaded = load_dataset(path)
        assert loaded.systems == dataset.systems
        assert len(loaded) == len(dataset)
        assert len(loaded.trajectories) == len(dataset.trajectories)
        for system_id in dataset.systems:
            np.testing.assert_array_equal(loaded.system_features(system_id), dataset.system_features(system_id))


class TestSampling:

    def test_history_is_strict_prefix(self):
        dataset = synthetic_dataset(n_systems=1, steps=40, reset_every=100)
        record = dataset.trajectories[0]
        features = dataset.system_features(record.system_id)
        batch = sample_batch(dataset, 64, 1, np.random.default_rng(0), history_cap=100)
        for b, history in enumerate(batch.histories):
            np.testing.assert_array_equal(history, features[:len(history)])
            if len(history):
                np.testing.assert_array_equal(batch.states[b, 0], record.states[len(history) + 1])

    def test_history_capped(self):
        dataset = synthetic_dataset(n_systems=1, steps=40, reset_every=100)
        batch = sample_batch(dataset, 16, 2, np.random.default_rng(1), history_cap=5)
        assert all(len(h) <= 5 for h in batch.histories)
        assert batch.targets.shape == (16, 2, 6)

    def test_window_longer_than_any_trajectory(self):
        dataset = synthetic_dataset(n_systems=1, steps=10, reset_every=5)
        with pytest.raises(ValueError):
            sample_batch(dataset, 4, 6, np.random.default_rng(0), history_cap=16)


class TestCollection:

    def test_zero_systems_gives_empty_dataset(self, tiny_model):
        dataset = collect_phase(0, 10, tiny_model.snapshot(), [1], small_settings(10))
        assert len(dataset) == 0 and not dataset.systems

    def test_records_every_step(self, tiny_model):
        dataset = collect_phase(1, 6, tiny_model.snapshot(), [2], small_settings(6))
        assert len(dataset) == 6
        for record in dataset.trajectories:
            np.testing.assert_array_equal(record.states[1:], record.next_states[:-1])

    def test_same_seed_same_transitions(self, tiny_model):
        runs = [collect_phase(2, 5, tiny_model.snapshot(), [6], small_settings(5)) for _ in range(2)]
        assert runs[0].systems == runs[1].systems
        assert len(runs[0].trajectories) == len(runs[1].trajectories)
        for a, b in zip(runs[0].trajectories, runs[1].trajectories):
            assert (a.system_id, a.start) == (b.system_id, b.start)
            np.testing.assert_array_equal(a.states, b.states)
            np.testing.assert_array_equal(a.actions, b.actions)
            np.testing.assert_array_equal(a.next_states, b.next_states)

    def test_collection_does_not_touch_model(self, tiny_model):
        before = tiny_model.state_dict()
        collect_phase(1, 4, tiny_model.snapshot(), [3], small_settings(4))
        for name, value in tiny_model.state_dict().items():
            assert np.array_equal(value, before[name])


class TestTraining:

    def test_empty_dataset_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            train_phase(Dataset(), tiny_model, 1, 4, 0)

    def test_zero_learning_rate_changes_nothing(self, tiny_model):
        before = tiny_model.state_dict()
        train_phase(synthetic_dataset(), tiny_model, 3, 4, [0], learning_rate=0.0, window=2)
        for name, value in tiny_model.state_dict().items():
            assert np.array_equal(value, before[name]), name

    def test_reproducible(self):
        dataset = synthetic_dataset()
        runs = []
        for _ in range(2):
            model = DynamicsModel(TINY_MODEL, seed=3)
            runs.append(train_phase(dataset, model, 4, 4, [5], window=2).losses)
        assert runs[0] == runs[1]

    def test_loss_decreases(self):
        dataset = synthetic_dataset(n_systems=3, steps=40)
        model = DynamicsModel(TINY_MODEL, seed=0)
        result = train_phase(dataset, model, 80, 8, [0], learning_rate=3e-3, window=2)
        assert len(result.losses) == 80
        assert np.mean(result.losses[-10:]) < np.mean(result.losses[:10])

    def test_non_finite_loss_skips_and_halves_rate(self, tiny_model):
        tiny_model.adm.head.bias.data[0] = np.nan
        result = train_phase(synthetic_dataset(), tiny_model, 2, 4, [0], learning_rate=1e-3, window=2,
                             max_nan_failures=10)
        assert result.skipped == 2
        assert result.losses == []
        assert result.adam.lr == pytest.approx(5e-4)

    def test_repeated_failures_raise(self, tiny_model):
        tiny_model.adm.head.bias.data[0] = np.nan
        with pytest.raises(TrainingDiverged):
            train_phase(synthetic_dataset(), tiny_model, 5, 4, [0], window=2, max_nan_failures=3)

    def test_adam_state_carries_over(self, tiny_model):
        dataset = synthetic_dataset()
        first = train_phase(dataset, tiny_model, 2, 4, [0], window=2)
        second = train_phase(dataset, tiny_model, 2, 4, [1], adam=first.adam, window=2)
        assert isinstance(second.adam, AdamState)
        assert second.adam.step == 4

    def test_evaluate_nll_leaves_model_alone(self, tiny_model):
        before = tiny_model.state_dict()
        value = evaluate_nll(synthetic_dataset(), tiny_model, n_batches=2, batch_size=4, window=2)
        assert np.isfinite(value)
        for name, array in tiny_model.state_dict().items():
            assert np.array_equal(array, before[name])


class TestScratchBaseline:

    def test_below_first_interval_is_untrained(self):
        cfg = default_config()
        cfg["model"].update(TINY_MODEL)
        model = train_from_scratch(synthetic_dataset(n_systems=1), 100, cfg, [4])
        fresh = DynamicsModel(cfg["model"], seed=4)
        for name, value in model.state_dict().items():
            assert np.array_equal(value, fresh.state_dict()[name])

    def test_retrains_at_interval(self):
        cfg = default_config()
        cfg["model"].update(TINY_MODEL)
        cfg["training"].update(scratch_retrain_interval=20, scratch_updates=2, batch_size=4)
        model = train_from_scratch(synthetic_dataset(n_systems=1, steps=30), 25, cfg, [4])
        fresh = DynamicsModel(cfg["model"], seed=4)
        changed = [not np.array_equal(v, fresh.state_dict()[k]) for k, v in model.state_dict().items()]
        assert any(changed)


def baseline_cfg():
    cfg = default_config()
    cfg["model"].update(TINY_MODEL)
    cfg["mppi"].update(horizon=3, candidates=4, stochastic_evals=2)
    cfg["training"].update(scratch_retrain_interval=4, scratch_updates=2, batch_size=2, target_window=2)
    return cfg


class TestSelfCollectingBaseline:

    def test_baseline_drives_on_its_own_models(self, easy_system, straight, monkeypatch):
        calls = []
        real_drive = training.drive

        def recording_drive(params, track, model, mode, *args, **kwargs):
            metrics = real_drive(params, track, model, mode, *args, **kwargs)
            calls.append((model.state_dict(), mode, sum(len(s) for s in metrics.segments)))
            return metrics

        monkeypatch.setattr(training, "drive", recording_drive)
        models, dataset = run_scratch_baseline(easy_system, straight, baseline_cfg(), 9, [3])

        assert sorted(models) == [0, 4, 8]
        assert [mode for _, mode, _ in calls] == [PolicyMode.ZERO_CONTEXT] * 2
        for (driven, _, _), collected in zip(calls, (0, 4)):
            for name, value in models[collected].state_dict().items():
                assert np.array_equal(driven[name], value), name
        assert [steps for _, _, steps in calls] == [4, 4]
        assert len(dataset) == 8
        assert set(dataset.systems) == {easy_system.system_id}

    def test_retraining_changes_the_model(self, easy_system, straight):
        models, dataset = run_scratch_baseline(easy_system, straight, baseline_cfg(), 8, [3])
        untrained = models[0].state_dict()
        assert any(not np.array_equal(v, untrained[k]) for k, v in models[4].state_dict().items())
        assert len(dataset) == 8

    def test_budget_below_interval_keeps_initialization(self, easy_system, straight):
        models, dataset = run_scratch_baseline(easy_system, straight, baseline_cfg(), 3, [3])
        assert list(models) == [0] and len(dataset) == 0

    def test_model_at_budget_picks_latest_trained(self):
        models = {0: "init", 4: "four", 8: "eight"}
        assert model_at_budget(models, 0) == "init"
        assert model_at_budget(models, 7) == "four"
        assert model_at_budget(models, 500) == "eight"
