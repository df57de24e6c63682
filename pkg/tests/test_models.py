import math

import numpy as np
import pytest

from models import (
    FEATURE_DIM,
    DynamicsModel,
    History,
    ModelDivergence,
    adm_predict,
    apply_body_delta,
    body_delta,
    featurize_arrays,
    rollout_batch,
    rollout_mean,
    rollout_sample,
    sit_encode,
    subsample,
)
from tensor_autodiff import Tensor, forward_backward, gaussian_nll, numerical_gradient, relative_error
from vehicle_sim import Action, VehicleSimulator, VehicleState, sample_system

from conftest import TINY_MODEL


def driven_history(n, seed=0, capacity=16):
    params = sample_system([seed, 99])
    sim = VehicleSimulator(params, VehicleState(v_long=1.0))
    rng = np.random.default_rng(seed)
    history = History(params.system_id, capacity)
    for k in range(n):
        history.append(sim.step(Action(*rng.uniform(-1, 1, size=2)), noise_seed=[seed, k]))
    return history


class TestFeatures:

    def test_body_delta_inverts(self, rng):
        s = rng.normal(size=(10, 6))
        s_next = s + rng.normal(scale=0.3, size=(10, 6))
        recovered = apply_body_delta(s, body_delta(s, s_next))
        np.testing.assert_allclose(recovered[:, [0, 1, 3, 4, 5]], s_next[:, [0, 1, 3, 4, 5]], atol=1e-12)
        np.testing.assert_allclose(np.cos(recovered[:, 2]), np.cos(s_next[:, 2]), atol=1e-12)

    def test_features_ignore_world_pose(self, rng):
        delta = np.array([0.2, 0.05, 0.1, 0.3, -0.1, 0.2])
        velocities = np.array([2.0, 0.1, 0.3])
        a = np.array([0.4, -0.2])
        reference = None
        for pose in ([0.0, 0.0, 0.0], [5.0, -3.0, 2.5], [-1.0, 7.0, -3.0]):
            s = np.concatenate([pose, velocities])
            features = featurize_arrays(s, a, apply_body_delta(s, delta))
            if reference is None:
                reference = features
            np.testing.assert_allclose(features, reference, atol=1e-12)
        assert reference.shape == (FEATURE_DIM,)


class TestHistory:

    def test_empty_history(self, tiny_model):
        history = History("sys-empty", 16)
        assert history.features().shape == (0, FEATURE_DIM)
        context = sit_encode(history, tiny_model)
        assert context.shape == (TINY_MODEL["context_dim"],)
        assert np.all(np.isfinite(context))

    def test_prefix_is_causal(self):
        history = driven_history(8)
        head = history.prefix(5)
        assert len(head) == 5
        np.testing.assert_array_equal(head.features(), history.features()[:5])
        head.append(history.transitions[7])
        assert len(history) == 8

    def test_subsample_keeps_order_and_cap(self, rng):
        features = np.arange(40, dtype=float)[:, None] * np.ones((1, FEATURE_DIM))
        kept = subsample(features, 10, seed=[3])
        assert kept.shape == (10, FEATURE_DIM)
        assert np.all(np.diff(kept[:, 0]) > 0)
        np.testing.assert_array_equal(kept, subsample(features, 10, seed=[3]))
        assert subsample(features, 50) is features

    def test_encoding_does_not_modify_history(self, tiny_model):
        history = driven_history(6)
        before = history.features().copy()
        sit_encode(history, tiny_model, seed=[1])
        np.testing.assert_array_equal(history.features(), before)


class TestSystemIdentification:

    def test_permutation_invariant(self, tiny_model, rng):
        history = driven_history(10)
        shuffled = History(history.system_id, history.capacity)
        shuffled.extend([history.transitions[i] for i in rng.permutation(10)])
        np.testing.assert_allclose(sit_encode(history, tiny_model), sit_encode(shuffled, tiny_model), atol=1e-9)

    def test_long_history_subsampled_deterministically(self, tiny_model):
        history = driven_history(30)
        first = sit_encode(history, tiny_model, seed=[5])
        np.testing.assert_array_equal(first, sit_encode(history, tiny_model, seed=[5]))

    def test_nan_weights_raise(self, tiny_model):
        tiny_model.sit.project.bias.data[:] = np.nan
        with pytest.raises(ModelDivergence):
            sit_encode(driven_history(3), tiny_model)


class TestPrediction:

    def test_scale_diagonal_is_floored(self, tiny_model):
        tiny_model.adm.head.bias.data[6:12] = -1e3
        prediction, _ = adm_predict(VehicleState(v_long=1.0), Action(0.1, 0.2), tiny_model.zero_context(), tiny_model)
        assert np.all(np.diag(prediction.scale_tril) >= TINY_MODEL.get("scale_floor", 1e-4))

    def test_covariance_is_positive_definite(self, tiny_model, rng):
        for _ in range(5):
            s = VehicleState.from_array(rng.normal(size=6))
            prediction, _ = adm_predict(s, Action(*rng.uniform(-1, 1, 2)), rng.normal(size=4), tiny_model)
            cov = prediction.covariance
            np.testing.assert_allclose(cov, cov.T, atol=1e-12)
            assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_hidden_state_carries_over(self, tiny_model):
        s, a, c = VehicleState(v_long=1.0), Action(0.3, 0.3), tiny_model.zero_context()
        first, hidden = adm_predict(s, a, c, tiny_model)
        second, _ = adm_predict(s, a, c, tiny_model, hidden)
        assert not np.allclose(first.mean, second.mean)


class TestRollouts:

    def test_single_step_matches_prediction(self, tiny_model, rng):
        s0 = VehicleState(x=1.0, y=-2.0, yaw=0.4, v_long=1.5)
        c = rng.normal(size=4)
        prediction, _ = adm_predict(s0, Action(0.2, -0.5), c, tiny_model)
        states, diverged = rollout_mean(s0, np.array([[0.2, -0.5]]), c, tiny_model)
        assert not diverged
        np.testing.assert_allclose(states[0], apply_body_delta(s0.as_array(), prediction.mean), atol=1e-12)

    def test_zero_noise_scale_equals_mean(self, tiny_model, rng):
        s0 = VehicleState(v_long=1.0)
        actions = rng.uniform(-1, 1, size=(4, 6, 2))
        eps = rng.standard_normal((4, 6, 6))
        noisy, _ = rollout_batch(s0.as_array(), actions, tiny_model.zero_context(), tiny_model, eps, noise_scale=0.0)
        mean_, _ = rollout_batch(s0.as_array(), actions, tiny_model.zero_context(), tiny_model)
        np.testing.assert_array_equal(noisy, mean_)

    def test_sample_deterministic_per_seed(self, tiny_model, rng):
        s0 = VehicleState(v_long=1.0)
        actions = rng.uniform(-1, 1, size=(5, 2))
        a, _ = rollout_sample(s0, actions, tiny_model.zero_context(), tiny_model, seed=[4, 4])
        b, _ = rollout_sample(s0, actions, tiny_model.zero_context(), tiny_model, seed=[4, 4])
        c, _ = rollout_sample(s0, actions, tiny_model.zero_context(), tiny_model, seed=[4, 5])
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_one_step_sample_mean(self, tiny_model):
        s0 = VehicleState(v_long=1.0)
        c = tiny_model.zero_context()
        n, scale = 4000, 0.1
        prediction, _ = adm_predict(s0, Action(0.3, 0.3), c, tiny_model)
        eps = np.random.default_rng(21).standard_normal((n, 1, 6))
        states, _ = rollout_batch(s0.as_array(), np.tile([[[0.3, 0.3]]], (n, 1, 1)), c, tiny_model, eps, scale)
        deltas = body_delta(np.broadcast_to(s0.as_array(), (n, 6)), states[:, 0])
        std_err = scale * np.sqrt(np.diag(prediction.covariance)) / math.sqrt(n)
        assert np.all(np.abs(deltas.mean(axis=0) - prediction.mean) < 4.0 * std_err)

    def test_diverged_rollout_holds_last_state(self):
        model = DynamicsModel({**TINY_MODEL, "divergence_bound": 1e-6}, seed=3)
        s0 = np.zeros(6)
        states, diverged = rollout_batch(s0, np.zeros((2, 4, 2)), model.zero_context(), model)
        assert diverged.all()
        np.testing.assert_array_equal(states, 0.0)

    def test_actions_clamped(self, tiny_model):
        s0 = VehicleState(v_long=1.0).as_array()
        c = tiny_model.zero_context()
        wild, _ = rollout_batch(s0, np.full((1, 3, 2), 7.0), c, tiny_model)
        unit, _ = rollout_batch(s0, np.ones((1, 3, 2)), c, tiny_model)
        np.testing.assert_array_equal(wild, unit)


class TestPersistence:

    def test_save_load_reproduces_predictions(self, tiny_model, tmp_path):
        path = str(tmp_path / "model.json")
        tiny_model.save(path, {"cycle": 1})
        loaded, metadata = DynamicsModel.load(path)
        assert metadata["cycle"] == 1
        history = driven_history(5)
        np.testing.assert_array_equal(sit_encode(history, loaded), sit_encode(history, tiny_model))

    def test_snapshot_is_independent(self, tiny_model):
        frozen = tiny_model.snapshot()
        history = driven_history(4)
        before = sit_encode(history, frozen)
        for p in tiny_model.named_parameters().values():
            p.data = p.data + 1.0
        np.testing.assert_array_equal(sit_encode(history, frozen), before)


class TestJointGradient:

    def test_nll_through_encoder_and_dynamics(self, tiny_model):
        history = driven_history(3)
        features = history.features()
        inputs = np.array([[1.0, 0.1, -0.2, 0.3, 0.5]])
        target = np.array([[0.1, 0.0, 0.02, 0.2, -0.05, 0.1]])
        params = tiny_model.named_parameters()

        def loss():
            context = tiny_model.sit(features)
            mean_, diag, lower, _ = tiny_model.adm(inputs, context, tiny_model.adm.lstm.zero_state(1))
            return gaussian_nll(target, mean_, diag, lower)

        analytic = forward_backward(loss(), params)
        for name, p in params.items():
            numeric = numerical_gradient(lambda: loss().item(), p.data)
            assert relative_error(analytic[name], numeric) < 1e-4, name
