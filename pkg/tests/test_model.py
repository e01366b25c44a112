"""Model tests: transforms, support coding, both model implementations,
optimizer plumbing, and checkpoint round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointplan.autodiff import Tensor, log_softmax
from jointplan.core import RngStream, ShapeMismatchError
from jointplan.model import (
    Adam,
    LearnedModel,
    ModelConfig,
    NanGradientError,
    ObservationHistory,
    Support,
    TabularModel,
    clip_grad_norm,
    decode_logits,
    encode_target,
    load_checkpoint,
    save_checkpoint,
    scalar_to_support,
    sinusoidal_encoding,
    stack_episode_observations,
    support_to_scalar,
    value_transform,
    value_transform_inv,
)


class TestValueTransform:
    def test_zero_fixed_point(self):
        assert value_transform(0.0) == 0.0

    def test_known_value(self):
        # sqrt(3+1) - 1 + 0.001*3
        assert value_transform(3.0) == pytest.approx(1.003, abs=1e-15)

    def test_inverse_of_known_value(self):
        assert value_transform_inv(1.003) == pytest.approx(3.0, abs=1e-9)

    def test_odd_symmetry(self):
        x = np.linspace(0.1, 50, 25)
        np.testing.assert_allclose(value_transform(-x), -value_transform(x), atol=1e-15)

    def test_round_trip_grid(self):
        x = np.linspace(-100, 100, 2001)
        back = value_transform_inv(value_transform(x))
        np.testing.assert_allclose(back, x, rtol=1e-9, atol=1e-9)

    @given(st.floats(-1e6, 1e6))
    def test_round_trip_property(self, x):
        assert value_transform_inv(value_transform(x)) == pytest.approx(
            x, rel=1e-9, abs=1e-9
        )

    def test_monotone(self):
        x = np.linspace(-20, 20, 500)
        assert np.all(np.diff(value_transform(x)) > 0)


class TestSupport:
    def test_centers(self):
        c = Support().centers()
        assert len(c) == 10
        assert c[0] == -5.0 and c[-1] == 5.0
        assert np.all(np.diff(c) > 0)
        np.testing.assert_allclose(np.diff(c), 10.0 / 9.0)

    def test_boundary_low(self):
        w = scalar_to_support(-5.0, Support())
        assert w[0] == 1.0 and np.all(w[1:] == 0.0)

    def test_boundary_high(self):
        w = scalar_to_support(5.0, Support())
        assert w[-1] == 1.0 and np.all(w[:-1] == 0.0)

    def test_zero_splits_middle_bins(self):
        w = scalar_to_support(0.0, Support())
        np.testing.assert_allclose(w[4:6], [0.5, 0.5])
        assert np.all(w[:4] == 0) and np.all(w[6:] == 0)

    def test_round_trip(self):
        s = Support()
        assert support_to_scalar(scalar_to_support(1.7, s), s) == pytest.approx(
            1.7, abs=1e-12
        )

    def test_clamps_out_of_range(self):
        s = Support()
        assert support_to_scalar(scalar_to_support(9.0, s), s) == pytest.approx(5.0)

    @given(st.floats(-5, 5))
    def test_round_trip_property(self, x):
        s = Support()
        w = scalar_to_support(x, s)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.count_nonzero(w) <= 2
        assert support_to_scalar(w, s) == pytest.approx(x, abs=1e-12)

    def test_batched(self):
        s = Support()
        xs = np.array([-5.0, -1.2, 0.0, 3.3, 5.0])
        w = scalar_to_support(xs, s)
        assert w.shape == (5, 10)
        np.testing.assert_allclose(support_to_scalar(w, s), xs, atol=1e-12)

    def test_uniform_logits_decode_to_zero(self):
        # symmetric support: uniform softmax has expectation 0, inverse(0)=0
        assert decode_logits(np.zeros(10), Support()) == pytest.approx(0.0, abs=1e-12)

    def test_encode_target_uses_transform(self):
        s = Support()
        w = encode_target(3.0, s)
        assert support_to_scalar(w, s) == pytest.approx(value_transform(3.0), abs=1e-12)


class TestObservationHistory:
    def test_depth_exactly_four(self):
        h = ObservationHistory(1, 2)
        h.reset([np.array([1.0, 2.0])])
        assert h.stacked().shape == (1, 8)

    def test_zero_padding_at_start(self):
        h = ObservationHistory(1, 2)
        h.reset([np.array([1.0, 2.0])])
        np.testing.assert_allclose(h.stacked()[0], [0, 0, 0, 0, 0, 0, 1, 2])

    def test_oldest_frame_drops(self):
        h = ObservationHistory(1, 1)
        h.reset([np.array([1.0])])
        for v in (2.0, 3.0, 4.0, 5.0):
            h.push([np.array([v])])
        np.testing.assert_allclose(h.stacked()[0], [2, 3, 4, 5])

    def test_shape_checks(self):
        h = ObservationHistory(2, 3)
        with pytest.raises(ShapeMismatchError):
            h.reset([np.zeros(3)])
        with pytest.raises(ShapeMismatchError):
            h.reset([np.zeros(2), np.zeros(2)])

    def test_episode_stacking_helper(self):
        obs = [[np.array([float(t)])] for t in range(3)]
        stacks = stack_episode_observations(obs, 1, 1)
        np.testing.assert_allclose(stacks[0][0], [0, 0, 0, 0])
        np.testing.assert_allclose(stacks[2][0], [0, 0, 1, 2])


class TestTabularModel:
    @staticmethod
    def _chain_model():
        def transition(state, action):
            if state == "end":
                return "end", 0.0
            return "end", 1.0 + action[0]

        return TabularModel(
            1, (2,), transition, value_fn=lambda s: 5.0 if s == "start" else 0.0
        )

    def test_identity_representation(self):
        m = self._chain_model()
        assert m.initial_state("start") == "start"

    def test_exact_transition(self):
        m = self._chain_model()
        nxt, r = m.step("start", (1,))
        assert nxt == "end" and r == 2.0

    def test_value_table(self):
        m = self._chain_model()
        v, policies = m.predict("start")
        assert v == 5.0
        np.testing.assert_allclose(policies[0], [0.5, 0.5])

    def test_custom_policy(self):
        m = TabularModel(
            1, (3,), lambda s, a: (s, 0.0),
            policy_fn=lambda s: (np.array([0.2, 0.3, 0.5]),),
        )
        _, policies = m.predict("x")
        np.testing.assert_allclose(policies[0], [0.2, 0.3, 0.5])


def small_config(**overrides):
    base = dict(
        n_agents=2,
        obs_dim=6,
        action_dims=(2, 3),
        latent_dim=4,
        trunk_hidden=(5,),
        head_hidden=(3,),
        support=Support(),
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestLearnedModelStructure:
    def test_bias_only_representation(self):
        m = LearnedModel(small_config(), rng=RngStream(1))
        for name, t in m.params.items():
            if name.startswith("repr.") and name.endswith(".w"):
                t.data = np.zeros_like(t.data)
            if name == "repr.0.b" or name.endswith("ln_b") or name == "repr.in_ln_b":
                t.data = np.zeros_like(t.data)
        final_bias = np.array([0.3, -0.1, 0.7, 0.2])
        m.params["repr.1.b"].data = final_bias.copy()
        obs = np.random.default_rng(0).standard_normal((2, 6))
        latents = m.initial_state(obs)
        np.testing.assert_allclose(latents[0], final_bias, atol=1e-12)
        np.testing.assert_allclose(latents[1], final_bias, atol=1e-12)

    def test_residual_dynamics_identity_when_zero(self):
        m = LearnedModel(small_config(), rng=RngStream(2))
        for name, t in m.params.items():
            if name.startswith("dyn."):
                t.data = np.zeros_like(t.data)
        state = np.random.default_rng(1).standard_normal((2, 4))
        nxt, _ = m.step(state, (0, 1))
        np.testing.assert_allclose(nxt, state, atol=1e-12)

    def test_single_agent_attention_is_value_projection(self):
        cfg = small_config(n_agents=1, action_dims=(2,))
        m = LearnedModel(cfg, rng=RngStream(3))
        state = np.random.default_rng(2).standard_normal((1, 1, 4))
        feats = m.communicate_t(Tensor(state), np.array([[1]])).data
        onehot = np.zeros(m.config.max_action_dim)
        onehot[1] = 1.0
        token = (
            np.concatenate([state[0, 0], onehot])
            @ m.params["comm.enc.w"].data
            + m.params["comm.enc.b"].data
        )
        token = token + sinusoidal_encoding(1, 4)[0]
        expected = token @ m.params["comm.0.v"].data
        np.testing.assert_allclose(feats[0, 0], expected, atol=1e-12)

    def test_identical_agents_identical_features_without_positions(self):
        cfg = small_config(action_dims=(3, 3), positional_encoding=False)
        m = LearnedModel(cfg, rng=RngStream(4))
        row = np.random.default_rng(3).standard_normal(4)
        state = np.stack([row, row])[None]
        feats = m.communicate_t(Tensor(state), np.array([[2, 2]])).data[0]
        np.testing.assert_allclose(feats[0], feats[1], atol=1e-12)

    def test_attention_weights_match_manual_arithmetic(self):
        cfg = ModelConfig(
            n_agents=2, obs_dim=4, action_dims=(2, 2), latent_dim=2,
            trunk_hidden=(3,), head_hidden=(3,), positional_encoding=False,
        )
        m = LearnedModel(cfg, rng=RngStream(5))
        # encoder passes the latent straight through, ignores the action
        m.params["comm.enc.w"].data = np.array(
            [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]
        )
        m.params["comm.enc.b"].data = np.zeros(2)
        m.params["comm.0.q"].data = np.eye(2)
        m.params["comm.0.k"].data = np.eye(2)
        m.params["comm.0.v"].data = 2.0 * np.eye(2)
        state = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        feats = m.communicate_t(Tensor(state), np.array([[0, 0]])).data[0]
        # scores row 1: (1/sqrt(2), 0); softmax by hand
        s = 1.0 / np.sqrt(2.0)
        a11 = np.exp(s) / (np.exp(s) + 1.0)
        expected_row1 = a11 * np.array([2.0, 0.0]) + (1 - a11) * np.array([0.0, 2.0])
        np.testing.assert_allclose(feats[0], expected_row1, atol=1e-12)
        np.testing.assert_allclose(feats[1], expected_row1[::-1], atol=1e-12)

    def test_agent_swap_symmetry(self):
        cfg = small_config(action_dims=(3, 3), positional_encoding=False)
        m = LearnedModel(cfg, rng=RngStream(6))
        obs = np.random.default_rng(4).standard_normal((2, 6))
        lat = m.initial_state(obs)
        lat_swapped = m.initial_state(obs[::-1])
        np.testing.assert_allclose(lat_swapped, lat[::-1], atol=1e-12)
        _, pols = m.predict(lat)
        _, pols_swapped = m.predict(lat[::-1])
        np.testing.assert_allclose(pols_swapped[0], pols[1], atol=1e-12)
        np.testing.assert_allclose(pols_swapped[1], pols[0], atol=1e-12)

    def test_policy_slices_respect_action_dims(self):
        m = LearnedModel(small_config(), rng=RngStream(7))
        obs = np.random.default_rng(5).standard_normal((2, 6))
        _, pols = m.predict(m.initial_state(obs))
        assert pols[0].shape == (2,) and pols[1].shape == (3,)
        for p in pols:
            assert p.sum() == pytest.approx(1.0, abs=1e-9)

    def test_rejects_bad_observation_shape(self):
        m = LearnedModel(small_config(), rng=RngStream(8))
        with pytest.raises(ShapeMismatchError):
            m.initial_state(np.zeros((3, 6)))


class TestLearnedModelRegression:
    """Frozen seed-0 outputs guard against silent numeric drift."""

    def _model_and_obs(self):
        m = LearnedModel(small_config(), rng=RngStream(0))
        obs = RngStream(7).split("obs").generator().standard_normal((2, 6))
        return m, obs

    def test_golden_latent(self):
        m, obs = self._model_and_obs()
        expected = np.array(
            [
                [-0.19112782353433977, 0.23054775759056415,
                 0.01587595809705918, 0.3035353087266592],
                [-0.6232278753766934, -0.01936681656488848,
                 -0.6731952417979568, 0.5985684349304444],
            ]
        )
        np.testing.assert_allclose(m.initial_state(obs), expected, atol=1e-9)

    def test_golden_step(self):
        m, obs = self._model_and_obs()
        nxt, reward = m.step(m.initial_state(obs), (1, 2))
        expected = np.array(
            [
                [1.0603850269449895, -0.273566053211843,
                 0.23167714086246666, 0.45136148845848384],
                [-0.01795768644070106, -0.0332572533958263,
                 -1.0196893788046584, 0.34708002678514205],
            ]
        )
        np.testing.assert_allclose(nxt, expected, atol=1e-9)
        assert reward == pytest.approx(1.6765124522224646, abs=1e-9)

    def test_golden_prediction(self):
        m, obs = self._model_and_obs()
        v, pols = m.predict(m.initial_state(obs))
        assert v == pytest.approx(-0.4274514802060656, abs=1e-9)
        np.testing.assert_allclose(
            pols[0], [0.5771358787432778, 0.42286412125672224], atol=1e-9
        )
        np.testing.assert_allclose(
            pols[1],
            [0.5737024702039732, 0.30696407016107446, 0.11933345963495223],
            atol=1e-9,
        )

    def test_init_deterministic(self):
        a = LearnedModel(small_config(), rng=RngStream(0))
        b = LearnedModel(small_config(), rng=RngStream(0))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


class TestGradients:
    def _loss(self, m: LearnedModel, obs, actions, v_w, r_w):
        states = m.represent_t(Tensor(obs[None]))
        nxt, r_out = m.step_t(states, actions[None])
        v_out = m.value_t(nxt)
        loss = -(Tensor(v_w[None]) * log_softmax(v_out)).sum()
        loss = loss - (Tensor(r_w[None]) * log_softmax(r_out)).sum()
        for i in range(m.n_agents):
            loss = loss - m.policy_log_probs_t(nxt, i)[:, 0].sum()
        return loss

    def test_full_model_gradient_vs_finite_differences(self):
        m = LearnedModel(small_config(), rng=RngStream(11))
        gen = np.random.default_rng(9)
        obs = gen.standard_normal((2, 6))
        actions = np.array([1, 2])
        v_w = encode_target(0.7, m.config.support)
        r_w = encode_target(-0.2, m.config.support)

        m.zero_grads()
        self._loss(m, obs, actions, v_w, r_w).backward()
        analytic = {k: (t.grad.copy() if t.grad is not None else None)
                    for k, t in m.params.items()}

        h = 1e-6
        checked = 0
        for name in sorted(m.params):
            t = m.params[name]
            flat = t.data.reshape(-1)
            for idx in gen.choice(flat.size, size=min(3, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                up = self._loss(m, obs, actions, v_w, r_w).item()
                flat[idx] = orig - h
                down = self._loss(m, obs, actions, v_w, r_w).item()
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = 0.0 if analytic[name] is None else analytic[name].reshape(-1)[idx]
                assert an == pytest.approx(fd, rel=1e-4, abs=1e-7), name
                checked += 1
        assert checked >= 100

    def test_nan_gradient_reports_block(self):
        m = LearnedModel(small_config(), rng=RngStream(12))
        m.zero_grads()
        m.params["dyn.0.w"].grad = np.full_like(m.params["dyn.0.w"].data, np.nan)
        with pytest.raises(NanGradientError) as err:
            m.check_finite_grads()
        assert err.value.block == "dyn"


class TestOptimizer:
    def test_adam_minimizes_quadratic(self):
        target = np.array([3.0, -2.0])
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        for _ in range(400):
            p.grad = None
            diff = p - Tensor(target)
            (diff * diff).sum().backward()
            opt.step()
        np.testing.assert_allclose(p.data, target, atol=1e-3)

    def test_clip_grad_norm_scales(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.array([3.0, 0.0, 4.0, 0.0])  # norm 5
        norm = clip_grad_norm({"p": p}, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0)

    def test_clip_noop_under_max(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([0.3, 0.4])
        clip_grad_norm({"p": p}, 5.0)
        np.testing.assert_allclose(p.grad, [0.3, 0.4])


class TestCheckpointsAndTargets:
    def test_checkpoint_round_trip(self, tmp_path):
        m = LearnedModel(small_config(), rng=RngStream(13))
        m.version = 42
        path = tmp_path / "model.npz"
        save_checkpoint(path, m, extra={"seed": 7})
        loaded, meta = load_checkpoint(path)
        assert meta["seed"] == 7 and meta["version"] == 42
        assert loaded.version == 42
        assert loaded.config == m.config
        for name in m.params:
            np.testing.assert_array_equal(loaded.params[name].data, m.params[name].data)
        obs = np.random.default_rng(6).standard_normal((2, 6))
        np.testing.assert_array_equal(loaded.initial_state(obs), m.initial_state(obs))

    def test_checkpoint_rejects_unknown_format(self, tmp_path):
        m = LearnedModel(small_config(), rng=RngStream(14))
        path = tmp_path / "model.npz"
        save_checkpoint(path, m)
        import json

        import numpy as np_mod

        with np_mod.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        meta = json.loads(bytes(arrays["__meta__"]).decode())
        meta["format_version"] = 99
        arrays["__meta__"] = np_mod.frombuffer(
            json.dumps(meta).encode(), dtype=np_mod.uint8
        )
        np_mod.savez(path, **arrays)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_target_sync_is_deep_copy(self):
        m = LearnedModel(small_config(), rng=RngStream(15))
        target = m.clone()
        m.params["value.0.w"].data += 1.0
        m.version += 1
        assert not np.allclose(
            target.params["value.0.w"].data, m.params["value.0.w"].data
        )
        target.load_state(m)
        assert target.version == m.version
        np.testing.assert_array_equal(
            target.params["value.0.w"].data, m.params["value.0.w"].data
        )


class TestPositionalEncoding:
    def test_first_position_alternates_zero_one(self):
        enc = sinusoidal_encoding(3, 4)
        np.testing.assert_allclose(enc[0], [0.0, 1.0, 0.0, 1.0], atol=1e-12)

    def test_positions_distinct(self):
        enc = sinusoidal_encoding(4, 8)
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.allclose(enc[i], enc[j])

    def test_bounded(self):
        enc = sinusoidal_encoding(10, 16)
        assert np.all(np.abs(enc) <= 1.0)
