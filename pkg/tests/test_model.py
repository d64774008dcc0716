import math
from dataclasses import replace

import numpy as np
import pytest

from egpde import autodiff as ad
from egpde.autodiff import ShapeError, Tensor
from egpde.layers import GRUCell
from egpde.model import (POS_EPS, AblationMode, EgPDENet, ModelConfig, UnsupportedFeatureError, apply_ablation,
                         encode, expected_param_count, joint_dynamics, param_count, solve_latents, variable_weights)
from egpde.ode import SolverConfig, rk4_step
from egpde.training import mse_loss, tiny_gradcheck


def np_softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def np_mlp(net, x):
    return np.tanh(x @ net.hidden.weight.data.T + net.hidden.bias.data) @ net.out.weight.data.T + net.out.bias.data


def np_joint(model, s):
    d = model.cfg.latent_dim
    zx, z = s[..., :d], s[..., d:]
    pos_zx = np_softplus(zx) + POS_EPS
    pos_f = np_softplus(np_mlp(model.f_net, z)) + POS_EPS
    return np.concatenate([np_mlp(model.g_net, zx), np.log(pos_zx) + np.log(pos_f)], axis=-1)


def window(cfg, rng, batch=()):
    return (Tensor(rng.normal(size=batch + (cfg.window, cfg.n_exog))), Tensor(rng.normal(size=batch + (cfg.window,))))


def zero_all(model):
    for _, p in model.named_parameters():
        p.data[...] = 0.0


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.window, cfg.n_exog, cfg.latent_dim, cfg.horizon) == (20, 13, 16, 3)

    @pytest.mark.parametrize("kwargs", [dict(latent_dim=0), dict(d_model=6, num_heads=4), dict(offsets=(2.0, 1.0)),
                                        dict(offsets=())])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_mode_from_string(self):
        assert ModelConfig(mode="no_zx_ode").mode is AblationMode.NO_ZX_ODE


class TestEncode:
    def test_zero_params_zero_state(self, tiny_model, rng):
        zero_all(tiny_model)
        x, y = window(tiny_model.cfg, rng)
        np.testing.assert_array_equal(encode(tiny_model, x, y).state.data, np.zeros(8))

    def test_degenerate_window(self):
        model = EgPDENet(ModelConfig(window=1, n_exog=1, latent_dim=2, rnn_dim=3, d_model=2, num_heads=1))
        enc = encode(model, Tensor([[0.3]]), Tensor([0.2]))
        assert enc.state.shape == (4,)
        assert np.all(np.isfinite(enc.state.data))

    def test_deterministic(self, tiny_cfg, rng):
        x, y = window(tiny_cfg, rng)
        a = encode(EgPDENet(tiny_cfg), x, y).state.data
        b = encode(EgPDENet(tiny_cfg), x, y).state.data
        assert a.tobytes() == b.tobytes()

    def test_shape_errors(self, tiny_model):
        with pytest.raises(ShapeError):
            encode(tiny_model, Tensor(np.zeros((5, 4))), Tensor(np.zeros(5)))
        with pytest.raises(ShapeError):
            encode(tiny_model, Tensor(np.zeros((5, 3))), Tensor(np.zeros(4)))


class TestDynamics:
    def test_log_product_decomposition(self, tiny_model, rng):
        d = tiny_model.cfg.latent_dim
        for _ in range(100):
            s = rng.normal(size=2 * d) * 3
            out = joint_dynamics(tiny_model, 0.0, Tensor(s)).data
            zx, z = s[:d], s[d:]
            expected = np.log(np_softplus(zx) + POS_EPS) + np.log(np_softplus(np_mlp(tiny_model.f_net, z)) + POS_EPS)
            np.testing.assert_allclose(out[d:], expected, atol=1e-10, rtol=0)
            np.testing.assert_allclose(out[:d], np_mlp(tiny_model.g_net, zx), atol=1e-12)

    def test_small_state_rk4_oracle(self):
        model = EgPDENet(ModelConfig(window=3, n_exog=2, latent_dim=2, rnn_dim=2, d_model=2, num_heads=1))
        model.g_net.hidden.weight.data[...] = [[0.5, -0.2], [0.1, 0.3]]
        model.g_net.hidden.bias.data[...] = [0.0, 0.1]
        model.g_net.out.weight.data[...] = [[-0.4, 0.2], [0.3, -0.6]]
        model.g_net.out.bias.data[...] = [0.05, -0.05]
        model.f_net.hidden.weight.data[...] = [[1.0, 0.0], [0.5, 0.5]]
        model.f_net.hidden.bias.data[...] = [-0.2, 0.2]
        model.f_net.out.weight.data[...] = [[0.7, -0.3], [0.2, 0.9]]
        model.f_net.out.bias.data[...] = [0.1, 0.0]
        s0 = np.array([0.3, -0.8, 0.5, 1.2])
        h = 0.1
        k1 = np_joint(model, s0)
        k2 = np_joint(model, s0 + h / 2 * k1)
        k3 = np_joint(model, s0 + h / 2 * k2)
        k4 = np_joint(model, s0 + h * k3)
        expected = s0 + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        got = rk4_step(lambda t, s: joint_dynamics(model, t, s), Tensor(s0), 0.0, h).data
        np.testing.assert_allclose(got, expected, atol=1e-14)

    def test_frozen_dynamics(self, tiny_model, rng):
        d = tiny_model.cfg.latent_dim
        v = math.log(math.expm1(1.0 - POS_EPS))  # pos(v) == 1
        for net in (tiny_model.g_net, tiny_model.f_net):
            net.out.weight.data[...] = 0.0
            net.out.bias.data[...] = 0.0
        tiny_model.f_net.out.bias.data[...] = v
        tiny_model.attention.pool.weight.data[...] = 0.0
        tiny_model.attention.pool.bias.data[...] = v
        x, y = window(tiny_model.cfg, rng)
        s = encode(tiny_model, x, y).state
        np.testing.assert_allclose(joint_dynamics(tiny_model, 0.0, s).data, 0.0, atol=1e-15)
        pred = tiny_model.predict(x.data, y.data, [0.5, 1.0, 1.5, 2.0, 3.7])
        np.testing.assert_allclose(pred, pred[0], atol=1e-13, rtol=0)

    def test_exogenous_half_ignores_target_history(self, tiny_model, rng):
        d = tiny_model.cfg.latent_dim
        x, y = window(tiny_model.cfg, rng)
        y_perm = Tensor(y.data[rng.permutation(len(y.data))])
        a = solve_latents(tiny_model, encode(tiny_model, x, y), [1.0, 2.5])
        b = solve_latents(tiny_model, encode(tiny_model, x, y_perm), [1.0, 2.5])
        for sa, sb in zip(a, b):
            assert sa.data[:d].tobytes() == sb.data[:d].tobytes()
            assert not np.array_equal(sa.data[d:], sb.data[d:])

    def test_gradients_reach_guidance_and_attention(self, tiny_model, rng):
        x, y = window(tiny_model.cfg, rng, (4,))
        loss = mse_loss(tiny_model.forecast(x, y, [1.0, 2.0]), Tensor(rng.normal(size=(4, 2))))
        ad.backward(loss)
        for name, p in tiny_model.named_parameters():
            if name.startswith(("g_net.", "attention.")):
                assert np.any(p.grad != 0), name


class TestForecast:
    def test_sml_shaped(self, rng):
        model = EgPDENet(ModelConfig())
        x, y = window(model.cfg, rng)
        pred = model.predict(x.data, y.data, [1, 1.5, 2, 2.5, 3])
        assert pred.shape == (5,)
        assert np.all(np.isfinite(pred))

    def test_grid_union(self, tiny_model, rng):
        x, y = window(tiny_model.cfg, rng, (3,))
        three = tiny_model.predict(x.data, y.data, [1, 2, 3])
        five = tiny_model.predict(x.data, y.data, [1, 1.5, 2, 2.5, 3])
        np.testing.assert_allclose(five[:, ::2], three, atol=1e-9, rtol=0)

    def test_deterministic(self, tiny_model, rng):
        x, y = window(tiny_model.cfg, rng, (3,))
        a = tiny_model.predict(x.data, y.data, [0.5, 1.7])
        b = tiny_model.predict(x.data, y.data, [0.5, 1.7])
        assert a.tobytes() == b.tobytes()

    def test_batch_matches_single(self, tiny_model, rng):
        x, y = window(tiny_model.cfg, rng, (3,))
        batch = tiny_model.predict(x.data, y.data, [1, 2])
        for i in range(3):
            np.testing.assert_allclose(batch[i], tiny_model.predict(x.data[i], y.data[i], [1, 2]), atol=1e-13)

    def test_continuity_in_time(self, tiny_model, rng):
        x, y = window(tiny_model.cfg, rng, (2,))
        for t in (0.5, 1.0, 1.25, 2.5):
            a = tiny_model.predict(x.data, y.data, [t])
            b = tiny_model.predict(x.data, y.data, [t + 1e-3])
            assert np.max(np.abs(a - b)) < 1e-2

    @pytest.mark.parametrize("mode", list(AblationMode))
    def test_all_modes_produce_finite_forecasts(self, tiny_cfg, rng, mode):
        model = EgPDENet(replace(tiny_cfg, mode=mode))
        x, y = window(tiny_cfg, rng, (2,))
        pred = model.predict(x.data, y.data, [0.5, 1.0, 1.5, 2.0, 2.5])
        assert pred.shape == (2, 5)
        assert np.all(np.isfinite(pred))

    def test_empty_times(self, tiny_model, rng):
        x, y = window(tiny_model.cfg, rng)
        with pytest.raises(ValueError):
            tiny_model.predict(x.data, y.data, [])

    def test_dopri5_close_to_rk4(self, tiny_model, rng):
        x, y = window(tiny_model.cfg, rng, (2,))
        a = tiny_model.predict(x.data, y.data, [1, 1.5, 2], SolverConfig(step=0.01))
        b = tiny_model.predict(x.data, y.data, [1, 1.5, 2], SolverConfig(method="dopri5", rtol=1e-8, atol=1e-10))
        np.testing.assert_allclose(a, b, atol=1e-7)


class TestAblation:
    def test_no_zx_ode_guide_vectors(self, tiny_cfg, rng):
        model = EgPDENet(replace(tiny_cfg, mode="no_zx_ode", offsets=(1.0, 2.0, 3.0)))
        enc = encode(model, *window(model.cfg, rng))
        assert len(enc.guide) == 3
        assert all(g.shape == (model.cfg.latent_dim,) for g in enc.guide)

    def test_no_zx_ode_guidance_is_piecewise(self, tiny_cfg, rng):
        from egpde.model import guided_dynamics

        model = EgPDENet(replace(tiny_cfg, mode="no_zx_ode"))
        enc = encode(model, *window(model.cfg, rng))
        z = Tensor(rng.normal(size=4))
        seg1 = [guided_dynamics(model, enc.guide, t, z).data for t in (0.0, 0.5, 1.0)]
        seg2 = [guided_dynamics(model, enc.guide, t, z).data for t in (1.01, 2.0, 5.0)]
        for v in seg1[1:]:
            np.testing.assert_array_equal(v, seg1[0])
        for v in seg2[1:]:
            np.testing.assert_array_equal(v, seg2[0])
        assert not np.array_equal(seg1[0], seg2[0])

    def test_no_self_att_has_no_variable_weights(self, tiny_cfg, rng):
        model = apply_ablation(tiny_cfg, "no_self_att")
        with pytest.raises(UnsupportedFeatureError):
            variable_weights(model, *window(tiny_cfg, rng))

    def test_variable_weights_simplex(self, tiny_model, rng):
        w = variable_weights(tiny_model, *window(tiny_model.cfg, rng))
        assert w.shape == (3,)
        assert w.sum() == pytest.approx(1.0, abs=1e-10)

    def test_apply_ablation_keeps_config(self, tiny_model):
        other = apply_ablation(tiny_model, AblationMode.NO_ZX_ODE)
        assert other.mode is AblationMode.NO_ZX_ODE
        assert replace(other.cfg, mode=AblationMode.FULL) == tiny_model.cfg

    @pytest.mark.parametrize("mode", ["no_self_att", "no_zx_ode"])
    def test_ablation_gradients(self, mode):
        assert tiny_gradcheck(mode=mode, batch=2, solver=SolverConfig(step=0.5)) < 1e-4


class TestParamCount:
    def test_decoder_alone(self):
        from egpde.layers import LinearLayer

        assert param_count(LinearLayer(4, 1)) == 5

    @pytest.mark.parametrize("mode", list(AblationMode))
    def test_matches_closed_form(self, mode):
        cfg = ModelConfig(mode=mode)
        assert param_count(EgPDENet(cfg)) == expected_param_count(cfg)

    def test_default_sizes(self):
        # d=16, d_rnn=32, d_model=16, 4 heads, T=20, N=13, hand-counted
        gru = 3 * (32 * 1 + 32 * 32 + 32)
        bridge = 32 * 16 + 16
        mlp = 2 * (16 * 16 + 16)
        decoder = 17
        attention = (16 * 20 + 16) + (3 * 16 * 16 + 2 * 16) + (16 * 16 + 16) + (16 * 16 + 16)
        assert attention == 1680
        assert param_count(EgPDENet(ModelConfig())) == gru + bridge + 2 * mlp + decoder + attention

    def test_ablation_deltas(self):
        full = param_count(EgPDENet(ModelConfig()))
        exog_gru = 3 * (16 * 13 + 16 * 16 + 16)
        lstm = 4 * (16 * 16 + 16 * 16 + 16)
        assert full - param_count(EgPDENet(ModelConfig(mode="no_self_att"))) == 1680 - exog_gru == 240
        assert full - param_count(EgPDENet(ModelConfig(mode="no_zx_ode"))) == 2 * (16 * 16 + 16) - lstm == -1568

    def test_doubling_rnn_dim(self):
        a = param_count(EgPDENet(ModelConfig(rnn_dim=32)))
        b = param_count(EgPDENet(ModelConfig(rnn_dim=64)))
        gru = lambda r: GRUCell.count(1, r) + 16 * r
        assert b - a == gru(64) - gru(32) == 3 * (64 + 64 * 64 + 64) - 3 * (32 + 32 * 32 + 32) + 16 * 32

    def test_invariant_across_constructions(self, tiny_cfg):
        assert param_count(EgPDENet(tiny_cfg)) == param_count(EgPDENet(tiny_cfg))

    def test_names_unique(self):
        for mode in AblationMode:
            names = [n for n, _ in EgPDENet(ModelConfig(mode=mode)).named_parameters()]
            assert len(names) == len(set(names))
