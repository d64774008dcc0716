import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egpde import autodiff as ad
from egpde import training
from egpde.autodiff import NonFiniteError, ShapeError, Tensor
from egpde.data import RawSeries, apply_normalizer, fit_normalizer, make_windows, stack_windows
from egpde.model import EgPDENet
from egpde.ode import SolverConfig
from egpde.training import (AdamState, CheckpointError, TrainConfig, TrainingDiverged, adam_step, batch_loss,
                            fit, load_checkpoint, mse_loss, save_checkpoint)

FAST = SolverConfig(step=0.25)


def trend_windows(n_windows=200, window=5, n_exog=3, horizon=2, seed=0):
    rng = np.random.default_rng(seed)
    n = n_windows + window + horizon - 1
    t = np.linspace(0, 1, n)
    cols = [t * (j + 1) + 0.01 * rng.standard_normal(n) for j in range(n_exog)] + [2 * t - 1]
    raw = RawSeries(names=[f"x{j}" for j in range(n_exog)] + ["y"], values=np.column_stack(cols),
                    target_column=n_exog)
    norm = apply_normalizer(fit_normalizer(raw), raw)
    return make_windows(norm, window, list(range(1, horizon + 1)))


class TestMSE:
    def test_zero(self, rng):
        a = rng.normal(size=(3, 2))
        assert mse_loss(Tensor(a), Tensor(a)).item() == 0.0

    def test_hand_value(self):
        assert mse_loss(Tensor([[0.0, 0.0]]), Tensor([[3.0, 4.0]])).item() == 12.5

    @settings(max_examples=50)
    @given(st.integers(1, 16), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
    def test_brute_force(self, b, k, seed):
        r = np.random.default_rng(seed)
        pred, truth = r.normal(size=(b, k)), r.normal(size=(b, k))
        total = 0.0
        for i in range(b):
            row = 0.0
            for j in range(k):
                row += (pred[i, j] - truth[i, j]) ** 2
            total += row / k
        assert abs(mse_loss(Tensor(pred), Tensor(truth)).item() - total / b) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


class TestAdam:
    def test_zero_gradient_leaves_params(self, rng):
        w = Tensor(rng.normal(size=4), requires_grad=True)
        before = w.data.copy()
        adam_step(AdamState(), {"w": w}, 0.1, grads={"w": np.zeros(4)})
        np.testing.assert_array_equal(w.data, before)

    def test_first_step_closed_form(self):
        w = Tensor([0.0], requires_grad=True)
        adam_step(AdamState(), {"w": w}, 0.1, grads={"w": np.array([1.0])})
        assert w.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-17)
        assert round(w.data[0], 10) == -0.0999999990

    def test_second_step_oracle(self):
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
        m = v = 0.0
        w_ref = 1.0
        w = Tensor([1.0], requires_grad=True)
        state = AdamState()
        for step, g in enumerate([0.5, -2.0], start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w_ref -= lr * (m / (1 - b1 ** step)) / ((v / (1 - b2 ** step)) ** 0.5 + eps)
            adam_step(state, {"w": w}, lr, grads={"w": np.array([g])})
        assert w.data[0] == pytest.approx(w_ref, abs=1e-15)

    def test_deterministic(self, rng):
        grads = [rng.normal(size=(3, 2)) for _ in range(5)]

        def run():
            w = Tensor(np.ones((3, 2)), requires_grad=True)
            state = AdamState()
            for g in grads:
                adam_step(state, {"w": w}, 0.01, grads={"w": g})
            return w.data.tobytes()

        assert run() == run()

    def test_non_finite_gradient_named(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(NonFiniteError, match="decoder.weight"):
            adam_step(AdamState(), {"decoder.weight": w}, 0.1, grads={"decoder.weight": np.array([np.inf])})
        assert w.data[0] == 1.0


class TestFit:
    def test_one_step_reduces_loss(self, tiny_cfg):
        windows = trend_windows(64)
        batch = stack_windows(windows[:16])
        reduced = 0
        for trial in range(10):
            model = EgPDENet(replace(tiny_cfg, seed=trial))
            params = model.state_dict()
            before = batch_loss(model, batch, model.cfg.offsets, FAST)
            ad.backward(before)
            adam_step(AdamState(), params, 1e-3)
            with ad.no_grad():
                after = batch_loss(model, batch, model.cfg.offsets, FAST)
            reduced += after.item() < before.item()
        assert reduced >= 9

    def test_trend_toy_loss_decreases(self, tiny_cfg):
        windows = trend_windows(200)
        model = EgPDENet(tiny_cfg)
        cfg = TrainConfig(batch_size=32, learning_rate=1e-3, max_epochs=5, patience=10, solver=FAST)
        _, history = fit(model, windows, windows[:40], cfg)
        losses = history.train_loss
        assert len(losses) == 5
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_early_stopping_restores_best(self, tiny_cfg, monkeypatch):
        windows = trend_windows(40)
        model = EgPDENet(tiny_cfg)
        snapshots = []
        scripted = iter([1.0, 2.0, 3.0, 4.0])

        def fake_eval(m, samples, offsets, solver, chunk=512):
            snapshots.append({k: p.data.copy() for k, p in m.state_dict().items()})
            return next(scripted)

        monkeypatch.setattr(training, "evaluate_loss", fake_eval)
        cfg = TrainConfig(batch_size=16, max_epochs=4, patience=1, solver=FAST, learning_rate=1e-2)
        _, history = fit(model, windows, windows[:8], cfg)
        assert history.epochs == [1, 2]
        assert history.best_epoch == 1 and history.stopped_early
        for k, p in model.state_dict().items():
            np.testing.assert_array_equal(p.data, snapshots[0][k])
        assert not np.array_equal(snapshots[0]["decoder.bias"], snapshots[1]["decoder.bias"])

    def test_best_validation_never_exceeded(self, tiny_cfg):
        windows = trend_windows(60)
        model = EgPDENet(tiny_cfg)
        cfg = TrainConfig(batch_size=16, max_epochs=6, patience=2, solver=FAST, learning_rate=0.05)
        _, history = fit(model, windows[:48], windows[48:], cfg)
        final = training.evaluate_loss(model, windows[48:], model.cfg.offsets, FAST)
        assert final == pytest.approx(min(history.valid_loss), abs=0)

    def test_same_seed_same_history(self, tiny_cfg):
        windows = trend_windows(50)

        def run():
            model = EgPDENet(tiny_cfg)
            _, h = fit(model, windows[:40], windows[40:], TrainConfig(batch_size=8, max_epochs=3, solver=FAST))
            return h, model

        (h1, m1), (h2, m2) = run(), run()
        assert h1.train_loss == h2.train_loss and h1.valid_loss == h2.valid_loss
        for (n1, p1), (n2, p2) in zip(m1.named_parameters(), m2.named_parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()

    def test_divergence_reports_epoch_and_batch(self, tiny_cfg, monkeypatch):
        windows = trend_windows(40)
        calls = {"n": 0}
        real = training.batch_loss

        def flaky(*args):
            calls["n"] += 1
            if calls["n"] == 4:
                raise NonFiniteError("boom")
            return real(*args)

        monkeypatch.setattr(training, "batch_loss", flaky)
        cfg = TrainConfig(batch_size=16, max_epochs=3, solver=FAST)
        with pytest.raises(TrainingDiverged, match="epoch 2, batch 0"):
            fit(EgPDENet(tiny_cfg), windows, windows[:8], cfg)

    def test_history_csv(self, tmp_path):
        h = training.History(epochs=[1, 2], train_loss=[0.5, 0.25], valid_loss=[0.6, 0.3])
        h.write_csv(tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines() == ["epoch,train_loss,valid_loss", "1,0.5,0.6",
                                                                 "2,0.25,0.3"]

    @pytest.mark.parametrize("kwargs", [dict(batch_size=0), dict(patience=0), dict(max_epochs=0),
                                        dict(learning_rate=0.0)])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestCheckpoint:
    def _model(self, tiny_cfg, rng):
        model = EgPDENet(tiny_cfg)
        for _, p in model.named_parameters():
            p.data[...] = rng.normal(size=p.shape) / 3.0  # full-mantissa values
        return model

    def test_round_trip_bit_exact(self, tiny_cfg, tmp_path, rng):
        model = self._model(tiny_cfg, rng)
        stats = fit_normalizer(RawSeries(names=["a", "b", "c", "y"], values=rng.normal(size=(9, 4)), target_column=3))
        save_checkpoint(model, stats, tmp_path / "c.json", extra={"seed": 3})
        ckpt = load_checkpoint(tmp_path / "c.json")
        assert ckpt.model.cfg == model.cfg and ckpt.extra == {"seed": 3}
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), ckpt.model.named_parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
        assert ckpt.stats.mean.tobytes() == stats.mean.tobytes()
        x, y = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5))
        times = [0.5, 1.0, 1.5, 2.0]
        assert model.predict(x, y, times).tobytes() == ckpt.model.predict(x, y, times).tobytes()

    @pytest.mark.parametrize("mode", ["no_self_att", "no_zx_ode"])
    def test_round_trip_records_mode(self, tiny_cfg, tmp_path, mode):
        save_checkpoint(EgPDENet(replace(tiny_cfg, mode=mode)), None, tmp_path / "c.json")
        assert load_checkpoint(tmp_path / "c.json").model.mode.value == mode

    def test_truncated(self, tiny_cfg, tmp_path, rng):
        path = tmp_path / "c.json"
        save_checkpoint(self._model(tiny_cfg, rng), None, path)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(CheckpointError, match="corrupt or truncated"):
            load_checkpoint(path)

    def _rewrite(self, path, fn):
        payload = json.loads(path.read_text())
        fn(payload)
        path.write_text(json.dumps(payload))

    def test_unknown_parameter(self, tiny_cfg, tmp_path):
        path = tmp_path / "c.json"
        save_checkpoint(EgPDENet(tiny_cfg), None, path)
        self._rewrite(path, lambda p: p["params"].update(extra_w={"shape": [1], "data": [0.0]}))
        with pytest.raises(CheckpointError, match="extra_w"):
            load_checkpoint(path)

    def test_missing_parameter(self, tiny_cfg, tmp_path):
        path = tmp_path / "c.json"
        save_checkpoint(EgPDENet(tiny_cfg), None, path)
        self._rewrite(path, lambda p: p["params"].pop("decoder.bias"))
        with pytest.raises(CheckpointError, match="decoder.bias"):
            load_checkpoint(path)

    def test_version_mismatch(self, tiny_cfg, tmp_path):
        path = tmp_path / "c.json"
        save_checkpoint(EgPDENet(tiny_cfg), None, path)
        self._rewrite(path, lambda p: p.update(version=99))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_wrong_shape(self, tiny_cfg, tmp_path):
        path = tmp_path / "c.json"
        save_checkpoint(EgPDENet(tiny_cfg), None, path)
        self._rewrite(path, lambda p: p["params"]["decoder.bias"].update(shape=[1, 1]))
        with pytest.raises(CheckpointError, match="decoder.bias"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.json")

    def test_no_temp_files_left(self, tiny_cfg, tmp_path):
        save_checkpoint(EgPDENet(tiny_cfg), None, tmp_path / "c.json")
        assert [p.name for p in tmp_path.iterdir()] == ["c.json"]
