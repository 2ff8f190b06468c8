import numpy as np
import pytest

from shrimpxnet.data import DatasetSplit, Sample, generate_synthetic, split
from shrimpxnet.errors import ConfigError, TrainingDivergedError
from shrimpxnet.model import checkpoint_bytes, checkpoint_from_bytes
from shrimpxnet.optim import AdamState, adam_step, step_lr
from shrimpxnet.trainer import (TrainConfig, grid_search, grid_table, load_config, parse_config_text, split_values,
                                train, with_values)

from conftest import TINY_SPEC

FAST = TrainConfig(epochs=4, batch_size=8)


@pytest.fixture(scope="module")
def learnable():
    samples, names = generate_synthetic(30, 4, 16, seed=2)
    return split(samples, 0, names)


class TestAdam:
    def test_first_step(self):
        p, s = adam_step({"w": np.zeros(1)}, {"w": np.ones(1)}, AdamState(), 1e-3)
        assert p["w"][0] == pytest.approx(-1e-3, rel=1e-6) and s.t == 1

    def test_zero_gradient(self):
        w = np.array([0.3, -2.0])
        p, s = adam_step({"w": w}, {"w": np.zeros(2)}, AdamState(), 1e-2)
        np.testing.assert_array_equal(p["w"], w)
        assert s.t == 1

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(0)
        p, s = {"w": np.array([0.5])}, AdamState()
        theta, m, v = 0.5, 0.0, 0.0
        for t in range(1, 21):
            g = float(rng.normal())
            p, s = adam_step(p, {"w": np.array([g])}, s, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p["w"][0] == pytest.approx(theta, rel=1e-12)

    def test_quadratic_converges(self):
        p, s = {"w": np.array([1.0])}, AdamState()
        for _ in range(100):
            p, s = adam_step(p, {"w": 2 * p["w"]}, s, 0.1)
        assert abs(p["w"][0]) < 1e-2

    def test_frozen_skipped(self):
        w = np.array([1.0, 2.0])
        p, s = adam_step({"w": w, "b": w}, {"w": np.ones(2), "b": np.ones(2)}, AdamState(), 0.1, {"w": False})
        assert p["w"] is w and "w" not in s.m and not np.array_equal(p["b"], w)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)


class TestStepLr:
    def test_schedule(self):
        assert [step_lr(1e-3, e) for e in range(3)] == [1e-3] * 3
        assert all(step_lr(1e-3, e) == pytest.approx(5e-4) for e in (3, 4, 5))
        assert all(step_lr(1e-3, e) == pytest.approx(2.5e-4) for e in (6, 7, 8))
        assert {step_lr(0.01, e, gamma=1.0) for e in range(20)} == {0.01}

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            step_lr(1e-3, -1)


class TestTrain:
    def test_history_lr_follows_schedule(self, tiny_data):
        res = train(with_values(FAST, epochs=7, step_size=2), TINY_SPEC, tiny_data)
        assert [r.lr for r in res.history.epochs] == [step_lr(1e-3, e, 2, 0.5) for e in range(7)]

    def test_deterministic(self, tiny_data):
        config = with_values(FAST, mixup_alpha=0.2, cutmix_alpha=0.3)
        a, b = train(config, TINY_SPEC, tiny_data), train(config, TINY_SPEC, tiny_data)
        assert a.history.log_text() == b.history.log_text()
        assert a.history.augment_text() == b.history.augment_text()
        assert len(a.history.augment_log) > 0

    def test_best_weights_restored(self, tiny_data):
        res = train(with_values(FAST, epochs=6, initial_lr=0.02), TINY_SPEC, tiny_data)
        from shrimpxnet.data import stack
        from shrimpxnet.trainer import evaluate
        loss, _, _ = evaluate(TINY_SPEC, res.checkpoint.params, *stack(tiny_data.validation))
        assert loss == pytest.approx(min(r.val_loss for r in res.history.epochs), abs=1e-6)
        assert res.history.best_epoch == int(np.argmin([r.val_loss for r in res.history.epochs]))

    def test_early_stop_on_plateau(self, tiny_data):
        config = with_values(FAST, epochs=30, patience=2, initial_lr=0.0)
        res = train(config, TINY_SPEC, tiny_data)
        assert res.history.stopped_early
        assert len(res.history.epochs) == 3

    def test_random_labels_frozen_stop_early(self):
        # noise images with arbitrary labels: only the class prior is learnable
        rng = np.random.default_rng(0)
        samples = [Sample(rng.uniform(size=(3, 16, 16)).astype(np.float32), i % 4, f"r/{i:03d}") for i in range(80)]
        parts = split(samples, 0, ["a", "b", "c", "d"])
        config = TrainConfig(epochs=20, batch_size=8, patience=1, freeze_depth=2, initial_lr=1e-2)
        res = train(config, TINY_SPEC, parts)
        assert res.history.stopped_early and len(res.history.epochs) < 20
        assert res.history.epochs[-1].val_loss == pytest.approx(np.log(4), abs=0.05)

    def test_resume_matches_uninterrupted(self, tiny_data):
        config = with_values(FAST, epochs=5, mixup_alpha=0.2)
        full = train(config, TINY_SPEC, tiny_data)
        part = train(with_values(config, epochs=2), TINY_SPEC, tiny_data)
        reloaded = checkpoint_from_bytes(checkpoint_bytes(part.checkpoint))
        resumed = train(config, TINY_SPEC, tiny_data, resume=reloaded)
        assert resumed.history.log_text() == full.history.log_text()
        assert resumed.history.augment_text() == full.history.augment_text()
        a, b = resumed.checkpoint, full.checkpoint
        assert (a.epoch, a.adam_t, a.rng_state) == (b.epoch, b.adam_t, b.rng_state)
        for group in ("params", "current_params", "adam_m", "adam_v"):
            assert all(getattr(a, group)[k].tobytes() == getattr(b, group)[k].tobytes() for k in getattr(b, group))

    def test_divergence_names_epoch(self, tiny_data):
        bad = DatasetSplit([Sample(np.full((3, 16, 16), np.inf, np.float32), 0, "x/0")] + tiny_data.train[1:],
                           tiny_data.validation, tiny_data.test, tiny_data.class_names, 0)
        with pytest.raises(TrainingDivergedError, match="epoch 0") as info:
            train(FAST, TINY_SPEC, bad)
        assert info.value.epoch == 0

    def test_on_epoch_callback(self, tiny_data):
        seen = []
        train(with_values(FAST, epochs=2), TINY_SPEC, tiny_data, on_epoch=seen.append)
        assert [r.epoch for r in seen] == [0, 1]


class TestGrid:
    def test_product_size(self, tiny_data):
        results, _ = grid_search({"freeze_depth": [0, 1], "initial_lr": [1e-3, 2e-3]},
                                 with_values(FAST, epochs=1), TINY_SPEC, tiny_data)
        assert len(results) == 4
        assert len(grid_table(results).splitlines()) == 5

    def test_single_cell_equals_train(self, tiny_data):
        results, best = grid_search({"freeze_depth": [0], "initial_lr": [1e-3]}, with_values(FAST, epochs=2),
                                    TINY_SPEC, tiny_data, keep_results=True)
        direct = train(best, TINY_SPEC, tiny_data)
        assert results[0].result.history.log_text() == direct.history.log_text()

    def test_planted_best_cell(self, learnable):
        results, best = grid_search({"freeze_depth": [0], "initial_lr": [10.0, 3e-3]},
                                    TrainConfig(epochs=6, batch_size=16), TINY_SPEC, learnable)
        assert best.initial_lr == 3e-3
        assert results[0].best_val_acc > results[1].best_val_acc

    def test_empty_axis(self, tiny_data):
        with pytest.raises(ConfigError):
            grid_search({"initial_lr": []}, FAST, TINY_SPEC, tiny_data)
        with pytest.raises(ConfigError):
            grid_search({}, FAST, TINY_SPEC, tiny_data)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.step_size, c.patience) == (30, 128, 3, 5)
        assert (c.initial_lr, c.gamma, c.beta1, c.beta2, c.adam_eps) == (1e-3, 0.5, 0.9, 0.999, 1e-8)

    def test_parse(self, tmp_path):
        text = "# run\nepochs = 3\nmixup_alpha=0.2  # inline\nfilters = 8,16\nclip_adversarial = off\n\n"
        (tmp_path / "c.cfg").write_text(text)
        values = load_config(tmp_path / "c.cfg")
        config, model = split_values(values)
        assert config.epochs == 3 and config.augment.mixup_alpha == 0.2 and not config.attack.clip_to_valid_range
        assert model["filters"] == (8, 16) and model["kernel_size"] == 3

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError, match=":2:.*unknown key 'epoch'"):
            parse_config_text("epochs = 3\nepoch = 4\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="expected int"):
            parse_config_text("epochs = many")
        with pytest.raises(ConfigError, match="key=value"):
            parse_config_text("epochs")

    def test_invalid_ranges(self):
        with pytest.raises(ConfigError):
            TrainConfig(patience=0)
        with pytest.raises(ConfigError):
            with_values(TrainConfig(), fgsm_epsilon=-1.0)
        with pytest.raises(ConfigError):
            with_values(TrainConfig(), nonsense=1)

    def test_flat_round_trip(self):
        c = with_values(TrainConfig(), cutmix_alpha=0.7, adv_fraction=0.25, seed=4)
        assert with_values(TrainConfig(), **c.flat()) == c
