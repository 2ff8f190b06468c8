import numpy as np
import pytest

from shrimpxnet import adversarial as adv
from shrimpxnet.adversarial import (DEFAULT_EPSILONS, AttackConfig, adversarial_training_step, fgsm,
                                    fgsm_perturbation, robustness_sweep, sweep_table)
from shrimpxnet.data import stack
from shrimpxnet.model import init_params, set_trainable
from shrimpxnet.optim import AdamState, train_step
from shrimpxnet.tensor import one_hot
from shrimpxnet.trainer import evaluate

from conftest import SMOKE_SPEC, TINY_SPEC


@pytest.fixture
def tiny_batch(rng):
    x = rng.uniform(size=(6, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 4, 6)
    return x, y


class TestFgsm:
    def test_zero_epsilon_bit_identity(self, tiny_batch):
        x, y = tiny_batch
        out = fgsm(TINY_SPEC, init_params(TINY_SPEC, 0), x, y, 0.0)
        assert out.tobytes() == x.tobytes() and out is not x

    def test_constant_image_positive_gradient(self, monkeypatch):
        monkeypatch.setattr(adv, "input_gradient", lambda *a: np.ones((1, 3, 16, 16), np.float32))
        x = np.full((1, 3, 16, 16), 0.5, np.float32)
        np.testing.assert_allclose(fgsm(TINY_SPEC, {}, x, np.array([0]), 0.1), 0.6, atol=1e-7)

    def test_sign_zero_leaves_pixel(self, monkeypatch):
        g = np.zeros((1, 3, 4, 4), np.float32)
        g[0, 0, 0, 0], g[0, 1, 1, 1] = 2.0, -3.0
        monkeypatch.setattr(adv, "input_gradient", lambda *a: g)
        d = fgsm_perturbation(TINY_SPEC, {}, np.zeros_like(g), np.array([0]), 0.2)
        assert d[0, 0, 0, 0] == np.float32(0.2) and d[0, 1, 1, 1] == -np.float32(0.2)
        assert np.count_nonzero(d) == 2

    def test_perturbation_values(self, tiny_batch):
        x, y = tiny_batch
        d = fgsm_perturbation(TINY_SPEC, init_params(TINY_SPEC, 2), x, y, 0.07)
        assert set(np.unique(d)) <= {np.float32(-0.07), np.float32(0), np.float32(0.07)}

    def test_clip_and_linf(self, tiny_batch):
        x, y = tiny_batch
        params = init_params(TINY_SPEC, 3)
        clipped = fgsm(TINY_SPEC, params, x, y, 0.3)
        raw = fgsm(TINY_SPEC, params, x, y, 0.3, clip=False)
        assert clipped.min() >= 0 and clipped.max() <= 1
        assert np.abs(clipped - x).max() <= np.float32(0.3) + 1e-7
        assert raw.min() < 0 or raw.max() > 1

    def test_deterministic(self, tiny_batch):
        x, y = tiny_batch
        params = init_params(TINY_SPEC, 4)
        assert fgsm(TINY_SPEC, params, x, y, 0.1).tobytes() == fgsm(TINY_SPEC, params, x, y, 0.1).tobytes()

    def test_negative_epsilon(self, tiny_batch):
        with pytest.raises(ValueError):
            fgsm(TINY_SPEC, {}, *tiny_batch, -0.1)
        with pytest.raises(ValueError):
            AttackConfig(epsilon=-1)
        with pytest.raises(ValueError):
            AttackConfig(adversarial_fraction=1.5)


class TestAdversarialTraining:
    def _plain(self, x, y_soft, seed=0):
        params = init_params(TINY_SPEC, 0)
        trainable = set_trainable(TINY_SPEC, 0)
        return train_step(TINY_SPEC, params, x, y_soft, AdamState(), 1e-3, trainable,
                          np.random.default_rng(seed))

    def _adv(self, x, y_soft, config, seed=0):
        params = init_params(TINY_SPEC, 0)
        trainable = set_trainable(TINY_SPEC, 0)
        return adversarial_training_step(TINY_SPEC, params, x, y_soft, config, AdamState(), 1e-3, trainable,
                                         np.random.default_rng(seed))

    @pytest.mark.parametrize("config", [AttackConfig(0.1, adversarial_fraction=0.0),
                                        AttackConfig(0.0, adversarial_fraction=1.0)])
    def test_degenerate_configs_match_plain(self, tiny_batch, config):
        x, y = tiny_batch
        y_soft = one_hot(y, 4)
        plain, _, _, _ = self._plain(x, y_soft)
        got, _, _, _, _ = self._adv(x, y_soft, config)
        assert all(plain[k].tobytes() == got[k].tobytes() for k in plain)

    def test_half_batch_replaced(self, tiny_batch):
        x, y = tiny_batch
        y_soft = one_hot(y, 4)
        mixed, k = adv.adversarial_batch(TINY_SPEC, init_params(TINY_SPEC, 0), x, y_soft, AttackConfig(0.1))
        assert k == 3
        assert mixed[3:].tobytes() == x[3:].tobytes() and mixed[:3].tobytes() != x[:3].tobytes()
        _, _, clean, adv_loss, _ = self._adv(x, y_soft, AttackConfig(0.1))
        assert np.isfinite(clean) and np.isfinite(adv_loss)


class TestSweep:
    def test_default_ladder(self):
        assert DEFAULT_EPSILONS == (0.0, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2)

    def test_zero_row_is_clean_eval(self, tiny_data):
        params = init_params(TINY_SPEC, 0)
        x, y = stack(tiny_data.test)
        rows = robustness_sweep(TINY_SPEC, params, x, y, (0.0, 0.1), validation=stack(tiny_data.validation))
        loss, acc, _ = evaluate(TINY_SPEC, params, x, y)
        assert rows[0].accuracy == acc and rows[0].loss == pytest.approx(loss, rel=1e-12)
        assert rows[1].val_loss is not None
        text = sweep_table(rows)
        assert text.splitlines()[0] == "epsilon\ttest_accuracy\ttest_loss\tval_loss" and len(text.splitlines()) == 3

    @pytest.mark.parametrize("eps", [(0.1, 0.2), (0.0, 0.2, 0.1), ()])
    def test_bad_ladder(self, eps):
        with pytest.raises(ValueError):
            robustness_sweep(TINY_SPEC, {}, np.zeros((1, 3, 16, 16)), np.zeros(1, int), eps)


@pytest.mark.slow
class TestOnSmokeModel:
    def test_attack_raises_batch_loss(self, smoke_run, smoke_data):
        params = smoke_run[0].checkpoint.params
        x, y = stack(smoke_data.test)
        raised = []
        for start in range(0, len(x), 10):
            xb, yb = x[start:start + 10], y[start:start + 10]
            clean, _, _ = evaluate(SMOKE_SPEC, params, xb, yb)
            attacked, _, _ = evaluate(SMOKE_SPEC, params, fgsm(SMOKE_SPEC, params, xb, yb, 0.05), yb)
            raised.append(attacked >= clean)
        assert np.mean(raised) >= 0.9

    def test_adversarial_training_helps(self, smoke_run, smoke_adv_run, smoke_data):
        x, y = stack(smoke_data.test)
        plain, _ = adv.evaluate_under_attack(SMOKE_SPEC, smoke_run[0].checkpoint.params, x, y, 0.1)
        robust, _ = adv.evaluate_under_attack(SMOKE_SPEC, smoke_adv_run.checkpoint.params, x, y, 0.1)
        assert robust > plain
