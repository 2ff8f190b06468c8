"""FGSM attacks, adversarial training, and epsilon-sweep robustness tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import forward
from .optim import train_step

DEFAULT_EPSILONS = (0.0, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.0
    clip_to_valid_range: bool = True
    adversarial_fraction: float = 0.5

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 <= self.adversarial_fraction <= 1:
            raise ValueError(f"adversarial_fraction must be in [0, 1], got {self.adversarial_fraction}")


def input_gradient(spec, params, x, y):
    """d(mean cross-entropy)/d(x) with dropout off. ``y`` is labels or soft targets."""
    with T.GradTape() as tape:
        xt = T.Tensor(x, requires_grad=True)
        out = forward(spec, params, xt, training=False)
        loss = T.cross_entropy(out.probs, y)
    T.backward(tape, loss)
    return xt.grad


def fgsm_perturbation(spec, params, x, y, epsilon):
    """``epsilon * sign(grad)`` with sign(0) = 0; entries are exactly -eps, 0 or +eps."""
    g = input_gradient(spec, params, x, y)
    return (x.dtype.type(epsilon) * np.sign(g)).astype(x.dtype)


def fgsm(spec, params, x, y, epsilon, clip=True):
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        return x.copy()
    x_adv = x + fgsm_perturbation(spec, params, x, y, epsilon)
    return np.clip(x_adv, 0, 1) if clip else x_adv


def adversarial_batch(spec, params, x, y_soft, config):
    """Replace the leading ``round(fraction * N)`` samples with FGSM counterparts."""
    k = int(round(config.adversarial_fraction * x.shape[0]))
    if k == 0 or config.epsilon == 0:
        return x, k
    x = x.copy()
    x[:k] = fgsm(spec, params, x[:k], y_soft[:k], config.epsilon, config.clip_to_valid_range)
    return x, k


def adversarial_training_step(spec, params, x, y_soft, config, state, lr, trainable, rng,
                              betas=(0.9, 0.999), eps=1e-8):
    """FGSM-augmented optimizer step.

    Returns ``(params, state, clean_loss, adv_loss, probs)`` where the two
    losses are the mean cross-entropy over the clean and adversarial rows of
    the combined batch (``nan`` for an empty group).
    """
    x_mix, k = adversarial_batch(spec, params, x, y_soft, config)
    params, state, _, probs = train_step(spec, params, x_mix, y_soft, state, lr, trainable, rng, betas, eps)
    per_sample = -(y_soft * np.log(np.clip(probs, T.LOG_CLAMP, 1.0))).sum(axis=1)
    adv_loss = float(per_sample[:k].mean()) if k else float("nan")
    clean_loss = float(per_sample[k:].mean()) if k < len(per_sample) else float("nan")
    return params, state, clean_loss, adv_loss, probs


@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    accuracy: float
    loss: float
    val_loss: float | None = None


def evaluate_under_attack(spec, params, x, y, epsilon, batch_size=128):
    """Accuracy and mean loss on FGSM examples built against ``params``."""
    probs = []
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        probs.append(forward(spec, params, fgsm(spec, params, xb, yb, epsilon)).probs.data)
    probs = np.concatenate(probs)
    p_true = np.clip(probs[np.arange(len(y)), y], T.LOG_CLAMP, 1.0).astype(np.float64)
    return float((probs.argmax(axis=1) == y).mean()), float(-np.log(p_true).mean())


def robustness_sweep(spec, params, x_test, y_test, epsilons=DEFAULT_EPSILONS, validation=None, batch_size=128):
    """One row per epsilon; ``validation`` is an optional ``(x, y)`` pair whose loss is reported too."""
    epsilons = list(epsilons)
    if not epsilons or epsilons[0] != 0 or epsilons != sorted(epsilons):
        raise ValueError("epsilons must be sorted ascending and start at 0")
    rows = []
    for eps in epsilons:
        acc, loss = evaluate_under_attack(spec, params, x_test, y_test, eps, batch_size)
        val_loss = None
        if validation is not None:
            _, val_loss = evaluate_under_attack(spec, params, validation[0], validation[1], eps, batch_size)
        rows.append(SweepRow(float(eps), acc, loss, val_loss))
    return rows


def sweep_table(rows):
    header = "epsilon\ttest_accuracy\ttest_loss\tval_loss"
    lines = [header]
    for r in rows:
        val = "" if r.val_loss is None else f"{r.val_loss:.6f}"
        lines.append(f"{r.epsilon:.6f}\t{r.accuracy:.6f}\t{r.loss:.6f}\t{val}")
    return "\n".join(lines) + "\n"
