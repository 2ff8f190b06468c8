"""Adam, the step learning-rate schedule, and a single gradient step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import forward


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, trainable=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Parameters that are frozen or have no gradient keep their exact bits.
    The timestep advances on every call.
    """
    t = state.t + 1
    new_params, m_out, v_out = dict(params), dict(state.m), dict(state.v)
    for name, p in params.items():
        if trainable is not None and not trainable.get(name, True):
            continue
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = dt(beta1) * m + dt(1 - beta1) * g
        v = dt(beta2) * v + dt(1 - beta2) * g * g
        m_hat = m / dt(1 - beta1 ** t)
        v_hat = v / dt(1 - beta2 ** t)
        new_params[name] = p - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(m_out, v_out, t)


def step_lr(initial_lr, epoch, step_size=3, gamma=0.5):
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return initial_lr * gamma ** (epoch // step_size)


def loss_and_grads(spec, params, x, y_soft, trainable, rng=None, training=True):
    """Forward + backward; returns ``(loss, probs, grads)`` with grads for trainable params only."""
    with T.GradTape() as tape:
        pt = {k: T.Tensor(v, requires_grad=bool(trainable.get(k, True))) for k, v in params.items()}
        out = forward(spec, pt, T.Tensor(x), training=training, rng=rng)
        loss = T.cross_entropy(out.probs, y_soft)
    grads = {}
    if loss.requires_grad:
        T.backward(tape, loss)
        grads = {k: t.grad for k, t in pt.items() if t.requires_grad}
    return float(loss.data), out.probs.data, grads


def train_step(spec, params, x, y_soft, state, lr, trainable, rng, betas=(0.9, 0.999), eps=1e-8):
    """One optimizer step on a batch; returns ``(params, state, loss, probs)``."""
    loss, probs, grads = loss_and_grads(spec, params, x, y_soft, trainable, rng)
    params, state = adam_step(params, grads, state, lr, trainable, betas[0], betas[1], eps)
    return params, state, loss, probs
