"""Shared fixtures-in-code for the test modules."""

import numpy as np

from shrimpxnet import tensor as T
from shrimpxnet.model import BlockSpec, ModelSpec, forward, init_params

from oracles import central_difference, relative_error

GRADCHECK_SPEC = ModelSpec(
    blocks=(BlockSpec(4), BlockSpec(4), BlockSpec(6), BlockSpec(6)),
    head_hidden_width=8, dropout_rate=0.3, num_classes=4, input_size=(16, 16))


def model_gradient_check(seed, spec=GRADCHECK_SPEC, batch=2, input_entries=200):
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 with dropout active; the dropout mask is replayed from
    the same seed for every evaluation. Every parameter entry is checked, plus
    ``input_entries`` randomly chosen input pixels.
    """
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed, dtype=np.float64)
    for name in params:
        if "b" in name.split(".")[-1][:1]:
            params[name] = rng.normal(0, 0.1, params[name].shape)
    x = rng.uniform(0, 1, (batch, spec.in_channels, *spec.input_size))
    y = rng.dirichlet(np.ones(spec.num_classes), size=batch)

    def loss_value():
        out = forward(spec, params, x, training=True, rng=np.random.default_rng(seed + 1000))
        return float(T.cross_entropy(out.probs, y).data)

    with T.GradTape() as tape:
        pt = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
        xt = T.Tensor(x, requires_grad=True)
        out = forward(spec, pt, xt, training=True, rng=np.random.default_rng(seed + 1000))
        loss = T.cross_entropy(out.probs, y)
    T.backward(tape, loss)

    errors = {name: relative_error(pt[name].grad, central_difference(loss_value, params[name])) for name in params}
    picked = rng.choice(x.size, size=min(input_entries, x.size), replace=False)
    numeric = central_difference(loss_value, x, indices=picked)
    errors["input"] = relative_error(xt.grad.reshape(-1)[picked], numeric.reshape(-1)[picked])
    return errors
