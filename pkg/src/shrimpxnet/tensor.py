"""Minimal dense tensors with tape-based reverse-mode differentiation.

Only the operators the classifier needs are provided. Images use the
N, C, H, W layout everywhere. Operations produced while a :class:`GradTape`
is active are recorded on it; :func:`backward` replays the tape in reverse.

Example::

    with GradTape() as tape:
        x = Tensor(images, requires_grad=True)
        loss = tsum(relu(x))
    backward(tape, loss)
    x.grad  # same shape as images
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32
LOG_CLAMP = 1e-12

_active_tapes: list["GradTape"] = []


class Tensor:
    """An n-dimensional float array plus the bookkeeping needed for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


class GradTape:
    """Records differentiable operations in execution order.

    Tapes may nest; an operation is recorded on every active tape.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def gradient(self, loss, tensors):
        backward(self, loss)
        return [t.grad for t in tensors]


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out, parents, backward_fn, op):
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs_grad = any(p.requires_grad for p in parents)
    t = Tensor(out, requires_grad=needs_grad, dtype=out.dtype, _parents=parents if needs_grad else (),
               _backward=backward_fn if needs_grad else None, op=op)
    if needs_grad:
        for tape in _active_tapes:
            tape.nodes.append(t)
    return t


def backward(tape, loss):
    """Reverse-mode pass over ``tape`` seeded with d(loss)/d(loss) = 1.

    Every recorded node and leaf that requires grad gets ``.grad`` set
    (zeros when the loss does not depend on it).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    seen = {}
    for node in reversed(tape.nodes):
        seen[id(node)] = node
        for parent in node._parents:
            seen.setdefault(id(parent), parent)
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    seen.setdefault(id(loss), loss)
    for key, node in seen.items():
        if node.requires_grad:
            g = grads.get(key)
            node.grad = np.zeros_like(node.data) if g is None else g.astype(node.dtype, copy=False)


def conv2d(x, kernel, bias, stride=(1, 1), padding=(0, 0)):
    """Cross-correlation of ``x[N,C,H,W]`` with ``kernel[F,C,kh,kw]`` plus bias."""
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {kc}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d bias must have shape ({f},), got {bias.shape}")
    sh, sw = stride
    ph, pw = padding
    span_h, span_w = h + 2 * ph - kh, w + 2 * pw - kw
    if span_h < 0 or span_w < 0 or span_h % sh or span_w % sw:
        raise ValueError(
            f"conv2d output size not integral: H={h}, W={w}, kernel={kh}x{kw}, "
            f"stride={stride}, padding={padding}")
    ho, wo = span_h // sh + 1, span_w // sw + 1

    # im2col in NHWC order: columns are (kernel row, kernel col, channel)
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.concatenate([xp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] for i in range(kh) for j in range(kw)],
                          axis=-1).reshape(n * ho * wo, kh * kw * c)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2) if kernel.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, ph:ph + h, pw:pw + w, :].transpose(0, 3, 1, 2)
        return dx, dk, db

    return _make(np.ascontiguousarray(out), (x, kernel, bias), _backward, "conv2d")


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def max_pool2d(x, size=2):
    """Non-overlapping ``size`` x ``size`` max pooling; trailing rows/cols are dropped.

    Gradient goes to the first maximal element of each window (row-major).
    """
    x = _as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ValueError(f"max_pool2d window {size} larger than feature map {h}x{w}")
    offsets = [(i, j) for i in range(size) for j in range(size)]
    views = [x.data[:, :, i:i + size * ho:size, j:j + size * wo:size] for i, j in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def _backward(g):
        dx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(offsets, views):
            hit = (v == out) & ~taken
            taken |= hit
            dx[:, :, i:i + size * ho:size, j:j + size * wo:size] = g * hit
        return (dx,)

    return _make(out, (x,), _backward, "max_pool2d")


def global_avg_pool(x):
    x = _as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def _backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _make(out, (x,), _backward, "global_avg_pool")


def dense(x, w, b):
    """Affine map ``x @ w + b`` for ``x[N,D]``, ``w[D,K]``, ``b[K]``."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"dense shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    out = x.data @ w.data + b.data

    def _backward(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _make(out, (x, w, b), _backward, "dense")


def softmax(logits):
    """Row-wise softmax of ``logits[N,K]`` using max subtraction."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"softmax expects [N,K] with K >= 2, got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), _backward, "softmax")


def one_hot(labels, num_classes, dtype=DEFAULT_DTYPE):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def cross_entropy(probs, targets):
    """Mean over the batch of ``-sum_k t_k log p_k``.

    ``targets`` is either a soft-label matrix shaped like ``probs`` or a
    vector of integer class indices. Probabilities are clamped to
    ``[1e-12, 1]`` before the log.
    """
    probs = _as_tensor(probs)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.ndim == 1:
        t = one_hot(t, probs.shape[1], dtype=probs.dtype)
    t = t.astype(probs.dtype, copy=False)
    if t.shape != probs.shape:
        raise ValueError(f"cross_entropy target shape {t.shape} does not match probs {probs.shape}")
    n = probs.shape[0]
    clamped = np.clip(probs.data, LOG_CLAMP, 1.0)
    loss = np.asarray(-(t * np.log(clamped)).sum() / n, dtype=probs.dtype)
    inside = (probs.data >= LOG_CLAMP) & (probs.data <= 1.0)

    def _backward(g):
        return (g * np.where(inside, -t / clamped, 0).astype(probs.dtype) / n,)

    return _make(loss, (probs,), _backward, "cross_entropy")


def dropout(x, rate, rng=None, training=False):
    """Inverted dropout; identity outside training or when ``rate`` is 0."""
    x = _as_tensor(x)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def tsum(x):
    x = _as_tensor(x)
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def scale(x, factor):
    x = _as_tensor(x)
    f = x.dtype.type(factor)
    return _make(x.data * f, (x,), lambda g: (g * f,), "scale")


def class_score(logits, class_index):
    """Sum over the batch of ``logits[:, class_index]`` as a scalar."""
    logits = _as_tensor(logits)
    k = logits.shape[1]
    if not 0 <= class_index < k:
        raise ValueError(f"class index {class_index} out of range for {k} classes")

    def _backward(g):
        out = np.zeros_like(logits.data)
        out[:, class_index] = g
        return (out,)

    return _make(np.asarray(logits.data[:, class_index].sum(), dtype=logits.dtype), (logits,), _backward, "class_score")
