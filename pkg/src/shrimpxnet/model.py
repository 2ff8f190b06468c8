"""Convolutional backbone, classifier head, and the checkpoint file format.

The head follows backbone -> global average pooling -> dense + ReLU ->
dropout -> dense -> softmax. Parameters live in a flat ``{name: ndarray}``
mapping; ``forward`` wraps them in :class:`~shrimpxnet.tensor.Tensor` only
when gradients are needed.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError

MAGIC = b"SXN1"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass(frozen=True)
class BlockSpec:
    filters: int
    kernel: int = 3
    stride: int = 1
    pool: int = 2


@dataclass(frozen=True)
class ModelSpec:
    blocks: tuple = tuple(BlockSpec(f) for f in (16, 32, 64, 128))
    head_hidden_width: int = 128
    dropout_rate: float = 0.3
    num_classes: int = 4
    input_size: tuple = (128, 128)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.blocks:
            raise ValueError("the backbone needs at least one block")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        self.feature_shapes()

    def feature_shapes(self):
        """Spatial size after each block's convolution and after its pooling."""
        h, w = self.input_size
        shapes = []
        for i, b in enumerate(self.blocks):
            pad = b.kernel // 2
            span_h, span_w = h + 2 * pad - b.kernel, w + 2 * pad - b.kernel
            if span_h < 0 or span_w < 0 or span_h % b.stride or span_w % b.stride:
                raise ValueError(f"block {i}: {h}x{w} input does not tile with kernel {b.kernel} stride {b.stride}")
            h, w = span_h // b.stride + 1, span_w // b.stride + 1
            conv = (h, w)
            if b.pool > 1:
                h, w = h // b.pool, w // b.pool
            if h < 1 or w < 1:
                raise ValueError(f"block {i} shrinks the feature map below 1x1")
            shapes.append((conv, (h, w)))
        return shapes

    def param_shapes(self):
        shapes = {}
        c = self.in_channels
        for i, b in enumerate(self.blocks):
            shapes[f"block{i}.weight"] = (b.filters, c, b.kernel, b.kernel)
            shapes[f"block{i}.bias"] = (b.filters,)
            c = b.filters
        shapes["head.w1"] = (c, self.head_hidden_width)
        shapes["head.b1"] = (self.head_hidden_width,)
        shapes["head.w2"] = (self.head_hidden_width, self.num_classes)
        shapes["head.b2"] = (self.num_classes,)
        return shapes

    def to_dict(self):
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


@dataclass
class ForwardResult:
    probs: T.Tensor
    feature_maps: T.Tensor  # post-ReLU activations of the last conv layer, before pooling
    logits: T.Tensor


def init_params(spec, seed, dtype=np.float32):
    """He-uniform weights with bound sqrt(6 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith("bias") or name in ("head.b1", "head.b2"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def set_trainable(spec, freeze_depth):
    """Trainable flag per parameter with the first ``freeze_depth`` blocks frozen."""
    if not 0 <= freeze_depth <= len(spec.blocks):
        raise ValueError(f"freeze_depth must be in [0, {len(spec.blocks)}], got {freeze_depth}")
    flags = {}
    for name in spec.param_shapes():
        if name.startswith("block"):
            flags[name] = int(name[5:name.index(".")]) >= freeze_depth
        else:
            flags[name] = True
    return flags


def forward(spec, params, x, training=False, rng=None):
    """Run the classifier. ``params`` values may be arrays or Tensors."""
    x = T._as_tensor(x)
    expected = (spec.in_channels, *spec.input_size)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ValueError(f"input shape {x.shape} does not match model input [N, {', '.join(map(str, expected))}]")
    p = {k: T._as_tensor(v) for k, v in params.items()}
    h = x
    last = len(spec.blocks) - 1
    features = None
    for i, b in enumerate(spec.blocks):
        pad = b.kernel // 2
        h = T.relu(T.conv2d(h, p[f"block{i}.weight"], p[f"block{i}.bias"], (b.stride, b.stride), (pad, pad)))
        if i == last:
            features = h
        if b.pool > 1:
            h = T.max_pool2d(h, b.pool)
    pooled = T.global_avg_pool(h)
    hidden = T.relu(T.dense(pooled, p["head.w1"], p["head.b1"]))
    hidden = T.dropout(hidden, spec.dropout_rate, rng, training)
    logits = T.dense(hidden, p["head.w2"], p["head.b2"])
    return ForwardResult(T.softmax(logits), features, logits)


def predict_proba(spec, params, x, batch_size=256):
    """Inference-mode class probabilities for an image array, batched."""
    out = []
    for start in range(0, len(x), batch_size):
        out.append(forward(spec, params, x[start:start + batch_size]).probs.data)
    if not out:
        return np.zeros((0, spec.num_classes), dtype=np.float32)
    return np.concatenate(out)


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    """Model weights plus everything needed to resume training.

    ``params`` are the weights to use for inference (the best-validation
    weights once training has run). ``current_params`` are the weights at
    the end of the last completed epoch and are what training resumes from.
    """

    spec: ModelSpec
    params: dict
    trainable: dict
    current_params: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _write_tensor(buf, name, arr):
    arr = np.asarray(arr)
    key = arr.dtype.newbyteorder("<")
    if key not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
    raw = np.ascontiguousarray(arr, dtype=key).tobytes()
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)) + nb)
    buf.write(struct.pack("<BB", _DTYPE_TAGS[key], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(struct.pack("<Q", len(raw)) + raw)


def checkpoint_bytes(ckpt):
    records = []
    for prefix, group in (("param/", ckpt.params), ("current/", ckpt.current_params),
                          ("adam.m/", ckpt.adam_m), ("adam.v/", ckpt.adam_v)):
        records.extend((prefix + k, group[k]) for k in sorted(group))
    meta = {
        "spec": ckpt.spec.to_dict(),
        "trainable": {k: bool(ckpt.trainable[k]) for k in sorted(ckpt.trainable)},
        "adam_t": int(ckpt.adam_t),
        "epoch": int(ckpt.epoch),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", ckpt.format_version))
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_tensor(buf, name, arr)
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(mb)) + mb)
    return buf.getvalue()


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated checkpoint (wanted {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data, source="<bytes>"):
    r = _Reader(data, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (count,) = r.unpack("<I")
    groups = {"param/": {}, "current/": {}, "adam.m/": {}, "adam.v/": {}}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{source}: unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=_TAG_DTYPES[tag]).reshape(shape).copy()
        prefix = next((p for p in groups if name.startswith(p)), None)
        if prefix is None:
            raise CheckpointError(f"{source}: unexpected tensor record {name!r}")
        groups[prefix][name[len(prefix):]] = arr
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{source}: corrupt metadata block: {exc}") from None
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes after metadata")
    spec = ModelSpec.from_dict(meta["spec"])
    expected = spec.param_shapes()
    for name, arr in groups["param/"].items():
        if expected.get(name) != arr.shape:
            raise CheckpointError(f"{source}: tensor {name} has shape {arr.shape}, spec expects {expected.get(name)}")
    if set(groups["param/"]) != set(expected):
        raise CheckpointError(f"{source}: parameter set does not match the stored model spec")
    return Checkpoint(spec=spec, params=groups["param/"], trainable=meta["trainable"],
                      current_params=groups["current/"], adam_m=groups["adam.m/"], adam_v=groups["adam.v/"],
                      adam_t=meta["adam_t"], epoch=meta["epoch"], rng_state=meta["rng_state"],
                      meta=meta["meta"], format_version=version)


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return checkpoint_from_bytes(data, str(path))
