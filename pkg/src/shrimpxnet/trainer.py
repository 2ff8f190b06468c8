"""Training loop with Adam, step learning-rate decay and early stopping, plus grid search."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .adversarial import AttackConfig, adversarial_training_step
from .augment import AugmentPolicy, apply_policy
from .data import batches, stack
from .errors import ConfigError, TrainingDivergedError
from .model import Checkpoint, forward, init_params, set_trainable
from .optim import AdamState, adam_step, step_lr, train_step  # noqa: F401  (re-exported)
from . import tensor as T

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    initial_lr: float = 1e-3
    step_size: int = 3
    gamma: float = 0.5
    patience: int = 5
    min_delta: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    freeze_depth: int = 0
    seed: int = 0
    augment: AugmentPolicy = AugmentPolicy()
    attack: AttackConfig = AttackConfig()

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.step_size < 1 or self.batch_size < 1:
            raise ConfigError("epochs, patience, step_size and batch_size must all be >= 1")
        if self.initial_lr < 0:
            raise ConfigError(f"initial_lr must be >= 0, got {self.initial_lr}")

    def flat(self):
        """Flat ``key -> value`` view using the config-file key names."""
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("augment", "attack")}
        for key, (group, attr) in NESTED_KEYS.items():
            out[key] = getattr(getattr(self, group), attr)
        return out


NESTED_KEYS = {
    "mixup_alpha": ("augment", "mixup_alpha"),
    "cutmix_alpha": ("augment", "cutmix_alpha"),
    "augment_probability": ("augment", "apply_probability"),
    "augment_seed": ("augment", "seed"),
    "fgsm_epsilon": ("attack", "epsilon"),
    "adv_fraction": ("attack", "adversarial_fraction"),
    "clip_adversarial": ("attack", "clip_to_valid_range"),
}
MODEL_KEYS = {
    "filters": "comma-separated filter counts, one per backbone block",
    "kernel_size": "square kernel size for every block",
    "pool": "max-pool window after every block (1 disables)",
    "head_hidden_width": "width of the hidden dense layer",
    "dropout_rate": "dropout rate in the head",
}
MODEL_DEFAULTS = {"filters": (16, 32, 64, 128), "kernel_size": 3, "pool": 2, "head_hidden_width": 128, "dropout_rate": 0.3}


def with_values(config, **values):
    """Copy of ``config`` with flat keys (including nested ones) replaced."""
    top, nested = {}, {"augment": {}, "attack": {}}
    for key, value in values.items():
        if key in NESTED_KEYS:
            group, attr = NESTED_KEYS[key]
            nested[group][attr] = value
        elif key in {f.name for f in fields(TrainConfig)} - {"augment", "attack"}:
            top[key] = value
        else:
            raise ConfigError(f"unknown training key {key!r}")
    try:
        return replace(config, augment=replace(config.augment, **nested["augment"]),
                       attack=replace(config.attack, **nested["attack"]), **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _key_types():
    types = {k: type(v) for k, v in TrainConfig().flat().items()}
    types.update({"filters": tuple, "kernel_size": int, "pool": int, "head_hidden_width": int, "dropout_rate": float})
    return types


def coerce(key, raw):
    """Convert a string value for ``key`` to its typed form."""
    types = _key_types()
    if key not in types:
        raise ConfigError(f"unknown key {key!r}")
    kind = types[key]
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {kind.__name__})") from None


def parse_config_text(text, source="<config>"):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def split_values(values):
    """Separate parsed config values into ``(TrainConfig, model options)``."""
    model = dict(MODEL_DEFAULTS)
    train = {}
    for key, value in values.items():
        (model if key in MODEL_KEYS else train)[key] = value
    return with_values(TrainConfig(), **train), model


# --- history ----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    wall_time: float = 0.0

    def log_line(self):
        return (f"{self.epoch} {self.train_loss:.6f} {self.train_acc:.6f} "
                f"{self.val_loss:.6f} {self.val_acc:.6f} {self.lr:.6f}")


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    augment_log: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def log_text(self):
        header = "epoch train_loss train_acc val_loss val_acc lr"
        return "\n".join([header] + [r.log_line() for r in self.epochs]) + "\n"

    def augment_text(self):
        return "\n".join(["epoch batch technique lambda"] + self.augment_log) + "\n"

    def to_dict(self):
        return {"epochs": [asdict(r) for r in self.epochs], "augment_log": list(self.augment_log),
                "best_epoch": self.best_epoch, "stopped_early": self.stopped_early}

    @classmethod
    def from_dict(cls, d):
        return cls([EpochRecord(**r) for r in d["epochs"]], list(d["augment_log"]), d["best_epoch"], d["stopped_early"])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: TrainHistory


def evaluate(spec, params, x, y, batch_size=256):
    """Inference-mode ``(mean loss, accuracy, probs)`` for integer labels ``y``."""
    probs = []
    for start in range(0, len(x), batch_size):
        probs.append(forward(spec, params, x[start:start + batch_size]).probs.data)
    probs = np.concatenate(probs)
    p_true = np.clip(probs[np.arange(len(y)), y], T.LOG_CLAMP, 1.0)
    return float(-np.log(p_true.astype(np.float64)).mean()), float((probs.argmax(axis=1) == y).mean()), probs


def _stream(config, epoch, batch, purpose):
    return np.random.default_rng([config.seed, epoch, batch, purpose])


def train(config, spec, splits, resume=None, on_epoch=None):
    """Train ``spec`` on ``splits`` and return the best-validation-loss checkpoint.

    All randomness is keyed on ``(seed, epoch, batch)`` so a run resumed from
    a checkpoint reproduces the uninterrupted run exactly. ``on_epoch`` is
    called with each :class:`EpochRecord` as it completes.
    """
    if not splits.train or not splits.validation:
        raise ValueError("training needs non-empty train and validation splits")
    x_val, y_val = stack(splits.validation)
    trainable = set_trainable(spec, config.freeze_depth)
    betas = (config.beta1, config.beta2)

    if resume is None:
        params = init_params(spec, config.seed)
        best_params = {k: v.copy() for k, v in params.items()}
        state = AdamState()
        history = TrainHistory()
        best_loss, wait, start = float("inf"), 0, 0
    else:
        if resume.spec != spec:
            raise ValueError("checkpoint model spec does not match the requested spec")
        params = {k: v.copy() for k, v in resume.current_params.items()}
        best_params = {k: v.copy() for k, v in resume.params.items()}
        state = AdamState(dict(resume.adam_m), dict(resume.adam_v), resume.adam_t)
        history = TrainHistory.from_dict(resume.meta["history"])
        best_loss, wait = resume.meta["best_val_loss"], resume.meta["wait"]
        start = resume.epoch
        if history.stopped_early:
            return TrainResult(resume, history)

    epoch = start
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        lr = step_lr(config.initial_lr, epoch, config.step_size, config.gamma)
        losses, correct, seen = [], 0, 0
        for b, (xb, yb, _) in enumerate(batches(splits.train, config.batch_size, config.seed, epoch)):
            y_soft = T.one_hot(yb, spec.num_classes)
            if config.augment.enabled:
                aug_rng = np.random.default_rng([config.seed, config.augment.seed, epoch, b])
                xb, y_soft, record = apply_policy(config.augment, xb, y_soft, aug_rng)
                history.augment_log.append(record.log_line(epoch, b))
            drop_rng = _stream(config, epoch, b, 1)
            # overflow surfaces as TrainingDivergedError rather than a numpy warning
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    if config.attack.epsilon > 0 and config.attack.adversarial_fraction > 0:
                        params, state, _, _, probs = adversarial_training_step(
                            spec, params, xb, y_soft, config.attack, state, lr, trainable, drop_rng, betas, config.adam_eps)
                        loss = float(-(y_soft * np.log(np.clip(probs, T.LOG_CLAMP, 1.0))).sum(axis=1).mean())
                    else:
                        params, state, loss, probs = train_step(
                            spec, params, xb, y_soft, state, lr, trainable, drop_rng, betas, config.adam_eps)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"non-finite values at epoch {epoch}, batch {b}: {exc}", epoch, b) from None
            if not np.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in params.values()):
                raise TrainingDivergedError(f"non-finite loss or weights at epoch {epoch}, batch {b}", epoch, b)
            losses.append(loss * len(yb))
            correct += int((probs.argmax(axis=1) == y_soft.argmax(axis=1)).sum())
            seen += len(yb)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                val_loss, val_acc, _ = evaluate(spec, params, x_val, y_val)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"non-finite values evaluating epoch {epoch}: {exc}", epoch) from None
        record = EpochRecord(epoch, sum(losses) / seen, correct / seen, val_loss, val_acc, lr,
                             time.perf_counter() - t0)
        history.epochs.append(record)
        log.info(record.log_line())
        if on_epoch is not None:
            on_epoch(record)
        if val_loss < best_loss - config.min_delta:
            best_loss, wait = val_loss, 0
            best_params = {k: v.copy() for k, v in params.items()}
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= config.patience:
                history.stopped_early = True
                epoch += 1
                break
    else:
        epoch = max(config.epochs, start)

    meta = {"history": history.to_dict(), "best_val_loss": best_loss, "wait": wait,
            "config": _jsonable(config.flat())}
    ckpt = Checkpoint(spec=spec, params=best_params, trainable=trainable, current_params=params,
                      adam_m=state.m, adam_v=state.v, adam_t=state.t, epoch=epoch,
                      rng_state={"seed": config.seed, "next_epoch": epoch}, meta=meta)
    return TrainResult(ckpt, history)


def _jsonable(values):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}


# --- grid search ------------------------------------------------------------

@dataclass
class GridResult:
    values: dict
    best_val_acc: float
    best_val_loss: float
    epochs_run: int
    order: int
    result: TrainResult | None = None
    error: str = ""


def grid_search(grid, base_config, spec, splits, keep_results=False):
    """Train every cell of the Cartesian product of ``grid`` and rank the cells.

    Ranking: higher best validation accuracy, then lower best validation
    loss, then earlier cell. A diverging cell is kept with accuracy 0 and
    infinite loss. Returns ``(ranked GridResults, best TrainConfig)``.
    """
    if not grid:
        raise ConfigError("grid search needs at least one axis")
    for key, vals in grid.items():
        if len(vals) == 0:
            raise ConfigError(f"grid axis {key!r} has no values")
    keys = list(grid)
    results = []
    for order, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        values = dict(zip(keys, combo))
        config = with_values(base_config, **values)
        try:
            res = train(config, spec, splits)
        except TrainingDivergedError as exc:
            results.append(GridResult(values, 0.0, float("inf"), (exc.epoch or 0) + 1, order, error=str(exc)))
            continue
        rows = res.history.epochs
        results.append(GridResult(values, max(r.val_acc for r in rows), min(r.val_loss for r in rows), len(rows),
                                  order, res if keep_results else None))
    results.sort(key=lambda r: (-r.best_val_acc, r.best_val_loss, r.order))
    return results, with_values(base_config, **results[0].values)


def grid_table(results):
    keys = list(results[0].values)
    lines = ["\t".join(keys + ["best_val_acc", "best_val_loss", "epochs_run", "rank", "error"])]
    for rank, r in enumerate(results, 1):
        vals = [",".join(map(str, v)) if isinstance(v, tuple) else str(v) for v in r.values.values()]
        lines.append("\t".join(vals + [f"{r.best_val_acc:.6f}", f"{r.best_val_loss:.6f}", str(r.epochs_run),
                                       str(rank), r.error]))
    return "\n".join(lines) + "\n"
