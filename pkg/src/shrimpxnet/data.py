"""Image ingestion, background masking, stratified splitting and batching.

Datasets are directory trees ``root/<class_name>/*.{png,jpg,jpeg}``. Class
indices follow lexicographic order of the folder names.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
SPLIT_NAMES = ("train", "validation", "test")
BG_MODES = ("alpha", "threshold", "none")
DEFAULT_SIZE = (128, 128)
DEFAULT_CUTOFF = 0.92


@dataclass
class Sample:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    label: int
    source_id: str
    bbox: tuple | None = None  # (top, left, bottom, right), inclusive; synthetic data only


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    class_names: list
    split_seed: int

    def by_name(self, name):
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]

    def manifest_lines(self):
        rows = []
        for name in SPLIT_NAMES:
            for s in self.by_name(name):
                rows.append((s.source_id, self.class_names[s.label], name))
        rows.sort()
        return [f"{sid}\t{cls}\t{part}" for sid, cls, part in rows]


def worker_count():
    """Worker cap from ``SHRIMPXNET_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("SHRIMPXNET_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise DataError(f"SHRIMPXNET_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else (os.cpu_count() or 1)


def remove_background(image, mode="none", cutoff=DEFAULT_CUTOFF):
    """Return a 3-channel image with the background suppressed.

    ``alpha`` multiplies RGB by the alpha channel. ``threshold`` zeroes the
    bright pixels (luminance above ``cutoff``) that are connected to the
    image border, which removes a light studio background without touching
    bright regions enclosed by the subject.
    """
    image = np.asarray(image)
    if mode not in BG_MODES:
        raise DataError(f"unknown background mode {mode!r}; expected one of {BG_MODES}")
    channels = image.shape[0]
    if channels not in (3, 4):
        raise DataError(f"expected a 3- or 4-channel image, got {channels} channels")
    if mode == "alpha":
        if channels != 4:
            raise DataError("alpha background removal needs a 4-channel image")
        return (image[:3] * image[3:4]).astype(image.dtype)
    rgb = image[:3].copy()
    if mode == "none":
        return rgb
    lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    bright = lum > cutoff
    labels, _ = ndimage.label(bright)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    border = border[border > 0]
    rgb[:, np.isin(labels, border)] = 0
    return rgb


def _read_image(path, target_size, bg_mode, cutoff):
    try:
        with Image.open(path) as im:
            im.load()
            mode = "RGBA" if (im.mode in ("RGBA", "LA", "PA") or "transparency" in im.info) else "RGB"
            im = im.convert(mode).resize((target_size[1], target_size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    arr = arr.transpose(2, 0, 1)
    if bg_mode == "alpha" and arr.shape[0] == 3:
        arr = np.concatenate([arr, np.ones_like(arr[:1])])
    return np.clip(remove_background(arr, bg_mode, cutoff), 0, 1).astype(np.float32)


def list_dataset(root):
    """Return ``(class_names, [(source_id, label, path), ...])`` sorted by source_id."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class folders under {root}")
    class_names = [p.name for p in class_dirs]
    entries = []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class folder {d.name!r} contains no images")
        entries.extend((f"{d.name}/{p.name}", label, p) for p in files)
    entries.sort(key=lambda e: e[0])
    return class_names, entries


def load_dataset(root, target_size=DEFAULT_SIZE, bg_mode="none", cutoff=DEFAULT_CUTOFF):
    """Load a class-folder image tree into samples resized to ``target_size``."""
    if bg_mode not in BG_MODES:
        raise DataError(f"unknown background mode {bg_mode!r}; expected one of {BG_MODES}")
    class_names, entries = list_dataset(root)
    target_size = tuple(int(v) for v in target_size)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        images = list(pool.map(lambda e: _read_image(e[2], target_size, bg_mode, cutoff), entries))
    samples = [Sample(img, label, sid) for (sid, label, _), img in zip(entries, images)]
    return samples, class_names


def split_sizes(n):
    n_train = int(np.floor(SPLIT_FRACTIONS[0] * n + 1e-9))
    n_val = int(np.floor(SPLIT_FRACTIONS[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split(samples, seed, class_names=None):
    """Stratified 70/15/15 split; each class is shuffled and partitioned on its own."""
    if not samples:
        raise DataError("cannot split an empty dataset")
    if class_names is None:
        class_names = [str(k) for k in range(max(s.label for s in samples) + 1)]
    parts = ([], [], [])
    for label in range(len(class_names)):
        members = sorted((s for s in samples if s.label == label), key=lambda s: s.source_id)
        if len(members) < 3:
            raise DataError(f"class {class_names[label]!r} has {len(members)} samples; need at least 3 to stratify")
        order = np.random.default_rng([seed, label]).permutation(len(members))
        n_train, n_val, _ = split_sizes(len(members))
        shuffled = [members[i] for i in order]
        parts[0].extend(shuffled[:n_train])
        parts[1].extend(shuffled[n_train:n_train + n_val])
        parts[2].extend(shuffled[n_train + n_val:])
    for part in parts:
        part.sort(key=lambda s: s.source_id)
    return DatasetSplit(*parts, class_names=list(class_names), split_seed=seed)


def write_manifest(dataset_split, path):
    text = "".join(line + "\n" for line in dataset_split.manifest_lines())
    Path(path).write_bytes(text.encode("utf-8"))


def read_manifest(path):
    """Parse a split manifest into ``{source_id: (class_name, split_name)}``."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3 or fields[2] not in SPLIT_NAMES:
            raise DataError(f"{path}:{lineno}: malformed manifest line {line!r}")
        out[fields[0]] = (fields[1], fields[2])
    return out


def apply_manifest(samples, class_names, manifest, seed=0):
    """Rebuild a :class:`DatasetSplit` from loaded samples and a parsed manifest."""
    parts = {name: [] for name in SPLIT_NAMES}
    ids = {s.source_id for s in samples}
    missing = sorted(set(manifest) - ids)
    if missing:
        raise DataError(f"manifest lists {len(missing)} files not found in the dataset, e.g. {missing[0]}")
    for s in samples:
        if s.source_id not in manifest:
            raise DataError(f"dataset file {s.source_id} is not in the split manifest")
        cls, part = manifest[s.source_id]
        if cls != class_names[s.label]:
            raise DataError(f"manifest class {cls!r} disagrees with folder for {s.source_id}")
        parts[part].append(s)
    return DatasetSplit(parts["train"], parts["validation"], parts["test"], list(class_names), seed)


def stack(samples):
    """Stack samples into ``(images[N,C,H,W], labels[N])``."""
    x = np.stack([s.image for s in samples]).astype(np.float32, copy=False)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def batches(samples, batch_size, seed, epoch):
    """Yield ``(images, labels, indices)`` batches in an order keyed by ``(seed, epoch)``.

    The final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x, y = stack([samples[i] for i in idx])
        yield x, y, idx


# --- synthetic data -------------------------------------------------------

SHAPES = ("disc", "square", "cross", "ring", "triangle", "diamond", "xcross", "frame")
COLORS = (
    (0.90, 0.20, 0.20),
    (0.20, 0.80, 0.25),
    (0.25, 0.35, 0.95),
    (0.95, 0.85, 0.20),
    (0.85, 0.25, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.55, 0.15),
    (0.60, 0.60, 0.60),
)
SYNTHETIC_FOUR = ("BG", "Healthy", "WSSV", "WSSV_BG")


def _shape_mask(kind, size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    t = max(r * 0.35, 1.5)
    if kind == "disc":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "cross":
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "ring":
        d = np.sqrt(dy ** 2 + dx ** 2)
        return (d <= r) & (d >= r * 0.55)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "xcross":
        return ((np.abs(dy - dx) <= t) | (np.abs(dy + dx) <= t)) & (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "frame":
        box = (np.abs(dy) <= r * 0.9) & (np.abs(dx) <= r * 0.9)
        inner = (np.abs(dy) <= r * 0.5) & (np.abs(dx) <= r * 0.5)
        return box & ~inner
    raise ValueError(kind)


def generate_synthetic(n_per_class, num_classes=4, size=64, seed=0, background=0.0, noise=0.05):
    """Render ``num_classes`` classes of distinctly colored shapes.

    Class ``k`` is shape ``SHAPES[k]`` in color ``COLORS[k]`` with jittered
    position and scale over a flat ``background`` plus Gaussian pixel noise.
    Returns ``(samples, class_names)``; each sample carries the shape's
    bounding box. Four-class sets use the shrimp class names.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPES)}], got {num_classes}")
    names = list(SYNTHETIC_FOUR) if num_classes == 4 else [f"class_{k}" for k in range(num_classes)]
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(num_classes):
        for i in range(n_per_class):
            r = rng.uniform(0.18, 0.30) * size
            cy = rng.uniform(r + 1, size - r - 1)
            cx = rng.uniform(r + 1, size - r - 1)
            mask = _shape_mask(SHAPES[k], size, cy, cx, r)
            img = np.empty((3, size, size))
            img[:] = background
            img[:, mask] = np.asarray(COLORS[k])[:, None]
            img += rng.normal(0.0, noise, img.shape)
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            rows, cols = np.nonzero(mask)
            bbox = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
            samples.append(Sample(img, k, f"{names[k]}/{names[k]}_{i:04d}.png", bbox))
    return samples, names


def write_image_tree(samples, class_names, root):
    """Write samples as PNGs under ``root/<class>/``; returns the bounding-box table path."""
    root = Path(root)
    for name in class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    box_lines = []
    for s in samples:
        arr = np.round(np.clip(s.image, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(root / s.source_id)
        if s.bbox is not None:
            box_lines.append(s.source_id + "\t" + "\t".join(str(v) for v in s.bbox))
    boxes = root / "boxes.tsv"
    if box_lines:
        boxes.write_text("".join(line + "\n" for line in sorted(box_lines)), encoding="utf-8")
    return boxes
