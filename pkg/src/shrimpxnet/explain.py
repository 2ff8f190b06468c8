"""Grad-CAM, Grad-CAM++ and XGrad-CAM heatmaps over the last convolutional layer.

The class score is the pre-softmax logit. The ``*_weights`` functions work on
plain arrays (activations ``A[K,H,W]`` and gradients ``G[K,H,W]``) so they can
be checked against fixtures without a model.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .model import forward

METHODS = ("gradcam", "gradcampp", "xgradcam")
EPS = 1e-12
OVERLAY_ALPHA = 0.4


@dataclass
class Heatmap:
    values: np.ndarray  # [Hf, Wf], max-normalized to [0, 1]
    target_class: int
    method: str
    feature_shape: tuple


def gradcam_weights(A, G):
    return G.mean(axis=(1, 2))


def gradcampp_weights(A, G):
    """Second-order pixel weighting using the exponential-score closed form."""
    g2 = G ** 2
    g3 = G ** 3
    denom = 2 * g2 + A.sum(axis=(1, 2), keepdims=True) * g3
    safe = np.abs(denom) >= EPS
    alpha = np.where(safe, g2 / np.where(safe, denom, 1.0), 0.0)
    return (alpha * np.maximum(G, 0)).sum(axis=(1, 2))


def xgradcam_weights(A, G):
    norm = A / (A.sum(axis=(1, 2), keepdims=True) + EPS)
    return (norm * G).sum(axis=(1, 2))


_WEIGHTS = {"gradcam": gradcam_weights, "gradcampp": gradcampp_weights, "xgradcam": xgradcam_weights}


def normalize(cam):
    cam = np.maximum(cam, 0)
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def cam_from_arrays(A, G, method="gradcam"):
    """Normalized map ReLU(sum_k w_k A_k) for the chosen channel weighting."""
    if method not in _WEIGHTS:
        raise ValueError(f"unknown CAM method {method!r}; expected one of {METHODS}")
    A = np.asarray(A, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    w = _WEIGHTS[method](A, G)
    return normalize(np.tensordot(w, A, axes=1))


def feature_gradients(spec, params, x, class_index):
    """Last-layer activations and d(logit_c)/d(activations) for one image ``x[C,H,W]``."""
    if not 0 <= class_index < spec.num_classes:
        raise ValueError(f"class index {class_index} out of range for {spec.num_classes} classes")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("CAM methods take a single image")
    with T.GradTape() as tape:
        xt = T.Tensor(x, requires_grad=True)
        out = forward(spec, params, xt, training=False)
        score = T.class_score(out.logits, class_index)
    T.backward(tape, score)
    return out.feature_maps.data[0], out.feature_maps.grad[0], out.probs.data[0]


def compute_cam(spec, params, x, class_index, method="gradcam"):
    A, G, _ = feature_gradients(spec, params, x, class_index)
    return Heatmap(cam_from_arrays(A, G, method), class_index, method, A.shape)


def grad_cam(spec, params, x, class_index):
    return compute_cam(spec, params, x, class_index, "gradcam")


def grad_cam_pp(spec, params, x, class_index):
    return compute_cam(spec, params, x, class_index, "gradcampp")


def xgrad_cam(spec, params, x, class_index):
    return compute_cam(spec, params, x, class_index, "xgradcam")


def upsample_bilinear(values, size):
    """Bilinear resize of a 2-d map with half-pixel centres and edge clamping."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    out_h, out_w = size

    def coords(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = values[y0][:, x0] * (1 - fx) + values[y0][:, x1] * fx
    bottom = values[y1][:, x0] * (1 - fx) + values[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def colormap(v):
    """Blue (0) to red (1) ramp; returns ``[3, ...]`` RGB."""
    v = np.clip(v, 0, 1)
    return np.stack([v, np.zeros_like(v), 1 - v])


def overlay(heatmap, image):
    """Blend the colorized heatmap over ``image[3,H,W]``; returns ``(rgb[3,H,W], upsampled map)``."""
    image = np.asarray(image, dtype=np.float64)
    up = upsample_bilinear(heatmap.values, image.shape[1:])
    return (1 - OVERLAY_ALPHA) * image[:3] + OVERLAY_ALPHA * colormap(up), up


def render_overlay(heatmap, image, path):
    """Write the overlay PNG to ``path`` and return the float overlay."""
    rgb, _ = overlay(heatmap, image)
    arr = np.round(np.clip(rgb, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr, "RGB").save(path)
    except OSError as exc:
        raise OSError(f"cannot write overlay {path}: {exc}") from None
    return rgb


def overlay_name(source_id, method, class_name):
    safe = source_id.replace("/", "_").replace("\\", "_")
    return f"{safe}_{method}_{class_name}.png"


def save_heatmap_text(heatmap, path):
    np.savetxt(path, heatmap.values, fmt="%.6f")
