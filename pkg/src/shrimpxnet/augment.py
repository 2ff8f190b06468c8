"""MixUp and CutMix over in-batch pairs.

Each sample ``i`` is paired with ``partner[i]``, a derangement of the batch
(a random cyclic ordering), so no sample is mixed with itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentPolicy:
    mixup_alpha: float = 0.0
    cutmix_alpha: float = 0.0
    apply_probability: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mixup_alpha < 0 or self.cutmix_alpha < 0:
            raise ValueError("augmentation alphas must be >= 0")
        if not 0 <= self.apply_probability <= 1:
            raise ValueError(f"apply_probability must be in [0, 1], got {self.apply_probability}")

    @property
    def enabled(self):
        return self.mixup_alpha > 0 or self.cutmix_alpha > 0


@dataclass(frozen=True)
class AugmentRecord:
    technique: str  # "none", "mixup" or "cutmix"
    lam: float  # weight of the original sample's label

    def log_line(self, epoch, batch):
        return f"{epoch} {batch} {self.technique} {self.lam:.6f}"


def sample_beta(alpha, rng):
    """Draw lambda ~ Beta(alpha, alpha) as g1 / (g1 + g2) with g ~ Gamma(alpha, 1)."""
    if alpha <= 0:
        raise ValueError(f"Beta concentration must be > 0, got {alpha}")
    while True:
        g1, g2 = rng.gamma(alpha, 1.0), rng.gamma(alpha, 1.0)
        if g1 + g2 > 0:
            return g1 / (g1 + g2)


def pairing(n, rng):
    """Partner index for every sample; a derangement when ``n >= 2``."""
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.int64)
    partner[order] = np.roll(order, -1)
    return partner


def mixup(x, y, lam, partner):
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"batch size mismatch: {x.shape[0]} images, {y.shape[0]} labels")
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    lam_x = x.dtype.type(lam)
    lam_y = y.dtype.type(lam)
    x_new = lam_x * x + (x.dtype.type(1) - lam_x) * x[partner]
    y_new = lam_y * y + (y.dtype.type(1) - lam_y) * y[partner]
    return x_new, y_new


def box_mask(height, width, top, left, patch_h, patch_w):
    """Mask that is 1 everywhere except the (clipped) patch."""
    mask = np.ones((height, width), dtype=np.float64)
    t, l = max(top, 0), max(left, 0)
    b, r = min(top + patch_h, height), min(left + patch_w, width)
    if b > t and r > l:
        mask[t:b, l:r] = 0
    return mask


def cutmix_box(height, width, lam, rng):
    """Patch of size ``(H sqrt(1-lam), W sqrt(1-lam))`` centred uniformly, before clipping."""
    ph = int(round(height * np.sqrt(1 - lam)))
    pw = int(round(width * np.sqrt(1 - lam)))
    cy, cx = int(rng.integers(height)), int(rng.integers(width))
    return cy - ph // 2, cx - pw // 2, ph, pw


def paste(x, y, mask, partner):
    """Apply a CutMix mask; label weight is the realised mean of the mask."""
    keep = float(mask.mean())
    m = mask.astype(x.dtype)
    x_new = x * m + x[partner] * (x.dtype.type(1) - m)
    w = y.dtype.type(keep)
    y_new = w * y + (y.dtype.type(1) - w) * y[partner]
    return x_new, y_new, keep


def cutmix(x, y, alpha, rng, partner=None):
    """Returns ``(x_new, y_new, mask, keep)`` with one patch shared by the batch."""
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"batch size mismatch: {x.shape[0]} images, {y.shape[0]} labels")
    lam = sample_beta(alpha, rng)
    h, w = x.shape[2], x.shape[3]
    mask = box_mask(h, w, *cutmix_box(h, w, lam, rng))
    if partner is None:
        partner = pairing(x.shape[0], rng)
    x_new, y_new, keep = paste(x, y, mask, partner)
    return x_new, y_new, mask, keep


def apply_policy(policy, x, y, rng):
    """Augment one batch according to ``policy``; returns ``(x, y, AugmentRecord)``.

    With both alphas positive a fair coin picks MixUp or CutMix for the batch.
    """
    if not policy.enabled or rng.random() >= policy.apply_probability:
        return x, y, AugmentRecord("none", 1.0)
    if policy.mixup_alpha > 0 and policy.cutmix_alpha > 0:
        technique = "mixup" if rng.random() < 0.5 else "cutmix"
    else:
        technique = "mixup" if policy.mixup_alpha > 0 else "cutmix"
    partner = pairing(x.shape[0], rng)
    if technique == "mixup":
        lam = sample_beta(policy.mixup_alpha, rng)
        x_new, y_new = mixup(x, y, lam, partner)
        return x_new, y_new, AugmentRecord("mixup", float(lam))
    x_new, y_new, _, keep = cutmix(x, y, policy.cutmix_alpha, rng, partner)
    return x_new, y_new, AugmentRecord("cutmix", keep)
