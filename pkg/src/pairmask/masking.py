"""Information-aware and cross-modal masking.

Per-patch information scores (gradient magnitude + local variance) drive
adaptive masking probabilities via batch quantiles. A separate substitution
step swaps visible patches of the second modality with content drawn from
its own masked set, at a probability that ramps up over training. All
functions are pure in (inputs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage


class Modality(Enum):
    RGB = "rgb"
    OTHER = "other"
    FUSED = "fused"


@dataclass
class ModalityImage:
    """Pixel-aligned raster for one modality, H x W x 3, float."""

    pixels: np.ndarray
    modality: Modality
    patch_size: int = 16

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("non-finite pixel values")
        h, w, _ = self.pixels.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"image {h}x{w} not divisible by patch_size {self.patch_size}"
            )

    @property
    def grid_shape(self) -> tuple[int, int]:
        h, w, _ = self.pixels.shape
        return h // self.patch_size, w // self.patch_size

    def luminance(self) -> np.ndarray:
        """Equal-weight channel mean, H x W."""
        return self.pixels.mean(axis=2)


@dataclass
class InfoScoreMap:
    """Per-patch information scores on the patch grid."""

    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError("scores must be a 2D patch grid")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite scores")
        if np.any(self.scores < 0):
            raise ValueError("negative information score")


@dataclass
class MaskMap:
    """Boolean patch grid; True marks a patch hidden from the student."""

    masked: np.ndarray

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=bool)
        if self.masked.ndim != 2:
            raise ValueError("masked must be a 2D patch grid")

    @property
    def masked_fraction(self) -> float:
        return float(self.masked.mean())


# Low/mid/high masking probabilities for the quantile buckets.
PROB_LOW_INFO = 0.8
PROB_MID_INFO = 0.5
PROB_HIGH_INFO = 0.3


@dataclass
class MaskProbabilityMap:
    """Per-patch masking probability plus the batch quantiles that set it."""

    probs: np.ndarray
    q20: float
    q80: float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.q20 > self.q80:
            raise ValueError("q20 must not exceed q80")


@dataclass
class SubstitutionSchedule:
    """Stepwise ramp of the cross-modal substitution probability."""

    rho_start: float = 0.1
    rho_step: float = 0.1
    epochs_per_step: int = 10
    rho_max: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.rho_start <= self.rho_max <= 1.0:
            raise ValueError("need 0 <= rho_start <= rho_max <= 1")
        if self.rho_step < 0:
            raise ValueError("rho_step must be >= 0")
        if self.epochs_per_step < 1:
            raise ValueError("epochs_per_step must be >= 1")


def gradient_magnitude(image: ModalityImage) -> np.ndarray:
    """Per-pixel Sobel gradient magnitude of the luminance, H x W.

    3x3 Sobel kernels with replicate-border padding; multi-channel input is
    reduced to a single luminance channel first.
    """
    lum = image.luminance()
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def patch_info_score(
    image: ModalityImage, w_grad: float = 1.0, w_var: float = 1.0
) -> InfoScoreMap:
    """Per-patch score: mean gradient magnitude + population luminance variance."""
    p = image.patch_size
    hp, wp = image.grid_shape
    grad = gradient_magnitude(image)
    lum = image.luminance()

    def per_patch(x, reducer):
        blocks = x.reshape(hp, p, wp, p).transpose(0, 2, 1, 3).reshape(hp, wp, p * p)
        return reducer(blocks, axis=2)

    s_grad = per_patch(grad, np.mean)
    s_var = per_patch(lum, np.var)  # population variance (1/N)
    return InfoScoreMap(w_grad * s_grad + w_var * s_var)


def fuse_info_scores(s_rgb: InfoScoreMap, s_other: InfoScoreMap) -> InfoScoreMap:
    """Elementwise sum of the two modalities' score maps."""
    if s_rgb.scores.shape != s_other.scores.shape:
        raise ValueError(
            f"score shape mismatch: {s_rgb.scores.shape} vs {s_other.scores.shape}"
        )
    return InfoScoreMap(s_rgb.scores + s_other.scores)


def assign_mask_probabilities(
    scores: list[InfoScoreMap],
) -> list[MaskProbabilityMap]:
    """Bucket each patch by its fused score against batch-pooled quantiles.

    Quantiles are linear-interpolation percentiles over all patch scores
    pooled across the batch. Strictly below the 20th percentile -> 0.8,
    strictly above the 80th -> 0.3, otherwise (ties included) -> 0.5.
    """
    if not scores:
        raise ValueError("empty batch")
    pooled = np.concatenate([s.scores.ravel() for s in scores])
    q20, q80 = np.quantile(pooled, [0.2, 0.8])
    out = []
    for s in scores:
        probs = np.full(s.scores.shape, PROB_MID_INFO)
        probs[s.scores < q20] = PROB_LOW_INFO
        probs[s.scores > q80] = PROB_HIGH_INFO
        out.append(MaskProbabilityMap(probs, float(q20), float(q80)))
    return out


def sample_masks(probs: MaskProbabilityMap, seed: int) -> MaskMap:
    """Independent per-patch Bernoulli draws; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    return MaskMap(rng.random(probs.probs.shape) < probs.probs)


def substitution_probability(epoch: int, sched: SubstitutionSchedule) -> float:
    """Substitution probability at a given epoch: stepwise ramp with a cap."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    rho = sched.rho_start + sched.rho_step * (epoch // sched.epochs_per_step)
    return min(rho, sched.rho_max)


def apply_cross_modal_substitution(
    image: ModalityImage, mask: MaskMap, rho: float, seed: int
) -> ModalityImage:
    """Replace visible patches with random masked-patch content, w.p. rho.

    Masked positions are never altered; with no masked patches the call is a
    no-op. Deterministic under a fixed seed.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0,1], got {rho}")
    if mask.masked.shape != image.grid_shape:
        raise ValueError(
            f"mask shape {mask.masked.shape} does not match patch grid {image.grid_shape}"
        )
    masked_idx = np.argwhere(mask.masked)
    pixels = image.pixels.copy()
    if rho == 0.0 or len(masked_idx) == 0:
        return ModalityImage(pixels, image.modality, image.patch_size)

    rng = np.random.default_rng(seed)
    p = image.patch_size
    unmasked_idx = np.argwhere(~mask.masked)
    draws = rng.random(len(unmasked_idx))
    sources = rng.integers(0, len(masked_idx), size=len(unmasked_idx))
    src_pixels = image.pixels  # source content comes from the unmodified input
    for (gi, gj), u, k in zip(unmasked_idx, draws, sources):
        if u < rho:
            si, sj = masked_idx[k]
            pixels[gi * p : (gi + 1) * p, gj * p : (gj + 1) * p] = src_pixels[
                si * p : (si + 1) * p, sj * p : (sj + 1) * p
            ]
    return ModalityImage(pixels, image.modality, image.patch_size)


def substituted_positions(
    mask: MaskMap, rho: float, seed: int
) -> np.ndarray:
    """Boolean grid of positions that apply_cross_modal_substitution replaces.

    Replays the same RNG stream so visualizations can outline swapped patches.
    """
    out = np.zeros(mask.masked.shape, dtype=bool)
    if rho == 0.0 or not mask.masked.any():
        return out
    rng = np.random.default_rng(seed)
    unmasked_idx = np.argwhere(~mask.masked)
    draws = rng.random(len(unmasked_idx))
    for (gi, gj), u in zip(unmasked_idx, draws):
        if u < rho:
            out[gi, gj] = True
    return out


def fuse_masks(m_rgb: MaskMap, m_other: MaskMap) -> MaskMap:
    """A fused position is masked only if masked in both modalities."""
    if m_rgb.masked.shape != m_other.masked.shape:
        raise ValueError(
            f"mask shape mismatch: {m_rgb.masked.shape} vs {m_other.masked.shape}"
        )
    return MaskMap(m_rgb.masked & m_other.masked)


def write_mask_png(
    image: ModalityImage,
    mask: MaskMap,
    path,
    substituted: np.ndarray | None = None,
) -> None:
    """Render masked patches as gray blocks, outlining substituted ones."""
    from PIL import Image

    px = image.pixels
    lo, hi = px.min(), px.max()
    scale = (px - lo) / (hi - lo) if hi > lo else np.zeros_like(px)
    rgb = (scale * 255).astype(np.uint8)
    p = image.patch_size
    for gi, gj in np.argwhere(mask.masked):
        rgb[gi * p : (gi + 1) * p, gj * p : (gj + 1) * p] = 128
    if substituted is not None:
        for gi, gj in np.argwhere(substituted):
            y0, y1 = gi * p, (gi + 1) * p
            x0, x1 = gj * p, (gj + 1) * p
            rgb[y0, x0:x1] = (255, 0, 0)
            rgb[y1 - 1, x0:x1] = (255, 0, 0)
            rgb[y0:y1, x0] = (255, 0, 0)
            rgb[y0:y1, x1 - 1] = (255, 0, 0)
    Image.fromarray(rgb).save(path)
