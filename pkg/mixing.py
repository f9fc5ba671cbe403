"""
Cross-domain sample mixing.

Region-level (CutMix-style) and class-level (ClassMix-style) binary masks,
local replacement of target pixels by source pixels, and the global
interpolation mix used as a baseline.
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from utils import ArgumentError

IGNORE = 255
PATH_KINDS = ("region", "class", "interpolation")


def labels_to_onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Dense one-hot view of a label map; IGNORE pixels become all-zero rows."""
    labels = np.asarray(labels)
    valid = labels != IGNORE
    if np.any(labels[valid] >= num_classes) or np.any(labels[valid] < 0):
        raise ArgumentError(f"Label map has ids outside [0, {num_classes})")
    onehot = np.zeros(labels.shape + (num_classes,), dtype=np.float64)
    idx = np.where(valid, labels, 0).astype(np.int64)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot[~valid] = 0.0
    return onehot


@dataclass
class InterpolationParams:
    """Mixing ratio for the interpolation mix; ``lam=None`` draws it from Beta(a, a)."""
    lam: Optional[float] = None
    a: float = 2.0

    def __post_init__(self):
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ArgumentError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.a <= 0:
            raise ArgumentError(f"Beta shape must be positive, got {self.a}")


@dataclass
class MixedSample:
    """
    A bridging sample.

    Attributes:
        image: (H, W, C) mixed image
        label: (H, W) label map for local mixes, (H, W, K) soft labels for interpolation
        mask: (H, W) provenance mask, 1 = source pixel; ``None`` for interpolation
        kind: 'region', 'class' or 'interpolation'
        lam: Mixing ratio (interpolation only)
    """
    image: np.ndarray
    label: np.ndarray
    mask: Optional[np.ndarray]
    kind: str
    lam: Optional[float] = None


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def region_side_lengths(height: int, width: int, area_ratio: float) -> Tuple[int, int]:
    """Rectangle sides round(H*sqrt(r)) x round(W*sqrt(r)), clamped to the frame."""
    scale = math.sqrt(area_ratio)
    h = min(max(_round_half_up(height * scale), 1), height)
    w = min(max(_round_half_up(width * scale), 1), width)
    return h, w


def sample_region_mask(height: int, width: int, area_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """
    One axis-aligned rectangle of ones, uniformly placed fully inside the frame.

    Args:
        height: Mask height (>= 2)
        width: Mask width (>= 2)
        area_ratio: Target fraction of ones, 0 < r < 1
        rng: Random generator

    Returns:
        uint8 mask of shape (height, width)
    """
    if height < 2 or width < 2:
        raise ArgumentError(f"Region mask needs H, W >= 2, got {height}x{width}")
    if not 0.0 < area_ratio < 1.0:
        raise ArgumentError(f"area_ratio must lie in (0, 1), got {area_ratio}")
    h, w = region_side_lengths(height, width, area_ratio)
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    mask = np.zeros((height, width), dtype=np.uint8)
    mask[top:top + h, left:left + w] = 1
    return mask


def present_classes(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return np.unique(labels[labels != IGNORE]).astype(np.int64)


def select_half_classes(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random ceil(n/2) of the n classes present in ``labels`` (sorted)."""
    classes = present_classes(labels)
    if classes.size == 0:
        raise ArgumentError("Label map contains no labelled pixels")
    count = (classes.size + 1) // 2
    chosen = rng.choice(classes, size=count, replace=False)
    return np.sort(chosen)


def class_mask(labels: np.ndarray, selected: Sequence[int]) -> np.ndarray:
    """1 where the source label is one of ``selected``; IGNORE pixels stay 0."""
    labels = np.asarray(labels)
    selected = np.asarray(list(selected), dtype=np.int64)
    mask = np.isin(labels, selected) & (labels != IGNORE)
    return mask.astype(np.uint8)


def apply_local_mix(
    x_s: np.ndarray,
    y_s: np.ndarray,
    x_t: np.ndarray,
    y_t_pseudo: np.ndarray,
    mask: np.ndarray,
    kind: str = "region",
) -> MixedSample:
    """
    Paste masked source pixels (image and label) onto the target.

    Source pixels labelled IGNORE are never pasted; the returned mask is the
    effective provenance (1 = source).
    """
    x_s, x_t = np.asarray(x_s), np.asarray(x_t)
    y_s, y_t_pseudo = np.asarray(y_s), np.asarray(y_t_pseudo)
    mask = np.asarray(mask)
    if x_s.shape != x_t.shape or y_s.shape != y_t_pseudo.shape or mask.shape != y_s.shape \
            or x_s.shape[:2] != mask.shape:
        raise ArgumentError(
            f"Mix shapes disagree: x_s {x_s.shape}, x_t {x_t.shape}, "
            f"y_s {y_s.shape}, y_t {y_t_pseudo.shape}, mask {mask.shape}"
        )
    if not np.all((mask == 0) | (mask == 1)):
        raise ArgumentError("Mix mask must be binary")
    effective = ((mask == 1) & (y_s != IGNORE)).astype(np.uint8)
    take = effective.astype(bool)
    image = np.where(take[..., None], x_s, x_t)
    label = np.where(take, y_s, y_t_pseudo)
    return MixedSample(image=image, label=label, mask=effective, kind=kind)


def apply_interpolation_mix(
    x_s: np.ndarray,
    y_s_onehot: np.ndarray,
    x_t: np.ndarray,
    y_t_onehot: np.ndarray,
    params: InterpolationParams,
    rng: np.random.Generator,
) -> MixedSample:
    """Convex combination lam * source + (1 - lam) * target of images and one-hot labels."""
    x_s, x_t = np.asarray(x_s, dtype=np.float64), np.asarray(x_t, dtype=np.float64)
    y_s_onehot = np.asarray(y_s_onehot, dtype=np.float64)
    y_t_onehot = np.asarray(y_t_onehot, dtype=np.float64)
    if x_s.shape != x_t.shape or y_s_onehot.shape != y_t_onehot.shape \
            or x_s.shape[:2] != y_s_onehot.shape[:2]:
        raise ArgumentError(
            f"Interpolation shapes disagree: {x_s.shape}, {x_t.shape}, "
            f"{y_s_onehot.shape}, {y_t_onehot.shape}"
        )
    lam = params.lam if params.lam is not None else float(rng.beta(params.a, params.a))
    image = lam * x_s + (1.0 - lam) * x_t
    label = lam * y_s_onehot + (1.0 - lam) * y_t_onehot
    return MixedSample(image=image, label=label, mask=None, kind="interpolation", lam=lam)
