"""Rule-based post-processing of model outputs.

Covers NP mask dilation, mutual IRMA/NV false-positive removal, the
class-specific operating thresholds for quality grades, and the
segmentation-guided edit of DR grades.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import IRMA, NP, NV, MaskSet, SoftMaskSet, validate_label


@dataclass(frozen=True)
class GradeDecisionRule:
    """Operating thresholds mapping a raw regressor output to a grade."""

    low: float = 0.54
    high: float = 1.5

    def __post_init__(self) -> None:
        if not self.low < self.high:
            raise ValueError("low threshold must be below high threshold")


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """Binary dilation: max over a k x k square window, edge-clipped."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")
    out = ndimage.maximum_filter(m.astype(np.uint8), size=k, mode="constant", cval=0)
    return out.astype(np.uint8)


def reconcile_irma_nv(soft: SoftMaskSet | np.ndarray, masks: MaskSet | np.ndarray) -> MaskSet:
    """Resolve IRMA/NV conflicts: keep only the more confident channel.

    At pixels positive in both channels, the one with strictly greater soft
    confidence wins; ties keep IRMA. The NP channel passes through.
    """
    s = soft.channels if isinstance(soft, SoftMaskSet) else np.asarray(soft, dtype=np.float64)
    b = masks.channels if isinstance(masks, MaskSet) else np.asarray(masks, dtype=np.uint8)
    if s.shape != b.shape:
        raise ValueError("soft and binary mask shapes must match")
    out = b.copy()
    conflict = (b[IRMA] == 1) & (b[NV] == 1)
    nv_wins = conflict & (s[NV] > s[IRMA])
    out[IRMA][nv_wins] = 0
    out[NV][conflict & ~nv_wins] = 0
    return MaskSet(out)


def quality_decision(raw: float, rule: GradeDecisionRule = GradeDecisionRule()) -> int:
    """Grade decision from a raw score using the operating thresholds."""
    raw = float(raw)
    if raw < rule.low:
        return 0
    if raw < rule.high:
        return 1
    return 2


def grade_postedit(grade: int, masks: MaskSet | np.ndarray, nv_min_pixels: int = 1) -> int:
    """Edit a DR grade with the segmentation output.

    Any NV detection (at least ``nv_min_pixels`` positives) forces PDR;
    otherwise a fully lesion-free mask forces normal; else unchanged.
    """
    grade = validate_label(grade)
    b = masks.channels if isinstance(masks, MaskSet) else np.asarray(masks)
    if int(b[NV].sum()) >= nv_min_pixels:
        return 2
    if int(b.sum()) == 0:
        return 0
    return grade


def postprocess_masks(soft: SoftMaskSet | np.ndarray, threshold: float = 0.5,
                      dilation_kernel: int = 5) -> MaskSet:
    """Full segmentation post-processing: binarize, dilate NP, reconcile IRMA/NV."""
    s = soft.channels if isinstance(soft, SoftMaskSet) else np.asarray(soft, dtype=np.float64)
    binary = (s >= threshold).astype(np.uint8)
    binary[NP] = dilate(binary[NP], dilation_kernel)
    return reconcile_irma_nv(s, binary)
