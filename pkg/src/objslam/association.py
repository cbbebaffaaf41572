"""Detection filtering and matching against rendered instance masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_DETECTIONS = 100
BORDER_MARGIN_PX = 20
MIN_CLASS_PROB = 0.5
MIN_MASK_AREA_PX = 2500
MIN_OVERLAP = 0.2


@dataclass
class Detection:
    """One instance proposal: binary mask over the full frame, class
    probability distribution, and a proposal score."""

    mask: np.ndarray
    class_dist: np.ndarray
    score: float = 1.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.class_dist = np.asarray(self.class_dist, dtype=np.float64)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def validate(self, frame_shape):
        if self.mask.shape != tuple(frame_shape):
            raise ValueError("detection mask does not match frame dimensions")
        if abs(self.class_dist.sum() - 1.0) > 1e-6:
            raise ValueError("class distribution must sum to 1")


@dataclass
class AssociationResult:
    matched: dict = field(default_factory=dict)   # volume id -> merged Detection
    unmatched: list = field(default_factory=list)


def filter_detections(raw, max_detections=MAX_DETECTIONS,
                      border_px=BORDER_MARGIN_PX,
                      min_class_prob=MIN_CLASS_PROB,
                      min_area=MIN_MASK_AREA_PX):
    """Keep the top detections by score, then drop masks that touch the
    border band, carry no confident class, or are too small (strict >)."""
    ranked = sorted(raw, key=lambda d: -d.score)[:max_detections]
    out = []
    for det in ranked:
        if det.area <= min_area:
            continue
        if det.class_dist.max() <= min_class_prob:
            continue
        if _touches_border(det.mask, border_px):
            continue
        out.append(det)
    return out


def _touches_border(mask, border_px):
    if border_px <= 0:
        return False
    h, w = mask.shape
    b = min(border_px, h, w)
    return bool(mask[:b, :].any() or mask[-b:, :].any()
                or mask[:, :b].any() or mask[:, -b:].any())


def associate(detections, rendered_masks, min_overlap=MIN_OVERLAP) -> AssociationResult:
    """Assign each detection to the rendered instance with the largest
    intersection-over-detection-area; below the threshold it stays
    unmatched. Detections mapped to the same volume merge by mask union
    and class-distribution average. Ties break to the lowest volume id."""
    result = AssociationResult()
    ids = sorted(rendered_masks)
    buckets: dict[int, list] = {}
    for det in detections:
        area = det.area
        best_id, best_overlap = None, 0.0
        for vid in ids:
            overlap = float(np.count_nonzero(rendered_masks[vid] & det.mask)) / area
            if overlap > best_overlap:
                best_id, best_overlap = vid, overlap
        if best_id is not None and best_overlap > min_overlap:
            buckets.setdefault(best_id, []).append(det)
        else:
            result.unmatched.append(det)
    for vid, dets in buckets.items():
        mask = dets[0].mask.copy()
        dist = dets[0].class_dist.astype(np.float64).copy()
        score = dets[0].score
        for det in dets[1:]:
            mask |= det.mask
            dist += det.class_dist
            score = max(score, det.score)
        result.matched[vid] = Detection(mask=mask, class_dist=dist / len(dets),
                                        score=score)
    return result
