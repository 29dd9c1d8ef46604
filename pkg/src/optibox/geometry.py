"""Box algebra: IoU, the offset codec, target assignment, clipping.

Boxes use the center parameterization (cx, cy, w, h); corner-form import
and export is provided for data ingestion. Offsets follow the R-CNN
convention: translations scaled by the source extents, log-ratio scales.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._kernels import iou_matrix as _iou_matrix
from .errors import InvalidBoxError, NumericalError, OutOfBoundsError


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: center (cx, cy), positive extents (w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.cx, self.cy, self.w, self.h):
            if not math.isfinite(v):
                raise InvalidBoxError(f"non-finite box field in {self.astuple()}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidBoxError(f"non-positive extents: w={self.w}, h={self.h}")

    def astuple(self):
        return (self.cx, self.cy, self.w, self.h)

    def corners(self):
        """(x1, y1, x2, y2) corner form."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @property
    def area(self):
        return self.w * self.h

    @staticmethod
    def from_corners(x1, y1, x2, y2):
        return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class BoxOffset:
    """Regression target: scaled translation (tx, ty), log-ratio (tw, th)."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        for v in (self.tx, self.ty, self.tw, self.th):
            if not math.isfinite(v):
                raise InvalidBoxError(f"non-finite offset field in {self.astuple()}")

    def astuple(self):
        return (self.tx, self.ty, self.tw, self.th)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix for center-form box arrays of shape [n, 4] and [m, 4]."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != 4 or b.shape[1] != 4:
        raise ValueError("expected [n, 4] and [m, 4] box arrays")
    if np.any(a[:, 2:] <= 0) or np.any(b[:, 2:] <= 0) or not (
        np.all(np.isfinite(a)) and np.all(np.isfinite(b))
    ):
        raise InvalidBoxError("box array holds non-finite or non-positive extents")
    return _iou_matrix(a, b)


def encode_offset(r: Box, g: Box) -> BoxOffset:
    """Offset that carries the source box ``r`` onto the target ``g``."""
    return BoxOffset(
        (g.cx - r.cx) / r.w,
        (g.cy - r.cy) / r.h,
        math.log(g.w / r.w),
        math.log(g.h / r.h),
    )


def decode_offset(r: Box, t: BoxOffset) -> Box:
    """Apply offset ``t`` to the source box ``r`` (inverse of encode)."""
    try:
        w = r.w * math.exp(t.tw)
        h = r.h * math.exp(t.th)
    except OverflowError as exc:
        raise NumericalError(f"offset decode overflowed: {t.astuple()}") from exc
    if not (math.isfinite(w) and math.isfinite(h)):
        raise NumericalError(f"offset decode produced non-finite extents: {t.astuple()}")
    return Box(r.w * t.tx + r.cx, r.h * t.ty + r.cy, w, h)


def best_target_proposal(
    proposals: Sequence[Box], gt: Box, threshold: float = 0.5, strict: bool = False
) -> Optional[int]:
    """Index of the max-IoU proposal with IoU >= threshold (or > if strict).

    Returns None when no proposal qualifies; ties break to the lowest index.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    best_idx, best_iou = None, -1.0
    for idx, p in enumerate(proposals):
        v = iou(p, gt)
        qualifies = v > threshold if strict else v >= threshold
        if qualifies and v > best_iou:
            best_idx, best_iou = idx, v
    return best_idx


def clip_box(b: Box, bounds: Box) -> Box:
    """Intersect ``b`` with ``bounds`` in corner form and re-center.

    Raises OutOfBoundsError when the intersection is empty or degenerate.
    """
    bx1, by1, bx2, by2 = b.corners()
    lx1, ly1, lx2, ly2 = bounds.corners()
    x1, y1 = max(bx1, lx1), max(by1, ly1)
    x2, y2 = min(bx2, lx2), min(by2, ly2)
    if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
        raise OutOfBoundsError(f"box {b.astuple()} lies outside bounds {bounds.astuple()}")
    return Box.from_corners(x1, y1, x2, y2)


def image_bounds(width: float, height: float) -> Box:
    """The full-image box [0, width] x [0, height] in center form."""
    return Box(width / 2.0, height / 2.0, float(width), float(height))


def union_box(boxes: Sequence[Box]) -> Box:
    """Smallest box covering all inputs (corner-form hull)."""
    if not boxes:
        raise ValueError("union_box needs at least one box")
    corners = [b.corners() for b in boxes]
    x1 = min(c[0] for c in corners)
    y1 = min(c[1] for c in corners)
    x2 = max(c[2] for c in corners)
    y2 = max(c[3] for c in corners)
    return Box.from_corners(x1, y1, x2, y2)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    return np.array([b.astuple() for b in boxes], dtype=np.float64).reshape(-1, 4)
