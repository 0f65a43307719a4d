"""Rotated-rectangle and 3D box geometry.

Boxes are 7-attribute ``(x, y, z, l, w, h, theta)`` records: ``(x, y, z)`` is
the box center in meters, ``l`` runs along the heading ``theta`` (radians,
counter-clockwise from +x) and ``w`` is perpendicular to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from bevhead import _kernels, _pykernels

BOX_FIELDS = ("x", "y", "z", "l", "w", "h", "theta")
# column indices of (x, y, l, w, theta) in a Box7 row
BEV_COLUMNS = [0, 1, 3, 4, 6]


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    t = math.remainder(float(theta), 2.0 * math.pi)
    if t <= -math.pi:
        t += 2.0 * math.pi
    return t


@dataclass(frozen=True)
class Box7:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        for name in BOX_FIELDS:
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"box field {name!r} is not finite: {v}")
            object.__setattr__(self, name, v)
        for name in ("l", "w", "h"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"box extent {name!r} must be positive, got {getattr(self, name)}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.theta])

    def bev(self) -> tuple[float, float, float, float, float]:
        return (self.x, self.y, self.l, self.w, self.theta)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "Box7":
        return cls(*(float(v) for v in row[:7]))


@dataclass(frozen=True)
class ConvexPolygon:
    """Counter-clockwise vertex loop; an empty tuple is the empty polygon."""

    vertices: tuple[tuple[float, float], ...] = ()

    @property
    def area(self) -> float:
        return max(0.0, _pykernels.polygon_area(self.vertices))

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) < 3


def bev_corners(box: Box7) -> ConvexPolygon:
    return ConvexPolygon(tuple(_pykernels.rect_corners(*box.bev())))


def _dedupe(points, tol):
    out = []
    for p in points:
        if not out or abs(p[0] - out[-1][0]) > tol or abs(p[1] - out[-1][1]) > tol:
            out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= tol and abs(out[0][1] - out[-1][1]) <= tol:
        out.pop()
    return out


def polygon_clip(subject: ConvexPolygon, clip: ConvexPolygon) -> ConvexPolygon:
    """Intersection of two convex CCW polygons.

    Line or point contacts come back as the empty polygon (area 0).
    """
    if subject.is_empty or clip.is_empty:
        return ConvexPolygon()
    pts = _pykernels.clip_convex(subject.vertices, clip.vertices)
    scale = max(max(abs(c) for v in subject.vertices for c in v), 1.0)
    pts = _dedupe(pts, 1e-12 * scale)
    if len(pts) < 3 or _pykernels.polygon_area(pts) <= 0.0:
        return ConvexPolygon()
    return ConvexPolygon(tuple(pts))


def rotated_iou_bev(a: Box7, b: Box7) -> float:
    """Intersection over union of the two boxes' BEV rectangles."""
    return float(_kernels.iou_bev(a.bev(), b.bev()))


def iou_3d(a: Box7, b: Box7) -> float:
    bev_a, bev_b = a.bev(), b.bev()
    inter_area = _pykernels.polygon_area(
        _pykernels.clip_convex(_pykernels.rect_corners(*bev_a), _pykernels.rect_corners(*bev_b))
    )
    if inter_area <= 0.0:
        return 0.0
    top = min(a.z + 0.5 * a.h, b.z + 0.5 * b.h)
    bottom = max(a.z - 0.5 * a.h, b.z - 0.5 * b.h)
    overlap = top - bottom
    if overlap <= 0.0:
        return 0.0
    inter = inter_area * overlap
    union = a.volume + b.volume - inter
    return min(1.0, inter / union) if union > 0.0 else 0.0


def boxes_to_array(boxes: Iterable[Box7]) -> np.ndarray:
    rows = [b.as_array() for b in boxes]
    if not rows:
        return np.zeros((0, 7))
    return np.stack(rows)


def bev_rows(boxes: np.ndarray) -> np.ndarray:
    """(N, 7) box array -> (N, 5) contiguous ``(x, y, l, w, theta)`` rows."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    return np.ascontiguousarray(boxes[:, BEV_COLUMNS])


def iou_bev_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise BEV IoU between (N, 7) and (M, 7) box arrays."""
    return _kernels.iou_bev_matrix(bev_rows(a), bev_rows(b))


def iou_bev_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise BEV IoU of two equal-length (N, 7) box arrays."""
    return _kernels.iou_bev_pairs(bev_rows(a), bev_rows(b))


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score; equal scores keep the lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(len(scores))
    return np.lexsort((idx, -scores)).astype(np.int64)


def nms_arrays(boxes: np.ndarray, scores: Sequence[float], iou_thresh: float) -> np.ndarray:
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in [0, 1], got {iou_thresh}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    return _kernels.nms_bev(bev_rows(boxes), score_order(scores), float(iou_thresh))


def rotated_nms(dets: Sequence, iou_thresh: float) -> list[int]:
    """Greedy rotated NMS over objects carrying ``.box`` and ``.score``.

    A candidate is suppressed when its BEV IoU with an already kept box
    exceeds ``iou_thresh``.  Returns kept indices by descending score.
    """
    if len(dets) == 0:
        return []
    boxes = boxes_to_array(d.box for d in dets)
    keep = nms_arrays(boxes, [d.score for d in dets], iou_thresh)
    return [int(i) for i in keep]
