"""From head outputs to scored, de-duplicated box detections."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from bevhead.geometry import Box7, nms_arrays
from bevhead.scene import BevGrid


@dataclass(frozen=True)
class Detection:
    box: Box7
    class_id: int
    conf: float
    iou_pred: float | None
    score: float
    pixel: tuple[int, int] = (-1, -1)

    def to_record(self, frame_id: int) -> dict:
        return {
            "frame_id": int(frame_id),
            "cls": int(self.class_id),
            "box": {k: getattr(self.box, k) for k in ("x", "y", "z", "l", "w", "h", "theta")},
            "conf": self.conf,
            "iou_pred": self.iou_pred,
            "score": self.score,
        }


@dataclass(frozen=True)
class DecodeConfig:
    max_dets: int = 100
    min_conf: float = 0.05
    nms_thresh: float = 0.2
    alpha: float = 0.5

    def __post_init__(self):
        if self.max_dets < 0:
            raise ValueError("max_dets must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.nms_thresh <= 1.0:
            raise ValueError(f"nms_thresh must lie in [0, 1], got {self.nms_thresh}")


def local_maxima(heat: np.ndarray) -> np.ndarray:
    """Boolean mask of 3x3 local maxima of a (H, W) map.

    On a plateau only the lexicographically first pixel survives: a pixel
    must be strictly above its earlier neighbors and not below later ones.
    """
    H, W = heat.shape
    p = np.full((H + 2, W + 2), -np.inf)
    p[1:-1, 1:-1] = heat
    keep = np.ones((H, W), dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = p[1 + di : 1 + di + H, 1 + dj : 1 + dj + W]
            if (di, dj) < (0, 0):
                keep &= heat > nb
            else:
                keep &= heat >= nb
    return keep


def extract_peaks(conf: np.ndarray, max_dets: int = 100, min_conf: float = 0.05) -> list[tuple[tuple[int, int], int, float]]:
    """Top local maxima over all class channels as ``((i, j), class, conf)``.

    Ordered by descending conf, ties by (class, i, j).
    """
    found = []
    for c in range(conf.shape[0]):
        mask = local_maxima(conf[c]) & (conf[c] >= min_conf)
        ii, jj = np.nonzero(mask)
        found += [(float(conf[c, i, j]), c, int(i), int(j)) for i, j in zip(ii, jj)]
    found.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    return [((i, j), c, v) for v, c, i, j in found[:max_dets]]


def decode_box_array(xy, z, lwh, sincos, ii, jj, grid: BevGrid) -> np.ndarray:
    """Vectorized decode of (K, width) attribute rows at pixels (ii, jj) into (K, 7) boxes."""
    ii = np.asarray(ii, dtype=np.float64)
    jj = np.asarray(jj, dtype=np.float64)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    out = np.empty((len(ii), 7))
    out[:, 0] = grid.origin_x + (ii + 0.5 + xy[:, 0]) * grid.cell
    out[:, 1] = grid.origin_y + (jj + 0.5 + xy[:, 1]) * grid.cell
    out[:, 2] = np.asarray(z, dtype=np.float64).reshape(-1)
    out[:, 3:6] = np.exp(np.clip(np.asarray(lwh, dtype=np.float64).reshape(-1, 3), -10.0, 10.0))
    sc = np.asarray(sincos, dtype=np.float64).reshape(-1, 2)
    out[:, 6] = np.arctan2(sc[:, 0], sc[:, 1])
    return out


def decode_at(outputs, ii, jj, grid: BevGrid) -> np.ndarray:
    """Boxes decoded from ``outputs`` (dense or sparse) at the given pixels."""
    return decode_box_array(
        outputs.gather("xy", ii, jj),
        outputs.gather("z", ii, jj),
        outputs.gather("lwh", ii, jj),
        outputs.gather("theta", ii, jj),
        ii,
        jj,
        grid,
    )


def decode_box(outputs, pixel: tuple[int, int], grid: BevGrid) -> Box7:
    row = decode_at(outputs, [pixel[0]], [pixel[1]], grid)[0]
    return Box7.from_array(row)


def rectify_score(conf: float, iou_pred: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return float(conf)
    return float(conf ** (1.0 - alpha) * iou_pred**alpha)


def iou_to_unit(v) -> np.ndarray:
    """tanh-space quality (-1, 1) -> [0, 1]."""
    return np.clip((np.asarray(v, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def peak_pixels(conf: np.ndarray, config: DecodeConfig) -> np.ndarray:
    peaks = extract_peaks(conf, config.max_dets, config.min_conf)
    if not peaks:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array([p for p, _, _ in peaks], dtype=np.int64)


def decode_detections(outputs, grid: BevGrid, config: DecodeConfig = DecodeConfig(), use_iou: bool | None = None) -> list[Detection]:
    """Peaks -> boxes -> rectified scores -> rotated NMS, sorted by score.

    ``use_iou`` defaults to whether the outputs carry a quality map; without
    one the score is the raw confidence.
    """
    peaks = extract_peaks(outputs.conf, config.max_dets, config.min_conf)
    if not peaks:
        return []
    ii = np.array([p[0] for p, _, _ in peaks])
    jj = np.array([p[1] for p, _, _ in peaks])
    boxes = decode_at(outputs, ii, jj, grid)
    has_iou = outputs.iou is not None if use_iou is None else use_iou
    alpha = config.alpha if has_iou else 0.0
    iou_pred = iou_to_unit(outputs.gather("iou", ii, jj)[:, 0]) if has_iou else None
    dets = []
    for k, ((i, j), c, v) in enumerate(peaks):
        q = float(iou_pred[k]) if iou_pred is not None else None
        score = rectify_score(v, q, alpha) if q is not None else float(v)
        dets.append(Detection(Box7.from_array(boxes[k]), c, float(v), q, score, (i, j)))
    keep = nms_arrays(boxes, [d.score for d in dets], config.nms_thresh)
    return [dets[k] for k in keep]


def save_detections(path, detections_by_frame: Iterable[tuple[int, Sequence[Detection]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame_id, dets in detections_by_frame:
            for d in dets:
                fh.write(json.dumps(d.to_record(frame_id), separators=(",", ":")) + "\n")


def load_detections(path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                b = rec["box"]
                box = Box7(*(b[k] for k in ("x", "y", "z", "l", "w", "h", "theta")))
                det = Detection(box, int(rec["cls"]), float(rec["conf"]), rec["iou_pred"], float(rec["score"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: bad detection record ({exc})") from exc
            out.setdefault(int(rec["frame_id"]), []).append(det)
    return out
