"""Detection quality: AP/mAP plus center-offset, quality-calibration and peak diagnostics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from bevhead.assign import center_pixel, encode_center_offset
from bevhead.decode import Detection, local_maxima
from bevhead.geometry import Box7, boxes_to_array, iou_bev_matrix
from bevhead.scene import CLASS_NAMES, BevGrid, Frame

AP_THRESHOLDS = (0.3, 0.5, 0.7)
SWEEP_SPLITS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
MRPE_EPS = 1e-3


def _gt_boxes(frame: Frame, class_id: int | None = None) -> np.ndarray:
    return boxes_to_array(g.box for g in frame.gts if class_id is None or g.cls == class_id)


def _det_boxes(dets: Sequence[Detection]) -> np.ndarray:
    return boxes_to_array(d.box for d in dets)


def interpolated_ap(tp: np.ndarray, n_gt: int, points: int = 101) -> float:
    """Area under the precision envelope sampled at ``points`` recall levels."""
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in np.linspace(0.0, 1.0, points):
        k = np.searchsorted(recall, r - 1e-12, side="left")
        total += env[k] if k < len(env) else 0.0
    return float(total / points)


def compute_ap(dets_by_frame, frames: Sequence[Frame], iou_thresh: float, class_id: int) -> float | None:
    """101-point AP of one class over a set of frames; None when the class has no ground truth.

    Detections are visited by descending score across all frames; each takes
    the unmatched same-class ground truth of its frame with the highest IoU.
    """
    gts = [_gt_boxes(fr, class_id) for fr in frames]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return None
    pool = []
    for f, dets in enumerate(dets_by_frame):
        for k, d in enumerate(dets):
            if d.class_id == class_id:
                pool.append((-d.score, f, k, d))
    pool.sort(key=lambda t: t[:3])
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    ious = {}
    tp = np.zeros(len(pool))
    for n, (_, f, k, d) in enumerate(pool):
        if len(gts[f]) == 0:
            continue
        if f not in ious:
            same = [dd for dd in dets_by_frame[f] if dd.class_id == class_id]
            ious[f] = (iou_bev_matrix(_det_boxes(same), gts[f]), {id(dd): r for r, dd in enumerate(same)})
        mat, rows = ious[f]
        row = np.where(used[f], -1.0, mat[rows[id(d)]])
        best = int(np.argmax(row))
        if row[best] >= iou_thresh:
            used[f][best] = True
            tp[n] = 1.0
    return interpolated_ap(tp, n_gt)


def match_detections(dets: Sequence[Detection], frame: Frame, match_iou: float, same_class: bool = True):
    """Greedy score-ordered one-to-one matching; returns [(det index, gt index, iou)]."""
    if not dets or not frame.gts:
        return []
    mat = iou_bev_matrix(_det_boxes(dets), frame.box_array())
    if same_class:
        cls_d = np.array([d.class_id for d in dets])
        mat = np.where(cls_d[:, None] == frame.classes[None, :], mat, -1.0)
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
    used = np.zeros(len(frame.gts), dtype=bool)
    out = []
    for k in order:
        row = np.where(used, -1.0, mat[k])
        g = int(np.argmax(row))
        if row[g] >= match_iou:
            used[g] = True
            out.append((k, g, float(row[g])))
    return out


def relative_offset_error(pred_center, gt: Box7, grid: BevGrid) -> float | None:
    """100 * |pred_d - gt_d| / (|gt_d| + eps) with offsets in pixels from the GT's center pixel."""
    pix = center_pixel(gt, grid)
    if pix is None:
        return None
    gt_d = np.array(encode_center_offset(gt, pix, grid))
    cx, cy = grid.pixel_center(*pix)
    pred_d = np.array([(pred_center[0] - cx) / grid.cell, (pred_center[1] - cy) / grid.cell])
    return float(100.0 * np.linalg.norm(pred_d - gt_d) / (np.linalg.norm(gt_d) + MRPE_EPS))


def center_mrpe(dets_by_frame, frames: Sequence[Frame], grid: BevGrid, match_iou: float = 0.3):
    """Mean relative center-offset error in percent, overall and per class (None when nothing matched)."""
    per_class: dict[int, list[float]] = {}
    for dets, fr in zip(dets_by_frame, frames):
        for k, g, _ in match_detections(dets, fr, match_iou):
            gt = fr.gts[g]
            e = relative_offset_error((dets[k].box.x, dets[k].box.y), gt.box, grid)
            if e is not None:
                per_class.setdefault(gt.cls, []).append(e)
    allv = [v for vs in per_class.values() for v in vs]
    overall = float(np.mean(allv)) if allv else None
    return overall, {c: float(np.mean(v)) for c, v in sorted(per_class.items())}


def quality_pairs(dets_by_frame, frames: Sequence[Frame]) -> tuple[np.ndarray, np.ndarray]:
    """(predicted IoU, best IoU with any ground truth) for every detection carrying a prediction."""
    pred, true = [], []
    for dets, fr in zip(dets_by_frame, frames):
        dets = [d for d in dets if d.iou_pred is not None]
        if not dets:
            continue
        if fr.gts:
            best = iou_bev_matrix(_det_boxes(dets), fr.box_array()).max(axis=1)
        else:
            best = np.zeros(len(dets))
        pred += [d.iou_pred for d in dets]
        true += best.tolist()
    return np.asarray(pred, dtype=np.float64), np.asarray(true, dtype=np.float64)


def iou_mse_by_quality(dets_by_frame, frames: Sequence[Frame], split: float = 0.5):
    """(mse_low, mse_high) of predicted vs true IoU split at ``split``; None for an empty side."""
    pred, true = quality_pairs(dets_by_frame, frames)
    return _split_mse(pred, true, split)


def _split_mse(pred, true, split):
    low = true <= split
    err = (pred - true) ** 2
    mse_low = float(err[low].mean()) if low.any() else None
    mse_high = float(err[~low].mean()) if (~low).any() else None
    return mse_low, mse_high


def mse_sweep(dets_by_frame, frames, splits=SWEEP_SPLITS):
    pred, true = quality_pairs(dets_by_frame, frames)
    return [(s,) + _split_mse(pred, true, s) for s in splits]


def offcenter_flags(conf: np.ndarray, frame: Frame, grid: BevGrid) -> list[bool]:
    """Per in-grid GT: is the nearest local maximum of its class channel off the center pixel?"""
    flags = []
    maxima = {}
    for gt in frame.gts:
        pix = center_pixel(gt.box, grid)
        if pix is None:
            continue
        if gt.cls not in maxima:
            maxima[gt.cls] = np.argwhere(local_maxima(conf[gt.cls]))
        peaks = maxima[gt.cls]
        if len(peaks) == 0:
            flags.append(True)
            continue
        d2 = ((peaks - np.array(pix)) ** 2).sum(axis=1)
        nearest = peaks[int(np.argmin(d2))]
        flags.append(tuple(int(v) for v in nearest) != pix)
    return flags


def offcenter_rate(conf_maps, frames: Sequence[Frame], grid: BevGrid) -> float | None:
    flags = [f for conf, fr in zip(conf_maps, frames) for f in offcenter_flags(conf, fr, grid)]
    return float(np.mean(flags)) if flags else None


# --------------------------------------------------------------------------- report


@dataclass
class EvalReport:
    ap: dict = field(default_factory=dict)  # class name -> {thresh: AP or None}
    mAP: float | None = None
    vehicle_ap: float | None = None
    mrpe_percent: float | None = None
    mrpe_per_class: dict = field(default_factory=dict)
    mse_low: float | None = None
    mse_high: float | None = None
    mse_sweep: list = field(default_factory=list)
    offcenter_rate: float | None = None
    counts: dict = field(default_factory=dict)
    config_hash: str = ""

    CSV_COLUMNS = (
        "config_hash",
        "frames",
        "gts",
        "detections",
        "mAP",
        "vehicle_ap",
        "pedestrian_ap",
        "cyclist_ap",
        "mrpe_percent",
        "mse_low",
        "mse_high",
        "offcenter_rate",
    )

    def class_ap(self, name: str) -> float | None:
        vals = [v for v in self.ap.get(name, {}).values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def row(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "frames": self.counts.get("frames", 0),
            "gts": self.counts.get("gts", 0),
            "detections": self.counts.get("detections", 0),
            "mAP": self.mAP,
            "vehicle_ap": self.class_ap("vehicle"),
            "pedestrian_ap": self.class_ap("pedestrian"),
            "cyclist_ap": self.class_ap("cyclist"),
            "mrpe_percent": self.mrpe_percent,
            "mse_low": self.mse_low,
            "mse_high": self.mse_high,
            "offcenter_rate": self.offcenter_rate,
        }

    def to_json(self) -> str:
        doc = {
            "config_hash": self.config_hash,
            "ap": {c: {f"{t:g}": v for t, v in d.items()} for c, d in self.ap.items()},
            "mAP": self.mAP,
            "vehicle_ap": self.vehicle_ap,
            "mrpe_percent": self.mrpe_percent,
            "mrpe_per_class": self.mrpe_per_class,
            "mse_low": self.mse_low,
            "mse_high": self.mse_high,
            "mse_sweep": [{"split": s, "mse_low": lo, "mse_high": hi} for s, lo, hi in self.mse_sweep],
            "offcenter_rate": self.offcenter_rate,
            "counts": self.counts,
        }
        return json.dumps(doc, indent=2, sort_keys=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        w.writerow([format_value(v) for v in self.row().values()])
        return buf.getvalue()


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def evaluate(dets_by_frame, frames: Sequence[Frame], grid: BevGrid, conf_maps=None, num_classes: int = 3,
             thresholds=AP_THRESHOLDS, match_iou: float = 0.3) -> EvalReport:
    """Full report over a set of frames with their decoded detections."""
    rep = EvalReport()
    vals = []
    for c in range(num_classes):
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}"
        rep.ap[name] = {}
        for t in thresholds:
            ap = compute_ap(dets_by_frame, frames, t, c)
            rep.ap[name][t] = ap
            if ap is not None:
                vals.append(ap)
    rep.mAP = float(np.mean(vals)) if vals else None
    rep.vehicle_ap = rep.class_ap(CLASS_NAMES[0])
    rep.mrpe_percent, per = center_mrpe(dets_by_frame, frames, grid, match_iou)
    rep.mrpe_per_class = {CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}": v for c, v in per.items()}
    rep.mse_low, rep.mse_high = iou_mse_by_quality(dets_by_frame, frames)
    rep.mse_sweep = mse_sweep(dets_by_frame, frames)
    if conf_maps is not None:
        rep.offcenter_rate = offcenter_rate(conf_maps, frames, grid)
    rep.counts = {
        "frames": len(frames),
        "gts": sum(len(f.gts) for f in frames),
        "detections": sum(len(d) for d in dets_by_frame),
    }
    return rep

