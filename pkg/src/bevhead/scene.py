"""Synthetic BEV scenes, feature rasterization and frame files.

Scenes are range- and orientation-dependent on purpose: points are sampled
only on box faces that see the sensor, with a per-box count that falls off
with the inverse square of range.  That makes some pixels of an object far
richer in points than others, which is what point-richness sample selection
feeds on.

Map layout convention used throughout the package: a map has shape
``(channels, H, W)``; axis 1 indexes x (``i``) and axis 2 indexes y (``j``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from bevhead.geometry import BOX_FIELDS, Box7, iou_bev_matrix, boxes_to_array

CLASS_NAMES = ("vehicle", "pedestrian", "cyclist")
N_BASE_CHANNELS = 6


class FrameFormatError(ValueError):
    """Raised when a frame file line cannot be parsed or violates a box invariant."""


@dataclass(frozen=True)
class GroundTruth:
    cls: int
    box: Box7


@dataclass(eq=False)
class Frame:
    frame_id: int
    points: np.ndarray  # (N, 4): x, y, z, reflectance
    gts: list[GroundTruth] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
            and self.gts == other.gts
        )

    def box_array(self) -> np.ndarray:
        return boxes_to_array(g.box for g in self.gts)

    @property
    def classes(self) -> np.ndarray:
        return np.array([g.cls for g in self.gts], dtype=np.int64)


@dataclass(frozen=True)
class BevGrid:
    origin_x: float = 0.0
    origin_y: float = 0.0
    cell: float = 0.5
    H: int = 128
    W: int = 128

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError(f"cell must be positive, got {self.cell}")
        if self.H < 8 or self.W < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.H}x{self.W}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W)

    def pixel_center(self, i: int, j: int) -> tuple[float, float]:
        return (self.origin_x + (i + 0.5) * self.cell, self.origin_y + (j + 0.5) * self.cell)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinate planes, each of shape (H, W)."""
        xs = self.origin_x + (np.arange(self.H) + 0.5) * self.cell
        ys = self.origin_y + (np.arange(self.W) + 0.5) * self.cell
        return np.meshgrid(xs, ys, indexing="ij")

    def locate(self, x, y):
        """Integer pixel indices (floor convention) for coordinates; may fall outside."""
        i = np.floor((np.asarray(x, dtype=np.float64) - self.origin_x) / self.cell).astype(np.int64)
        j = np.floor((np.asarray(y, dtype=np.float64) - self.origin_y) / self.cell).astype(np.int64)
        return i, j

    def contains(self, i, j):
        return (i >= 0) & (i < self.H) & (j >= 0) & (j < self.W)


@dataclass(frozen=True)
class SizePrior:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


DEFAULT_PRIORS = (
    SizePrior((4.5, 1.9, 1.6), (0.35, 0.12, 0.15)),
    SizePrior((0.8, 0.7, 1.75), (0.1, 0.08, 0.1)),
    SizePrior((1.8, 0.7, 1.7), (0.15, 0.08, 0.1)),
)


@dataclass(frozen=True)
class SceneConfig:
    x_range: tuple[float, float] = (0.0, 64.0)
    y_range: tuple[float, float] = (0.0, 64.0)
    sensor: tuple[float, float, float] = (0.0, 0.0, 2.0)
    min_boxes: int = 3
    max_boxes: int = 8
    class_probs: tuple[float, ...] = (0.5, 0.25, 0.25)
    priors: tuple[SizePrior, ...] = DEFAULT_PRIORS
    base_rate: float = 40000.0  # points * m^2, i.e. 400 points at 10 m
    min_pts: int = 8
    max_pts: int = 400
    n_ground: int = 600
    ground_sigma: float = 0.05
    surface_noise: float = 0.02
    min_range: float = 4.0
    edge_margin: float = 1.0
    min_gap: float = 0.5
    max_retries: int = 100
    # boxes have no front/back cue, so headings span half a turn
    heading_range: tuple[float, float] = (-math.pi / 2, math.pi / 2)

    def __post_init__(self):
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ValueError("scene bounds are empty")
        if not 0 <= self.min_boxes <= self.max_boxes:
            raise ValueError("need 0 <= min_boxes <= max_boxes")
        if len(self.class_probs) != len(self.priors):
            raise ValueError("class_probs and priors disagree on the class count")
        if abs(sum(self.class_probs) - 1.0) > 1e-9 or min(self.class_probs) < 0:
            raise ValueError("class_probs must be a probability vector")
        if not 0 <= self.min_pts <= self.max_pts:
            raise ValueError("need 0 <= min_pts <= max_pts")
        if not self.heading_range[0] < self.heading_range[1]:
            raise ValueError("heading_range is empty")

    @property
    def num_classes(self) -> int:
        return len(self.priors)


def expected_point_count(config: SceneConfig, box_range: float) -> float:
    """Unclamped inverse-square point budget of a box at ``box_range`` meters."""
    return config.base_rate / max(box_range, 1e-6) ** 2


def box_point_count(config: SceneConfig, box_range: float) -> int:
    n = int(round(expected_point_count(config, box_range)))
    return min(max(n, config.min_pts), config.max_pts)


def _faces(box: Box7):
    """Yield (center, outward normal, area, sampler) for the 4 sides and the top."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    z0, z1 = box.z - 0.5 * box.h, box.z + 0.5 * box.h
    corners = [
        (box.x + lx * c - ly * s, box.y + lx * s + ly * c)
        for lx, ly in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    ]
    faces = []
    for k in range(4):
        (ax, ay), (bx, by) = corners[k], corners[(k + 1) % 4]
        ex, ey = bx - ax, by - ay
        length = math.hypot(ex, ey)
        normal = (ey / length, -ex / length, 0.0)
        center = (0.5 * (ax + bx), 0.5 * (ay + by), box.z)

        def side(rng, n, ax=ax, ay=ay, ex=ex, ey=ey):
            t = rng.random(n)
            z = z0 + rng.random(n) * (z1 - z0)
            return np.column_stack([ax + t * ex, ay + t * ey, z])

        faces.append((center, normal, length * box.h, side))

    def top(rng, n):
        u = (rng.random(n) - 0.5) * box.l
        v = (rng.random(n) - 0.5) * box.w
        return np.column_stack([box.x + u * c - v * s, box.y + u * s + v * c, np.full(n, z1)])

    faces.append(((box.x, box.y, z1), (0.0, 0.0, 1.0), box.l * box.w, top))
    return faces


def sample_box_points(box: Box7, count: int, sensor, rng, noise: float = 0.0) -> np.ndarray:
    """Sample ``count`` surface points on the faces of ``box`` that see ``sensor``.

    Faces share the budget in proportion to area times the cosine between the
    outward normal and the direction to the sensor.
    """
    faces = _faces(box)
    weights = []
    for center, normal, area, _ in faces:
        d = np.subtract(sensor, center)
        dist = float(np.linalg.norm(d))
        cosine = float(np.dot(normal, d)) / dist if dist > 0 else 0.0
        weights.append(area * cosine if cosine > 0 else 0.0)
    weights = np.asarray(weights)
    if count <= 0 or weights.sum() <= 0:
        return np.zeros((0, 3))
    per_face = rng.multinomial(count, weights / weights.sum())
    chunks = [faces[k][3](rng, n) for k, n in enumerate(per_face) if n > 0]
    pts = np.concatenate(chunks, axis=0)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    return pts


def _draw_box(config: SceneConfig, rng) -> tuple[int, Box7]:
    cls = int(rng.choice(config.num_classes, p=np.asarray(config.class_probs)))
    prior = config.priors[cls]
    l, w, h = (max(0.3, m + sd * rng.standard_normal()) for m, sd in zip(prior.mean, prior.std))
    theta = rng.uniform(*config.heading_range)
    reach = 0.5 * math.hypot(l, w) + config.edge_margin
    x = rng.uniform(config.x_range[0] + reach, config.x_range[1] - reach)
    y = rng.uniform(config.y_range[0] + reach, config.y_range[1] - reach)
    return cls, Box7(x, y, 0.5 * h, l, w, h, theta)


def _clear_of(box: Box7, placed: list[Box7], gap: float) -> bool:
    if not placed:
        return True
    grown = box.as_array()[None]
    grown[:, 3:5] += gap
    others = boxes_to_array(placed)
    others[:, 3:5] += gap
    return bool(np.all(iou_bev_matrix(grown, others) == 0.0))


def generate_scene(config: SceneConfig, seed: int, frame_id: int = 0) -> Frame:
    """Deterministic synthetic frame for ``(config, seed, frame_id)``.

    Placement that keeps failing after ``max_retries`` attempts simply yields
    fewer boxes.
    """
    rng = np.random.default_rng([int(seed), int(frame_id)])
    sensor = np.asarray(config.sensor, dtype=np.float64)
    n_boxes = int(rng.integers(config.min_boxes, config.max_boxes + 1))
    gts: list[GroundTruth] = []
    for _ in range(n_boxes):
        for _attempt in range(config.max_retries):
            cls, box = _draw_box(config, rng)
            if math.hypot(box.x - sensor[0], box.y - sensor[1]) < config.min_range:
                continue
            if _clear_of(box, [g.box for g in gts], config.min_gap):
                gts.append(GroundTruth(cls, box))
                break

    chunks = []
    for g in gts:
        rng_box = math.hypot(g.box.x - sensor[0], g.box.y - sensor[1])
        pts = sample_box_points(g.box, box_point_count(config, rng_box), sensor, rng, config.surface_noise)
        refl = rng.uniform(0.2, 0.9, size=(len(pts), 1))
        chunks.append(np.hstack([pts, refl]))
    n = config.n_ground
    ground = np.column_stack(
        [
            rng.uniform(*config.x_range, size=n),
            rng.uniform(*config.y_range, size=n),
            rng.normal(0.0, config.ground_sigma, size=n),
            rng.uniform(0.0, 0.3, size=n),
        ]
    )
    chunks.append(ground)
    points = np.concatenate(chunks, axis=0)
    inside = (
        (points[:, 0] >= config.x_range[0])
        & (points[:, 0] < config.x_range[1])
        & (points[:, 1] >= config.y_range[0])
        & (points[:, 1] < config.y_range[1])
    )
    return Frame(frame_id=int(frame_id), points=points[inside], gts=gts)


def generate_frames(config: SceneConfig, seed: int, count: int, start_id: int = 0) -> list[Frame]:
    return [generate_scene(config, seed, start_id + k) for k in range(count)]


# --------------------------------------------------------------------------- features


@dataclass
class FeatureMap:
    data: np.ndarray  # (F, H, W)
    dropped: int = 0

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def box_filter3(x: np.ndarray) -> np.ndarray:
    """3x3 mean filter with zero padding over the last two axes."""
    p = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)])
    H, W = x.shape[-2:]
    acc = np.zeros_like(x, dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            acc += p[..., di : di + H, dj : dj + W]
    return acc / 9.0


def rasterize_features(
    frame: Frame,
    grid: BevGrid,
    channels: int = 16,
    sensor: Sequence[float] = (0.0, 0.0),
    range_scale: float = 50.0,
) -> FeatureMap:
    """Per-pixel point statistics.

    Channels 0..5: log1p(point count), mean z, max z, mean reflectance,
    occupancy, pixel range to the sensor divided by ``range_scale``.  Channel
    ``c >= 6`` is channel ``(c - 6) % 6`` passed ``(c - 6) // 6 + 1`` times
    through a 3x3 box filter.  Points outside the grid are dropped and counted.
    """
    if channels < N_BASE_CHANNELS:
        raise ValueError(f"need at least {N_BASE_CHANNELS} feature channels, got {channels}")
    H, W = grid.shape
    pts = frame.points
    i, j = grid.locate(pts[:, 0], pts[:, 1])
    ok = grid.contains(i, j)
    dropped = int((~ok).sum())
    flat = (i[ok] * W + j[ok]).astype(np.int64)
    z = pts[ok, 2]
    r = pts[ok, 3]

    count = np.bincount(flat, minlength=H * W).astype(np.float64)
    zsum = np.bincount(flat, weights=z, minlength=H * W)
    rsum = np.bincount(flat, weights=r, minlength=H * W)
    zmax = np.full(H * W, -np.inf)
    np.maximum.at(zmax, flat, z)
    occ = count > 0
    safe = np.where(occ, count, 1.0)

    base = np.zeros((N_BASE_CHANNELS, H * W))
    base[0] = np.log1p(count)
    base[1] = np.where(occ, zsum / safe, 0.0)
    base[2] = np.where(occ, zmax, 0.0)
    base[3] = np.where(occ, rsum / safe, 0.0)
    base[4] = occ.astype(np.float64)
    base = base.reshape(N_BASE_CHANNELS, H, W)
    px, py = grid.pixel_centers()
    base[5] = np.hypot(px - sensor[0], py - sensor[1]) / range_scale

    data = np.empty((channels, H, W))
    data[:N_BASE_CHANNELS] = base
    smoothed = base
    for c in range(N_BASE_CHANNELS, channels):
        k = (c - N_BASE_CHANNELS) % N_BASE_CHANNELS
        if k == 0:
            smoothed = box_filter3(smoothed)
        data[c] = smoothed[k]
    return FeatureMap(data=data, dropped=dropped)


def point_count_map(frame: Frame, grid: BevGrid) -> np.ndarray:
    """(H, W) histogram of all frame points; out-of-grid points are ignored."""
    i, j = grid.locate(frame.points[:, 0], frame.points[:, 1])
    ok = grid.contains(i, j)
    return np.bincount(i[ok] * grid.W + j[ok], minlength=grid.H * grid.W).reshape(grid.shape).astype(np.float64)


# --------------------------------------------------------------------------- files


def frame_to_record(frame: Frame) -> dict:
    return {
        "frame_id": int(frame.frame_id),
        "points": frame.points.tolist(),
        "boxes": [{"cls": int(g.cls), **{k: getattr(g.box, k) for k in BOX_FIELDS}} for g in frame.gts],
    }


def _number(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FrameFormatError(f"{where}: expected a number, got {value!r}")
    return float(value)


def frame_from_record(rec, line_no: int | None = None, num_classes: int | None = None) -> Frame:
    at = f"line {line_no}" if line_no is not None else "record"
    if not isinstance(rec, dict):
        raise FrameFormatError(f"{at}: expected a JSON object")
    for key in ("frame_id", "points", "boxes"):
        if key not in rec:
            raise FrameFormatError(f"{at}: missing field {key!r}")
    fid = rec["frame_id"]
    if isinstance(fid, bool) or not isinstance(fid, int):
        raise FrameFormatError(f"{at}: field 'frame_id' must be an integer")
    if not isinstance(rec["points"], list):
        raise FrameFormatError(f"{at}: field 'points' must be a list")
    pts = np.zeros((len(rec["points"]), 4))
    for k, p in enumerate(rec["points"]):
        if not isinstance(p, list) or len(p) != 4:
            raise FrameFormatError(f"{at}: field 'points[{k}]' must be [x, y, z, r]")
        pts[k] = [_number(v, f"{at}: field 'points[{k}]'") for v in p]
    if not isinstance(rec["boxes"], list):
        raise FrameFormatError(f"{at}: field 'boxes' must be a list")
    gts = []
    for k, b in enumerate(rec["boxes"]):
        if not isinstance(b, dict):
            raise FrameFormatError(f"{at}: field 'boxes[{k}]' must be an object")
        for name in ("cls",) + BOX_FIELDS:
            if name not in b:
                raise FrameFormatError(f"{at}: field 'boxes[{k}].{name}' missing (frame_id {fid})")
        cls = b["cls"]
        if isinstance(cls, bool) or not isinstance(cls, int) or cls < 0:
            raise FrameFormatError(f"{at}: field 'boxes[{k}].cls' must be a non-negative integer")
        if num_classes is not None and cls >= num_classes:
            raise FrameFormatError(f"{at}: field 'boxes[{k}].cls'={cls} exceeds class count {num_classes}")
        vals = {name: _number(b[name], f"{at}: field 'boxes[{k}].{name}'") for name in BOX_FIELDS}
        for name in ("l", "w", "h"):
            if not vals[name] > 0:
                raise FrameFormatError(
                    f"{at}: frame_id {fid}: box {k} field {name!r} must be positive, got {vals[name]}"
                )
        try:
            box = Box7(**vals)
        except ValueError as exc:
            raise FrameFormatError(f"{at}: frame_id {fid}: box {k}: {exc}") from exc
        gts.append(GroundTruth(cls, box))
    return Frame(frame_id=fid, points=pts, gts=gts)


def save_frames(frames: Sequence[Frame], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for frame in frames:
            fh.write(json.dumps(frame_to_record(frame), separators=(",", ":")))
            fh.write("\n")


def load_frames(path, num_classes: int | None = None) -> list[Frame]:
    frames = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FrameFormatError(f"line {n}: invalid JSON ({exc.msg})") from exc
            frames.append(frame_from_record(rec, n, num_classes))
    return frames
