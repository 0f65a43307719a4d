"""Sample assignment: which pixels supervise which box attributes.

Four regression groups share one box: the 2D center offset, the height
coordinate, the log extents and the heading.  The baseline gives every group
the single center pixel.  The multi-positive control gives every group the
same neighborhood.  Decoupled assignment gives only the enabled groups
(always including the center offset) several pixels, chosen either by point
richness (static) or by measured box quality (dynamic), and switches from the
first to the second once the center pixel's IoU is good enough.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from bevhead.geometry import Box7
from bevhead.scene import BevGrid, Frame, point_count_map


class AttributeGroup(str, enum.Enum):
    XY = "xy"
    Z = "z"
    LWH = "lwh"
    THETA = "theta"

    @property
    def width(self) -> int:
        return GROUP_WIDTHS[self]


GROUP_WIDTHS = {AttributeGroup.XY: 2, AttributeGroup.Z: 1, AttributeGroup.LWH: 3, AttributeGroup.THETA: 2}
GROUPS = tuple(AttributeGroup)


def parse_groups(spec: str | Iterable) -> frozenset[AttributeGroup]:
    """``"xy,theta"`` -> {XY, THETA}."""
    items = spec.split(",") if isinstance(spec, str) else spec
    return frozenset(AttributeGroup(str(getattr(s, "value", s)).strip()) for s in items if str(s).strip())


# --------------------------------------------------------------------------- encoding


def center_pixel(gt: Box7, grid: BevGrid) -> tuple[int, int] | None:
    """Pixel holding the box center (floor convention), or None if off-grid."""
    i = math.floor((gt.x - grid.origin_x) / grid.cell)
    j = math.floor((gt.y - grid.origin_y) / grid.cell)
    if 0 <= i < grid.H and 0 <= j < grid.W:
        return (int(i), int(j))
    return None


def encode_center_offset(gt: Box7, pixel: tuple[int, int], grid: BevGrid) -> tuple[float, float]:
    cx, cy = grid.pixel_center(*pixel)
    return ((gt.x - cx) / grid.cell, (gt.y - cy) / grid.cell)


def encode_box_targets(gt: Box7, pixel: tuple[int, int], grid: BevGrid) -> dict[AttributeGroup, np.ndarray]:
    return {
        AttributeGroup.XY: np.array(encode_center_offset(gt, pixel, grid)),
        AttributeGroup.Z: np.array([gt.z]),
        AttributeGroup.LWH: np.log([gt.l, gt.w, gt.h]),
        AttributeGroup.THETA: np.array([math.sin(gt.theta), math.cos(gt.theta)]),
    }


def decode_attributes(xy, z, lwh, sincos, pixel: tuple[int, int], grid: BevGrid) -> Box7:
    """Inverse of :func:`encode_box_targets` (offsets are not clamped)."""
    cx, cy = grid.pixel_center(*pixel)
    sizes = np.exp(np.clip(np.asarray(lwh, dtype=np.float64), -10.0, 10.0))
    return Box7(
        cx + float(xy[0]) * grid.cell,
        cy + float(xy[1]) * grid.cell,
        float(z[0] if np.ndim(z) else z),
        float(sizes[0]),
        float(sizes[1]),
        float(sizes[2]),
        math.atan2(float(sincos[0]), float(sincos[1])),
    )


# --------------------------------------------------------------------------- heatmap


def gaussian_radius(length: float, width: float, min_overlap: float = 0.7) -> float:
    """CornerNet/CenterPoint radius keeping IoU >= ``min_overlap`` for shifted corners."""
    a1 = 1.0
    b1 = length + width
    c1 = width * length * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 * b1 - 4 * a1 * c1)) / 2
    a2 = 4.0
    b2 = 2 * (length + width)
    c2 = (1 - min_overlap) * width * length
    r2 = (b2 + math.sqrt(b2 * b2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (length + width)
    c3 = (min_overlap - 1) * width * length
    r3 = (b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def heatmap_radius(gt: Box7, grid: BevGrid, min_overlap: float = 0.7, min_radius: int = 2) -> int:
    return max(min_radius, int(gaussian_radius(gt.l / grid.cell, gt.w / grid.cell, min_overlap)))


def draw_gaussian(heatmap: np.ndarray, center: tuple[int, int], radius: int) -> None:
    """Max-splat a unit-peak Gaussian into a (H, W) map in place."""
    sigma = (2 * radius + 1) / 6.0
    d = np.arange(-radius, radius + 1)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))
    g[g < np.finfo(np.float64).eps * g.max()] = 0.0
    H, W = heatmap.shape
    i, j = center
    i0, i1 = max(0, i - radius), min(H, i + radius + 1)
    j0, j1 = max(0, j - radius), min(W, j + radius + 1)
    patch = g[i0 - i + radius : i1 - i + radius, j0 - j + radius : j1 - j + radius]
    np.maximum(heatmap[i0:i1, j0:j1], patch, out=heatmap[i0:i1, j0:j1])


# --------------------------------------------------------------------------- plans


@dataclass
class GroupSamples:
    gt: np.ndarray  # (K,) ground-truth index
    i: np.ndarray  # (K,)
    j: np.ndarray  # (K,)
    target: np.ndarray  # (K, width)
    weight: np.ndarray  # (K,)

    def __len__(self) -> int:
        return len(self.gt)

    def pixels(self) -> list[tuple[int, int]]:
        return list(zip(self.i.tolist(), self.j.tolist()))

    def for_gt(self, g: int) -> list[tuple[int, int]]:
        m = self.gt == g
        return list(zip(self.i[m].tolist(), self.j[m].tolist()))

    def equals(self, other: "GroupSamples") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in ("gt", "i", "j", "target", "weight")
        )


@dataclass
class AssignmentPlan:
    heatmap: np.ndarray  # (C, H, W)
    centers: list[tuple[int, int] | None]
    groups: dict[AttributeGroup, GroupSamples]
    skipped: int = 0
    shortfall: int = 0

    @property
    def num_positive(self) -> int:
        return sum(c is not None for c in self.centers)

    def samples_per_gt(self, group: AttributeGroup) -> dict[int, int]:
        gs = self.groups[group]
        return {int(g): int((gs.gt == g).sum()) for g in np.unique(gs.gt)}

    def equals(self, other: "AssignmentPlan") -> bool:
        return (
            np.array_equal(self.heatmap, other.heatmap)
            and self.centers == other.centers
            and set(self.groups) == set(other.groups)
            and all(self.groups[g].equals(other.groups[g]) for g in self.groups)
        )


def build_heatmap(frame: Frame, grid: BevGrid, num_classes: int, min_overlap: float = 0.7, min_radius: int = 2):
    heat = np.zeros((num_classes, grid.H, grid.W))
    centers = []
    for gt in frame.gts:
        c = center_pixel(gt.box, grid)
        centers.append(c)
        if c is not None:
            draw_gaussian(heat[gt.cls], c, heatmap_radius(gt.box, grid, min_overlap, min_radius))
    return heat, centers


def inside_pixels(gt: Box7, grid: BevGrid) -> list[tuple[int, int]]:
    """Pixels whose centers lie inside the box's BEV rectangle, lexicographic order."""
    reach = 0.5 * math.hypot(gt.l, gt.w)
    i0 = max(0, math.floor((gt.x - reach - grid.origin_x) / grid.cell))
    i1 = min(grid.H - 1, math.floor((gt.x + reach - grid.origin_x) / grid.cell))
    j0 = max(0, math.floor((gt.y - reach - grid.origin_y) / grid.cell))
    j1 = min(grid.W - 1, math.floor((gt.y + reach - grid.origin_y) / grid.cell))
    if i1 < i0 or j1 < j0:
        return []
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    px = grid.origin_x + (ii + 0.5) * grid.cell - gt.x
    py = grid.origin_y + (jj + 0.5) * grid.cell - gt.y
    c, s = math.cos(gt.theta), math.sin(gt.theta)
    u = px * c + py * s
    v = -px * s + py * c
    m = (np.abs(u) <= 0.5 * gt.l) & (np.abs(v) <= 0.5 * gt.w)
    return list(zip(ii[m].tolist(), jj[m].tolist()))


def candidate_pixels(gt: Box7, grid: BevGrid) -> list[tuple[int, int]]:
    """Candidate pool: in-rectangle pixels plus the center pixel, sorted."""
    pool = set(inside_pixels(gt, grid))
    c = center_pixel(gt, grid)
    if c is not None:
        pool.add(c)
    return sorted(pool)


def _assemble(frame, grid, heatmap, centers, selection) -> AssignmentPlan:
    """Turn ``selection[group][gt] = (pixels, weight)`` into a plan.

    A pixel claimed by several boxes within a group keeps the larger box's
    targets (ties: lower index).
    """
    areas = [g.box.l * g.box.w for g in frame.gts]
    priority = sorted(range(len(frame.gts)), key=lambda g: (-areas[g], g))
    groups = {}
    for group in GROUPS:
        claimed = set()
        chosen = {}
        for g in priority:
            if g not in selection[group]:
                continue
            pixels, weight = selection[group][g]
            keep = [p for p in pixels if p not in claimed]
            claimed.update(keep)
            chosen[g] = (keep, weight)
        gt_idx, ii, jj, tgt, wts = [], [], [], [], []
        for g in sorted(chosen):
            keep, weight = chosen[g]
            for p in keep:
                gt_idx.append(g)
                ii.append(p[0])
                jj.append(p[1])
                tgt.append(encode_box_targets(frame.gts[g].box, p, grid)[group])
                wts.append(weight)
        groups[group] = GroupSamples(
            gt=np.asarray(gt_idx, dtype=np.int64),
            i=np.asarray(ii, dtype=np.int64),
            j=np.asarray(jj, dtype=np.int64),
            target=np.asarray(tgt, dtype=np.float64).reshape(-1, group.width),
            weight=np.asarray(wts, dtype=np.float64),
        )
    skipped = sum(c is None for c in centers)
    return AssignmentPlan(heatmap=heatmap, centers=centers, groups=groups, skipped=skipped)


def assign_baseline(frame: Frame, grid: BevGrid, num_classes: int = 3) -> AssignmentPlan:
    heat, centers = build_heatmap(frame, grid, num_classes)
    selection = {grp: {g: ([c], 1.0) for g, c in enumerate(centers) if c is not None} for grp in GROUPS}
    return _assemble(frame, grid, heat, centers, selection)


def assign_multipos(frame: Frame, grid: BevGrid, radius: int = 1, num_classes: int = 3) -> AssignmentPlan:
    """Every group gets the (2r+1)^2 neighborhood clipped to the box, weight 1 each."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    heat, centers = build_heatmap(frame, grid, num_classes)
    per_gt = {}
    for g, c in enumerate(centers):
        if c is None:
            continue
        pool = candidate_pixels(frame.gts[g].box, grid)
        near = [p for p in pool if abs(p[0] - c[0]) <= radius and abs(p[1] - c[1]) <= radius]
        per_gt[g] = (near, 1.0)
    selection = {grp: per_gt for grp in GROUPS}
    return _assemble(frame, grid, heat, centers, selection)


def point_richness(
    frame: Frame,
    gt: Box7,
    candidates: Sequence[tuple[int, int]],
    grid: BevGrid | None = None,
    count_map: np.ndarray | None = None,
) -> np.ndarray:
    """Points in the candidate cell plus half the points in its 8 neighbors."""
    if count_map is None:
        if grid is None:
            raise ValueError("point_richness needs a grid or a precomputed count map")
        count_map = point_count_map(frame, grid)
    padded = np.pad(count_map, 1)
    scores = np.empty(len(candidates))
    for k, (i, j) in enumerate(candidates):
        block = padded[i : i + 3, j : j + 3]
        scores[k] = block[1, 1] + 0.5 * (block.sum() - block[1, 1])
    return scores


def _top(candidates, scores, count):
    order = sorted(range(len(candidates)), key=lambda k: (-scores[k], candidates[k]))
    return [candidates[k] for k in order[:count]]


def _dar_plan(frame, grid, dar_groups, pick, num_classes) -> AssignmentPlan:
    dar_groups = frozenset(dar_groups)
    if AttributeGroup.XY not in dar_groups:
        raise ValueError("decoupled assignment must include the center-offset group")
    heat, centers = build_heatmap(frame, grid, num_classes)
    center_only = {g: ([c], 1.0) for g, c in enumerate(centers) if c is not None}
    multi = {}
    shortfall = 0
    for g, c in enumerate(centers):
        if c is None:
            continue
        chosen, short = pick(g, c)
        shortfall += short
        multi[g] = (sorted(chosen), 1.0 / len(chosen))
    selection = {grp: (multi if grp in dar_groups else center_only) for grp in GROUPS}
    plan = _assemble(frame, grid, heat, centers, selection)
    plan.shortfall = shortfall
    return plan


def assign_dar_static(
    frame: Frame,
    grid: BevGrid,
    dar_groups=frozenset({AttributeGroup.XY}),
    n: int = 4,
    num_classes: int = 3,
    count_map: np.ndarray | None = None,
) -> AssignmentPlan:
    """Center pixel plus the ``n - 1`` point-richest in-box pixels for enabled groups."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if count_map is None:
        count_map = point_count_map(frame, grid)

    def pick(g, c):
        others = [p for p in candidate_pixels(frame.gts[g].box, grid) if p != c]
        scores = point_richness(frame, frame.gts[g].box, others, count_map=count_map)
        chosen = [c] + _top(others, scores, n - 1)
        return chosen, int(len(chosen) < n)

    return _dar_plan(frame, grid, dar_groups, pick, num_classes)


QualityFn = Callable[[int, Sequence[tuple[int, int]]], Sequence[float]]


def _quality_lookup(sample_quality, g, candidates):
    if callable(sample_quality):
        return np.asarray(sample_quality(g, candidates), dtype=np.float64)
    table = sample_quality[g] if isinstance(sample_quality, Mapping) and g in sample_quality else sample_quality
    return np.array([float(table[p]) for p in candidates])


def assign_dar_dynamic(
    frame: Frame,
    grid: BevGrid,
    dar_groups=frozenset({AttributeGroup.XY}),
    k: int = 4,
    sample_quality: QualityFn | Mapping = None,
    num_classes: int = 3,
) -> AssignmentPlan:
    """Top-``k`` candidates by quality for enabled groups; the center competes like any other pixel.

    ``sample_quality`` is either ``f(gt_index, candidates) -> qualities`` or a
    mapping ``{gt_index: {pixel: quality}}``.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if sample_quality is None:
        raise ValueError("dynamic assignment needs sample qualities")

    def pick(g, c):
        pool = candidate_pixels(frame.gts[g].box, grid)
        q = _quality_lookup(sample_quality, g, pool)
        chosen = _top(pool, q, k)
        return chosen, int(len(chosen) < k)

    return _dar_plan(frame, grid, dar_groups, pick, num_classes)


# --------------------------------------------------------------------------- switch


class Phase(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class SwitchState:
    phase: Phase = Phase.STATIC
    ema_center_iou: float = 0.0
    ema_decay: float = 0.9
    iou_th: float = 0.6
    k: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")


def switch_update(state: SwitchState, measured_center_iou: float) -> SwitchState:
    """One EMA step; Static turns Dynamic once the EMA reaches the threshold and stays there."""
    if not 0.0 <= measured_center_iou <= 1.0:
        raise ValueError(f"center IoU must lie in [0, 1], got {measured_center_iou}")
    ema = state.ema_decay * state.ema_center_iou + (1.0 - state.ema_decay) * measured_center_iou
    phase = state.phase
    if phase is Phase.STATIC and ema >= state.iou_th:
        phase = Phase.DYNAMIC
    return replace(state, phase=phase, ema_center_iou=ema)


def assign_dar_switch(
    frame: Frame,
    grid: BevGrid,
    dar_groups=frozenset({AttributeGroup.XY}),
    state: SwitchState = SwitchState(),
    sample_quality: QualityFn | Mapping | None = None,
    num_classes: int = 3,
    count_map: np.ndarray | None = None,
) -> AssignmentPlan:
    """Static selection until the switch fires, then dynamic top-k with the same count."""
    if state.phase is Phase.STATIC:
        return assign_dar_static(frame, grid, dar_groups, state.k, num_classes, count_map)
    return assign_dar_dynamic(frame, grid, dar_groups, state.k, sample_quality, num_classes)
