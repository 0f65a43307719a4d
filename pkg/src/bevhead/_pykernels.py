"""Pure-Python rotated-rectangle kernels.

Reference implementation of the compiled ``_ckernels`` module.  Both follow
the same arithmetic order so results agree to the last bit on IEEE doubles.
A box row is ``(x, y, l, w, theta)``.
"""

import math

import numpy as np


def rect_corners(x, y, l, w, theta):
    c = math.cos(theta)
    s = math.sin(theta)
    hl = 0.5 * l
    hw = 0.5 * w
    out = []
    for lx, ly in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((x + lx * c - ly * s, y + lx * s + ly * c))
    return out


def clip_convex(subject, clip):
    """Sutherland-Hodgman clipping of a convex CCW polygon by another."""
    poly = list(subject)
    n_clip = len(clip)
    for e in range(n_clip):
        if not poly:
            break
        ax, ay = clip[e]
        bx, by = clip[(e + 1) % n_clip]
        ex = bx - ax
        ey = by - ay
        out = []
        px, py = poly[-1]
        sp = ex * (py - ay) - ey * (px - ax)
        for cx, cy in poly:
            sc = ex * (cy - ay) - ey * (cx - ax)
            if sc >= 0.0:
                if sp < 0.0:
                    t = sp / (sp - sc)
                    out.append((px + t * (cx - px), py + t * (cy - py)))
                out.append((cx, cy))
            elif sp >= 0.0:
                t = sp / (sp - sc)
                out.append((px + t * (cx - px), py + t * (cy - py)))
            px, py, sp = cx, cy, sc
        poly = out
    return poly


def polygon_area(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def _key_less(b, a):
    for u, v in zip(b, a):
        if u < v:
            return True
        if u > v:
            return False
    return False


def iou_bev(a, b):
    a = tuple(float(v) for v in a)
    b = tuple(float(v) for v in b)
    # canonical argument order makes the result bit-symmetric
    if _key_less(b, a):
        a, b = b, a
    ax, ay, al, aw, at = a
    bx, by, bl, bw, bt = b
    dx = ax - bx
    dy = ay - by
    reach = 0.5 * (math.sqrt(al * al + aw * aw) + math.sqrt(bl * bl + bw * bw))
    if dx * dx + dy * dy > reach * reach:
        return 0.0
    inter = polygon_area(clip_convex(rect_corners(*a), rect_corners(*b)))
    if inter <= 0.0:
        return 0.0
    union = al * aw + bl * bw - inter
    if union <= 0.0:
        return 0.0
    iou = inter / union
    return 1.0 if iou > 1.0 else iou


def iou_bev_pairs(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(a.shape[0], dtype=np.float64)
    for k in range(a.shape[0]):
        out[k] = iou_bev(a[k], b[k])
    return out


def iou_bev_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = iou_bev(a[i], b[j])
    return out


def nms_bev(boxes, order, thresh):
    """Greedy suppression over ``order``; returns kept indices in that order."""
    boxes = np.asarray(boxes, dtype=np.float64)
    keep = []
    for i in order:
        i = int(i)
        for k in keep:
            if iou_bev(boxes[k], boxes[i]) > thresh:
                break
        else:
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)
