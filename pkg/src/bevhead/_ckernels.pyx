# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled rotated-rectangle kernels; mirrors ``_pykernels`` operation for operation."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt

cnp.import_array()

DEF MAXV = 16


cdef inline void _corners(double x, double y, double l, double w, double t,
                          double* px, double* py) noexcept nogil:
    cdef double c = cos(t)
    cdef double s = sin(t)
    cdef double hl = 0.5 * l
    cdef double hw = 0.5 * w
    cdef double lx[4]
    cdef double ly[4]
    cdef int k
    lx[0] = hl; ly[0] = hw
    lx[1] = -hl; ly[1] = hw
    lx[2] = -hl; ly[2] = -hw
    lx[3] = hl; ly[3] = -hw
    for k in range(4):
        px[k] = x + lx[k] * c - ly[k] * s
        py[k] = y + lx[k] * s + ly[k] * c


cdef double _clip_area(double* sx, double* sy, double* cx, double* cy) noexcept nogil:
    cdef double bufx[2][MAXV]
    cdef double bufy[2][MAXV]
    cdef int n = 4, m, e, k, src = 0, dst
    cdef double ax, ay, ex, ey, qx, qy, sp, sc, t, vx, vy, acc
    for k in range(4):
        bufx[0][k] = sx[k]
        bufy[0][k] = sy[k]
    for e in range(4):
        if n == 0:
            break
        dst = 1 - src
        ax = cx[e]
        ay = cy[e]
        ex = cx[(e + 1) % 4] - ax
        ey = cy[(e + 1) % 4] - ay
        m = 0
        qx = bufx[src][n - 1]
        qy = bufy[src][n - 1]
        sp = ex * (qy - ay) - ey * (qx - ax)
        for k in range(n):
            vx = bufx[src][k]
            vy = bufy[src][k]
            sc = ex * (vy - ay) - ey * (vx - ax)
            if sc >= 0.0:
                if sp < 0.0:
                    t = sp / (sp - sc)
                    bufx[dst][m] = qx + t * (vx - qx)
                    bufy[dst][m] = qy + t * (vy - qy)
                    m += 1
                bufx[dst][m] = vx
                bufy[dst][m] = vy
                m += 1
            elif sp >= 0.0:
                t = sp / (sp - sc)
                bufx[dst][m] = qx + t * (vx - qx)
                bufy[dst][m] = qy + t * (vy - qy)
                m += 1
            qx = vx
            qy = vy
            sp = sc
        n = m
        src = dst
    if n < 3:
        return 0.0
    acc = 0.0
    for k in range(n):
        acc += bufx[src][k] * bufy[src][(k + 1) % n] - bufx[src][(k + 1) % n] * bufy[src][k]
    return 0.5 * acc


cdef double _iou(const double* a0, const double* b0) noexcept nogil:
    cdef const double* a = a0
    cdef const double* b = b0
    cdef int k
    cdef double dx, dy, reach, inter, union_, iou
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    for k in range(5):
        if b0[k] < a0[k]:
            a = b0
            b = a0
            break
        if b0[k] > a0[k]:
            break
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    reach = 0.5 * (sqrt(a[2] * a[2] + a[3] * a[3]) + sqrt(b[2] * b[2] + b[3] * b[3]))
    if dx * dx + dy * dy > reach * reach:
        return 0.0
    _corners(a[0], a[1], a[2], a[3], a[4], ax, ay)
    _corners(b[0], b[1], b[2], b[3], b[4], bx, by)
    inter = _clip_area(ax, ay, bx, by)
    if inter <= 0.0:
        return 0.0
    union_ = a[2] * a[3] + b[2] * b[3] - inter
    if union_ <= 0.0:
        return 0.0
    iou = inter / union_
    if iou > 1.0:
        return 1.0
    return iou


def iou_bev(a, b):
    cdef double av[5]
    cdef double bv[5]
    cdef int k
    for k in range(5):
        av[k] = float(a[k])
        bv[k] = float(b[k])
    return _iou(av, bv)


def iou_bev_pairs(a, b):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], k
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    if B.shape[0] != n:
        raise ValueError("pairwise IoU needs equal-length inputs")
    for k in range(n):
        out[k] = _iou(&A[k, 0], &B[k, 0])
    return out


def iou_bev_matrix(a, b):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            out[i, j] = _iou(&A[i, 0], &B[j, 0])
    return out


def nms_bev(boxes, order, double thresh):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] A = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ordv = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t n = ordv.shape[0], p, q, nk = 0
    cdef cnp.ndarray[cnp.int64_t, ndim=1] keep = np.empty(n, dtype=np.int64)
    cdef long long i
    cdef bint ok
    for p in range(n):
        i = ordv[p]
        ok = True
        for q in range(nk):
            if _iou(&A[keep[q], 0], &A[i, 0]) > thresh:
                ok = False
                break
        if ok:
            keep[nk] = i
            nk += 1
    return keep[:nk].copy()
