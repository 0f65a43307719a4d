"""Differentiable primitives with hand-written reverse passes.

Everything works on float64 ``(C, H, W)`` arrays.  The 3x3 convolution uses
zero "same" padding and runs on a flattened padded map: with row pitch
``W + 2`` every kernel tap is a constant offset into the flat buffer, so a
conv becomes one BLAS matmul plus contiguous slice copies.
"""

from __future__ import annotations

import numpy as np

TAPS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _offsets(W):
    return [dy * (W + 2) + dx for dy, dx in TAPS]


def pad_flat(x: np.ndarray) -> np.ndarray:
    C, H, W = x.shape
    p = np.zeros((C, H + 2, W + 2))
    p[:, 1:-1, 1:-1] = x
    return p.reshape(C, -1)


def _span(H, W):
    return (H - 1) * (W + 2) + W


def _unspan(y_span, H, W):
    Cout = y_span.shape[0]
    full = np.zeros((Cout, H * (W + 2)))
    full[:, : y_span.shape[1]] = y_span
    return full.reshape(Cout, H, W + 2)[:, :, :W]


def _to_span(g):
    Cout, H, W = g.shape
    full = np.zeros((Cout, H, W + 2))
    full[:, :, :W] = g
    return full.reshape(Cout, -1)[:, : _span(H, W)]


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = conv(x, w) + b.  ``w`` is (Cout, Cin, 3, 3).  Returns (y, cache)."""
    Cin, H, W = x.shape
    Cout = w.shape[0]
    if w.shape[1:] != (Cin, 3, 3):
        raise ValueError(f"kernel shape {w.shape} does not match {Cin} input channels")
    pf = pad_flat(x)
    L = _span(H, W)
    offs = _offsets(W)
    if Cout >= Cin:
        cols = np.empty((9 * Cin, L))
        for k, s in enumerate(offs):
            cols[k * Cin : (k + 1) * Cin] = pf[:, s : s + L]
        wmat = w.transpose(0, 2, 3, 1).reshape(Cout, 9 * Cin)
        y_span = wmat @ cols
        cache = ("cols", cols, wmat, x.shape, w.shape)
    else:
        wstack = w.transpose(2, 3, 0, 1).reshape(9 * Cout, Cin)
        z = wstack @ pf
        y_span = z[0:Cout, offs[0] : offs[0] + L].copy()
        for k in range(1, 9):
            s = offs[k]
            y_span += z[k * Cout : (k + 1) * Cout, s : s + L]
        cache = ("shift", pf, wstack, x.shape, w.shape)
    y = _unspan(y_span, H, W) + b[:, None, None]
    return y, cache


def conv3x3_backward(g: np.ndarray, cache, need_input: bool = True):
    """Returns (dx or None, dw, db) for upstream gradient ``g`` (Cout, H, W)."""
    kind, buf, wm, xshape, wshape = cache
    Cin, H, W = xshape
    Cout = wshape[0]
    L = _span(H, W)
    offs = _offsets(W)
    gs = _to_span(g)
    db = g.sum(axis=(1, 2))
    dx = None
    if kind == "cols":
        dw = (gs @ buf.T).reshape(Cout, 3, 3, Cin).transpose(0, 3, 1, 2)
        if need_input:
            dcols = wm.T @ gs
            dpf = np.zeros((Cin, (H + 2) * (W + 2)))
            for k, s in enumerate(offs):
                dpf[:, s : s + L] += dcols[k * Cin : (k + 1) * Cin]
            dx = dpf.reshape(Cin, H + 2, W + 2)[:, 1:-1, 1:-1]
    else:
        dz = np.zeros((9 * Cout, buf.shape[1]))
        for k, s in enumerate(offs):
            dz[k * Cout : (k + 1) * Cout, s : s + L] = gs
        dw = (dz @ buf.T).reshape(3, 3, Cout, Cin).transpose(2, 3, 0, 1)
        if need_input:
            dpf = wm.T @ dz
            dx = dpf.reshape(Cin, H + 2, W + 2)[:, 1:-1, 1:-1]
    return dx, np.ascontiguousarray(dw), db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(g, x):
    return g * (x > 0)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid_backward(g, y):
    return g * y * (1.0 - y)


def tanh_backward(g, y):
    return g * (1.0 - y * y)


def channel_max(x):
    """Max over axis 0 keeping the axis; returns (y, argmax) with ties to the lowest channel."""
    arg = np.argmax(x, axis=0)
    y = np.take_along_axis(x, arg[None], axis=0)
    return y, arg


def channel_max_backward(g, arg, channels):
    out = np.zeros((channels,) + arg.shape)
    np.put_along_axis(out, arg[None], g, axis=0)
    return out


def gate_forward(logit, x):
    """sigmoid(logit) * x with ``logit`` (1, H, W) broadcast over the channels of ``x``."""
    s = sigmoid(logit)
    return s * x, s


def gate_backward(g, s, x):
    """Returns (d logit, d x)."""
    ds = (g * x).sum(axis=0, keepdims=True)
    return ds * s * (1.0 - s), g * s


# --------------------------------------------------------------------------- losses


def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def focal_loss(logits, target, alpha: float = 2.0, beta: float = 4.0):
    """Penalty-reduced focal loss on logits against a Gaussian heatmap.

    Pixels where the target equals 1 are positives; the sum is divided by
    ``max(1, #positives)``.  Returns (loss, d loss / d logits).
    """
    p = sigmoid(logits)
    logp = log_sigmoid(logits)
    log1mp = log_sigmoid(-logits)
    pos = target == 1.0
    npos = max(1.0, float(pos.sum()))
    one_m = 1.0 - p
    neg_w = np.where(pos, 0.0, (1.0 - target) ** beta)
    pos_term = -(one_m**alpha) * logp
    neg_term = -neg_w * p**alpha * log1mp
    loss = (np.where(pos, pos_term, 0.0).sum() + neg_term.sum()) / npos
    g_pos = one_m**alpha * (alpha * p * logp - one_m)
    g_neg = neg_w * p**alpha * (p - alpha * one_m * log1mp)
    grad = (np.where(pos, g_pos, 0.0) + g_neg) / npos
    return float(loss), grad


def bce_with_logits(logits, target):
    """Mean binary cross-entropy over all elements.  Returns (loss, grad)."""
    n = logits.size
    loss = np.logaddexp(0.0, logits) - target * logits
    grad = (sigmoid(logits) - target) / n
    return float(loss.sum() / n), grad


def weighted_l1(pred, target, weight, norm: float):
    """sum_k weight_k * |pred_k - target_k|_1 / norm for (K, d) arrays."""
    if len(pred) == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - target
    w = np.asarray(weight, dtype=np.float64)[:, None]
    loss = float((w * np.abs(diff)).sum() / norm)
    return loss, w * np.sign(diff) / norm


# --------------------------------------------------------------------------- sparse taps


def tap_offsets(W: int) -> np.ndarray:
    """Flat offsets of the 3x3 taps around a pixel in a padded map of pitch ``W + 2``."""
    return np.array([(dy - 1) * (W + 2) + (dx - 1) for dy, dx in TAPS], dtype=np.int64)


def flat_index(i, j, W: int) -> np.ndarray:
    """Flat position of interior pixel (i, j) in a padded map of pitch ``W + 2``."""
    return (np.asarray(i, dtype=np.int64) + 1) * (W + 2) + (np.asarray(j, dtype=np.int64) + 1)


def gather_cols(pf: np.ndarray, q: np.ndarray, offs: np.ndarray) -> np.ndarray:
    """im2col restricted to positions ``q``: (C, P) -> (9 C, K), rows ordered tap-major."""
    C = pf.shape[0]
    idx = q[None, :] + offs[:, None]
    return pf[:, idx].transpose(1, 0, 2).reshape(9 * C, len(q))


def scatter_cols(dcols: np.ndarray, q: np.ndarray, offs: np.ndarray, size: int) -> np.ndarray:
    """Adjoint of :func:`gather_cols`; returns a (C, size) flat gradient."""
    C = dcols.shape[0] // 9
    idx = q[None, :] + offs[:, None]  # (9, K)
    flat = (np.arange(C)[:, None, None] * size + idx[None]).ravel()
    vals = dcols.reshape(9, C, len(q)).transpose(1, 0, 2).ravel()
    return np.bincount(flat, weights=vals, minlength=C * size).reshape(C, size)


def neighbor_table(qS: np.ndarray, qN: np.ndarray, offs: np.ndarray, size: int) -> np.ndarray:
    """(9, K) positions of each query's taps inside the list ``qN``; missing taps map to ``len(qN)``."""
    lookup = np.full(size, len(qN), dtype=np.int64)
    lookup[qN] = np.arange(len(qN))
    return lookup[qS[None, :] + offs[:, None]]


def kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(Cout, Cin, 3, 3) kernel -> (Cout, 9 Cin) matrix matching :func:`gather_cols` rows."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def kernel_from_matrix(m: np.ndarray, cin: int) -> np.ndarray:
    return np.ascontiguousarray(m.reshape(m.shape[0], 3, 3, cin).transpose(0, 3, 1, 2))
