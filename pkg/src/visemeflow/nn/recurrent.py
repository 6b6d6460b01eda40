"""LSTM cell and unrolled sequence pass with hand-written backward-through-time.

Gate layout along the 4H axis is (input, forget, cell candidate, output).
Weights: ``wx`` (d, 4H), ``wh`` (H, 4H), bias ``b`` (4H,).
"""

import numpy as np

from ..errors import ShapeMismatchError
from .layers import sigmoid, tanh


def lstm_step(x, h, c, wx, wh, b):
    """One cell update: returns (h_new, c_new, cache)."""
    if x.shape[1] != wx.shape[0] or h.shape[1] != wh.shape[0]:
        raise ShapeMismatchError(
            f"lstm shapes disagree: x {x.shape}, h {h.shape}, wx {wx.shape}, wh {wh.shape}"
        )
    hid = wh.shape[0]
    pre = x @ wx + h @ wh + b
    i = sigmoid(pre[:, :hid])
    f = sigmoid(pre[:, hid : 2 * hid])
    g = tanh(pre[:, 2 * hid : 3 * hid])
    o = sigmoid(pre[:, 3 * hid :])
    c_new = f * c + i * g
    tc = tanh(c_new)
    h_new = o * tc
    cache = (x, h, c, i, f, g, o, tc)
    return h_new, c_new, cache


def lstm_step_backward(dh, dc, cache, wx, wh):
    """Gradients of one step; dh/dc are gradients w.r.t. h_new/c_new."""
    x, h, c, i, f, g, o, tc = cache
    hid = wh.shape[0]
    do = dh * tc
    dc_total = dc + dh * o * (1.0 - tc * tc)
    di = dc_total * g
    df = dc_total * c
    dg = dc_total * i
    dc_prev = dc_total * f
    dpre = np.concatenate(
        [
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ],
        axis=1,
    )
    dx = dpre @ wx.T
    dh_prev = dpre @ wh.T
    dwx = x.T @ dpre
    dwh = h.T @ dpre
    db = dpre.sum(axis=0)
    return dx, dh_prev, dc_prev, dwx, dwh, db


def lstm_sequence(xs, wx, wh, b):
    """Run the cell over (N,T,d) from zero state; returns (h_T, cache)."""
    if xs.ndim != 3:
        raise ShapeMismatchError(f"expected (N,T,d) feature sequence, got {xs.shape}")
    n, t, _ = xs.shape
    if t < 1:
        raise ShapeMismatchError("empty feature sequence")
    hid = wh.shape[0]
    h = np.zeros((n, hid), dtype=xs.dtype)
    c = np.zeros((n, hid), dtype=xs.dtype)
    caches = []
    for step in range(t):
        h, c, cache = lstm_step(xs[:, step], h, c, wx, wh, b)
        caches.append(cache)
    return h, (caches, xs.shape)


def lstm_sequence_backward(dh_last, cache, wx, wh):
    """Backprop through the unrolled sequence given grad w.r.t. final hidden state."""
    caches, xs_shape = cache
    n, t, d = xs_shape
    dxs = np.empty(xs_shape, dtype=dh_last.dtype)
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(wx.shape[1], dtype=wx.dtype)
    dh = dh_last
    dc = np.zeros((n, wh.shape[0]), dtype=dh_last.dtype)
    for step in range(t - 1, -1, -1):
        dx, dh, dc, swx, swh, sb = lstm_step_backward(dh, dc, caches[step], wx, wh)
        dxs[:, step] = dx
        dwx += swx
        dwh += swh
        db += sb
    return dxs, dwx, dwh, db
