"""Pure-numpy dilated-convolution kernels (fallback when the extension is absent).

Each kernel loops over kernel taps and vectorizes over everything else, so
every output element of the forward pass and the input gradient is
accumulated in the same (channel, row-tap, column-tap) order as the
compiled kernels.
"""
import numpy as np


def _window(xp, i, j, stride, dilation, ho, wo):
    r0 = i * dilation
    c0 = j * dilation
    return xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]


def conv2d_forward(xp, w, stride, dilation, ho, wo):
    B, C = xp.shape[:2]
    O, _, KH, KW = w.shape
    out = np.zeros((B, O, ho, wo))
    for c in range(C):
        for i in range(KH):
            for j in range(KW):
                win = _window(xp, i, j, stride, dilation, ho, wo)[:, c]
                out += w[:, c, i, j][None, :, None, None] * win[:, None]
    return out


def conv2d_backward_input(g, w, stride, dilation, hp, wp):
    B, O, ho, wo = g.shape
    _, C, KH, KW = w.shape
    gx = np.zeros((B, C, hp, wp))
    for o in range(O):
        go = g[:, o][:, None]
        for i in range(KH):
            for j in range(KW):
                r0 = i * dilation
                c0 = j * dilation
                gx[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += (
                    w[o, :, i, j][None, :, None, None] * go
                )
    return gx


def conv2d_backward_weight(g, xp, stride, dilation, kh, kw):
    B, O, ho, wo = g.shape
    C = xp.shape[1]
    gw = np.zeros((O, C, kh, kw))
    gflat = g.transpose(1, 0, 2, 3).reshape(O, -1)
    for i in range(kh):
        for j in range(kw):
            win = _window(xp, i, j, stride, dilation, ho, wo)
            gw[:, :, i, j] = gflat @ win.transpose(1, 0, 2, 3).reshape(C, -1).T
    return gw
