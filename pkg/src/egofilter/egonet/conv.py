"""2D convolution on channels-last (rows, cols, channels) maps, forward and backward.

Kernels are laid out (k_rows, k_cols, c_in, c_out). The output is computed in
row tiles: for each tile and kernel row, the k_cols shifted input views are
gathered into a (pixels, k_cols * c_in) block and multiplied by the matching
kernel slice. Tiles of ~1.5k pixels keep the gather buffer in cache.
"""

from __future__ import annotations

import numpy as np

TILE_PIXELS = 1536


def _pad(x: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    ph, pw = pad
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((ph, ph), (pw, pw), (0, 0)))


def out_shape(x_shape, w_shape, dilation=(1, 1), pad=(0, 0)):
    h, w = x_shape[:2]
    kh, kw = w_shape[:2]
    return h + 2 * pad[0] - dilation[0] * (kh - 1), w + 2 * pad[1] - dilation[1] * (kw - 1)


def _row_tiles(ho: int, wo: int):
    step = max(1, TILE_PIXELS // max(wo, 1))
    for r0 in range(0, ho, step):
        yield r0, min(ho, r0 + step)


def conv2d(x, w, b, dilation=(1, 1), pad=(0, 0)):
    """Cross-correlate ``x`` (H, W, C_in) with ``w``; returns (H', W', C_out)."""
    kh, kw, c_in, c_out = w.shape
    if x.shape[2] != c_in:
        raise ValueError(f"input has {x.shape[2]} channels, kernel expects {c_in}")
    dh, dw = dilation
    ho, wo = out_shape(x.shape, w.shape, dilation, pad)
    dtype = np.result_type(x, w)
    xp = _pad(x, pad)
    out = np.empty((ho, wo, c_out), dtype=dtype)
    wrows = w.reshape(kh, kw * c_in, c_out)
    for r0, r1 in _row_tiles(ho, wo):
        n = r1 - r0
        acc = np.empty((n * wo, c_out), dtype=dtype)
        acc[...] = b
        cols = np.empty((n, wo, kw, c_in), dtype=dtype)
        for u in range(kh):
            for v in range(kw):
                cols[:, :, v] = xp[r0 + u * dh : r1 + u * dh, v * dw : v * dw + wo]
            acc += cols.reshape(n * wo, -1) @ wrows[u]
        out[r0:r1] = acc.reshape(n, wo, c_out)
    return out


def conv2d_backward(x, w, dout, dilation=(1, 1), pad=(0, 0), need_dx=True):
    """Gradients of :func:`conv2d` with respect to (x, w, b)."""
    kh, kw, c_in, c_out = w.shape
    dh, dw = dilation
    ho, wo = dout.shape[:2]
    dtype = np.result_type(x, w)
    xp = _pad(x, pad)
    wrows = w.reshape(kh, kw * c_in, c_out)
    gw = np.zeros((kh, kw * c_in, c_out), dtype=dtype)
    gb = dout.reshape(-1, c_out).sum(axis=0)
    gxp = np.zeros(xp.shape, dtype=dtype) if need_dx else None
    for r0, r1 in _row_tiles(ho, wo):
        n = r1 - r0
        d2 = dout[r0:r1].reshape(n * wo, c_out)
        cols = np.empty((n, wo, kw, c_in), dtype=dtype)
        for u in range(kh):
            for v in range(kw):
                cols[:, :, v] = xp[r0 + u * dh : r1 + u * dh, v * dw : v * dw + wo]
            gw[u] += cols.reshape(n * wo, -1).T @ d2
            if need_dx:
                dcols = (d2 @ wrows[u].T).reshape(n, wo, kw, c_in)
                for v in range(kw):
                    gxp[r0 + u * dh : r1 + u * dh, v * dw : v * dw + wo] += dcols[:, :, v]
    gx = None
    if need_dx:
        ph, pw = pad
        gx = gxp[ph : ph + x.shape[0], pw : pw + x.shape[1]]
    return gx, gw.reshape(w.shape), gb


def conv_transpose2d(x, w, b, pad=(0, 0)):
    """Stride-1 transposed convolution.

    With stride 1 this equals cross-correlation with the spatially flipped
    kernel and complementary padding ``k - 1 - pad``.
    """
    kh, kw = w.shape[:2]
    return conv2d(x, w[::-1, ::-1], b, pad=(kh - 1 - pad[0], kw - 1 - pad[1]))


def conv_transpose2d_backward(x, w, dout, pad=(0, 0), need_dx=True):
    kh, kw = w.shape[:2]
    gx, gw, gb = conv2d_backward(
        x, w[::-1, ::-1], dout, pad=(kh - 1 - pad[0], kw - 1 - pad[1]), need_dx=need_dx
    )
    return gx, gw[::-1, ::-1].copy(), gb
