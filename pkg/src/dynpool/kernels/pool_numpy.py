"""Pure-numpy grid pooling kernels. Reference path; bitwise-equal to the numba path."""

import numpy as np


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def maxpool_grid_forward(x: np.ndarray, kh: int, kw: int):
    """Ceil-mode per-channel max pool over an (h, w, d) grid.

    Returns (out, arg_r, arg_c) where arg_r/arg_c hold the row/col of the
    winning input cell per output cell and channel. Ties go to the first
    cell in row-major window order (np.argmax convention).
    """
    h, w, d = x.shape
    oh, ow = ceil_div(h, kh), ceil_div(w, kw)
    out = np.empty((oh, ow, d), dtype=x.dtype)
    arg_r = np.empty((oh, ow, d), dtype=np.int64)
    arg_c = np.empty((oh, ow, d), dtype=np.int64)
    for i in range(oh):
        r0 = i * kh
        r1 = min(r0 + kh, h)
        for j in range(ow):
            c0 = j * kw
            c1 = min(c0 + kw, w)
            win = x[r0:r1, c0:c1, :].reshape(-1, d)
            flat = np.argmax(win, axis=0)
            out[i, j, :] = win[flat, np.arange(d)]
            arg_r[i, j, :] = r0 + flat // (c1 - c0)
            arg_c[i, j, :] = c0 + flat % (c1 - c0)
    return out, arg_r, arg_c


def maxpool_grid_backward(grad_out: np.ndarray, arg_r: np.ndarray, arg_c: np.ndarray, h: int, w: int) -> np.ndarray:
    """Scatter output gradients back to the argmax positions."""
    oh, ow, d = grad_out.shape
    grad_in = np.zeros((h, w, d), dtype=grad_out.dtype)
    ch = np.broadcast_to(np.arange(d), (oh, ow, d))
    np.add.at(grad_in, (arg_r.ravel(), arg_c.ravel(), ch.ravel()), grad_out.ravel())
    return grad_in
