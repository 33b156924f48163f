"""Numba-jitted grid pooling kernels. Must stay bitwise-equal to pool_numpy."""

import numpy as np
from numba import njit


@njit(cache=True)
def maxpool_grid_forward(x, kh, kw):
    h, w, d = x.shape
    oh = (h + kh - 1) // kh
    ow = (w + kw - 1) // kw
    out = np.empty((oh, ow, d), dtype=x.dtype)
    arg_r = np.empty((oh, ow, d), dtype=np.int64)
    arg_c = np.empty((oh, ow, d), dtype=np.int64)
    for i in range(oh):
        r0 = i * kh
        r1 = min(r0 + kh, h)
        for j in range(ow):
            c0 = j * kw
            c1 = min(c0 + kw, w)
            for ch in range(d):
                best = x[r0, c0, ch]
                br, bc = r0, c0
                for r in range(r0, r1):
                    for c in range(c0, c1):
                        v = x[r, c, ch]
                        if v > best:  # strict: first occurrence wins ties
                            best = v
                            br, bc = r, c
                out[i, j, ch] = best
                arg_r[i, j, ch] = br
                arg_c[i, j, ch] = bc
    return out, arg_r, arg_c


@njit(cache=True)
def maxpool_grid_backward(grad_out, arg_r, arg_c, h, w):
    oh, ow, d = grad_out.shape
    grad_in = np.zeros((h, w, d), dtype=grad_out.dtype)
    for i in range(oh):
        for j in range(ow):
            for ch in range(d):
                grad_in[arg_r[i, j, ch], arg_c[i, j, ch], ch] += grad_out[i, j, ch]
    return grad_in
