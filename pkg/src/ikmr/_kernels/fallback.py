"""Pure numpy skeletal-convolution kernels.

Same contract as the compiled module: ``forward`` and ``backward`` over
``x (B, T, J, Ci)`` and transposed edge weights ``wt (E, K*Ci, Co)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, K, stride, pad):
    B, T, J, Ci = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0), (0, 0)))
    win = sliding_window_view(xp, K, axis=1)[:, ::stride]  # (B, T', J, Ci, K)
    Tout = win.shape[1]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 3)).reshape(B, Tout, J, K * Ci)


def _dst_of(nbr_ptr):
    return np.repeat(np.arange(len(nbr_ptr) - 1), np.diff(nbr_ptr))


def forward(x, wt, nbr_ptr, nbr_idx, inv_deg, K, stride, pad):
    B, T, J, Ci = x.shape
    Co = wt.shape[2]
    Tout = (T + 2 * pad - K) // stride + 1
    if B == 0 or Tout <= 0:
        return np.zeros((B, max(Tout, 0), J, Co))
    cols = _im2col(x, K, stride, pad)
    out = np.empty((B, Tout, J, Co))
    # one sample at a time so results do not depend on the batch size
    for b in range(B):
        a = cols[b][:, nbr_idx].transpose(1, 0, 2)  # (E, T', K*Ci)
        contrib = np.matmul(a, wt)
        summed = np.add.reduceat(contrib, nbr_ptr[:-1], axis=0) * inv_deg[:, None, None]
        out[b] = summed.transpose(1, 0, 2)
    return out


def backward(gout, x, wt, nbr_ptr, nbr_idx, inv_deg, K, stride, pad, want_x, want_w):
    B, T, J, Ci = x.shape
    E, KC, Co = wt.shape
    Tout = gout.shape[1]
    dst = _dst_of(nbr_ptr)
    # per-edge upstream gradient, already scaled by 1/|N_i|
    g = gout.transpose(2, 0, 1, 3).reshape(J, B * Tout, Co)[dst] * inv_deg[dst][:, None, None]
    gx = gwt = None
    if want_w:
        cols = _im2col(x, K, stride, pad)
        a = cols[:, :, nbr_idx].transpose(2, 0, 1, 3).reshape(E, B * Tout, KC)
        gwt = np.matmul(a.transpose(0, 2, 1), g)
    if want_x:
        gcols_e = np.matmul(g, wt.transpose(0, 2, 1))  # (E, B*T', K*Ci)
        gcols = np.zeros((J, B * Tout, KC))
        np.add.at(gcols, nbr_idx, gcols_e)
        gcols = gcols.reshape(J, B, Tout, K, Ci).transpose(1, 2, 0, 3, 4)  # (B, T', J, K, Ci)
        gxp = np.zeros((B, T + 2 * pad, J, Ci))
        span = stride * (Tout - 1) + 1
        for k in range(K):
            gxp[:, k : k + span : stride] += gcols[:, :, :, k, :]
        gx = gxp[:, pad : pad + T]
        gx = np.ascontiguousarray(gx)
    return gx, gwt
