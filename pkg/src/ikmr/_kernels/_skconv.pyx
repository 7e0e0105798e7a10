# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled skeletal-convolution kernels.

Every per-sample product goes through one ``dgemm`` call whose shape does not
depend on the batch size, so a clip's output is bit-identical whether it is
evaluated alone or inside a batch.

Layouts (row-major, float64, C-contiguous):
    x     (B, T, J, Ci)
    wt    (E, K*Ci, Co)   edge weights, transposed from (E, Co, Ci, K)
    out   (B, T', J, Co)
Edges are grouped by destination joint: edges nbr_ptr[i]..nbr_ptr[i+1]-1 feed
joint i and read from source joint nbr_idx[e].
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _im2col(const double[:, :, :, ::1] x, Py_ssize_t b, Py_ssize_t stride, Py_ssize_t pad,
                  Py_ssize_t K, Py_ssize_t Tout, double[:, :, ::1] cols) noexcept nogil:
    # cols[j, t', k*Ci + c] = x[b, t'*stride + k - pad, j, c] (zero outside the clip)
    cdef Py_ssize_t T = x.shape[1], J = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t j, t, k, c, src
    for j in range(J):
        for t in range(Tout):
            for k in range(K):
                src = t * stride + k - pad
                if src < 0 or src >= T:
                    for c in range(Ci):
                        cols[j, t, k * Ci + c] = 0.0
                else:
                    for c in range(Ci):
                        cols[j, t, k * Ci + c] = x[b, src, j, c]


def forward(const double[:, :, :, ::1] x, const double[:, :, ::1] wt,
            const long[::1] nbr_ptr, const long[::1] nbr_idx, const double[::1] inv_deg,
            Py_ssize_t K, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], J = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t Co = wt.shape[2]
    cdef Py_ssize_t Tout = (T + 2 * pad - K) // stride + 1
    cdef int kc = <int>(K * Ci)
    out_arr = np.zeros((B, Tout, J, Co), dtype=np.float64)
    cols_arr = np.empty((J, Tout, K * Ci), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t b, i, e
    cdef int m = <int>Co, n = <int>Tout, ldc = <int>(J * Co)
    cdef double alpha, one = 1.0
    cdef char tn = b'N'
    if Tout <= 0 or B == 0:
        return out_arr
    with nogil:
        for b in range(B):
            _im2col(x, b, stride, pad, K, Tout, cols)
            for i in range(J):
                alpha = inv_deg[i]
                for e in range(nbr_ptr[i], nbr_ptr[i + 1]):
                    # out[b, :, i, :] += alpha * cols[src] @ wt[e]
                    dgemm(&tn, &tn, &m, &n, &kc, &alpha, <double*>&wt[e, 0, 0], &m,
                          &cols[nbr_idx[e], 0, 0], &kc, &one, &out[b, 0, i, 0], &ldc)
    return out_arr


def backward(const double[:, :, :, ::1] gout, const double[:, :, :, ::1] x, const double[:, :, ::1] wt,
             const long[::1] nbr_ptr, const long[::1] nbr_idx, const double[::1] inv_deg,
             Py_ssize_t K, Py_ssize_t stride, Py_ssize_t pad, bint want_x, bint want_w):
    """Return ``(gx, gwt)``; either may be None when not requested."""
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], J = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t Co = wt.shape[2], E = wt.shape[0]
    cdef Py_ssize_t Tout = gout.shape[1]
    cdef int kc = <int>(K * Ci)
    cdef int co = <int>Co, tout = <int>Tout, ldg = <int>(J * Co)
    cdef double alpha, one = 1.0
    cdef char tn = b'N', tt = b'T'
    cdef Py_ssize_t b, i, e, j, t, k, c, dst
    gx_arr = np.zeros((B, T, J, Ci), dtype=np.float64) if want_x else None
    gwt_arr = np.zeros((E, K * Ci, Co), dtype=np.float64) if want_w else None
    cols_arr = np.empty((J, Tout, K * Ci), dtype=np.float64)
    gcols_arr = np.empty((J, Tout, K * Ci), dtype=np.float64)
    cdef double[:, :, ::1] cols = cols_arr
    cdef double[:, :, ::1] gcols = gcols_arr
    cdef double[:, :, :, ::1] gx
    cdef double[:, :, ::1] gwt
    if want_x:
        gx = gx_arr
    if want_w:
        gwt = gwt_arr
    if Tout <= 0 or B == 0:
        return gx_arr, gwt_arr
    with nogil:
        for b in range(B):
            if want_w:
                _im2col(x, b, stride, pad, K, Tout, cols)
            if want_x:
                memset(&gcols[0, 0, 0], 0, J * Tout * K * Ci * sizeof(double))
            for i in range(J):
                alpha = inv_deg[i]
                for e in range(nbr_ptr[i], nbr_ptr[i + 1]):
                    if want_x:
                        # gcols[src] += alpha * gout[b, :, i, :] @ wt[e].T
                        dgemm(&tt, &tn, &kc, &tout, &co, &alpha, <double*>&wt[e, 0, 0], &co,
                              <double*>&gout[b, 0, i, 0], &ldg, &one, &gcols[nbr_idx[e], 0, 0], &kc)
                    if want_w:
                        # gwt[e] += alpha * cols[src].T @ gout[b, :, i, :]
                        dgemm(&tn, &tt, &co, &kc, &tout, &alpha, <double*>&gout[b, 0, i, 0], &ldg,
                              &cols[nbr_idx[e], 0, 0], &kc, &one, &gwt[e, 0, 0], &co)
            if want_x:
                for j in range(J):
                    for t in range(Tout):
                        for k in range(K):
                            dst = t * stride + k - pad
                            if dst < 0 or dst >= T:
                                continue
                            for c in range(Ci):
                                gx[b, dst, j, c] += gcols[j, t, k * Ci + c]
    return gx_arr, gwt_arr
