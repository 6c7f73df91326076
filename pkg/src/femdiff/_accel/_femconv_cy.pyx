# Fused gather/scatter kernels for the patch-basis convolution.
#
# Entries are the expanded (node, neighbor, basis) contributions of a
# stencil: row[e] receives wval[e] * X[src[e]] at patch slot pidx[e].

import numpy as np

cimport numpy as cnp

cnp.import_array()


def gather(
    const cnp.int64_t[::1] row,
    const cnp.int64_t[::1] src,
    const cnp.int64_t[::1] pidx,
    const cnp.float64_t[::1] wval,
    const cnp.float64_t[:, ::1] x,
    Py_ssize_t n_nodes,
    Py_ssize_t patch_dim,
):
    """Z[i, p, c] = sum over entries (i, j, p): w * x[j, c]."""
    cdef Py_ssize_t nnz = row.shape[0]
    cdef Py_ssize_t n_ch = x.shape[1]
    z_arr = np.zeros((n_nodes, patch_dim, n_ch), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] z = z_arr
    cdef Py_ssize_t e, c, r, s, p
    cdef cnp.float64_t w
    for e in range(nnz):
        r = row[e]
        s = src[e]
        p = pidx[e]
        w = wval[e]
        for c in range(n_ch):
            z[r, p, c] += w * x[s, c]
    return z_arr


def scatter(
    const cnp.int64_t[::1] row,
    const cnp.int64_t[::1] src,
    const cnp.int64_t[::1] pidx,
    const cnp.float64_t[::1] wval,
    const cnp.float64_t[:, :, ::1] y,
    Py_ssize_t n_nodes,
):
    """Adjoint of gather: X[j, c] = sum over entries (i, j, p): w * y[i, p, c]."""
    cdef Py_ssize_t nnz = row.shape[0]
    cdef Py_ssize_t n_ch = y.shape[2]
    x_arr = np.zeros((n_nodes, n_ch), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] x = x_arr
    cdef Py_ssize_t e, c, r, s, p
    cdef cnp.float64_t w
    for e in range(nnz):
        r = row[e]
        s = src[e]
        p = pidx[e]
        w = wval[e]
        for c in range(n_ch):
            x[s, c] += w * y[r, p, c]
    return x_arr
