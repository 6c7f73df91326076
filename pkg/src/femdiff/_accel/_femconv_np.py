"""Pure-NumPy gather/scatter via a cached sparse basis matrix.

Matches the compiled kernels up to floating-point summation order.
"""

import numpy as np


def gather(row, src, pidx, wval, x, n_nodes, patch_dim, bmat=None):
    if bmat is None:
        bmat = build_bmat(row, src, pidx, wval, n_nodes, patch_dim, x.shape[0])
    return (bmat @ x).reshape(n_nodes, patch_dim, x.shape[1])


def scatter(row, src, pidx, wval, y, n_nodes, bmat=None):
    n_out, patch_dim, n_ch = y.shape
    if bmat is None:
        bmat = build_bmat(row, src, pidx, wval, n_out, patch_dim, n_nodes)
    return np.ascontiguousarray(bmat.T @ y.reshape(n_out * patch_dim, n_ch))


def build_bmat(row, src, pidx, wval, n_nodes, patch_dim, n_src):
    from scipy.sparse import coo_matrix

    flat_rows = row * patch_dim + pidx
    mat = coo_matrix(
        (wval, (flat_rows, src)), shape=(n_nodes * patch_dim, n_src)
    ).tocsr()
    mat.sum_duplicates()
    return mat
