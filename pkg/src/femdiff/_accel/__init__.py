"""Kernel selection for the patch-basis convolution.

The compiled Cython kernel is preferred; the NumPy/SciPy fallback is
selected when the extension is missing or FEMDIFF_NO_EXT is set. Both
implement the same gather/scatter contract on a stencil object exposing
``row``, ``src``, ``pidx``, ``wval``, ``n_nodes``, ``patch_dim`` (and, for
the fallback, a cached ``bmat``).
"""

import os

from . import _femconv_np

if os.environ.get("FEMDIFF_NO_EXT", "") not in ("", "0"):
    _cy = None
else:
    try:
        from . import _femconv_cy as _cy
    except ImportError:
        _cy = None

BACKEND = "cython" if _cy is not None else "numpy"


def gather(stencil, x):
    """Z[i, p, :] accumulates w * x[j, :] over the stencil entries."""
    if _cy is not None:
        return _cy.gather(
            stencil.row, stencil.src, stencil.pidx, stencil.wval,
            x, stencil.n_nodes, stencil.patch_dim,
        )
    return _femconv_np.gather(
        stencil.row, stencil.src, stencil.pidx, stencil.wval,
        x, stencil.n_nodes, stencil.patch_dim, bmat=stencil.bmat,
    )


def scatter(stencil, y):
    """Adjoint of :func:`gather`; maps (N, P^2, C) back to source nodes."""
    if _cy is not None:
        return _cy.scatter(
            stencil.row, stencil.src, stencil.pidx, stencil.wval,
            y, stencil.n_src,
        )
    return _femconv_np.scatter(
        stencil.row, stencil.src, stencil.pidx, stencil.wval,
        y, stencil.n_src, bmat=stencil.bmat,
    )


def gather_numpy(stencil, x):
    """Force the fallback path (used by the kernel-agreement tests)."""
    return _femconv_np.gather(
        stencil.row, stencil.src, stencil.pidx, stencil.wval,
        x, stencil.n_nodes, stencil.patch_dim, bmat=stencil.bmat,
    )


def scatter_numpy(stencil, y):
    return _femconv_np.scatter(
        stencil.row, stencil.src, stencil.pidx, stencil.wval,
        y, stencil.n_src, bmat=stencil.bmat,
    )


def gather_cython(stencil, x):
    """Force the compiled path; raises if the extension is unavailable."""
    if _cy is None:
        raise RuntimeError("compiled kernels not available")
    return _cy.gather(
        stencil.row, stencil.src, stencil.pidx, stencil.wval,
        x, stencil.n_nodes, stencil.patch_dim,
    )


def scatter_cython(stencil, y):
    if _cy is None:
        raise RuntimeError("compiled kernels not available")
    return _cy.scatter(
        stencil.row, stencil.src, stencil.pidx, stencil.wval,
        y, stencil.n_src,
    )
