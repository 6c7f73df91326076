"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just the operations the denoiser network needs: affine maps, SiLU, FiLM
broadcasting, constant-sparse transfers, the patch convolution, and a mean
squared error head. Graphs are built per call and discarded; gradients are
exact for the composed computation.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import _accel

_counter = itertools.count()


class Var:
    __slots__ = ("value", "parents", "grad", "_idx")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Var, vjp callable)
        self.grad = None
        self._idx = next(_counter)


def leaf(value) -> Var:
    return Var(value)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] > 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Var, b) -> Var:
    if not isinstance(b, Var):
        return Var(a.value + b, ((a, lambda g: g),))
    return Var(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def sub(a: Var, b: Var) -> Var:
    return Var(
        a.value - b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
    )


def mul(a: Var, b) -> Var:
    if not isinstance(b, Var):
        return Var(a.value * b, ((a, lambda g: g * b),))
    return Var(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ),
    )


def matmul(a: Var, b: Var) -> Var:
    return Var(
        a.value @ b.value,
        (
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ),
    )


def silu(a: Var) -> Var:
    sig = 1.0 / (1.0 + np.exp(-a.value))
    deriv = sig * (1.0 + a.value * (1.0 - sig))
    return Var(a.value * sig, ((a, lambda g: g * deriv),))


def concat_cols(parts: list[Var]) -> Var:
    widths = [p.value.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)
    parents = tuple(
        (p, (lambda lo, hi: lambda g: g[:, lo:hi])(bounds[k], bounds[k + 1]))
        for k, p in enumerate(parts)
    )
    return Var(np.concatenate([p.value for p in parts], axis=1), parents)


def reshape(a: Var, shape: tuple) -> Var:
    orig = a.value.shape
    return Var(a.value.reshape(shape), ((a, lambda g: g.reshape(orig)),))


def sparse_apply(mat, a: Var) -> Var:
    """Multiply by a constant sparse matrix (pooling / broadcast transfers)."""
    return Var(mat @ a.value, ((a, lambda g: mat.T @ g),))


def patch_gather(stencil, a: Var) -> Var:
    """Gather node values into patch slots; adjoint is the scatter kernel."""
    return Var(
        _accel.gather(stencil, np.ascontiguousarray(a.value)),
        ((a, lambda g: _accel.scatter(stencil, np.ascontiguousarray(g))),),
    )


def mix_dense(z: Var, w: Var) -> Var:
    """Channel mixing with one patch image per channel pair:
    out[i, d] = sum_{p, c} z[i, p, c] * w[d, c, p]."""
    return Var(
        np.tensordot(z.value, w.value, axes=([1, 2], [2, 1])),
        (
            (z, lambda g: np.einsum("id,dcp->ipc", g, w.value)),
            (w, lambda g: np.einsum("id,ipc->dcp", g, z.value)),
        ),
    )


def mix_vector(z: Var, w: Var) -> Var:
    """Per-edge vector gating: out[i, h] = sum_p z[i, p, h] * w[h, p]."""
    return Var(
        np.einsum("iph,hp->ih", z.value, w.value),
        (
            (z, lambda g: np.einsum("ih,hp->iph", g, w.value)),
            (w, lambda g: np.einsum("ih,iph->hp", g, z.value)),
        ),
    )


def mse(pred: Var, target: np.ndarray) -> Var:
    resid = pred.value - target
    scale = 2.0 / resid.size
    return Var(
        np.mean(resid**2),
        ((pred, lambda g: g * scale * resid),),
    )


def inner(pred: Var, weights: np.ndarray) -> Var:
    """Scalar <weights, pred>; seeds vjp computations."""
    return Var(np.sum(pred.value * weights), ((pred, lambda g: g * weights),))


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar root into every reachable Var."""
    order: list[Var] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))
    order.sort(key=lambda v: v._idx)

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g
