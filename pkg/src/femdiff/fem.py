"""Bilinear reference-patch basis, the FEM convolution operator with exact
reverse-mode gradients, and P1 Poisson assembly/solve/adjoint.

The convolution places a P-by-P lattice of bilinear basis functions on the
fixed physical patch [-r, r]^2 around every node, projects each neighbor
into patch coordinates, and mixes channels with one P*P filter image per
channel pair. On a uniform grid with r = (P-1)h/2 it reduces to a standard
discrete convolution divided by the neighbor count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from . import _accel
from .errors import (
    DegenerateTriangle,
    GraphMismatch,
    RadiusMismatch,
    SingularSystem,
)
from .mesh import TriMesh, dual_graph, signed_areas, vertex_graph

_OUTSIDE_SLACK = 1e-12
_DENSE_SOLVE_LIMIT = 500


@dataclass(frozen=True)
class Field:
    """Per-node multi-channel function values bound to a graph."""

    values: np.ndarray  # (N, C) float64
    graph_ref: str | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError(f"field values must be (N, C), got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("field contains non-finite values")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FemConvFilter:
    """Trainable filter: one P-by-P weight image per (out, in) channel pair,
    tied to the physical patch radius it was trained at."""

    weights: np.ndarray  # (C_out, C_in, P, P) float64
    radius: float

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"filter weights must be (C', C, P, P), got {w.shape}")
        if w.shape[2] < 2:
            raise ValueError("patch resolution P must be >= 2")
        if not np.isfinite(w).all():
            raise ValueError("filter weights contain non-finite values")
        if not self.radius > 0:
            raise ValueError("filter radius must be positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def patch_resolution(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


def basis_rows(xi: np.ndarray, patch_resolution: int):
    """Expand patch coordinates into bilinear basis contributions.

    Returns (which, pidx, weight): for input row k, entries with
    which == k carry the (at most four) lattice indices and weights of the
    bilinear stencil around xi[k]. Points outside [-1, 1]^2 (beyond a 1e-12
    slack) produce no entries; zero weights are dropped, so an exact lattice
    hit yields the single entry weight 1.
    """
    p = patch_resolution
    xi = np.asarray(xi, dtype=np.float64).reshape(-1, 2)
    inside = np.max(np.abs(xi), axis=1) <= 1.0 + _OUTSIDE_SLACK
    u = (np.clip(xi, -1.0, 1.0) + 1.0) * ((p - 1) / 2.0)
    cell = np.minimum(np.floor(u), p - 2).astype(np.int64)
    t = u - cell

    which_all, pidx_all, w_all = [], [], []
    for dy in (0, 1):
        wy = t[:, 1] if dy else 1.0 - t[:, 1]
        for dx in (0, 1):
            wx = t[:, 0] if dx else 1.0 - t[:, 0]
            w = wx * wy
            keep = inside & (w != 0.0)
            which_all.append(np.flatnonzero(keep))
            pidx_all.append(
                (cell[keep, 1] + dy) * p + (cell[keep, 0] + dx)
            )
            w_all.append(w[keep])
    which = np.concatenate(which_all)
    order = np.argsort(which, kind="stable")
    return (
        which[order],
        np.concatenate(pidx_all)[order],
        np.concatenate(w_all)[order],
    )


def reference_basis_eval(xi, patch_resolution: int):
    """Bilinear basis indices and weights at one patch coordinate.

    Weights are non-negative and sum to one inside the patch; both arrays
    are empty outside it.
    """
    _, pidx, w = basis_rows(np.asarray(xi, dtype=np.float64).reshape(1, 2), patch_resolution)
    return pidx, w


@dataclass(frozen=True)
class PatchStencil:
    """Expanded (node, neighbor, basis) contribution table for one patch
    resolution, with the empirical-mean normalization baked in."""

    row: np.ndarray
    src: np.ndarray
    pidx: np.ndarray
    wval: np.ndarray
    n_nodes: int
    n_src: int
    patch_dim: int

    @cached_property
    def bmat(self):
        return _accel._femconv_np.build_bmat(
            self.row, self.src, self.pidx, self.wval,
            self.n_nodes, self.patch_dim, self.n_src,
        )


@dataclass(frozen=True)
class NeighborTable:
    """Closed L-infinity ball neighborhoods of radius r, self included,
    with patch-projected coordinates xi = (x_j - x_i)/r."""

    radius: float
    indptr: np.ndarray  # (N+1,)
    indices: np.ndarray  # (nnz,) neighbor node ids
    xi: np.ndarray  # (nnz, 2)
    graph_ref: str | None = None
    _stencils: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1

    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def patch_stencil(self, patch_resolution: int) -> PatchStencil:
        stencil = self._stencils.get(patch_resolution)
        if stencil is None:
            which, pidx, w = basis_rows(self.xi, patch_resolution)
            pair_row = np.repeat(
                np.arange(self.n_nodes, dtype=np.int64), self.counts()
            )
            inv_count = 1.0 / self.counts().astype(np.float64)
            stencil = PatchStencil(
                row=np.ascontiguousarray(pair_row[which]),
                src=np.ascontiguousarray(self.indices[which]),
                pidx=np.ascontiguousarray(pidx),
                wval=np.ascontiguousarray(w * inv_count[pair_row[which]]),
                n_nodes=self.n_nodes,
                n_src=self.n_nodes,
                patch_dim=patch_resolution * patch_resolution,
            )
            self._stencils[patch_resolution] = stencil
        return stencil


def build_neighbor_table(positions, radius: float, graph_ref: str | None = None) -> NeighborTable:
    """Exact closed-ball L-infinity neighbor sets via uniform spatial hashing."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = len(pos)
    cells: dict[tuple[int, int], list[int]] = {}
    keys = np.floor(pos / radius).astype(np.int64)
    for i, (cx, cy) in enumerate(keys):
        cells.setdefault((int(cx), int(cy)), []).append(i)

    indptr = np.zeros(n + 1, dtype=np.int64)
    index_chunks, xi_chunks = [], []
    # 5x5 cell scan absorbs floor() rounding at exact-radius boundaries
    offsets = [(dx, dy) for dx in range(-2, 3) for dy in range(-2, 3)]
    for (cx, cy), members in cells.items():
        cand: list[int] = []
        for dx, dy in offsets:
            cand.extend(cells.get((cx + dx, cy + dy), ()))
        cand_arr = np.sort(np.array(cand, dtype=np.int64))
        cand_pos = pos[cand_arr]
        for i in members:
            delta = cand_pos - pos[i]
            close = np.max(np.abs(delta), axis=1) <= radius
            nbrs = cand_arr[close]
            indptr[i + 1] = len(nbrs)
            index_chunks.append((i, nbrs, delta[close] / radius))
    np.cumsum(indptr, out=indptr)
    indices = np.empty(indptr[-1], dtype=np.int64)
    xi = np.empty((indptr[-1], 2), dtype=np.float64)
    for i, nbrs, x in index_chunks:
        indices[indptr[i] : indptr[i + 1]] = nbrs
        xi[indptr[i] : indptr[i + 1]] = x
    return NeighborTable(float(radius), indptr, indices, xi, graph_ref)


def _check_pair(field_ref, table: NeighborTable, filt: FemConvFilter):
    if (
        field_ref is not None
        and table.graph_ref is not None
        and field_ref != table.graph_ref
    ):
        raise GraphMismatch(
            f"field on graph {field_ref} applied with table on {table.graph_ref}"
        )
    if abs(filt.radius - table.radius) > 1e-12 * max(filt.radius, table.radius):
        raise RadiusMismatch(
            f"filter radius {filt.radius} vs table radius {table.radius}"
        )


def fem_conv_forward(field: Field, filt: FemConvFilter, table: NeighborTable) -> Field:
    """out_i = sum_c sum_p w_p^(c',c) * mean over N(i) of phi_p(xi_ij) * field_j^(c)."""
    _check_pair(field.graph_ref, table, filt)
    if field.n_nodes != table.n_nodes:
        raise GraphMismatch(
            f"field has {field.n_nodes} nodes, table has {table.n_nodes}"
        )
    if field.channels != filt.in_channels:
        raise ValueError(
            f"field has {field.channels} channels, filter expects {filt.in_channels}"
        )
    stencil = table.patch_stencil(filt.patch_resolution)
    z = _accel.gather(stencil, field.values)
    w = filt.weights.reshape(filt.out_channels, filt.in_channels, -1)
    out = np.tensordot(z, w, axes=([1, 2], [2, 1]))
    return Field(out, field.graph_ref)


def fem_conv_vjp(
    field: Field, filt: FemConvFilter, table: NeighborTable, upstream: Field
):
    """Exact gradients of <upstream, fem_conv_forward(field)> with respect to
    the filter weights and the field."""
    _check_pair(field.graph_ref, table, filt)
    u = upstream.values
    if u.shape != (field.n_nodes, filt.out_channels):
        raise ValueError(
            f"upstream shape {u.shape} incompatible with ({field.n_nodes}, {filt.out_channels})"
        )
    p = filt.patch_resolution
    stencil = table.patch_stencil(p)
    w = filt.weights.reshape(filt.out_channels, filt.in_channels, -1)
    z = _accel.gather(stencil, field.values)
    grad_w = np.einsum("id,ipc->dcp", u, z).reshape(filt.weights.shape)
    y = np.einsum("id,dcp->ipc", u, w)
    grad_field = _accel.scatter(stencil, np.ascontiguousarray(y))
    return grad_w, Field(grad_field, field.graph_ref)


@dataclass(frozen=True)
class PoissonSystem:
    """P1 stiffness matrix with Dirichlet rows eliminated, plus the sparse
    map from P0 cell values to the P1 load vector."""

    stiffness: object  # CSR over interior vertices
    load_map: object  # CSR (n_vertices, n_triangles)
    dirichlet: np.ndarray
    interior: np.ndarray
    n_vertices: int
    n_triangles: int
    p0_ref: str
    p1_ref: str

    @cached_property
    def _factor(self):
        n = len(self.interior)
        if n == 0:
            return lambda rhs: rhs
        try:
            if n < _DENSE_SOLVE_LIMIT:
                from scipy.linalg import cho_factor, cho_solve

                cf = cho_factor(self.stiffness.toarray())
                return lambda rhs: cho_solve(cf, rhs)
            lu = splu(self.stiffness.tocsc())
            return lu.solve
        except Exception as exc:
            raise SingularSystem(str(exc)) from exc

    def solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        out = self._factor(rhs)
        if not np.isfinite(out).all():
            raise SingularSystem("solve produced non-finite values")
        return out


def assemble_poisson(mesh: TriMesh) -> PoissonSystem:
    """Exact P1 element stiffness integrals and the P0-to-P1 load map
    Q[v, c] = area(c)/3, with symmetric Dirichlet elimination."""
    areas = signed_areas(mesh)
    if np.any(areas < 1e-14):
        raise DegenerateTriangle(f"minimum triangle area {areas.min():.3e}")
    p = mesh.vertices[mesh.triangles]  # (Nt, 3, 2)
    # gradient of barycentric basis i: (y_j - y_k, x_k - x_j) / (2A)
    b = np.stack(
        [p[:, 1, 1] - p[:, 2, 1], p[:, 2, 1] - p[:, 0, 1], p[:, 0, 1] - p[:, 1, 1]],
        axis=1,
    )
    c = np.stack(
        [p[:, 2, 0] - p[:, 1, 0], p[:, 0, 0] - p[:, 2, 0], p[:, 1, 0] - p[:, 0, 0]],
        axis=1,
    )
    ke = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (
        4.0 * areas[:, None, None]
    )

    nv, nt = mesh.n_vertices, mesh.n_triangles
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    stiff = coo_matrix((ke.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()

    qrows = mesh.triangles.ravel()
    qcols = np.repeat(np.arange(nt, dtype=np.int64), 3)
    qvals = np.repeat(areas / 3.0, 3)
    load = coo_matrix((qvals, (qrows, qcols)), shape=(nv, nt)).tocsr()

    dirichlet = mesh.boundary_vertices
    interior = np.setdiff1d(np.arange(nv, dtype=np.int64), dirichlet)
    stiff_int = stiff[interior][:, interior].tocsr()
    return PoissonSystem(
        stiffness=stiff_int,
        load_map=load,
        dirichlet=dirichlet,
        interior=interior,
        n_vertices=nv,
        n_triangles=nt,
        p0_ref=dual_graph(mesh).ref,
        p1_ref=vertex_graph(mesh).ref,
    )


def poisson_solve(system: PoissonSystem, a: Field) -> Field:
    """Solve -laplace(u) = a with u = 0 on the Dirichlet boundary; the
    source lives on cell centroids, the solution on vertices."""
    if a.graph_ref is not None and a.graph_ref != system.p0_ref:
        raise GraphMismatch("source field is not on the system's centroid graph")
    if a.n_nodes != system.n_triangles:
        raise GraphMismatch(
            f"source has {a.n_nodes} cells, system has {system.n_triangles}"
        )
    rhs = (system.load_map @ a.values)[system.interior]
    u = np.zeros((system.n_vertices, a.channels))
    if len(system.interior):
        u[system.interior] = system.solve_interior(rhs)
    return Field(u, system.p1_ref)


def poisson_vjp(system: PoissonSystem, upstream: Field) -> Field:
    """Adjoint of poisson_solve: Q^T M^-T applied to a vertex field (one
    extra symmetric solve)."""
    if upstream.graph_ref is not None and upstream.graph_ref != system.p1_ref:
        raise GraphMismatch("upstream field is not on the system's vertex graph")
    if upstream.n_nodes != system.n_vertices:
        raise GraphMismatch(
            f"upstream has {upstream.n_nodes} nodes, system has {system.n_vertices}"
        )
    grad = np.zeros((system.n_triangles, upstream.channels))
    if len(system.interior):
        z = system.solve_interior(upstream.values[system.interior])
        grad[:] = system.load_map[system.interior].T @ z
    return Field(grad, system.p0_ref)
