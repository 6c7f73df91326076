"""Triangulations, dual graphs, and multiscale mesh hierarchies.

All structures are immutable after construction (arrays are marked
read-only) and safe to share across threads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DisconnectedDomain,
    EmptyDomain,
    InvalidHierarchy,
    NoEdges,
    ParseError,
)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TriMesh:
    """2D triangulation: vertex coordinates, CCW triangles, boundary tags."""

    vertices: np.ndarray  # (Nv, 2) float64
    triangles: np.ndarray  # (Nt, 3) int64, counter-clockwise
    boundary_vertices: np.ndarray  # sorted int64 indices on the domain boundary

    def __post_init__(self):
        v = _freeze(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2))
        t = _freeze(np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        b = _freeze(np.unique(np.asarray(self.boundary_vertices, dtype=np.int64)))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "boundary_vertices", b)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if np.any(signed_areas(self) <= 0):
            raise ValueError("triangle with non-positive signed area")
        for count in _edge_triangle_counts(t).values():
            if count > 2:
                raise ValueError("edge shared by more than two triangles")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)


@dataclass(frozen=True)
class DualGraph:
    """Point set with undirected edges; nodes are triangle centroids (P0)
    or mesh vertices (P1)."""

    node_positions: np.ndarray  # (N, 2) float64
    edges: np.ndarray  # (E, 2) int64, each row sorted, rows unique
    node_kind: str  # "P0" or "P1"
    ref: str = field(default="")

    def __post_init__(self):
        pos = _freeze(np.asarray(self.node_positions, dtype=np.float64).reshape(-1, 2))
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        e = np.sort(e, axis=1)
        if e.size:
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("self-loop edge")
            e = np.unique(e, axis=0)
            if e.max() >= len(pos):
                raise ValueError("edge index out of range")
        e = _freeze(e)
        object.__setattr__(self, "node_positions", pos)
        object.__setattr__(self, "edges", e)
        if not self.ref:
            h = hashlib.sha1()
            h.update(self.node_kind.encode())
            h.update(pos.tobytes())
            h.update(e.tobytes())
            object.__setattr__(self, "ref", h.hexdigest()[:12])

    @property
    def n_nodes(self) -> int:
        return len(self.node_positions)


@dataclass(frozen=True)
class MeshHierarchy:
    """Coarsening chain of graphs with nearest-neighbor pooling maps.

    ``assigns[l][i]`` is the coarse node of level ``l+1`` that fine node
    ``i`` of level ``l`` pools into; pre-images partition each fine level.
    """

    levels: tuple[DualGraph, ...]
    assigns: tuple[np.ndarray, ...]  # one (N_l,) array per transition
    median_edges: tuple[float, ...]
    radii: tuple[float, ...]
    mu: float

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def pool(self, values: np.ndarray, level: int) -> np.ndarray:
        """Average fine values of `level` over each coarse pre-image."""
        assign = self.assigns[level]
        nc = self.levels[level + 1].n_nodes
        counts = np.bincount(assign, minlength=nc).astype(np.float64)
        out = np.zeros((nc,) + values.shape[1:], dtype=np.float64)
        np.add.at(out, assign, values)
        return out / counts.reshape((-1,) + (1,) * (values.ndim - 1))

    def unpool(self, values: np.ndarray, level: int) -> np.ndarray:
        """Broadcast coarse values of `level + 1` back to the fine nodes."""
        return values[self.assigns[level]]


def signed_areas(mesh: TriMesh) -> np.ndarray:
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _edge_triangle_counts(triangles: np.ndarray) -> dict:
    counts: dict[tuple[int, int], int] = {}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(a), int(b)) if a < b else (int(b), int(a))
            counts[key] = counts.get(key, 0) + 1
    return counts


def _edge_triangle_map(triangles: np.ndarray) -> dict:
    owners: dict[tuple[int, int], list[int]] = {}
    for idx, tri in enumerate(triangles):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(a), int(b)) if a < b else (int(b), int(a))
            owners.setdefault(key, []).append(idx)
    return owners


def _boundary_vertices(triangles: np.ndarray) -> np.ndarray:
    out = set()
    for (a, b), count in _edge_triangle_counts(triangles).items():
        if count == 1:
            out.add(a)
            out.add(b)
    return np.array(sorted(out), dtype=np.int64)


def triangulate_unit_square(nx: int, ny: int) -> TriMesh:
    """Regular nx-by-ny grid on [0,1]^2, each cell split along its SW-NE
    diagonal into two CCW triangles."""
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    def vid(ix, iy):
        return iy * (nx + 1) + ix

    tris = []
    for iy in range(ny):
        for ix in range(nx):
            v00 = vid(ix, iy)
            v10 = vid(ix + 1, iy)
            v11 = vid(ix + 1, iy + 1)
            v01 = vid(ix, iy + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    triangles = np.array(tris, dtype=np.int64)
    return TriMesh(vertices, triangles, _boundary_vertices(triangles))


def mask_cells(mesh: TriMesh, keep) -> TriMesh:
    """Restrict a mesh to the triangles whose centroid satisfies `keep`.

    The result is re-indexed against a compacted vertex list and must stay
    edge-connected.
    """
    cents = mesh.centroids()
    kept = np.array([bool(keep(c)) for c in cents])
    if not kept.any():
        raise EmptyDomain("cell predicate kept no triangles")
    tris = mesh.triangles[kept]

    # connectivity over shared mesh edges
    n_kept = len(tris)
    adj: list[list[int]] = [[] for _ in range(n_kept)]
    for owners in _edge_triangle_map(tris).values():
        if len(owners) == 2:
            a, b = owners
            adj[a].append(b)
            adj[b].append(a)
    seen = np.zeros(n_kept, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        for nb in adj[stack.pop()]:
            if not seen[nb]:
                seen[nb] = True
                stack.append(nb)
    if not seen.all():
        raise DisconnectedDomain(
            f"mask splits domain into components ({int(seen.sum())}/{n_kept} reachable)"
        )

    used = np.unique(tris)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    new_tris = remap[tris]
    return TriMesh(mesh.vertices[used], new_tris, _boundary_vertices(new_tris))


def dual_graph(mesh: TriMesh) -> DualGraph:
    """One node per triangle at its centroid; one edge per interior mesh edge."""
    edges = [
        owners
        for owners in _edge_triangle_map(mesh.triangles).values()
        if len(owners) == 2
    ]
    edges = np.array(edges, dtype=np.int64) if edges else np.zeros((0, 2), np.int64)
    return DualGraph(mesh.centroids(), edges, "P0")


def vertex_graph(mesh: TriMesh) -> DualGraph:
    """One node per mesh vertex; one edge per mesh edge."""
    edges = np.array(sorted(_edge_triangle_counts(mesh.triangles)), dtype=np.int64)
    if edges.size == 0:
        edges = np.zeros((0, 2), np.int64)
    return DualGraph(mesh.vertices, edges, "P1")


def median_edge_length(graph: DualGraph) -> float:
    """Median Euclidean edge length; even counts average the two central
    order statistics."""
    if len(graph.edges) == 0:
        raise NoEdges("graph has no edges")
    d = graph.node_positions[graph.edges[:, 0]] - graph.node_positions[graph.edges[:, 1]]
    lengths = np.sort(np.hypot(d[:, 0], d[:, 1]))
    n = len(lengths)
    if n % 2:
        return float(lengths[n // 2])
    return float(0.5 * (lengths[n // 2 - 1] + lengths[n // 2]))


def _nearest_coarse(fine_pos: np.ndarray, coarse_pos: np.ndarray) -> np.ndarray:
    """1-NN assignment; exact ties resolve to the lowest coarse index."""
    assign = np.empty(len(fine_pos), dtype=np.int64)
    block = max(1, 2**22 // max(1, len(coarse_pos)))
    for start in range(0, len(fine_pos), block):
        chunk = fine_pos[start : start + block]
        d2 = ((chunk[:, None, :] - coarse_pos[None, :, :]) ** 2).sum(axis=2)
        assign[start : start + len(chunk)] = np.argmin(d2, axis=1)
    return assign


def build_hierarchy(graphs: list[DualGraph], mu: float) -> MeshHierarchy:
    """Chain strictly coarsening graphs with nearest-neighbor pooling.

    Every fine node maps to its nearest coarse node; a coarse node left with
    an empty pre-image steals its nearest fine node (taken from a pre-image
    of size >= 2) so restriction is defined everywhere.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    counts = [g.n_nodes for g in graphs]
    if any(a <= b for a, b in zip(counts, counts[1:])):
        raise InvalidHierarchy(f"node counts not strictly decreasing: {counts}")

    assigns = []
    for fine, coarse in zip(graphs, graphs[1:]):
        assign = _nearest_coarse(fine.node_positions, coarse.node_positions)
        sizes = np.bincount(assign, minlength=coarse.n_nodes)
        for c in np.flatnonzero(sizes == 0):
            candidates = np.flatnonzero(sizes[assign] >= 2)
            d2 = ((fine.node_positions[candidates] - coarse.node_positions[c]) ** 2).sum(axis=1)
            steal = candidates[np.argmin(d2)]
            sizes[assign[steal]] -= 1
            assign[steal] = c
            sizes[c] += 1
        assigns.append(_freeze(assign))

    medians = tuple(median_edge_length(g) for g in graphs)
    radii = tuple(mu * d for d in medians)
    return MeshHierarchy(tuple(graphs), tuple(assigns), medians, radii, float(mu))


# Cell-keep predicates for the built-in staircase domain shapes.
SHAPES = {
    "square": lambda c: True,
    "lshape": lambda c: not (c[0] > 0.5 and c[1] > 0.5),
    "plus": lambda c: (1 / 3 <= c[0] <= 2 / 3) or (1 / 3 <= c[1] <= 2 / 3),
    "hole": lambda c: not (0.25 < c[0] < 0.75 and 0.25 < c[1] < 0.75),
}


def shaped_mesh(nx: int, ny: int, shape: str = "square") -> TriMesh:
    mesh = triangulate_unit_square(nx, ny)
    if shape == "square":
        return mesh
    return mask_cells(mesh, SHAPES[shape])


def grid_hierarchy(
    nx: int, ny: int, n_levels: int, mu: float, shape: str = "square", kind: str = "P0"
) -> MeshHierarchy:
    """Hierarchy over a 2x-coarsening chain of (optionally masked) grids."""
    graphs = []
    for level in range(n_levels):
        f = 2**level
        if nx % f or ny % f:
            raise InvalidHierarchy(f"grid {nx}x{ny} not divisible by 2^{level}")
        mesh = shaped_mesh(nx // f, ny // f, shape)
        graphs.append(dual_graph(mesh) if kind == "P0" else vertex_graph(mesh))
    return build_hierarchy(graphs, mu)


def save_mesh(path, mesh: TriMesh) -> None:
    """Line-oriented text format; coordinates at 17 significant digits."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("trimesh 1\n")
        f.write(f"vertices {mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            f.write(f"{x:.17g} {y:.17g}\n")
        f.write(f"triangles {mesh.n_triangles}\n")
        for i, j, k in mesh.triangles:
            f.write(f"{i} {j} {k}\n")
        f.write(f"boundary {len(mesh.boundary_vertices)}\n")
        for v in mesh.boundary_vertices:
            f.write(f"{v}\n")


def load_mesh(path) -> TriMesh:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.readlines()
    tokens: list[tuple[str, int]] = []
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0]
        tokens.extend((tok, lineno) for tok in body.split())
    pos = 0

    def take(what: str) -> tuple[str, int]:
        nonlocal pos
        if pos >= len(tokens):
            line = tokens[-1][1] if tokens else 1
            raise ParseError(f"unexpected end of file, expected {what}", line)
        tok = tokens[pos]
        pos += 1
        return tok

    def take_int(what: str) -> tuple[int, int]:
        tok, line = take(what)
        try:
            return int(tok), line
        except ValueError:
            raise ParseError(f"expected integer {what}, got {tok!r}", line) from None

    def take_float(what: str) -> tuple[float, int]:
        tok, line = take(what)
        try:
            return float(tok), line
        except ValueError:
            raise ParseError(f"expected number {what}, got {tok!r}", line) from None

    def expect(keyword: str) -> int:
        tok, line = take(f"keyword {keyword!r}")
        if tok != keyword:
            raise ParseError(f"expected {keyword!r}, got {tok!r}", line)
        return line

    expect("trimesh")
    version, line = take_int("format version")
    if version != 1:
        raise ParseError(f"unsupported format version {version}", line)

    expect("vertices")
    nv, _ = take_int("vertex count")
    vertices = np.empty((nv, 2), dtype=np.float64)
    for i in range(nv):
        vertices[i, 0], _ = take_float("x coordinate")
        vertices[i, 1], _ = take_float("y coordinate")

    expect("triangles")
    nt, _ = take_int("triangle count")
    triangles = np.empty((nt, 3), dtype=np.int64)
    for i in range(nt):
        for j in range(3):
            idx, line = take_int("vertex index")
            if not 0 <= idx < nv:
                raise ParseError(f"triangle index {idx} out of range [0, {nv})", line)
            triangles[i, j] = idx

    if pos < len(tokens):
        expect("boundary")
        nb, _ = take_int("boundary count")
        boundary = np.empty(nb, dtype=np.int64)
        for i in range(nb):
            idx, line = take_int("boundary vertex index")
            if not 0 <= idx < nv:
                raise ParseError(f"boundary index {idx} out of range [0, {nv})", line)
            boundary[i] = idx
    else:
        boundary = _boundary_vertices(triangles)
    if pos < len(tokens):
        raise ParseError(f"trailing content {tokens[pos][0]!r}", tokens[pos][1])

    try:
        return TriMesh(vertices, triangles, boundary)
    except ValueError as exc:
        raise ParseError(str(exc)) from None
