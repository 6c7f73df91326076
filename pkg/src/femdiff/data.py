"""Gaussian-blob conductivity fields and dataset generation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import RejectionBudgetExceeded
from .fem import Field
from .mesh import DualGraph
from .storage import read_field, write_field

_REJECTION_BUDGET = 10_000
_BALL_TEST_POINTS = 16


@dataclass(frozen=True)
class BlobParams:
    max_inclusions: int = 3
    background: float = 1.0
    min_conductivity: float = 0.1
    semi_axis_min: float = 0.05
    semi_axis_max: float = 0.15
    ratio_range: tuple[float, float] = (0.5, 1.0)
    depth_range: tuple[float, float] = (0.5, 1.0)
    containment: float = 2.0

    def __post_init__(self):
        if not 0 < self.min_conductivity < self.background:
            raise ValueError("need 0 < min_conductivity < background")
        if not 0 < self.semi_axis_min <= self.semi_axis_max:
            raise ValueError("invalid semi-axis range")
        if self.max_inclusions < 1:
            raise ValueError("max_inclusions must be >= 1")


@dataclass(frozen=True)
class Inclusion:
    center: tuple[float, float]
    semi_axis_a: float
    semi_axis_b: float
    angle: float
    floor_value: float


def eval_blob_field(positions, background: float, inclusions: list[Inclusion]) -> np.ndarray:
    """min over inclusions of background - (background - floor) *
    exp(-||A^-1 R^T (x - center)||^2 / 2)."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    values = np.full(len(pos), background)
    for inc in inclusions:
        delta = pos - np.asarray(inc.center)
        ca, sa = np.cos(inc.angle), np.sin(inc.angle)
        local_x = (ca * delta[:, 0] + sa * delta[:, 1]) / inc.semi_axis_a
        local_y = (-sa * delta[:, 0] + ca * delta[:, 1]) / inc.semi_axis_b
        q = local_x**2 + local_y**2
        branch = background - (background - inc.floor_value) * np.exp(-0.5 * q)
        values = np.minimum(values, branch)
    return values


def _ball_inside(center, radius, contains) -> bool:
    if not contains(center):
        return False
    angles = 2.0 * np.pi * np.arange(_BALL_TEST_POINTS) / _BALL_TEST_POINTS
    ring = center + radius * np.column_stack([np.cos(angles), np.sin(angles)])
    return all(contains(p) for p in ring)


def sample_inclusions(
    params: BlobParams, rng: np.random.Generator, contains, bbox
) -> list[Inclusion]:
    """Draw inclusion count and shapes; centers are rejection-sampled until
    the containment-radius ball fits inside the domain."""
    (lo_x, lo_y), (hi_x, hi_y) = bbox
    count = int(rng.integers(1, params.max_inclusions + 1))
    inclusions = []
    for _ in range(count):
        a = float(rng.uniform(params.semi_axis_min, params.semi_axis_max))
        ratio = float(rng.uniform(*params.ratio_range))
        b = ratio * a
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        depth = float(rng.uniform(*params.depth_range))
        floor_value = params.background - depth * (params.background - params.min_conductivity)
        ball = params.containment * max(a, b)
        for _attempt in range(_REJECTION_BUDGET):
            center = np.array(
                [rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)]
            )
            if _ball_inside(center, ball, contains):
                break
        else:
            raise RejectionBudgetExceeded(
                f"no admissible center after {_REJECTION_BUDGET} attempts "
                f"(containment ball radius {ball:.3g})"
            )
        inclusions.append(
            Inclusion((float(center[0]), float(center[1])), a, b, angle, floor_value)
        )
    return inclusions


def gaussian_blob_field(
    graph: DualGraph, params: BlobParams, rng: np.random.Generator, contains=None
) -> Field:
    """Single-channel conductivity field on the graph nodes."""
    pos = graph.node_positions
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    if contains is None:
        contains = lambda p: bool(np.all(p >= lo) and np.all(p <= hi))  # noqa: E731
    inclusions = sample_inclusions(params, rng, contains, (lo, hi))
    return Field(eval_blob_field(pos, params.background, inclusions), graph.ref)


def graph_token(graph: DualGraph) -> str:
    h = hashlib.sha256()
    h.update(graph.node_positions.tobytes())
    h.update(graph.edges.tobytes())
    return h.hexdigest()[:16]


def generate_dataset(
    graph: DualGraph,
    params: BlobParams,
    count: int,
    out_dir,
    split: float = 0.9,
    seed: int = 0,
    contains=None,
) -> dict:
    """Write train/test field files plus a manifest; the sample at index i
    always comes from the stream (seed, i), so splits are reproducible."""
    if count < 2:
        raise ValueError("count must be >= 2")
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    n_train = int(np.ceil(split * count))

    warnings = []
    if n_train >= count:
        n_train = min(n_train, count)
        if n_train == count:
            warnings.append("split_degenerate: empty test set")

    for i in range(count):
        rng = np.random.default_rng([seed, i])
        field = gaussian_blob_field(graph, params, rng, contains)
        part, local = ("train", i) if i < n_train else ("test", i - n_train)
        write_field(out / part / f"{local:05d}.fld", field)

    manifest = {
        "params": asdict(params),
        "seed": seed,
        "count": count,
        "split": split,
        "n_train": n_train,
        "n_test": count - n_train,
        "graph_hash": graph_token(graph),
        "warnings": warnings,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_dataset(directory, graph_ref: str | None = None):
    """Read a generated dataset back as (train, test, manifest)."""
    out = Path(directory)
    with open(out / "manifest.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)

    def read_part(name):
        files = sorted((out / name).glob("*.fld"))
        return [Field(read_field(p), graph_ref) for p in files]

    return read_part("train"), read_part("test"), manifest
