"""femdiff: function-space diffusion models on triangulated domains.

Score-based generative modelling of fields over irregular 2D meshes:
trace-class Gaussian noise, a resolution-invariant FEM-convolution score
network over a mesh hierarchy, Heun reverse sampling, and guided posterior
sampling against sensor and PDE forward operators.
"""

__version__ = "0.1.0"

from ._accel import BACKEND as kernel_backend
from .fem import (
    Field,
    FemConvFilter,
    NeighborTable,
    build_neighbor_table,
    fem_conv_forward,
    fem_conv_vjp,
)
from .mesh import (
    DualGraph,
    MeshHierarchy,
    TriMesh,
    build_hierarchy,
    dual_graph,
    grid_hierarchy,
    load_mesh,
    mask_cells,
    median_edge_length,
    save_mesh,
    triangulate_unit_square,
    vertex_graph,
)
from .randfield import CovarianceFactor, apply_C, build_covariance, rbf_kernel, sample_grf
from .score import (
    DenoiserModel,
    FemUNet,
    GaussianOracleDenoiser,
    NetConfig,
    TrainConfig,
    train_denoiser,
)
from .sde import NoiseSchedule, heun_sample, score_from_denoiser, ve_perturb, ve_sigma_steps

__all__ = [
    "__version__",
    "kernel_backend",
    "Field",
    "FemConvFilter",
    "NeighborTable",
    "build_neighbor_table",
    "fem_conv_forward",
    "fem_conv_vjp",
    "DualGraph",
    "MeshHierarchy",
    "TriMesh",
    "build_hierarchy",
    "dual_graph",
    "grid_hierarchy",
    "load_mesh",
    "mask_cells",
    "median_edge_length",
    "save_mesh",
    "triangulate_unit_square",
    "vertex_graph",
    "CovarianceFactor",
    "apply_C",
    "build_covariance",
    "rbf_kernel",
    "sample_grf",
    "DenoiserModel",
    "FemUNet",
    "GaussianOracleDenoiser",
    "NetConfig",
    "TrainConfig",
    "train_denoiser",
    "NoiseSchedule",
    "heun_sample",
    "score_from_denoiser",
    "ve_perturb",
    "ve_sigma_steps",
]
