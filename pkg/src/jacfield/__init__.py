"""Neural jacobian fields: learn mesh maps as per-triangle jacobians integrated by a Poisson solve."""
from __future__ import annotations

from .features import FeatureConfig, centroid_features, compute_spectrum
from .mesh import Mesh, MeshError, center_of_mass, load_obj, normalize_to_unit_sphere, save_obj
from .operators import OperatorCache, load_cache, save_cache
from .oracle import DatasetConfig, arap_deform, arap_parameterize, generate_dataset, load_dataset
from .pipeline import Model, TrainConfig, evaluate, infer, loss, train
from .poisson import compute_jacobians, poisson_adjoint, poisson_solve

__all__ = [
    "DatasetConfig", "FeatureConfig", "Mesh", "MeshError", "Model", "OperatorCache",
    "TrainConfig", "arap_deform", "arap_parameterize", "center_of_mass", "centroid_features",
    "compute_jacobians", "compute_spectrum", "evaluate", "generate_dataset", "infer",
    "load_cache", "load_dataset", "load_obj", "loss", "normalize_to_unit_sphere",
    "poisson_adjoint", "poisson_solve", "save_cache", "save_obj", "train",
]
__version__ = "0.1.0"
