"""Layered supervised/model-based low-dose CT reconstruction toolkit."""
from .tomo import Geometry, GeometryError, back_project, fbp, forward_project
from .simulate import (NoiseModel, from_hu, make_phantom, random_body_spec, shepp_logan_spec,
                       simulate_sinogram, to_hu)
from .patch import PatchConfig, aggregate_patches, extract_patches
from .ultra import TransformUnion, cluster_and_code, hard_threshold, learn_transforms
from .solvers import SolverSettings, pwls_ep, pwls_ultra, pwls_ultra_prox
from .supermodel import (SuperModel, reconstruct_parallel_super, reconstruct_serial_super,
                         sweep_lambda, train_parallel_super, train_serial_super)
from .metrics import rmse_hu, ssim

__version__ = "0.1.0"
