"""CPU Gaussian splatting with volume-driven densification."""
from .autograd import LossConfig, backward, finite_difference_oracle, loss
from .camera import CameraIntrinsics, CameraPose, TrainingView, scene_extent
from .colmap import SparsePoints, load_colmap_sparse
from .densify import (AdcConfig, OptimState, adam_step, enforce_cap, gradient_densify,
                      opacity_reset, prune, volumetric_densify)
from .errors import (InvalidParameterError, ParseError, SingularMatrixError,
                     UnsupportedModelError, VolsplatError)
from .gaussians import (GaussianCloud, GaussianPrimitive, condition_number, covariance_from_rs,
                        ellipsoid_volume, gaussian_density, split_eigenvalues)
from .metrics import VolumeHistogram, psnr, ssim, volume_histogram
from .ply import export_checkpoint, import_checkpoint, load_ply_points, write_ply_points
from .rasterizer import RasterConfig, project_gaussian, render, render_bruteforce
from .scene import Scene, load_scene, seed_cloud
from .sh import resolve_color
from .train import TrainConfig, TrainResult, train

__version__ = "0.1.0"
