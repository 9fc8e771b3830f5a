"""anchorsplat: CPU differentiable renderer and trainer for
anchor-scaffolded 3D Gaussian splatting.

Anchors on a sparse voxel grid spawn view-adaptive Gaussians whose
attributes are decoded by tiny MLPs; everything is optimized end-to-end
against posed images with gradient-driven anchor growing and
opacity-driven pruning.
"""

from .config import RunConfig
from .decoders import DecoderSet
from .gaussgen import FilterConfig
from .metrics import psnr, ssim
from .rasterizer import RasterConfig
from .scaffold import AnchorGrid, auto_voxel_size, init_random_grid, voxelize
from .scene_io import Camera, PointCloud, Scene, load_colmap_text, load_transforms_json, split_train_test
from .trainer import LossConfig, TrainState, compute_loss, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AnchorGrid",
    "Camera",
    "DecoderSet",
    "FilterConfig",
    "LossConfig",
    "PointCloud",
    "RasterConfig",
    "RunConfig",
    "Scene",
    "TrainState",
    "auto_voxel_size",
    "compute_loss",
    "init_random_grid",
    "load_checkpoint",
    "load_colmap_text",
    "load_transforms_json",
    "psnr",
    "save_checkpoint",
    "split_train_test",
    "ssim",
    "train",
    "voxelize",
    "__version__",
]
