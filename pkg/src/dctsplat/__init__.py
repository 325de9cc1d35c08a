"""dctsplat: dynamic free-view synthesis with 3D Gaussian splatting and
DCT-basis motion trajectories."""

__version__ = "0.1.0"

from .scene import Camera, Dataset, Frame, GaussianSet, TrainConfig, init_from_points
from .rasterizer import RenderOutput, project, render, render_backward, render_reference
from .motion import (DCTBasis, DeformedState, MotionField, SceneNormalizer,
                     build_motion_field, eval_trajectory, fit_coefficients_lsq,
                     fit_normalizer, normalize_position)
from .losses import (NeighborGraph, build_neighbor_graph, depth_loss, mask_loss,
                     photometric_loss, psnr, rigidity_loss, rotation_similarity_loss,
                     ssim_metric)
from .trainer import train_dynamic, train_static, two_pass_step
from .synth import SynthSpec, generate, held_out_split

__all__ = [
    "Camera", "Dataset", "Frame", "GaussianSet", "TrainConfig", "init_from_points",
    "RenderOutput", "project", "render", "render_backward", "render_reference",
    "DCTBasis", "DeformedState", "MotionField", "SceneNormalizer", "build_motion_field",
    "eval_trajectory", "fit_coefficients_lsq", "fit_normalizer", "normalize_position",
    "NeighborGraph", "build_neighbor_graph", "depth_loss", "mask_loss",
    "photometric_loss", "psnr", "rigidity_loss", "rotation_similarity_loss", "ssim_metric",
    "train_dynamic", "train_static", "two_pass_step",
    "SynthSpec", "generate", "held_out_split",
]
