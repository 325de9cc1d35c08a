"""Core scene types: Gaussian sets, cameras, frames, datasets and the training config.

Gaussian parameters are stored raw and activated on use: scales live in log
space, opacities and pruning masks as logits, rotations as unnormalized
quaternions. This keeps every parameter unconstrained for the optimizer.
"""

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import quat

# Spherical harmonics constants (degree 0 and 1).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def inverse_sigmoid(p):
    return math.log(p / (1.0 - p))


def as_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@dataclass
class GaussianSet:
    """The optimizable scene: N Gaussians with raw (pre-activation) parameters.

    positions       (N, 3) world-space centers
    rotation_params (N, 4) raw quaternions (w, x, y, z), normalized on use
    log_scales      (N, 3) per-axis log standard deviations
    opacity_logits  (N,)   opacity through a logistic map
    colors          (N, 3, B) SH coefficients, B = (degree + 1)^2, degree in {0, 1}
    mask_logits     (N,)   per-Gaussian pruning mask through a logistic map
    """

    positions: torch.Tensor
    rotation_params: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor
    mask_logits: torch.Tensor

    @property
    def count(self):
        return self.positions.shape[0]

    @property
    def sh_degree(self):
        return int(round(math.sqrt(self.colors.shape[2]))) - 1

    @property
    def dtype(self):
        return self.positions.dtype

    def scales(self):
        return torch.exp(self.log_scales)

    def opacities(self):
        return torch.sigmoid(self.opacity_logits)

    def rotations(self):
        """Normalized quaternions."""
        return quat.normalize(self.rotation_params)

    def mask_values(self):
        return torch.sigmoid(self.mask_logits)

    def field_names(self):
        return [f.name for f in fields(self)]

    def tensors(self):
        return {name: getattr(self, name) for name in self.field_names()}

    def clone(self):
        return GaussianSet(**{k: v.detach().clone() for k, v in self.tensors().items()})

    def to(self, dtype):
        return GaussianSet(**{k: v.detach().to(dtype) for k, v in self.tensors().items()})

    def validate(self):
        n = self.count
        for name, t in self.tensors().items():
            if t.shape[0] != n:
                raise ValueError(f"field {name} has leading dimension {t.shape[0]}, expected {n}")
        if self.positions.shape[1:] != (3,) or self.rotation_params.shape[1:] != (4,):
            raise ValueError("bad position/rotation shape")
        if not torch.isfinite(self.log_scales).all():
            raise ValueError("non-finite log scales")
        b = self.colors.shape[2]
        if b not in (1, 4):
            raise ValueError(f"unsupported SH coefficient count {b}")
        return self


def covariance_matrices(rotation_params, log_scales):
    """Sigma = R diag(exp(s))^2 R^T for a batch of raw rotations/log scales."""
    rot = quat.to_rotation_matrix(quat.normalize(rotation_params))
    var = torch.exp(2.0 * log_scales)
    return (rot * var.unsqueeze(-2)) @ rot.transpose(-1, -2)


def covariance(gaussians: GaussianSet, i: int):
    """3x3 world-space covariance of Gaussian i."""
    if not 0 <= i < gaussians.count:
        raise IndexError(f"gaussian index {i} out of range [0, {gaussians.count})")
    return covariance_matrices(gaussians.rotation_params[i : i + 1], gaussians.log_scales[i : i + 1])[0]


def gaussian_density(gaussians: GaussianSet, i: int, x):
    """Unnormalized density exp(-0.5 (x - mu)^T Sigma^-1 (x - mu)), in (0, 1]."""
    cov = covariance(gaussians, i)
    d = as_tensor(x, cov.dtype) - gaussians.positions[i]
    return torch.exp(-0.5 * d @ torch.linalg.solve(cov, d))


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose.

    Image pixel (row y, col x) is sampled at continuous coordinates (x, y);
    camera space is x right, y down, z forward.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation_w2c: torch.Tensor
    translation_w2c: torch.Tensor
    time_index: int = 0

    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation_w2c.T @ self.translation_w2c

    def validate(self, tol=1e-6):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("camera intrinsics must be positive")
        r = self.rotation_w2c.double()
        if (r @ r.T - torch.eye(3, dtype=torch.float64)).abs().max() > tol:
            raise ValueError("rotation_w2c is not orthonormal")
        if abs(torch.linalg.det(r).item() - 1.0) > tol:
            raise ValueError("rotation_w2c determinant is not +1")
        return self


@dataclass
class Frame:
    image: torch.Tensor  # (H, W, 3) in [0, 1]
    depth: Optional[torch.Tensor] = None  # (H, W), > 0 where valid, 0 elsewhere
    time_index: int = 0

    def depth_mask(self):
        if self.depth is None:
            return None
        return self.depth > 0


@dataclass
class Dataset:
    frames: list
    cameras: list
    init_points: torch.Tensor  # (M, 3)
    init_colors: torch.Tensor  # (M, 3) in [0, 1]
    total_frames: int  # T: total frame count of the capture

    def __len__(self):
        return len(self.frames)

    def validate(self):
        if len(self.frames) != len(self.cameras):
            raise ValueError("frames and cameras length mismatch")
        for f, c in zip(self.frames, self.cameras):
            if not 0 <= f.time_index < self.total_frames:
                raise ValueError(f"time index {f.time_index} outside [0, {self.total_frames})")
            if f.time_index != c.time_index:
                raise ValueError("frame/camera time index mismatch")
        return self

    def subset(self, indices):
        return Dataset(
            frames=[self.frames[i] for i in indices],
            cameras=[self.cameras[i] for i in indices],
            init_points=self.init_points,
            init_colors=self.init_colors,
            total_frames=self.total_frames,
        )


@dataclass
class TrainConfig:
    """All pipeline knobs. Defaults follow the full-scale schedule; use
    desk_preset() for the minutes-scale synthetic configuration."""

    # schedule
    static_iters: int = 80000
    densify_until: int = 9000
    dynamic_iters: int = 30000
    chunk_size: int = 500000
    k_fraction: float = 0.25

    # loss weights
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.05
    lambda_mask: float = 5e-4
    lambda_rigid: float = 1.0
    lambda_rot: float = 1.0

    # densify / prune
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    split_size_fraction: float = 0.01  # of scene extent
    split_scale_shrink: float = 1.6
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.05
    prune_interval: int = 500
    prune_mask_threshold: float = 0.01

    # learning rates (positions scaled by scene extent)
    lr_positions: float = 1.6e-4
    lr_rotations: float = 1e-3
    lr_opacities: float = 5e-2
    lr_scales: float = 5e-3
    lr_colors: float = 2.5e-3
    lr_masks: float = 1e-2
    lr_planes: float = 1e-2
    lr_net: float = 1e-3
    dynamic_lr_scale: float = 0.1
    train_colors: bool = False

    # motion field
    plane_resolution: int = 128
    plane_channels: int = 16
    hidden_width: int = 64
    normalizer_margin: float = 1.05

    # rigidity graph
    k_nn: int = 8
    rigidity_lambda_w: float = 2000.0

    # rendering
    background: tuple = (0.0, 0.0, 0.0)
    sh_degree: int = 0
    near_clip: float = 0.01

    # bookkeeping
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 0  # 0 = final only

    @classmethod
    def desk_preset(cls, **overrides) -> "TrainConfig":
        """Minutes-scale schedule for the synthetic suite."""
        cfg = cls(
            static_iters=1200,
            densify_until=400,
            dynamic_iters=900,
            densify_grad_threshold=7e-4,
            plane_resolution=48,
            plane_channels=8,
            lr_planes=4e-2,
            lr_net=2e-3,
        )
        return replace(cfg, **overrides)

    def validate(self):
        if min(self.static_iters, self.dynamic_iters, self.densify_until) < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not 0.0 < self.k_fraction <= 1.0:
            raise ValueError("k_fraction must lie in (0, 1]")
        return self

    def apply_overrides(self, mapping):
        """Apply {name: value} overrides, coercing strings to the field type."""
        valid = {f.name: f for f in fields(self)}
        for key, raw in mapping.items():
            if key not in valid:
                raise KeyError(f"unknown config key: {key}")
            cur = getattr(self, key)
            if isinstance(raw, str):
                if isinstance(cur, bool):
                    raw = raw.strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(cur, int):
                    raw = int(raw)
                elif isinstance(cur, float):
                    raw = float(raw)
                elif isinstance(cur, tuple):
                    raw = tuple(float(v) for v in raw.replace(",", " ").split())
            setattr(self, key, raw)
        return self


def init_from_points(points, colors, config: TrainConfig) -> GaussianSet:
    """Seed a GaussianSet from a sparse point cloud.

    Scales start isotropic at the mean distance to the 3 nearest points
    (all available neighbors when fewer exist), opacities at 0.1 and the
    pruning mask at 0.99. Colors populate the degree-0 SH band.
    """
    pts = as_tensor(points)
    cols = as_tensor(colors)
    if pts.numel() == 0:
        raise ValueError("empty initialization")
    if cols.min() < 0.0 or cols.max() > 1.0:
        raise ValueError(f"colors outside [0, 1]: min {cols.min():.4f} max {cols.max():.4f}")
    n = pts.shape[0]

    if n == 1:
        nn_dist = torch.ones(1)
    else:
        k = min(3, n - 1)
        tree = cKDTree(pts.numpy())
        dist, _ = tree.query(pts.numpy(), k=k + 1)  # first hit is the point itself
        nn_dist = torch.from_numpy(dist[:, 1:].mean(axis=1)).float()

    b = (config.sh_degree + 1) ** 2
    sh = torch.zeros(n, 3, b)
    sh[:, :, 0] = (cols - 0.5) / SH_C0

    return GaussianSet(
        positions=pts.clone(),
        rotation_params=quat.identity(n),
        log_scales=torch.log(nn_dist.clamp_min(1e-7))[:, None].repeat(1, 3),
        opacity_logits=torch.full((n,), inverse_sigmoid(0.1)),
        colors=sh,
        mask_logits=torch.full((n,), inverse_sigmoid(0.99)),
    )


def scene_extent(cameras) -> float:
    """Radius of the camera-center bounding sphere (used to scale LRs and
    densification sizes); falls back to 1.0 for degenerate rigs."""
    centers = torch.stack([c.center() for c in cameras])
    radius = (centers - centers.mean(dim=0)).norm(dim=1).max().item()
    return max(radius * 1.1, 1.0)
