"""Synthetic ambient scenes with known ground truth.

A foreground cluster carries smooth, in-span cosine-basis motion; a distant
background shell (outside the camera-range normalization box) stays static.
Frames are rendered with the naive reference renderer so the trainer is never
graded against its own rasterizer, and the composited depth maps stand in for
the pre-processing depth supervision.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import quat
from .motion import DCTBasis
from .rasterizer import render_reference
from .scene import SH_C0, Camera, Dataset, Frame, GaussianSet, inverse_sigmoid


@dataclass
class SynthSpec:
    seed: int = 0
    n_foreground: int = 200
    n_background: int = 300
    frames: int = 40  # T
    image_height: int = 96
    image_width: int = 96
    k_fraction: float = 0.25
    active_ks: tuple = (1, 2)  # 1-based basis indices carrying motion
    amplitude: float = 0.25  # scene units, peak per-axis coefficient scale
    camera_radius: float = 6.0
    camera_height: float = 1.0
    height_wobble: float = 0.8
    angular_span_deg: float = 75.0
    fov_deg: float = 45.0
    foreground_radius: float = 1.0
    background_radius: float = 12.0
    noise_level: float = 0.0

    def validate(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.frames < 4:
            raise ValueError("need at least 4 frames")
        return self


def _look_at(center, target):
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(up_hint, forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # rows: proper rotation, det +1
    return rot, -rot @ center


def make_cameras(spec: SynthSpec):
    """Arc of cameras orbiting the origin with height wobble (all three axes
    of the camera-center range are non-degenerate)."""
    cams = []
    fx = (spec.image_width / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)
    span = math.radians(spec.angular_span_deg)
    for t in range(spec.frames):
        u = t / max(spec.frames - 1, 1)
        theta = span * (u - 0.5)
        center = np.array([
            spec.camera_radius * math.sin(theta),
            spec.camera_height + spec.height_wobble * math.sin(2.0 * theta + 0.7),
            -spec.camera_radius * math.cos(theta),
        ])
        rot, trans = _look_at(center, np.zeros(3))
        cams.append(Camera(
            fx=fx, fy=fx,
            cx=(spec.image_width - 1) / 2.0, cy=(spec.image_height - 1) / 2.0,
            width=spec.image_width, height=spec.image_height,
            rotation_w2c=torch.from_numpy(rot),
            translation_w2c=torch.from_numpy(trans),
            time_index=t,
        ))
    return cams


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cap_vectors(rng, n, half_angle_deg):
    """Uniform directions on the +z spherical cap (the sky the cameras see)."""
    cos_min = math.cos(math.radians(half_angle_deg))
    cos_phi = rng.uniform(cos_min, 1.0, n)
    sin_phi = np.sqrt(1.0 - cos_phi ** 2)
    psi = rng.uniform(0.0, 2.0 * math.pi, n)
    return np.stack([sin_phi * np.cos(psi), sin_phi * np.sin(psi), cos_phi], axis=1)


def generate(spec: SynthSpec):
    """Build (ground-truth GaussianSet, per-Gaussian coefficients (N, 7, K),
    rendered Dataset). Deterministic in spec.seed; rows 0..n_foreground-1 are
    the moving cluster, the rest the static shell."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_fg, n_bg = spec.n_foreground, spec.n_background
    n = n_fg + n_bg

    # Foreground: uniform ball around the origin. Background: a shell patch on
    # the spherical cap the cameras actually see (they orbit at -z looking at
    # the origin), far outside the camera-range box, so it stays static and
    # its normalized positions clamp to the box boundary.
    fg_dir = _unit_vectors(rng, n_fg)
    fg_rad = spec.foreground_radius * rng.uniform(0.0, 1.0, (n_fg, 1)) ** (1.0 / 3.0)
    fg_pos = fg_dir * fg_rad
    cap = spec.fov_deg / 2.0 + spec.angular_span_deg / 2.0 + 10.0
    bg_dir = _cap_vectors(rng, n_bg, cap)
    bg_pos = bg_dir * (spec.background_radius * rng.uniform(0.97, 1.08, (n_bg, 1)))

    positions = np.concatenate([fg_pos, bg_pos])
    colors = np.concatenate([
        rng.uniform(0.10, 0.95, (n_fg, 3)),
        rng.uniform(0.15, 0.80, (n_bg, 3)),
    ])
    scales = np.concatenate([
        spec.foreground_radius * rng.uniform(0.055, 0.11, (n_fg, 3)),
        spec.background_radius * rng.uniform(0.035, 0.055, (n_bg, 3)),
    ])
    opacities = np.concatenate([
        rng.uniform(0.85, 0.97, n_fg),
        rng.uniform(0.95, 0.99, n_bg),
    ])
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    sh = np.zeros((n, 3, 1))
    sh[:, :, 0] = (colors - 0.5) / SH_C0
    gt = GaussianSet(
        positions=torch.from_numpy(positions),
        rotation_params=torch.from_numpy(quats),
        log_scales=torch.from_numpy(np.log(scales)),
        opacity_logits=torch.from_numpy(np.log(opacities / (1.0 - opacities))),
        colors=torch.from_numpy(sh),
        mask_logits=torch.full((n,), inverse_sigmoid(0.99), dtype=torch.float64),
    )

    basis = DCTBasis.create(spec.frames, k_fraction=spec.k_fraction)
    phi = np.zeros((n, 7, basis.K))
    # Smooth spatial coefficient fields over the cluster: each active basis
    # index gets a random low-frequency cosine pattern per axis.
    for axis in range(3):
        for k1 in spec.active_ks:
            if k1 > basis.K:
                continue
            direction = _unit_vectors(rng, 1)[0]
            phase = rng.uniform(0.0, 2.0 * math.pi)
            freq = rng.uniform(1.0, 2.0) / spec.foreground_radius
            pattern = np.cos(freq * fg_pos @ direction + phase)
            phi[:n_fg, axis, k1 - 1] = spec.amplitude / k1 * pattern

    frames = []
    cameras = make_cameras(spec)
    table = basis.table.numpy()  # (T, K)
    for t in range(spec.frames):
        delta = phi @ table[t]  # (N, 7)
        overrides = (
            gt.positions + torch.from_numpy(delta[:, :3]),
            gt.rotation_params + torch.from_numpy(delta[:, 3:]),
        )
        out = render_reference(gt, cameras[t], overrides=overrides)
        image = out.color.clamp(0.0, 1.0)
        if spec.noise_level > 0:
            image = image + torch.from_numpy(rng.normal(0.0, spec.noise_level, image.shape))
            image = image.clamp(0.0, 1.0)
        depth = torch.where(out.alpha > 0.5, out.depth, torch.zeros_like(out.depth))
        frames.append(Frame(image=image.float(), depth=depth.float(), time_index=t))

    dataset = Dataset(
        frames=frames,
        cameras=cameras,
        init_points=gt.positions.float().clone(),
        init_colors=torch.from_numpy(colors).float(),
        total_frames=spec.frames,
    )
    return gt, phi, dataset


def ground_truth_pose(gt: GaussianSet, phi, basis: DCTBasis, t):
    """Deformed (positions, raw rotations) at arbitrary time t from the
    ground-truth coefficients (supports t >= T continuation)."""
    row = basis.row(t).numpy()
    delta = np.asarray(phi) @ row
    return (
        gt.positions + torch.from_numpy(delta[:, :3]).to(gt.positions.dtype),
        gt.rotation_params + torch.from_numpy(delta[:, 3:]).to(gt.rotation_params.dtype),
    )


def held_out_split(dataset: Dataset, n_segments=3, seg_len=30):
    """Withhold n_segments contiguous runs of seg_len frames at evenly spaced
    offsets; the remainder trains."""
    total = len(dataset)
    if seg_len == 0 or n_segments == 0:
        return dataset.subset(list(range(total))), dataset.subset([])
    if total <= n_segments * seg_len:
        raise ValueError(
            f"dataset too short: {total} frames cannot hold out {n_segments} x {seg_len}")
    partition = total / n_segments
    test_idx = []
    for i in range(n_segments):
        start = int(round(i * partition + (partition - seg_len) / 2.0))
        start = max(0, min(start, total - seg_len))
        test_idx.extend(range(start, start + seg_len))
    test_idx = sorted(set(test_idx))
    train_idx = [i for i in range(total) if i not in set(test_idx)]
    if len(train_idx) < len(test_idx):
        warnings.warn(
            f"held-out split leaves only {len(train_idx)} training frames "
            f"for {len(test_idx)} test frames", RuntimeWarning)
    return dataset.subset(train_idx), dataset.subset(test_idx)
