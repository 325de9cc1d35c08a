"""Motion field: canonical position -> DCT trajectory coefficients -> time deltas.

A scene normalizer maps world positions into the triplane's [-1, 1]^3 box
(clamping whatever lies outside), three bilinear feature planes encode the
normalized position, and a small MLP with a zero-initialized output layer
predicts K cosine coefficients for each of the 7 deformation channels
(3 translation axes + 4 quaternion components). Time enters only through
the cosine basis, so the field starts as the exact identity deformation
and extrapolates beyond the captured range by evaluating the same basis.

Two ablation variants share the interface: DirectCoefficientField optimizes
one coefficient row per Gaussian with no spatial encoder, and
DirectTimeField feeds the normalized time into the MLP and predicts the
deltas directly with no basis at all.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .scene import GaussianSet, as_tensor


@dataclass
class SceneNormalizer:
    center: torch.Tensor  # (3,)
    half_extent: torch.Tensor  # (3,), > 0 per axis
    margin: float = 1.05


def fit_normalizer(cameras, margin=1.05) -> SceneNormalizer:
    """Fit the normalization box to the range of the camera centers."""
    if len(cameras) < 2:
        raise ValueError("need at least 2 cameras to fit a normalizer")
    centers = torch.stack([c.center().double() for c in cameras])
    lo = centers.min(dim=0).values
    hi = centers.max(dim=0).values
    if (hi - lo).max() <= 0:
        raise ValueError("degenerate camera span: all camera centers coincide")
    half = (margin * (hi - lo) / 2.0).clamp_min(1e-6)
    return SceneNormalizer(center=((lo + hi) / 2.0).float(), half_extent=half.float(), margin=margin)


def fit_normalizer_to_points(points, margin=1.05) -> SceneNormalizer:
    """Alternative fit to a point-cloud extent (the 'normalize by points'
    ablation); same box construction, different source of the range."""
    pts = as_tensor(points, torch.float64)
    lo = pts.min(dim=0).values
    hi = pts.max(dim=0).values
    if (hi - lo).max() <= 0:
        raise ValueError("degenerate point span")
    half = (margin * (hi - lo) / 2.0).clamp_min(1e-6)
    return SceneNormalizer(center=((lo + hi) / 2.0).float(), half_extent=half.float(), margin=margin)


def normalize_position(p, normalizer: SceneNormalizer):
    """((p - center) / half_extent) clamped to [-1, 1] componentwise."""
    p = p if isinstance(p, torch.Tensor) else as_tensor(p)
    center = normalizer.center.to(p.dtype)
    half = normalizer.half_extent.to(p.dtype)
    return ((p - center) / half).clamp(-1.0, 1.0)


class TriplaneEncoder(nn.Module):
    """Three axis-aligned feature planes sampled bilinearly and concatenated.

    Planes are (R, R, C); [-1, 1] maps to texel centers with edge clamping,
    so constant planes produce constant features everywhere.
    """

    def __init__(self, resolution=128, channels=16, generator=None, dtype=torch.float32):
        super().__init__()
        self.resolution = resolution
        self.channels = channels
        for name in ("plane_xy", "plane_xz", "plane_yz"):
            init = (torch.rand(resolution, resolution, channels, generator=generator, dtype=dtype) * 2 - 1) * 1e-4
            self.register_parameter(name, nn.Parameter(init))

    def _sample(self, plane, u, v):
        r = self.resolution
        gu = ((u + 1.0) * 0.5 * r - 0.5).clamp(0.0, r - 1.0)
        gv = ((v + 1.0) * 0.5 * r - 0.5).clamp(0.0, r - 1.0)
        u0 = gu.floor().long().clamp(max=r - 1)
        v0 = gv.floor().long().clamp(max=r - 1)
        u1 = (u0 + 1).clamp(max=r - 1)
        v1 = (v0 + 1).clamp(max=r - 1)
        fu = (gu - u0.to(gu.dtype)).unsqueeze(-1)
        fv = (gv - v0.to(gv.dtype)).unsqueeze(-1)
        p00 = plane[u0, v0]
        p01 = plane[u0, v1]
        p10 = plane[u1, v0]
        p11 = plane[u1, v1]
        return (
            p00 * (1 - fu) * (1 - fv)
            + p01 * (1 - fu) * fv
            + p10 * fu * (1 - fv)
            + p11 * fu * fv
        )

    def forward(self, p_norm):
        """(N, 3) in [-1, 1]^3 -> (N, 3 * channels)."""
        x, y, z = p_norm.unbind(-1)
        return torch.cat(
            [
                self._sample(self.plane_xy.to(p_norm.dtype), x, y),
                self._sample(self.plane_xz.to(p_norm.dtype), x, z),
                self._sample(self.plane_yz.to(p_norm.dtype), y, z),
            ],
            dim=-1,
        )


class CoefficientNet(nn.Module):
    """Two hidden ReLU layers; the output layer is zero-initialized so a
    fresh field predicts exactly zero coefficients."""

    def __init__(self, in_features, out_features, hidden=64, generator=None, dtype=torch.float32):
        super().__init__()
        sizes = [(in_features, hidden), (hidden, hidden), (hidden, out_features)]
        layers = []
        for li, (fin, fout) in enumerate(sizes):
            lin = nn.Linear(fin, fout, dtype=dtype)
            with torch.no_grad():
                if li == len(sizes) - 1:
                    lin.weight.zero_()
                    lin.bias.zero_()
                else:
                    bound = 1.0 / math.sqrt(fin)
                    lin.weight.copy_((torch.rand(fout, fin, generator=generator, dtype=dtype) * 2 - 1) * bound)
                    lin.bias.copy_((torch.rand(fout, generator=generator, dtype=dtype) * 2 - 1) * bound)
            layers.append(lin)
        self.layers = nn.ModuleList(layers)

    @property
    def layer_sizes(self):
        return [(l.in_features, l.out_features) for l in self.layers]

    def forward(self, features):
        h = features
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        return self.layers[-1](h)


@dataclass
class DCTBasis:
    """Cosine basis over the time axis: entry (t, k) holds
    sqrt(2 / (K + 1)) * cos(pi / (2T) * (2t + 1) * (k + 1)) for k = 0..K-1.
    The constant term is deliberately absent; canonical positions absorb the
    trajectory mean."""

    K: int
    T: int
    table: torch.Tensor  # (T, K) float64

    @classmethod
    def create(cls, total_frames, k_fraction=0.25, k=None):
        if k is None:
            k = max(1, math.ceil(k_fraction * total_frames))
        table = torch.stack([basis_row(float(t), k, total_frames) for t in range(total_frames)])
        return cls(K=k, T=total_frames, table=table)

    def row(self, t):
        """Basis values at (possibly non-integer, possibly >= T) time t."""
        return basis_row(float(t), self.K, self.T)


def basis_row(t: float, k: int, total_frames: int) -> torch.Tensor:
    ks = torch.arange(1, k + 1, dtype=torch.float64)
    return math.sqrt(2.0 / (k + 1)) * torch.cos(math.pi / (2.0 * total_frames) * (2.0 * t + 1.0) * ks)


def eval_trajectory(phi_row, basis: DCTBasis, t) -> float:
    """Scalar trajectory value sum_k phi_k * basis_k(t)."""
    phi = as_tensor(phi_row, torch.float64)
    return float(phi @ basis.row(t))


def fit_coefficients_lsq(samples, basis: DCTBasis):
    """Least-squares fit of basis coefficients to (t, value) samples.

    Returns (phi, residual); raises on rank deficiency with the achieved rank.
    """
    ts = [t for t, _ in samples]
    vals = np.asarray([v for _, v in samples], dtype=np.float64)
    if len(ts) < basis.K:
        raise ValueError(f"need at least K={basis.K} samples, got {len(ts)}")
    a = np.stack([basis.row(t).numpy() for t in ts])
    phi, _, rank, _ = np.linalg.lstsq(a, vals, rcond=None)
    if rank < basis.K:
        raise ValueError(f"rank-deficient system: rank {rank} < K {basis.K}")
    residual = float(np.linalg.norm(a @ phi - vals))
    return phi, residual


@dataclass
class DeformedState:
    """Per-Gaussian deltas at a single time."""

    delta_positions: torch.Tensor  # (N, 3)
    delta_rotations: torch.Tensor  # (N, 4), applied to raw quaternions pre-normalization
    time: float

    def apply(self, gaussians: GaussianSet):
        """Absolute (positions, raw rotations) for the rasterizer override."""
        return (
            gaussians.positions + self.delta_positions,
            gaussians.rotation_params + self.delta_rotations,
        )


class ActivationMeter:
    """Counts Gaussian rows whose encoder/MLP activations are currently
    retained for backprop; the two-pass trainer asserts the peak stays
    within the chunk budget."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def add(self, n):
        self.current += n
        self.peak = max(self.peak, self.current)

    def release(self):
        self.current = 0

    def reset(self):
        self.current = 0
        self.peak = 0


class FieldBase(nn.Module):
    """Shared surface of the motion-field variants: per-row delta evaluation,
    full-set deformation and the activation meter."""

    def __init__(self, normalizer: SceneNormalizer):
        super().__init__()
        self.normalizer = normalizer
        self.meter = ActivationMeter()

    def _track(self, n_rows):
        if torch.is_grad_enabled() and any(p.requires_grad for p in self.parameters()):
            self.meter.add(n_rows)

    def deltas_at(self, positions, t, rows=None):
        """((M, 3) translation, (M, 4) rotation) deltas for a row subset.

        positions are the canonical centers of those rows; `rows` carries
        their indices for variants keyed by identity rather than position.
        """
        raise NotImplementedError

    def deform(self, gaussians: GaussianSet, t) -> DeformedState:
        dpos, drot = self.deltas_at(gaussians.positions, t,
                                    rows=torch.arange(gaussians.count))
        return DeformedState(delta_positions=dpos, delta_rotations=drot, time=float(t))

    def deformed_pose(self, gaussians: GaussianSet, t):
        return self.deform(gaussians, t).apply(gaussians)

    def plane_parameters(self):
        return []

    def net_parameters(self):
        return []


class MotionField(FieldBase):
    """Normalizer + triplane encoder + coefficient MLP + DCT basis."""

    def __init__(self, normalizer: SceneNormalizer, basis: DCTBasis, plane_resolution=128,
                 plane_channels=16, hidden=64, seed=0, dtype=torch.float32):
        super().__init__(normalizer)
        gen = torch.Generator().manual_seed(seed)
        self.basis = basis
        self.encoder = TriplaneEncoder(plane_resolution, plane_channels, generator=gen, dtype=dtype)
        self.net = CoefficientNet(3 * plane_channels, 7 * basis.K, hidden=hidden,
                                  generator=gen, dtype=dtype)

    def coefficients_at(self, positions):
        """(M, 3) world positions -> (M, 7, K) coefficients."""
        self._track(positions.shape[0])
        p_norm = normalize_position(positions, self.normalizer)
        return self.net(self.encoder(p_norm)).view(-1, 7, self.basis.K)

    def deltas_at(self, positions, t, rows=None):
        phi = self.coefficients_at(positions)
        b = self.basis.row(t).to(phi.dtype)
        delta = phi @ b
        return delta[:, :3], delta[:, 3:]

    def plane_parameters(self):
        return list(self.encoder.parameters())

    def net_parameters(self):
        return list(self.net.parameters())


class DirectCoefficientField(FieldBase):
    """Ablation 'no trajectory MLP': one optimizable coefficient row per
    Gaussian, still combined through the DCT basis."""

    def __init__(self, n_gaussians, normalizer: SceneNormalizer, basis: DCTBasis,
                 dtype=torch.float32):
        super().__init__(normalizer)
        self.basis = basis
        self.phi = nn.Parameter(torch.zeros(n_gaussians, 7, basis.K, dtype=dtype))

    def deltas_at(self, positions, t, rows=None):
        phi = self.phi if rows is None else self.phi[rows]
        self._track(phi.shape[0])
        delta = phi @ self.basis.row(t).to(phi.dtype)
        return delta[:, :3], delta[:, 3:]

    def plane_parameters(self):
        return [self.phi]


class DirectTimeField(FieldBase):
    """Ablation 'no DCT transform': the MLP sees (features, t / T) and
    predicts the 7 deltas directly, with no basis to extrapolate through."""

    def __init__(self, normalizer: SceneNormalizer, total_frames, plane_resolution=128,
                 plane_channels=16, hidden=64, seed=0, dtype=torch.float32):
        super().__init__(normalizer)
        gen = torch.Generator().manual_seed(seed)
        self.total_frames = total_frames
        self.encoder = TriplaneEncoder(plane_resolution, plane_channels, generator=gen, dtype=dtype)
        self.net = CoefficientNet(3 * plane_channels + 1, 7, hidden=hidden,
                                  generator=gen, dtype=dtype)

    def deltas_at(self, positions, t, rows=None):
        self._track(positions.shape[0])
        feats = self.encoder(normalize_position(positions, self.normalizer))
        t_col = torch.full((positions.shape[0], 1), float(t) / self.total_frames,
                           dtype=feats.dtype)
        delta = self.net(torch.cat([feats, t_col], dim=-1))
        return delta[:, :3], delta[:, 3:]

    def plane_parameters(self):
        return list(self.encoder.parameters())

    def net_parameters(self):
        return list(self.net.parameters())


def build_motion_field(cameras_or_normalizer, total_frames, config, seed=None) -> MotionField:
    """Convenience constructor wiring camera-range normalization, basis size
    K = ceil(k_fraction * T) and the configured plane/MLP dimensions."""
    if isinstance(cameras_or_normalizer, SceneNormalizer):
        normalizer = cameras_or_normalizer
    else:
        normalizer = fit_normalizer(cameras_or_normalizer, margin=config.normalizer_margin)
    basis = DCTBasis.create(total_frames, k_fraction=config.k_fraction)
    return MotionField(
        normalizer,
        basis,
        plane_resolution=config.plane_resolution,
        plane_channels=config.plane_channels,
        hidden=config.hidden_width,
        seed=config.seed if seed is None else seed,
    )
