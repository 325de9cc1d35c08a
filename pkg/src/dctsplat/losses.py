"""Training losses and image metrics.

Photometric L1 + SSIM, masked depth L2, the pruning-mask sparsity pressure,
the rigid-motion regularizers on a fixed k-NN graph, and PSNR/SSIM metrics.
All losses are differentiable torch functions of their tensor inputs.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from . import quat
from .motion import DeformedState
from .scene import GaussianSet

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

_RESIDUAL_EPS = 1e-20  # inside sqrt: keeps the L2 norm differentiable at zero


def _gaussian_taps(size, sigma, dtype):
    xs = torch.arange(size, dtype=dtype) - size // 2
    w = torch.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _to_nchw(img):
    if img.dim() == 2:
        img = img.unsqueeze(-1)
    return img.permute(2, 0, 1).unsqueeze(0)


def _blur(x, taps):
    # Separable Gaussian window, zero 'same' padding on both axes.
    channels = x.shape[1]
    pad = taps.numel() // 2
    kh = taps.view(1, 1, 1, -1).expand(channels, 1, 1, -1)
    kv = taps.view(1, 1, -1, 1).expand(channels, 1, -1, 1)
    x = F.conv2d(x, kh, padding=(0, pad), groups=channels)
    return F.conv2d(x, kv, padding=(pad, 0), groups=channels)


def ssim(a, b, window_size=SSIM_WINDOW, sigma=SSIM_SIGMA, c1=SSIM_C1, c2=SSIM_C2):
    """Mean SSIM between two images in [0, 1]; (H, W, C) or (H, W)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    x = _to_nchw(a)
    y = _to_nchw(b)
    taps = _gaussian_taps(window_size, sigma, x.dtype)
    mu_x = _blur(x, taps)
    mu_y = _blur(y, taps)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sig_x = _blur(x * x, taps) - mu_xx
    sig_y = _blur(y * y, taps) - mu_yy
    sig_xy = _blur(x * y, taps) - mu_xy
    num = (2.0 * mu_xy + c1) * (2.0 * sig_xy + c2)
    den = (mu_xx + mu_yy + c1) * (sig_x + sig_y + c2)
    return (num / den).mean()


def photometric_loss(rendered, target, lambda_ssim):
    """(1 - l) * mean|r - t| + l * (1 - SSIM(r, t)) / 2."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    l1 = (rendered - target).abs().mean()
    if lambda_ssim == 0.0:
        return l1
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim(rendered, target)) / 2.0


def depth_loss(rendered_depth, target_depth, mask):
    """Mean squared depth error over pixels where mask is True."""
    if rendered_depth.shape != target_depth.shape or rendered_depth.shape != mask.shape:
        raise ValueError("depth/mask shape mismatch")
    if not mask.any():
        warnings.warn("depth loss: empty validity mask", RuntimeWarning)
        return torch.zeros((), dtype=rendered_depth.dtype)
    diff = rendered_depth[mask] - target_depth[mask]
    return (diff * diff).mean()


def mask_loss(mask_logits):
    """Sparsity pressure on the pruning gates: mean logistic value."""
    return torch.sigmoid(mask_logits).mean()


@dataclass
class NeighborGraph:
    """Fixed k-NN structure on canonical positions with Gaussian falloff
    weights w_ij = exp(-lambda_w ||mu_j - mu_i||^2); no self neighbors."""

    indices: torch.Tensor  # (N, k) int64
    weights: torch.Tensor  # (N, k)

    @property
    def k(self):
        return self.indices.shape[1]


def build_neighbor_graph(positions, k_nn=8, lambda_w=2000.0) -> NeighborGraph:
    pos = positions.detach()
    n = pos.shape[0]
    k = min(k_nn, n - 1)
    if k <= 0:
        return NeighborGraph(indices=torch.zeros(n, 0, dtype=torch.int64),
                             weights=torch.zeros(n, 0, dtype=pos.dtype))
    tree = cKDTree(pos.numpy())
    dist, idx = tree.query(pos.numpy(), k=k + 1)
    dist = torch.from_numpy(dist[:, 1:].copy()).to(pos.dtype)
    idx = torch.from_numpy(idx[:, 1:].copy()).long()
    weights = torch.exp(-lambda_w * dist * dist)
    return NeighborGraph(indices=idx, weights=weights)


def _deformed_quats(canonical: GaussianSet, state: DeformedState):
    q0 = quat.normalize(canonical.rotation_params)
    qt = quat.normalize(canonical.rotation_params + state.delta_rotations)
    return q0, qt


def rigidity_loss(canonical: GaussianSet, state: DeformedState, graph: NeighborGraph):
    """Neighbors must follow each Gaussian's local rigid-body transform:
    mean of w_ij ||(mu_jt - mu_it) - R_it R_i0^-1 (mu_j0 - mu_i0)||."""
    if graph.k == 0:
        raise ValueError("empty neighbor graph")
    q0, qt = _deformed_quats(canonical, state)
    rot0 = quat.to_rotation_matrix(q0)
    rott = quat.to_rotation_matrix(qt)
    rel = rott @ rot0.transpose(-1, -2)

    mu0 = canonical.positions
    mut = mu0 + state.delta_positions
    idx = graph.indices
    off0 = mu0[idx] - mu0.unsqueeze(1)
    offt = mut[idx] - mut.unsqueeze(1)
    pred = torch.einsum("nij,nkj->nki", rel, off0)
    resid = torch.sqrt(((offt - pred) ** 2).sum(-1) + _RESIDUAL_EPS)
    return (graph.weights * resid).mean()


def rotation_similarity_loss(canonical: GaussianSet, state: DeformedState, graph: NeighborGraph):
    """Neighboring Gaussians should share the same relative rotation over
    time: mean of w_ij ||q_jt q_j0^-1 - q_it q_i0^-1|| on unit quaternions."""
    if graph.k == 0:
        raise ValueError("empty neighbor graph")
    q0, qt = _deformed_quats(canonical, state)
    rel = quat.multiply(qt, quat.conjugate(q0))  # unit: conjugate == inverse
    diff = rel[graph.indices] - rel.unsqueeze(1)
    resid = torch.sqrt((diff ** 2).sum(-1) + _RESIDUAL_EPS)
    return (graph.weights * resid).mean()


PSNR_CAP = 99.0


def psnr(a, b, cap=PSNR_CAP):
    """10 log10(1 / MSE) for images in [0, 1]; identical images report the cap."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    mse = float(((a - b) ** 2).double().mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def ssim_metric(a, b):
    return float(ssim(torch.as_tensor(a), torch.as_tensor(b)))


def masked_psnr(a, b, mask, cap=PSNR_CAP):
    """PSNR restricted to pixels where mask holds (used for the
    background-region comparison)."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.dim() == a.dim() - 1:
        mask = mask.unsqueeze(-1).expand_as(a)
    sel = mask.reshape(-1)
    diff = (a.reshape(-1)[sel] - b.reshape(-1)[sel]).double()
    if diff.numel() == 0:
        raise ValueError("empty mask")
    mse = float((diff ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))
