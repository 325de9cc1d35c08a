"""Differentiable forward splatting of a GaussianSet into color/depth/alpha images.

The renderer projects every Gaussian (EWA first-order covariance transform),
depth-sorts once, buckets footprints into 16x16 tiles and composites
front-to-back. A pixel (row y, col x) is sampled at continuous image
coordinates (x, y).

Per-pixel opacity is alpha_i = sigmoid(opacity_logit_i) * m_i * exp(-0.5 d^T
cov2d^-1 d) where m_i is the straight-through binarized pruning mask (hard
value forward, logistic gradient backward). Contributions with alpha < 1/255
are skipped and compositing stops once the transmittance falls below 1e-4.
Gaussians contribute only inside their square footprint |px - mean2d| <=
radius_px with radius_px = ceil(3 sqrt(max eigenvalue of cov2d)).

Two interchangeable compositing backends implement the same math: a numba
kernel pair (forward + hand-derived adjoint, the default) and a pure-torch
padded-tile program kept as a fallback and as a cross-check in the tests.
render_reference is a third, naive float64 numpy implementation with a
global per-pixel depth sort and no tiling; it is the equivalence oracle.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import _composite
from .scene import SH_C0, SH_C1, Camera, GaussianSet, covariance_matrices

SKIP_ALPHA = 1.0 / 255.0
MIN_TRANSMITTANCE = 1e-4
COV_DILATION = 0.3
RADIUS_SIGMA = 3.0
MASK_BINARIZE = 0.01
TILE_SIZE = 16

_TILE_CACHE = {}
_BACKEND = "auto"


def set_composite_backend(name):
    """Select the compositing core: "numba", "torch" or "auto"."""
    if name not in ("numba", "torch", "auto"):
        raise ValueError(f"unknown backend {name!r}")
    global _BACKEND
    _BACKEND = name


def active_backend():
    if _BACKEND == "auto":
        return "numba" if _composite.HAVE_NUMBA else "torch"
    if _BACKEND == "numba" and not _composite.HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    return _BACKEND


@dataclass
class Projected2D:
    mean2d: torch.Tensor  # (N, 2) pixel coordinates
    cov2d: torch.Tensor  # (N, 3) upper-triangular entries (a, b, c)
    depth_cam: torch.Tensor  # (N,) camera-space z
    radius_px: torch.Tensor  # (N,) int64
    valid: torch.Tensor  # (N,) bool: in front of the camera and on screen


@dataclass
class Contributors:
    """Per-pixel compositing records in front-to-back order (CSR layout) plus
    the set of Gaussians that touched any pixel. "set" mode fills only
    unique_indices."""

    offsets: Optional[torch.Tensor]  # (H*W + 1,) int64
    indices: Optional[torch.Tensor]  # (M,) gaussian indices
    alphas: Optional[torch.Tensor]  # (M,) per-pixel alpha values
    width: int
    unique_indices: torch.Tensor  # sorted unique gaussian indices

    def at(self, y, x):
        pid = y * self.width + x
        lo, hi = int(self.offsets[pid]), int(self.offsets[pid + 1])
        return list(zip(self.indices[lo:hi].tolist(), self.alphas[lo:hi].tolist()))


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    alpha: torch.Tensor  # (H, W)
    contributors: Optional[Contributors] = None


def evaluate_colors(colors, positions, camera: Camera):
    """Per-Gaussian RGB from SH coefficients (degree 0 or 1), clamped at 0."""
    c0 = colors[:, :, 0]
    rgb = 0.5 + SH_C0 * c0
    if colors.shape[2] > 1:
        center = camera.center().to(positions.dtype)
        d = positions - center
        d = d / d.norm(dim=1, keepdim=True).clamp_min(1e-12)
        x, y, z = d.unbind(-1)
        rgb = rgb - SH_C1 * y[:, None] * colors[:, :, 1] \
                  + SH_C1 * z[:, None] * colors[:, :, 2] \
                  - SH_C1 * x[:, None] * colors[:, :, 3]
    return rgb.clamp_min(0.0)


def _project_arrays(positions, rotation_params, log_scales, camera: Camera, near_clip):
    dtype = positions.dtype
    rot_w2c = camera.rotation_w2c.to(dtype)
    t_w2c = camera.translation_w2c.to(dtype)
    p_cam = positions @ rot_w2c.T + t_w2c
    x, y, z = p_cam.unbind(-1)
    z_safe = torch.where(z > near_clip, z, torch.full_like(z, near_clip))

    mean2d = torch.stack([camera.fx * (x / z_safe) + camera.cx,
                          camera.fy * (y / z_safe) + camera.cy], dim=-1)

    cov3d = covariance_matrices(rotation_params, log_scales)
    inv_z = 1.0 / z_safe
    zeros = torch.zeros_like(z)
    j_row0 = torch.stack([camera.fx * inv_z, zeros, -camera.fx * x * inv_z * inv_z], dim=-1)
    j_row1 = torch.stack([zeros, camera.fy * inv_z, -camera.fy * y * inv_z * inv_z], dim=-1)
    jac = torch.stack([j_row0, j_row1], dim=-2)  # (N, 2, 3)
    m = jac @ rot_w2c
    cov2d_full = m @ cov3d @ m.transpose(1, 2)
    a = cov2d_full[:, 0, 0] + COV_DILATION
    b = cov2d_full[:, 0, 1]
    c = cov2d_full[:, 1, 1] + COV_DILATION

    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt((mid * mid - det).clamp_min(0.0))
    radius = torch.ceil(RADIUS_SIGMA * torch.sqrt(lam_max)).long()

    in_front = z > near_clip
    r = radius.to(dtype)
    on_screen = (
        (mean2d[:, 0] + r >= 0)
        & (mean2d[:, 0] - r <= camera.width - 1)
        & (mean2d[:, 1] + r >= 0)
        & (mean2d[:, 1] - r <= camera.height - 1)
    )
    return Projected2D(
        mean2d=mean2d,
        cov2d=torch.stack([a, b, c], dim=-1),
        depth_cam=z,
        radius_px=radius,
        valid=in_front & on_screen,
    )


def project(gaussians: GaussianSet, camera: Camera, near_clip=0.01) -> Projected2D:
    """Perspective projection of all Gaussians with the EWA covariance transform."""
    return _project_arrays(gaussians.positions, gaussians.rotation_params,
                           gaussians.log_scales, camera, near_clip)


def _tile_grid(height, width, tile_size, dtype):
    """Cached per-tile pixel coordinate grids for the torch backend. Pixels of
    edge tiles outside the image get a large sentinel coordinate so every
    footprint test rejects them."""
    key = (height, width, tile_size, dtype)
    if key not in _TILE_CACHE:
        ntx = (width + tile_size - 1) // tile_size
        nty = (height + tile_size - 1) // tile_size
        dy, dx = torch.meshgrid(torch.arange(tile_size), torch.arange(tile_size), indexing="ij")
        dy = dy.reshape(-1)
        dx = dx.reshape(-1)
        tiles_y = torch.arange(nty).repeat_interleave(ntx)
        tiles_x = torch.arange(ntx).repeat(nty)
        py = tiles_y[:, None] * tile_size + dy[None, :]  # (n_tiles, P)
        px = tiles_x[:, None] * tile_size + dx[None, :]
        inside = (px < width) & (py < height)
        sentinel = torch.tensor(-32768.0, dtype=dtype)
        coord_x = torch.where(inside, px.to(dtype), sentinel)
        coord_y = torch.where(inside, py.to(dtype), sentinel)
        _TILE_CACHE[key] = (coord_x, coord_y)
    return _TILE_CACHE[key]


def _mask_ste(mask_logits, threshold):
    soft = torch.sigmoid(mask_logits)
    hard = (soft >= threshold).to(mask_logits.dtype)
    return hard + soft - soft.detach()


def render_arrays(positions, rotation_params, log_scales, opacity_logits, colors, mask_logits,
                  camera: Camera, *, background=None, record_contributors=None,
                  skip_threshold=SKIP_ALPHA, min_transmittance=MIN_TRANSMITTANCE,
                  near_clip=0.01, mask_threshold=MASK_BINARIZE, tile_size=TILE_SIZE) -> RenderOutput:
    """Tensor-level renderer; `render` and the trainers build on this.

    record_contributors: None, "set" (unique indices only) or "pixels"
    (full per-pixel CSR records).
    """
    if record_contributors not in (None, "set", "pixels"):
        raise ValueError(f"unknown contributor mode: {record_contributors}")
    dtype = positions.dtype
    height, width = camera.height, camera.width
    if background is None:
        background = torch.zeros(3, dtype=dtype)
    else:
        background = torch.as_tensor(background, dtype=dtype)

    def _background_only():
        color = background.expand(height, width, 3).clone()
        contrib = None
        if record_contributors is not None:
            contrib = Contributors(
                offsets=torch.zeros(height * width + 1, dtype=torch.int64),
                indices=torch.zeros(0, dtype=torch.int64),
                alphas=torch.zeros(0, dtype=dtype),
                width=width,
                unique_indices=torch.zeros(0, dtype=torch.int64),
            )
        return RenderOutput(
            color=color,
            depth=torch.zeros(height, width, dtype=dtype),
            alpha=torch.zeros(height, width, dtype=dtype),
            contributors=contrib,
        )

    n = positions.shape[0]
    if n == 0:
        return _background_only()

    proj = _project_arrays(positions, rotation_params, log_scales, camera, near_clip)
    valid_idx = proj.valid.nonzero(as_tuple=True)[0]
    if valid_idx.numel() == 0:
        return _background_only()

    # Global front-to-back order; stable sort keeps index order on depth ties.
    order = valid_idx[torch.argsort(proj.depth_cam[valid_idx], stable=True)]
    m2d = proj.mean2d[order]
    cov = proj.cov2d[order]
    z = proj.depth_cam[order]
    radius = proj.radius_px[order]

    opac = torch.sigmoid(opacity_logits) * _mask_ste(mask_logits, mask_threshold)
    opac = opac[order]
    rgb = evaluate_colors(colors, positions, camera)[order]

    # Cholesky split of the conic so the exponent is two fused squares:
    # 0.5 d^T cov2d^-1 d = (v1 dx + v2 dy)^2 + (v3 dy)^2.
    ca, cb, cc = cov.unbind(-1)
    det = ca * cc - cb * cb
    v1 = torch.sqrt(0.5 * cc / det)
    v2 = -0.5 * (cb / det) / v1
    v3 = torch.sqrt((0.5 * ca / det - v2 * v2).clamp_min(0.0))
    # Fused per-Gaussian payload: rgb, camera depth, unit alpha mass.
    payload = torch.cat([rgb, z.unsqueeze(-1), torch.ones_like(z).unsqueeze(-1)], dim=-1)

    # Tile bucketing (plain integer bookkeeping, no gradients).
    with torch.no_grad():
        ntx = (width + tile_size - 1) // tile_size
        nty = (height + tile_size - 1) // tile_size
        r_f = radius.to(dtype)
        c0 = torch.ceil(m2d[:, 0] - r_f).long().clamp(0, width - 1)
        c1 = torch.floor(m2d[:, 0] + r_f).long().clamp(0, width - 1)
        r0 = torch.ceil(m2d[:, 1] - r_f).long().clamp(0, height - 1)
        r1 = torch.floor(m2d[:, 1] + r_f).long().clamp(0, height - 1)
        nonempty = (torch.floor(m2d[:, 0] + r_f) >= 0) & (torch.ceil(m2d[:, 0] - r_f) <= width - 1) \
            & (torch.floor(m2d[:, 1] + r_f) >= 0) & (torch.ceil(m2d[:, 1] - r_f) <= height - 1)
        tx0, tx1 = c0 // tile_size, c1 // tile_size
        ty0, ty1 = r0 // tile_size, r1 // tile_size
        spanx = torch.where(nonempty, tx1 - tx0 + 1, torch.zeros_like(tx0))
        spany = torch.where(nonempty, ty1 - ty0 + 1, torch.zeros_like(ty0))
        counts = spanx * spany
        total = int(counts.sum())
        if total == 0:
            return _background_only()
        rank = torch.repeat_interleave(torch.arange(order.numel()), counts)
        starts = torch.cumsum(counts, 0) - counts
        ordinal = torch.arange(total) - starts[rank]
        tile_x = tx0[rank] + ordinal % spanx[rank]
        tile_y = ty0[rank] + ordinal // spanx[rank]
        tile_id = tile_y * ntx + tile_x
        perm = torch.argsort(tile_id, stable=True)
        tile_sorted = tile_id[perm]
        rank_sorted = rank[perm]
        occ_tiles, occ_counts = torch.unique_consecutive(tile_sorted, return_counts=True)
        n_occ = occ_tiles.numel()

    p = tile_size * tile_size
    flat_out = torch.zeros(ntx * nty, p, 5, dtype=dtype)
    alpha_parts = None  # per-pixel records: list of (rank, pid, alpha)

    if active_backend() == "numba":
        tile_starts = np.zeros(n_occ + 1, dtype=np.int64)
        np.cumsum(occ_counts.numpy(), out=tile_starts[1:])
        tile_x0 = ((occ_tiles % ntx) * tile_size).numpy()
        tile_y0 = ((occ_tiles // ntx) * tile_size).numpy()
        mx_p = m2d[:, 0][rank_sorted]
        my_p = m2d[:, 1][rank_sorted]
        v1_p = v1[rank_sorted]
        v2_p = v2[rank_sorted]
        v3_p = v3[rank_sorted]
        opac_p = opac[rank_sorted]
        payload_p = payload[rank_sorted]
        r_p = radius[rank_sorted].to(dtype)
        tile_out, touched_pairs = _composite.composite_pairs(
            mx_p, my_p, v1_p, v2_p, v3_p, opac_p, payload_p, r_p,
            tile_starts, tile_x0, tile_y0, tile_size, width, height,
            skip_threshold, min_transmittance)
        flat_out[occ_tiles] = tile_out
        touched_ranks = rank_sorted[touched_pairs.bool()]
        if record_contributors == "pixels":
            amap = _composite.alpha_records(
                mx_p, my_p, v1_p, v2_p, v3_p, opac_p, r_p,
                tile_starts, tile_x0, tile_y0, tile_size, width, height,
                skip_threshold, min_transmittance)
            pair_i, pix_i = amap.nonzero(as_tuple=True)
            tile_of_pair = torch.from_numpy(np.repeat(np.arange(n_occ), np.diff(tile_starts)))
            t_i = tile_of_pair[pair_i]
            pid = (torch.from_numpy(tile_y0)[t_i] + pix_i // tile_size) * width \
                + torch.from_numpy(tile_x0)[t_i] + pix_i % tile_size
            alpha_parts = [(rank_sorted[pair_i], pid, amap[pair_i, pix_i])]
    else:
        with torch.no_grad():
            row_of_pair = torch.repeat_interleave(torch.arange(n_occ), occ_counts)
            col_of_pair = torch.arange(total) - (torch.cumsum(occ_counts, 0) - occ_counts)[row_of_pair]
            # Bucket occupied tiles by count (rounded up to a power of two) so
            # padded tensors stay near the true pair total even when a few
            # tiles are much denser than the rest.
            caps = torch.clamp(2 ** torch.ceil(torch.log2(occ_counts.to(torch.float64))).long(), min=8)
        coord_x, coord_y = _tile_grid(height, width, tile_size, dtype)
        touched_rows = []
        if record_contributors == "pixels":
            alpha_parts = []

        for cap in torch.unique(caps).tolist():
            tile_sel = (caps == cap).nonzero(as_tuple=True)[0]
            with torch.no_grad():
                local_row = torch.full((n_occ,), -1, dtype=torch.int64)
                local_row[tile_sel] = torch.arange(tile_sel.numel())
                pair_sel = (local_row[row_of_pair] >= 0).nonzero(as_tuple=True)[0]
                rank_mat = torch.full((tile_sel.numel(), cap), -1, dtype=torch.int64)
                rank_mat[local_row[row_of_pair[pair_sel]], col_of_pair[pair_sel]] = rank_sorted[pair_sel]
                member = rank_mat >= 0
                safe_rank = rank_mat.clamp_min(0)
                tiles_here = occ_tiles[tile_sel]

            px = coord_x[tiles_here].unsqueeze(1)  # (Tb, 1, P)
            py = coord_y[tiles_here].unsqueeze(1)
            g_mx = m2d[:, 0][safe_rank].unsqueeze(-1)  # (Tb, R, 1)
            g_my = m2d[:, 1][safe_rank].unsqueeze(-1)
            g_v1 = v1[safe_rank].unsqueeze(-1)
            g_v2 = v2[safe_rank].unsqueeze(-1)
            g_v3 = v3[safe_rank].unsqueeze(-1)
            g_r = radius[safe_rank].to(dtype).unsqueeze(-1)
            g_opac = (opac[safe_rank] * member).unsqueeze(-1)  # padded rows muted
            g_payload = payload[safe_rank]  # (Tb, R, 5)

            dx = px - g_mx  # (Tb, R, P)
            dy = py - g_my
            t1 = g_v1 * dx + g_v2 * dy
            t2 = g_v3 * dy
            alpha = g_opac * torch.exp(-(t1 * t1 + t2 * t2))
            inside = (dx.abs() <= g_r) & (dy.abs() <= g_r) & (alpha >= skip_threshold)
            atilde = alpha * inside
            trans = torch.cumprod(1.0 - atilde, dim=1)
            t_excl = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
            weight = atilde * t_excl * (t_excl >= min_transmittance)

            flat_out[tiles_here] = torch.bmm(weight.transpose(1, 2), g_payload)

            with torch.no_grad():
                contributing = weight > 0
                touched_rows.append(rank_mat[contributing.any(dim=2)])
                if record_contributors == "pixels":
                    t_i, r_i, p_i = contributing.nonzero(as_tuple=True)
                    tid = tiles_here[t_i]
                    pid = (tid // ntx) * tile_size * width + (tid % ntx) * tile_size \
                        + (p_i // tile_size) * width + p_i % tile_size
                    alpha_parts.append((rank_mat[t_i, r_i], pid, alpha[t_i, r_i, p_i]))
        touched_ranks = torch.cat(touched_rows) if touched_rows else torch.zeros(0, dtype=torch.int64)

    img = flat_out.view(nty, ntx, tile_size, tile_size, 5)
    full = img.permute(0, 2, 1, 3, 4).reshape(nty * tile_size, ntx * tile_size, 5)
    out = full[:height, :width]
    color = out[..., 0:3]
    depth = out[..., 3]
    alpha_img = out[..., 4]
    color = color + (1.0 - alpha_img).unsqueeze(-1) * background

    contributors = None
    if record_contributors == "set":
        contributors = Contributors(offsets=None, indices=None, alphas=None,
                                    width=width, unique_indices=order[touched_ranks].unique())
    elif record_contributors == "pixels":
        with torch.no_grad():
            if alpha_parts:
                ranks = torch.cat([part[0] for part in alpha_parts])
                pids = torch.cat([part[1] for part in alpha_parts])
                a_vals = torch.cat([part[2] for part in alpha_parts])
            else:
                ranks = torch.zeros(0, dtype=torch.int64)
                pids = torch.zeros(0, dtype=torch.int64)
                a_vals = torch.zeros(0, dtype=dtype)
            key = pids * (order.numel() + 1) + ranks
            sort_i = torch.argsort(key, stable=True)
            pids = pids[sort_i]
            offsets = torch.zeros(height * width + 1, dtype=torch.int64)
            offsets[1:] = torch.cumsum(torch.bincount(pids, minlength=height * width), 0)
            contributors = Contributors(
                offsets=offsets,
                indices=order[ranks[sort_i]],
                alphas=a_vals[sort_i].detach(),
                width=width,
                unique_indices=order[touched_ranks].unique(),
            )

    return RenderOutput(color=color, depth=depth, alpha=alpha_img, contributors=contributors)


def _resolve_overrides(gaussians: GaussianSet, overrides):
    if overrides is None:
        return gaussians.positions, gaussians.rotation_params
    positions, rotations = overrides
    return positions, rotations


def render(gaussians: GaussianSet, camera: Camera, overrides=None, **kwargs) -> RenderOutput:
    """Composite the set into color/depth/alpha images (front-to-back).

    overrides, when given, is a (positions, raw rotations) pair replacing the
    canonical pose, e.g. the output of MotionField.deformed_pose.
    """
    positions, rotations = _resolve_overrides(gaussians, overrides)
    return render_arrays(positions, rotations, gaussians.log_scales, gaussians.opacity_logits,
                         gaussians.colors, gaussians.mask_logits, camera, **kwargs)


@dataclass
class ParameterGradients:
    positions: torch.Tensor
    rotation_params: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor
    mask_logits: torch.Tensor
    override_positions: Optional[torch.Tensor] = None
    override_rotations: Optional[torch.Tensor] = None


def render_backward(gaussians: GaussianSet, camera: Camera, output: RenderOutput,
                    grad_color, grad_depth=None, overrides=None, **kwargs) -> ParameterGradients:
    """Gradients of <grad_color, color> + <grad_depth, depth> for every
    parameter class (and the overrides when supplied)."""
    grad_color = torch.as_tensor(grad_color, dtype=output.color.dtype)
    if grad_color.shape != output.color.shape:
        raise ValueError(f"mismatched shapes: grad_color {tuple(grad_color.shape)} "
                         f"vs color {tuple(output.color.shape)}")
    if grad_depth is not None:
        grad_depth = torch.as_tensor(grad_depth, dtype=output.depth.dtype)
        if grad_depth.shape != output.depth.shape:
            raise ValueError(f"mismatched shapes: grad_depth {tuple(grad_depth.shape)} "
                             f"vs depth {tuple(output.depth.shape)}")

    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in gaussians.tensors().items()}
    ov_leaves = None
    if overrides is not None:
        ov_leaves = tuple(t.detach().clone().requires_grad_(True) for t in overrides)

    out = render_arrays(
        ov_leaves[0] if ov_leaves else leaves["positions"],
        ov_leaves[1] if ov_leaves else leaves["rotation_params"],
        leaves["log_scales"], leaves["opacity_logits"], leaves["colors"], leaves["mask_logits"],
        camera, **kwargs,
    )
    loss = (out.color * grad_color).sum()
    if grad_depth is not None:
        loss = loss + (out.depth * grad_depth).sum()

    targets = list(leaves.values()) + (list(ov_leaves) if ov_leaves else [])
    grads = torch.autograd.grad(loss, targets, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(t) for g, t in zip(grads, targets)]
    named = dict(zip(leaves.keys(), grads[: len(leaves)]))
    result = ParameterGradients(**named)
    if ov_leaves:
        result.override_positions, result.override_rotations = grads[len(leaves):]
    return result


def render_reference(gaussians: GaussianSet, camera: Camera, overrides=None, *,
                     background=None, skip_threshold=SKIP_ALPHA,
                     min_transmittance=MIN_TRANSMITTANCE, near_clip=0.01,
                     mask_threshold=MASK_BINARIZE) -> RenderOutput:
    """Naive per-pixel compositing oracle: float64 numpy, global depth sort,
    no tiling. Same footprint/skip/termination rules as render, so the two
    agree to floating-point tolerance."""
    if gaussians.count > 10000:
        raise ValueError("render_reference is O(N) per pixel; N must be <= 10000")
    positions, rotations = _resolve_overrides(gaussians, overrides)
    pos = positions.detach().double().numpy()
    rot = rotations.detach().double().numpy()
    n = pos.shape[0]
    height, width = camera.height, camera.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)

    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    alpha_img = np.zeros((height, width))
    trans = np.ones((height, width))

    if n > 0:
        norm = np.maximum(np.linalg.norm(rot, axis=1, keepdims=True), 1e-12)
        q = rot / norm
        w, x, y, zq = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        rmat = np.empty((n, 3, 3))
        rmat[:, 0, 0] = 1 - 2 * (y * y + zq * zq)
        rmat[:, 0, 1] = 2 * (x * y - w * zq)
        rmat[:, 0, 2] = 2 * (x * zq + w * y)
        rmat[:, 1, 0] = 2 * (x * y + w * zq)
        rmat[:, 1, 1] = 1 - 2 * (x * x + zq * zq)
        rmat[:, 1, 2] = 2 * (y * zq - w * x)
        rmat[:, 2, 0] = 2 * (x * zq - w * y)
        rmat[:, 2, 1] = 2 * (y * zq + w * x)
        rmat[:, 2, 2] = 1 - 2 * (x * x + y * y)
        var = np.exp(2.0 * gaussians.log_scales.detach().double().numpy())
        cov3 = np.einsum("nij,nj,nkj->nik", rmat, var, rmat)

        rw2c = camera.rotation_w2c.detach().double().numpy()
        tw2c = camera.translation_w2c.detach().double().numpy()
        p_cam = pos @ rw2c.T + tw2c
        zc = p_cam[:, 2]

        opac = 1.0 / (1.0 + np.exp(-gaussians.opacity_logits.detach().double().numpy()))
        mask_soft = 1.0 / (1.0 + np.exp(-gaussians.mask_logits.detach().double().numpy()))
        opac = opac * (mask_soft >= mask_threshold)

        sh = gaussians.colors.detach().double().numpy()
        rgb = 0.5 + SH_C0 * sh[:, :, 0]
        if sh.shape[2] > 1:
            cam_center = camera.center().detach().double().numpy()
            d = pos - cam_center
            d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
            rgb = rgb - SH_C1 * d[:, 1:2] * sh[:, :, 1] \
                      + SH_C1 * d[:, 2:3] * sh[:, :, 2] \
                      - SH_C1 * d[:, 0:1] * sh[:, :, 3]
        rgb = np.maximum(rgb, 0.0)

        order = np.lexsort((np.arange(n), zc))
        for g in order:
            if zc[g] <= near_clip:
                continue
            mx = camera.fx * (p_cam[g, 0] / zc[g]) + camera.cx
            my = camera.fy * (p_cam[g, 1] / zc[g]) + camera.cy
            jac = np.array([
                [camera.fx / zc[g], 0.0, -camera.fx * p_cam[g, 0] / zc[g] ** 2],
                [0.0, camera.fy / zc[g], -camera.fy * p_cam[g, 1] / zc[g] ** 2],
            ])
            m = jac @ rw2c
            c2 = m @ cov3[g] @ m.T
            a = c2[0, 0] + COV_DILATION
            b = c2[0, 1]
            c = c2[1, 1] + COV_DILATION
            det = a * c - b * b
            mid = 0.5 * (a + c)
            lam = mid + math.sqrt(max(mid * mid - det, 0.0))
            radius = math.ceil(RADIUS_SIGMA * math.sqrt(lam))

            x0 = max(0, math.ceil(mx - radius))
            x1 = min(width - 1, math.floor(mx + radius))
            y0 = max(0, math.ceil(my - radius))
            y1 = min(height - 1, math.floor(my + radius))
            if x0 > x1 or y0 > y1:
                continue
            xs = np.arange(x0, x1 + 1, dtype=np.float64)
            ys = np.arange(y0, y1 + 1, dtype=np.float64)
            dx = xs[None, :] - mx
            dy = ys[:, None] - my
            inside = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
            quad = 0.5 * (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
            al = opac[g] * np.exp(-quad) * inside
            al = al * (al >= skip_threshold)
            t_win = trans[y0 : y1 + 1, x0 : x1 + 1]
            wgt = al * t_win * (t_win >= min_transmittance)
            color[y0 : y1 + 1, x0 : x1 + 1] += wgt[:, :, None] * rgb[g]
            depth[y0 : y1 + 1, x0 : x1 + 1] += wgt * zc[g]
            alpha_img[y0 : y1 + 1, x0 : x1 + 1] += wgt
            trans[y0 : y1 + 1, x0 : x1 + 1] = t_win * (1.0 - al)

    color += (1.0 - alpha_img)[:, :, None] * bg
    return RenderOutput(
        color=torch.from_numpy(color),
        depth=torch.from_numpy(depth),
        alpha=torch.from_numpy(alpha_img),
        contributors=None,
    )
