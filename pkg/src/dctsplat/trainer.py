"""Staged optimization: static reconstruction with densify/prune, then joint
dynamic training of the motion field under the memory-bounded two-pass scheme.

The static stage optimizes all Gaussian parameter classes with Adam (3DGS
conventions: eps 1e-15, per-class learning rates, positions scaled by the
camera extent). Until `densify_until`, Gaussians with large accumulated
positional gradients are cloned (small ones) or split (large ones, scales
shrunk by 1.6) and opacities are periodically reset; afterwards densification
stops and the learned pruning mask removes rows on a fixed cadence, with the
Adam moment arrays resized in lockstep at every event.

The dynamic stage freezes scales, opacities and masks (colors behind the
`train_colors` flag), builds the rigidity neighbor graph once on canonical
positions, and steps the field and remaining Gaussian parameters jointly.
Each iteration runs two passes: pass 1 deforms every Gaussian without
retaining activations, renders, and records the contributing set plus the
deformed values; pass 2 re-deforms one chunk at a time with retention,
composes the frame with pass-1 values for every other row, and accumulates
gradients chunk by chunk. Cross-row regularizers run through the same
chunked composition, so no more than chunk_size rows ever hold retained
activations (tracked by the field's activation meter).
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import io_formats
from .losses import (build_neighbor_graph, depth_loss, mask_loss, photometric_loss, psnr,
                     rigidity_loss, rotation_similarity_loss)
from .motion import DeformedState, MotionField
from .rasterizer import render, render_arrays
from .scene import Dataset, GaussianSet, TrainConfig, inverse_sigmoid, scene_extent

PARAM_CLASSES = ("positions", "rotation_params", "log_scales",
                 "opacity_logits", "colors", "mask_logits")


@dataclass
class ContributorSet:
    """Sorted unique indices of Gaussians that touched any pixel of a frame."""

    indices: torch.Tensor

    def __len__(self):
        return int(self.indices.numel())

    def chunks(self, chunk_size):
        if chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        return [self.indices[i : i + chunk_size] for i in range(0, len(self), chunk_size)]


class SceneOptimizer:
    """Adam over the GaussianSet fields with row surgery that keeps the
    moment accumulators aligned through densify/prune events."""

    def __init__(self, gaussians: GaussianSet, config: TrainConfig, extent, lr_scale=1.0,
                 trainable=PARAM_CLASSES):
        self.gaussians = gaussians
        lrs = {
            "positions": config.lr_positions * extent,
            "rotation_params": config.lr_rotations,
            "log_scales": config.lr_scales,
            "opacity_logits": config.lr_opacities,
            "colors": config.lr_colors,
            "mask_logits": config.lr_masks,
        }
        groups = []
        for name in PARAM_CLASSES:
            tensor = getattr(gaussians, name)
            if not isinstance(tensor, nn.Parameter):
                tensor = nn.Parameter(tensor.detach().clone())
            tensor.requires_grad_(name in trainable)
            setattr(gaussians, name, tensor)
            if name in trainable:
                groups.append({"params": [tensor], "lr": lrs[name] * lr_scale, "name": name})
        self.optimizer = torch.optim.Adam(groups, lr=0.0, eps=1e-15)

    def step(self):
        self.optimizer.step()

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)

    def _groups(self):
        return {g["name"]: g for g in self.optimizer.param_groups}

    def moment_shapes(self):
        shapes = {}
        for name, group in self._groups().items():
            state = self.optimizer.state.get(group["params"][0])
            if state:
                shapes[name] = tuple(state["exp_avg"].shape)
        return shapes

    def check_aligned(self):
        for name, group in self._groups().items():
            param = group["params"][0]
            state = self.optimizer.state.get(param)
            if state and state["exp_avg"].shape != param.shape:
                raise AssertionError(f"optimizer state misaligned for {name}: "
                                     f"{state['exp_avg'].shape} vs {param.shape}")

    def add_rows(self, new_rows):
        """Append rows (dict name -> tensor); fresh rows get zero moments."""
        for name, group in self._groups().items():
            old = group["params"][0]
            ext = new_rows[name].to(old.dtype)
            state = self.optimizer.state.pop(old, None)
            new = nn.Parameter(torch.cat([old.detach(), ext]).requires_grad_(True))
            if state is not None:
                state["exp_avg"] = torch.cat([state["exp_avg"], torch.zeros_like(ext)])
                state["exp_avg_sq"] = torch.cat([state["exp_avg_sq"], torch.zeros_like(ext)])
                self.optimizer.state[new] = state
            group["params"][0] = new
            setattr(self.gaussians, name, new)
        self.check_aligned()

    def prune_rows(self, keep):
        for name, group in self._groups().items():
            old = group["params"][0]
            state = self.optimizer.state.pop(old, None)
            new = nn.Parameter(old.detach()[keep].requires_grad_(True))
            if state is not None:
                state["exp_avg"] = state["exp_avg"][keep]
                state["exp_avg_sq"] = state["exp_avg_sq"][keep]
                self.optimizer.state[new] = state
            group["params"][0] = new
            setattr(self.gaussians, name, new)
        self.check_aligned()

    def replace(self, name, tensor):
        """Swap one parameter's values and reset its moments (opacity reset)."""
        group = self._groups()[name]
        old = group["params"][0]
        state = self.optimizer.state.pop(old, None)
        new = nn.Parameter(tensor.detach().clone().requires_grad_(True))
        if state is not None:
            state["exp_avg"] = torch.zeros_like(new)
            state["exp_avg_sq"] = torch.zeros_like(new)
            self.optimizer.state[new] = state
        group["params"][0] = new
        setattr(self.gaussians, name, new)


def _frame_for_iter(seed, stream, n_frames, iteration):
    """Uniform without replacement per epoch, a pure function of
    (seed, iteration) so resumed runs see the same schedule."""
    epoch, within = divmod(iteration, n_frames)
    perm = np.random.default_rng((seed, stream, epoch)).permutation(n_frames)
    return int(perm[within])


def _check_finite(loss, stage, iteration, parts):
    value = float(loss.detach()) if isinstance(loss, torch.Tensor) else float(loss)
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={float(torch.as_tensor(v).detach()):.6g}" for k, v in parts.items())
        raise RuntimeError(f"non-finite loss at {stage} iteration {iteration}: {detail}")


def _probe_psnr(gaussians, dataset, config, overrides=None):
    out = render(gaussians, dataset.cameras[0], overrides=overrides,
                 background=config.background)
    return psnr(out.color.clamp(0.0, 1.0), dataset.frames[0].image.to(out.color.dtype))


def _split_rows(gaussians, mask, shrink, generator):
    """Two children per selected Gaussian, positions sampled from the parent."""
    idx = mask.nonzero(as_tuple=True)[0]
    rep = idx.repeat_interleave(2)
    scales = gaussians.scales()[rep].detach()
    from . import quat  # local import to avoid cycle at module load

    rot = quat.to_rotation_matrix(quat.normalize(gaussians.rotation_params[rep].detach()))
    eps = torch.randn(rep.numel(), 3, generator=generator, dtype=scales.dtype)
    offsets = (rot @ (eps * scales).unsqueeze(-1)).squeeze(-1)
    rows = {name: getattr(gaussians, name).detach()[rep].clone() for name in PARAM_CLASSES}
    rows["positions"] = rows["positions"] + offsets
    rows["log_scales"] = rows["log_scales"] - math.log(shrink)
    return rows


def train_static(dataset: Dataset, gaussians: GaussianSet, config: TrainConfig,
                 out_dir=None, start_iter=0) -> GaussianSet:
    """Static reconstruction: photometric + depth + mask losses with
    densification until config.densify_until, mask pruning afterwards."""
    config.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.static_iters == 0 or start_iter >= config.static_iters:
        return gaussians

    extent = scene_extent(dataset.cameras)
    opt = SceneOptimizer(gaussians, config, extent)
    gen = torch.Generator().manual_seed(config.seed + 1)
    split_size = config.split_size_fraction * extent

    n = gaussians.count
    grad_accum = torch.zeros(n, dtype=torch.float32)
    grad_denom = torch.zeros(n, dtype=torch.float32)
    log_rows = []

    for it in range(start_iter, config.static_iters):
        fi = _frame_for_iter(config.seed, 0, len(dataset), it)
        frame, camera = dataset.frames[fi], dataset.cameras[fi]
        target = frame.image.to(gaussians.dtype)

        out = render(gaussians, camera, background=config.background,
                     record_contributors="set")
        photo = photometric_loss(out.color, target, config.lambda_ssim)
        parts = {"photometric": photo}
        loss = photo
        if frame.depth is not None and config.lambda_depth > 0:
            d = depth_loss(out.depth, frame.depth.to(out.depth.dtype), frame.depth > 0)
            parts["depth"] = d
            loss = loss + config.lambda_depth * d
        if config.lambda_mask > 0:
            m = mask_loss(gaussians.mask_logits)
            parts["mask"] = m
            loss = loss + config.lambda_mask * m
        _check_finite(loss, "static", it, parts)
        loss.backward()

        with torch.no_grad():
            visible = out.contributors.unique_indices
            if gaussians.positions.grad is not None:
                norms = gaussians.positions.grad.norm(dim=1).float()
                grad_accum[visible] += norms[visible]
                grad_denom[visible] += 1.0

        opt.step()
        opt.zero_grad()

        if it < config.densify_until:
            if (it + 1) % config.densify_interval == 0:
                with torch.no_grad():
                    avg = grad_accum / grad_denom.clamp_min(1.0)
                    hot = avg > config.densify_grad_threshold
                    big = gaussians.scales().max(dim=1).values > split_size
                    clone_mask = hot & ~big
                    split_mask = hot & big
                    rows = None
                    if clone_mask.any():
                        rows = {name: getattr(gaussians, name).detach()[clone_mask].clone()
                                for name in PARAM_CLASSES}
                    if split_mask.any():
                        srows = _split_rows(gaussians, split_mask, config.split_scale_shrink, gen)
                        rows = srows if rows is None else {
                            k: torch.cat([rows[k], srows[k]]) for k in rows}
                if rows is not None:
                    n_before = gaussians.count
                    opt.add_rows(rows)
                    if split_mask.any():
                        keep = torch.ones(gaussians.count, dtype=torch.bool)
                        keep[:n_before] = ~split_mask
                        opt.prune_rows(keep)
                grad_accum = torch.zeros(gaussians.count, dtype=torch.float32)
                grad_denom = torch.zeros(gaussians.count, dtype=torch.float32)
            if (it + 1) % config.opacity_reset_interval == 0:
                cap = inverse_sigmoid(config.opacity_reset_value)
                opt.replace("opacity_logits",
                            gaussians.opacity_logits.detach().clamp_max(cap))
        elif (it + 1) % config.prune_interval == 0:
            keep = gaussians.mask_values().detach() >= config.prune_mask_threshold
            if not keep.all():
                opt.prune_rows(keep)
                grad_accum = grad_accum[keep]
                grad_denom = grad_denom[keep]

        if (it + 1) % config.log_interval == 0 or it + 1 == config.static_iters:
            with torch.no_grad():
                probe = _probe_psnr(gaussians, dataset, config)
            vals = {k: float(torch.as_tensor(v).detach()) for k, v in parts.items()}
            log_rows.append([it + 1, float(loss.detach()), vals["photometric"],
                             vals.get("depth", 0.0), vals.get("mask", 0.0),
                             0.0, 0.0, gaussians.count, probe])
        if out_dir and config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
            io_formats.save_gaussians(gaussians, Path(out_dir) / f"gaussians_{it + 1:06d}.ply")

    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        io_formats.save_training_log(
            out_dir / "train_static.csv", log_rows,
            ["iteration", "loss", "photometric", "depth", "mask", "rigid", "rot",
             "n_gaussians", "psnr_probe"])
    return gaussians


def two_pass_step(gaussians: GaussianSet, field: MotionField, camera, target_image, t,
                  chunk_size, *, lambda_ssim, background=None, train_colors=False):
    """Memory-bounded photometric step.

    Pass 1 deforms all rows with no activation retention, renders and records
    contributors plus the deformed values. Pass 2 walks contributor chunks:
    each chunk is re-deformed with retention, composed with pass-1 values for
    every other row, rendered, and backpropagated; gradients accumulate in the
    parameters' .grad fields. Returns (pass-1 RenderOutput, photometric loss
    value, pass-1 DeformedState, ContributorSet).
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    with torch.no_grad():
        state1 = field.deform(gaussians, t)
        pos1, rot1 = state1.apply(gaussians)
        out1 = render(gaussians, camera, overrides=(pos1, rot1),
                      background=background, record_contributors="set")
        photo_val = float(photometric_loss(out1.color, target_image, lambda_ssim))

    contributors = ContributorSet(out1.contributors.unique_indices)
    base_pos = pos1.detach()
    base_rot = rot1.detach()
    base_colors = gaussians.colors.detach()
    for chunk in contributors.chunks(chunk_size):
        dpos, drot = field.deltas_at(gaussians.positions[chunk], t, rows=chunk)
        pos_c = base_pos.index_copy(0, chunk, gaussians.positions[chunk] + dpos)
        rot_c = base_rot.index_copy(0, chunk, gaussians.rotation_params[chunk] + drot)
        colors_c = base_colors
        if train_colors:
            colors_c = base_colors.index_copy(0, chunk, gaussians.colors[chunk])
        out = render_arrays(pos_c, rot_c,
                            gaussians.log_scales.detach(),
                            gaussians.opacity_logits.detach(),
                            colors_c,
                            gaussians.mask_logits.detach(),
                            camera, background=background)
        chunk_loss = photometric_loss(out.color, target_image, lambda_ssim)
        chunk_loss.backward()
        field.meter.release()
    return out1, photo_val, state1, contributors


def chunked_regularizer_backward(gaussians: GaussianSet, field: MotionField, t, graph,
                                 chunk_size, lambda_rigid, lambda_rot, pass1_state):
    """Rigidity terms couple every row, so they walk all rows in chunks with
    the same pass-1 composition; returns (rigidity value, rotation value)."""
    detached = {name: getattr(gaussians, name).detach() for name in PARAM_CLASSES}
    with torch.no_grad():
        canon0 = GaussianSet(**detached)
        rig_val = float(rigidity_loss(canon0, pass1_state, graph))
        rot_val = float(rotation_similarity_loss(canon0, pass1_state, graph))
    if lambda_rigid == 0.0 and lambda_rot == 0.0:
        return rig_val, rot_val

    base_dpos = pass1_state.delta_positions.detach()
    base_drot = pass1_state.delta_rotations.detach()
    all_rows = ContributorSet(torch.arange(gaussians.count))
    for chunk in all_rows.chunks(chunk_size):
        dpos, drot = field.deltas_at(gaussians.positions[chunk], t, rows=chunk)
        state = DeformedState(
            delta_positions=base_dpos.index_copy(0, chunk, dpos),
            delta_rotations=base_drot.index_copy(0, chunk, drot),
            time=pass1_state.time,
        )
        canon = GaussianSet(**{
            **detached,
            "positions": detached["positions"].index_copy(0, chunk, gaussians.positions[chunk]),
            "rotation_params": detached["rotation_params"].index_copy(
                0, chunk, gaussians.rotation_params[chunk]),
        })
        loss = torch.zeros((), dtype=gaussians.dtype)
        if lambda_rigid:
            loss = loss + lambda_rigid * rigidity_loss(canon, state, graph)
        if lambda_rot:
            loss = loss + lambda_rot * rotation_similarity_loss(canon, state, graph)
        loss.backward()
        field.meter.release()
    return rig_val, rot_val


def train_dynamic(dataset: Dataset, gaussians: GaussianSet, field: MotionField,
                  config: TrainConfig, graph=None, out_dir=None):
    """Joint dynamic stage: motion field plus positions/rotations (and colors
    when enabled) at reduced learning rates; scales, opacities and masks stay
    frozen. Returns (gaussians, field)."""
    config.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if graph is None:
        graph = build_neighbor_graph(gaussians.positions, config.k_nn,
                                     config.rigidity_lambda_w)
    if config.dynamic_iters == 0:
        return gaussians, field

    extent = scene_extent(dataset.cameras)
    trainable = ["positions", "rotation_params"] + (["colors"] if config.train_colors else [])
    opt = SceneOptimizer(gaussians, config, extent, lr_scale=config.dynamic_lr_scale,
                         trainable=tuple(trainable))
    field_groups = [
        {"params": field.plane_parameters(), "lr": config.lr_planes, "name": "planes"},
        {"params": field.net_parameters(), "lr": config.lr_net, "name": "net"},
    ]
    field_opt = torch.optim.Adam([g for g in field_groups if g["params"]], lr=0.0, eps=1e-15)

    log_rows = []
    for it in range(config.dynamic_iters):
        fi = _frame_for_iter(config.seed, 1, len(dataset), it)
        frame, camera = dataset.frames[fi], dataset.cameras[fi]
        target = frame.image.to(gaussians.dtype)
        t = frame.time_index

        out1, photo_val, state1, _ = two_pass_step(
            gaussians, field, camera, target, t, config.chunk_size,
            lambda_ssim=config.lambda_ssim, background=config.background,
            train_colors=config.train_colors)
        rig_val, rot_val = chunked_regularizer_backward(
            gaussians, field, t, graph, config.chunk_size,
            config.lambda_rigid, config.lambda_rot, state1)

        total = photo_val + config.lambda_rigid * rig_val + config.lambda_rot * rot_val
        _check_finite(total, "dynamic", it,
                      {"photometric": photo_val, "rigid": rig_val, "rot": rot_val})

        opt.step()
        field_opt.step()
        opt.zero_grad()
        field_opt.zero_grad(set_to_none=True)

        if (it + 1) % config.log_interval == 0 or it + 1 == config.dynamic_iters:
            with torch.no_grad():
                t0 = dataset.frames[0].time_index
                probe = _probe_psnr(gaussians, dataset, config,
                                    overrides=field.deformed_pose(gaussians, t0))
            log_rows.append([it + 1, total, photo_val, 0.0, 0.0, rig_val, rot_val,
                             gaussians.count, probe])

    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        io_formats.save_training_log(
            out_dir / "train_dynamic.csv", log_rows,
            ["iteration", "loss", "photometric", "depth", "mask", "rigid", "rot",
             "n_gaussians", "psnr_probe"])
    return gaussians, field
