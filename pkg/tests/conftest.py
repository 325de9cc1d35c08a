import math

import numpy as np
import pytest
import torch

from dctsplat import rasterizer
from dctsplat.scene import SH_C0, Camera, GaussianSet, inverse_sigmoid


def make_camera(width=64, height=64, fx=100.0, dtype=torch.float64, time_index=0,
                rotation=None, translation=None):
    return Camera(
        fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
        rotation_w2c=torch.eye(3, dtype=dtype) if rotation is None else rotation,
        translation_w2c=torch.zeros(3, dtype=dtype) if translation is None else translation,
        time_index=time_index,
    )


def rgb_to_sh(colors):
    colors = torch.as_tensor(colors, dtype=torch.float64)
    return ((colors - 0.5) / SH_C0).unsqueeze(-1)


def make_set(positions, colors=None, opacities=0.8, scales=0.05, rotations=None,
             masks=0.99, dtype=torch.float64):
    """Small GaussianSet builder for fixtures (degree-0 colors)."""
    pos = torch.as_tensor(positions, dtype=dtype)
    n = pos.shape[0]
    if colors is None:
        colors = torch.full((n, 3), 0.75)
    colors = torch.as_tensor(colors, dtype=dtype)
    if rotations is None:
        rotations = torch.zeros(n, 4, dtype=dtype)
        rotations[:, 0] = 1.0
    opac = torch.as_tensor(np.broadcast_to(opacities, (n,)).copy(), dtype=dtype)
    scl = torch.as_tensor(np.broadcast_to(scales, (n, 3)).copy(), dtype=dtype)
    msk = torch.as_tensor(np.broadcast_to(masks, (n,)).copy(), dtype=dtype)
    return GaussianSet(
        positions=pos,
        rotation_params=torch.as_tensor(rotations, dtype=dtype),
        log_scales=torch.log(scl),
        opacity_logits=torch.log(opac / (1 - opac)),
        colors=((colors - 0.5) / SH_C0).unsqueeze(-1),
        mask_logits=torch.full((n,), inverse_sigmoid(0.99), dtype=dtype) if np.isscalar(masks)
        else torch.log(msk / (1 - msk)),
    )


def random_set(rng, n, depth_range=(1.5, 6.0), xy_extent=1.0, scale_range=(0.02, 0.15),
               opacity_range=(0.1, 0.95), dtype=torch.float64, sh_degree=0):
    b = (sh_degree + 1) ** 2
    colors = rng.uniform(-0.8, 0.8, (n, 3, b))
    return GaussianSet(
        positions=torch.tensor(np.c_[rng.uniform(-xy_extent, xy_extent, (n, 2)),
                                     rng.uniform(*depth_range, (n, 1))], dtype=dtype),
        rotation_params=torch.tensor(rng.normal(size=(n, 4)), dtype=dtype),
        log_scales=torch.tensor(np.log(rng.uniform(*scale_range, (n, 3))), dtype=dtype),
        opacity_logits=torch.tensor(
            np.log(rng.uniform(*opacity_range, n) / (1 - rng.uniform(*opacity_range, n))),
            dtype=dtype),
        colors=torch.tensor(colors, dtype=dtype),
        mask_logits=torch.full((n,), 5.0, dtype=dtype),
    )


@pytest.fixture(params=["numba", "torch"])
def composite_backend(request):
    rasterizer.set_composite_backend(request.param)
    yield request.param
    rasterizer.set_composite_backend("auto")


@pytest.fixture(autouse=True)
def _reset_backend():
    yield
    rasterizer.set_composite_backend("auto")
