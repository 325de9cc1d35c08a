import math

import numpy as np
import pytest
import torch

from dctsplat import quat
from dctsplat.scene import (GaussianSet, TrainConfig, covariance, gaussian_density,
                            init_from_points, inverse_sigmoid, scene_extent)

from conftest import make_camera, make_set


class TestInitFromPoints:
    def test_single_point_copies_fields(self):
        cfg = TrainConfig()
        g = init_from_points([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], cfg)
        assert g.count == 1
        assert torch.equal(g.positions, torch.zeros(1, 3))
        assert torch.equal(g.rotation_params, torch.tensor([[1.0, 0, 0, 0]]))
        assert g.opacities().item() == pytest.approx(0.1, abs=1e-6)
        assert g.mask_values().item() == pytest.approx(0.99, abs=1e-6)
        rgb = 0.5 + 0.28209479177387814 * g.colors[0, :, 0]
        assert torch.allclose(rgb, torch.tensor([1.0, 0.0, 0.0]), atol=1e-6)

    def test_collinear_points_three_nn_scale(self):
        # 3 points spaced 1.0 apart: with M < 4 all available neighbors count,
        # so the middle point sees mean distance 1.0 and the ends 1.5.
        pts = [[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]
        g = init_from_points(pts, np.full((3, 3), 0.5), TrainConfig())
        assert g.log_scales[1].numpy() == pytest.approx([0.0, 0.0, 0.0], abs=1e-6)
        assert g.log_scales[0].numpy() == pytest.approx([math.log(1.5)] * 3, rel=1e-6)
        assert g.log_scales[2].numpy() == pytest.approx([math.log(1.5)] * 3, rel=1e-6)

    def test_colors_outside_unit_interval_rejected(self):
        with pytest.raises(ValueError, match="colors outside"):
            init_from_points([[0.0, 0, 0]], [[1.5, 0, 0]], TrainConfig())

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError, match="empty initialization"):
            init_from_points(np.zeros((0, 3)), np.zeros((0, 3)), TrainConfig())

    def test_all_arrays_share_leading_dim(self):
        g = init_from_points(np.random.default_rng(0).uniform(0, 1, (7, 3)),
                             np.full((7, 3), 0.5), TrainConfig())
        g.validate()
        assert {t.shape[0] for t in g.tensors().values()} == {7}


class TestCovariance:
    def test_identity(self):
        g = make_set([[0, 0, 1.0]], scales=1.0)
        assert torch.allclose(covariance(g, 0), torch.eye(3, dtype=torch.float64), atol=1e-12)

    def test_axis_scaling(self):
        g = make_set([[0, 0, 1.0]])
        g.log_scales = torch.tensor([[math.log(2.0), 0.0, 0.0]], dtype=torch.float64)
        assert torch.allclose(covariance(g, 0),
                              torch.diag(torch.tensor([4.0, 1.0, 1.0], dtype=torch.float64)),
                              atol=1e-12)

    def test_rotated_by_90_degrees(self):
        # R S S^T R^T with a 90-degree z rotation moves the stretched axis to y.
        c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
        g = make_set([[0, 0, 1.0]], rotations=[[c, 0.0, 0.0, s]])
        g.log_scales = torch.tensor([[math.log(2.0), 0.0, 0.0]], dtype=torch.float64)
        assert torch.allclose(covariance(g, 0),
                              torch.diag(torch.tensor([1.0, 4.0, 1.0], dtype=torch.float64)),
                              atol=1e-12)

    def test_index_out_of_range(self):
        g = make_set([[0, 0, 1.0]])
        with pytest.raises(IndexError):
            covariance(g, 1)

    def test_eigenvalues_bounded_below_by_min_scale(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            g = make_set([[0, 0, 1.0]], rotations=rng.normal(size=(1, 4)))
            g.log_scales = torch.tensor(rng.uniform(-2, 1, (1, 3)))
            eig = torch.linalg.eigvalsh(covariance(g, 0))
            floor = math.exp(2 * g.log_scales.min().item()) - 1e-9
            assert eig.min().item() >= floor


class TestGaussianDensity:
    def test_peak_at_center(self):
        g = make_set([[0.3, -0.2, 2.0]], scales=0.7)
        assert gaussian_density(g, 0, [0.3, -0.2, 2.0]).item() == pytest.approx(1.0)

    def test_unit_covariance(self):
        g = make_set([[0, 0, 0.0]], scales=1.0)
        assert gaussian_density(g, 0, [1.0, 1.0, 0.0]).item() == pytest.approx(math.exp(-1.0))

    def test_anisotropic(self):
        g = make_set([[0, 0, 0.0]])
        g.log_scales = torch.tensor([[math.log(2.0), 0.0, 0.0]], dtype=torch.float64)
        assert gaussian_density(g, 0, [2.0, 0, 0]).item() == pytest.approx(math.exp(-0.5))

    def test_rotation_invariance(self):
        # Rotating both the offset and the Gaussian's frame leaves the density
        # unchanged.
        rng = np.random.default_rng(11)
        base_q = torch.tensor(rng.normal(size=4), dtype=torch.float64)
        g = make_set([[0, 0, 0.0]], rotations=base_q.unsqueeze(0))
        g.log_scales = torch.tensor([[0.3, -0.4, 0.1]], dtype=torch.float64)
        x = torch.tensor([0.5, -0.7, 0.2], dtype=torch.float64)
        d0 = gaussian_density(g, 0, x)

        rot_q = quat.normalize(torch.tensor(rng.normal(size=4), dtype=torch.float64))
        rot_m = quat.to_rotation_matrix(rot_q)
        g2 = make_set([[0, 0, 0.0]], rotations=quat.multiply(rot_q, quat.normalize(base_q)).unsqueeze(0))
        g2.log_scales = g.log_scales.clone()
        d1 = gaussian_density(g2, 0, rot_m @ x)
        assert d1.item() == pytest.approx(d0.item(), rel=1e-10)


class TestCameraAndConfig:
    def test_camera_validation(self):
        cam = make_camera()
        cam.validate()
        bad = make_camera(rotation=torch.eye(3, dtype=torch.float64) * 1.01)
        with pytest.raises(ValueError, match="orthonormal"):
            bad.validate()

    def test_camera_center_roundtrip(self):
        rng = np.random.default_rng(0)
        q = quat.normalize(torch.tensor(rng.normal(size=4), dtype=torch.float64))
        rot = quat.to_rotation_matrix(q)
        center = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
        cam = make_camera(rotation=rot, translation=-rot @ center)
        assert torch.allclose(cam.center(), center, atol=1e-12)

    def test_config_validation(self):
        TrainConfig().validate()
        with pytest.raises(ValueError):
            TrainConfig(chunk_size=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(k_fraction=0.0).validate()

    def test_config_overrides_coerce_types(self):
        cfg = TrainConfig()
        cfg.apply_overrides({"static_iters": "123", "lambda_ssim": "0.5",
                             "train_colors": "true", "background": "1 0 0"})
        assert cfg.static_iters == 123 and cfg.lambda_ssim == 0.5
        assert cfg.train_colors is True and cfg.background == (1.0, 0.0, 0.0)
        with pytest.raises(KeyError):
            cfg.apply_overrides({"not_a_key": "1"})

    def test_scene_extent(self):
        cams = [make_camera(translation=torch.tensor([x, 0.0, 0.0], dtype=torch.float64))
                for x in (-2.0, 2.0)]
        assert scene_extent(cams) == pytest.approx(2.2)
