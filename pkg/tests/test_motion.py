import math

import numpy as np
import pytest
import torch

from dctsplat.motion import (CoefficientNet, DCTBasis, DirectCoefficientField,
                             DirectTimeField, MotionField, SceneNormalizer, TriplaneEncoder,
                             basis_row, build_motion_field, eval_trajectory,
                             fit_coefficients_lsq, fit_normalizer, fit_normalizer_to_points,
                             normalize_position)
from dctsplat.scene import TrainConfig

from conftest import make_camera, make_set


def _cameras_at(centers):
    cams = []
    for c in centers:
        c = torch.tensor(c, dtype=torch.float64)
        cams.append(make_camera(translation=-c))  # identity rotation: t = -C
    return cams


class TestNormalizer:
    def test_cube_span(self):
        cams = _cameras_at([[0.0, 0, 0], [10.0, 10, 10]])
        n = fit_normalizer(cams, margin=1.0)
        assert torch.allclose(n.center, torch.tensor([5.0, 5, 5]))
        assert torch.allclose(n.half_extent, torch.tensor([5.0, 5, 5]))

    def test_coincident_centers_rejected(self):
        cams = _cameras_at([[1.0, 2, 3], [1.0, 2, 3]])
        with pytest.raises(ValueError, match="degenerate camera span"):
            fit_normalizer(cams)

    def test_anisotropic_span(self):
        cams = _cameras_at([[0.0, 0, 0], [10.0, 2, 2], [5.0, 1, 0]])
        n = fit_normalizer(cams, margin=1.0)
        assert torch.allclose(n.half_extent, torch.tensor([5.0, 1.0, 1.0]))

    def test_normalize_position_examples(self):
        n = SceneNormalizer(center=torch.tensor([1.0, 2, 3]),
                            half_extent=torch.tensor([2.0, 1.0, 0.5]))
        assert torch.allclose(normalize_position(torch.tensor([1.0, 2, 3]), n),
                              torch.zeros(3))
        p = torch.tensor([1.0 + 3 * 2.0, 2.0, 3.0])
        assert torch.allclose(normalize_position(p, n), torch.tensor([1.0, 0, 0]))
        p = torch.tensor([1.0 + 0.5 * 2.0, 2.0 - 1.0, 3.0 + 2 * 0.5])
        assert torch.allclose(normalize_position(p, n), torch.tensor([0.5, -1.0, 1.0]))

    def test_clamp_idempotent_under_identity_normalizer(self):
        ident = SceneNormalizer(center=torch.zeros(3), half_extent=torch.ones(3))
        rng = np.random.default_rng(0)
        p = torch.tensor(rng.uniform(-3, 3, (50, 3)))
        clamped = normalize_position(p, ident)
        assert torch.equal(normalize_position(clamped, ident), clamped)
        assert clamped.abs().max() <= 1.0

    def test_point_cloud_fit(self):
        n = fit_normalizer_to_points(torch.tensor([[0.0, 0, 0], [4.0, 2, 2]]), margin=1.0)
        assert torch.allclose(n.center, torch.tensor([2.0, 1, 1]))


class TestTriplaneEncoder:
    def test_constant_plane(self):
        enc = TriplaneEncoder(resolution=8, channels=2)
        with torch.no_grad():
            for name in ("plane_xy", "plane_xz", "plane_yz"):
                getattr(enc, name).fill_(0.25)
        p = torch.tensor([[0.3, -0.9, 0.5], [1.0, 1.0, -1.0]])
        feats = enc(p)
        assert torch.allclose(feats, torch.full((2, 6), 0.25), atol=1e-7)

    def test_texel_center_lookup(self):
        r = 8
        enc = TriplaneEncoder(resolution=r, channels=1)
        with torch.no_grad():
            enc.plane_xy.zero_()
            enc.plane_xz.zero_()
            enc.plane_yz.zero_()
            enc.plane_xy[2, 5, 0] = 7.0
        # texel (i, j) center in [-1, 1]: (2 (i + 0.5) / r) - 1
        u = 2 * (2 + 0.5) / r - 1
        v = 2 * (5 + 0.5) / r - 1
        feats = enc(torch.tensor([[u, v, 0.0]]))
        assert feats[0, 0].item() == pytest.approx(7.0, abs=1e-6)

    def test_midpoint_blends_two_texels(self):
        r = 8
        enc = TriplaneEncoder(resolution=r, channels=1)
        with torch.no_grad():
            enc.plane_xy.zero_()
            enc.plane_xz.zero_()
            enc.plane_yz.zero_()
            enc.plane_xy[2, 5, 0] = 1.0
            enc.plane_xy[3, 5, 0] = 3.0
        u = 2 * (3.0) / r - 1  # halfway between texel centers 2 and 3
        v = 2 * (5 + 0.5) / r - 1
        feats = enc(torch.tensor([[u, v, 0.0]]))
        assert feats[0, 0].item() == pytest.approx(2.0, abs=1e-6)


class TestCoefficientNet:
    def test_zero_output_at_init(self):
        net = CoefficientNet(6, 7 * 3, generator=torch.Generator().manual_seed(0))
        out = net(torch.randn(5, 6))
        assert torch.equal(out, torch.zeros(5, 21))

    def test_shape_and_finiteness(self):
        net = CoefficientNet(6, 7 * 4)
        with torch.no_grad():
            for layer in net.layers:
                layer.weight.copy_(torch.randn_like(layer.weight))
        out = net(torch.randn(3, 6))
        assert out.shape == (3, 28)
        assert torch.isfinite(out).all()

    def test_hand_computed_single_hidden_unit(self):
        # width-1 hidden layers with identity-like weights: out = relu(relu(sum(x)))
        net = CoefficientNet(3, 2, hidden=1)
        with torch.no_grad():
            net.layers[0].weight.copy_(torch.ones(1, 3))
            net.layers[0].bias.zero_()
            net.layers[1].weight.copy_(torch.ones(1, 1))
            net.layers[1].bias.zero_()
            net.layers[2].weight.copy_(torch.tensor([[2.0], [-1.0]]))
            net.layers[2].bias.copy_(torch.tensor([0.5, 0.0]))
        x = torch.tensor([[1.0, 2.0, -0.5]])  # sum 2.5
        out = net(x)
        assert out[0].tolist() == pytest.approx([2 * 2.5 + 0.5, -2.5])


class TestDCTBasis:
    def test_all_zero_coefficients(self):
        basis = DCTBasis.create(8)
        for t in (0, 3, 7.5, 11):
            assert eval_trajectory(np.zeros(basis.K), basis, t) == 0.0

    def test_first_basis_value(self):
        basis = DCTBasis.create(2, k=1)
        assert eval_trajectory([1.0], basis, 0) == pytest.approx(0.7071067811865476, abs=1e-15)

    def test_two_term_value_frozen_oracle(self):
        # Independent scalar evaluation (math.cos loop) frozen before
        # implementation: K=2, T=4, phi=(1,-1), t=3.
        basis = DCTBasis.create(4, k=2)
        assert eval_trajectory([1.0, -1.0], basis, 3) == pytest.approx(
            -1.331694748674197, abs=1e-13)

    def test_default_k_is_quarter_of_frames(self):
        for t, k in ((8, 2), (40, 10), (120, 30), (7, 2)):
            assert DCTBasis.create(t).K == k

    def test_integer_times_match_table_bitwise(self):
        basis = DCTBasis.create(12)
        rng = np.random.default_rng(5)
        phi = torch.tensor(rng.normal(size=basis.K))
        for t in range(basis.T):
            via_eval = eval_trajectory(phi, basis, t)
            via_table = float(phi @ basis.table[t])
            assert via_eval == via_table  # bit-identical by construction

    def test_extrapolation_mirrors(self):
        # cos((pi/2T)(2t+1)k) at t' = 2T-1-t equals the value at t.
        basis = DCTBasis.create(10)
        phi = np.linspace(-1, 1, basis.K)
        for t in range(10):
            assert eval_trajectory(phi, basis, 2 * basis.T - 1 - t) == pytest.approx(
                eval_trajectory(phi, basis, t), abs=1e-12)


class TestFitCoefficients:
    def test_roundtrip_recovery(self):
        basis = DCTBasis.create(16)
        rng = np.random.default_rng(1)
        phi_true = rng.normal(size=basis.K)
        samples = [(t, eval_trajectory(phi_true, basis, t)) for t in range(16)]
        phi, residual = fit_coefficients_lsq(samples, basis)
        assert np.abs(phi - phi_true).max() < 1e-9
        assert residual < 1e-9

    def test_zero_values(self):
        basis = DCTBasis.create(8)
        phi, _ = fit_coefficients_lsq([(t, 0.0) for t in range(8)], basis)
        assert np.abs(phi).max() == 0.0

    def test_square_system_interpolates(self):
        basis = DCTBasis.create(8)  # K = 2
        rng = np.random.default_rng(2)
        samples = [(t, rng.normal()) for t in (1, 5)]
        phi, residual = fit_coefficients_lsq(samples, basis)
        assert residual < 1e-10

    def test_rank_deficient_reports_rank(self):
        basis = DCTBasis.create(8)  # K = 2
        with pytest.raises(ValueError, match="rank"):
            fit_coefficients_lsq([(3, 1.0), (3, 1.0)], basis)


def _tiny_field(seed=0, k=3):
    normalizer = SceneNormalizer(center=torch.zeros(3), half_extent=torch.ones(3))
    basis = DCTBasis.create(4 * k, k=k)
    return MotionField(normalizer, basis, plane_resolution=8, plane_channels=4,
                       hidden=16, seed=seed)


class TestDeform:
    def test_zero_initialized_field_is_identity(self):
        field = _tiny_field()
        g = make_set([[0.1, 0.2, 0.3], [-0.5, 0.0, 0.9]], dtype=torch.float32)
        for t in (0, 1.5, 7, 30):
            state = field.deform(g, t)
            assert torch.equal(state.delta_positions, torch.zeros(2, 3))
            assert torch.equal(state.delta_rotations, torch.zeros(2, 4))

    def test_identical_positions_share_deltas(self):
        field = _tiny_field(seed=3)
        with torch.no_grad():
            for p in field.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        g = make_set([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]], dtype=torch.float32)
        state = field.deform(g, 2)
        assert torch.equal(state.delta_positions[0], state.delta_positions[1])
        assert torch.equal(state.delta_rotations[0], state.delta_rotations[1])

    def test_repeat_calls_bit_identical(self):
        field = _tiny_field(seed=4)
        with torch.no_grad():
            for p in field.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        g = make_set([[0.3, -0.1, 0.6]], dtype=torch.float32)
        s1 = field.deform(g, 1.25)
        s2 = field.deform(g, 1.25)
        assert torch.equal(s1.delta_positions, s2.delta_positions)
        assert torch.equal(s1.delta_rotations, s2.delta_rotations)

    def test_scales_opacities_untouched(self):
        field = _tiny_field()
        g = make_set([[0.0, 0, 0.5]], dtype=torch.float32)
        pos, rot = field.deformed_pose(g, 1)
        out_has = {"positions", "rotations"}
        assert pos.shape == (1, 3) and rot.shape == (1, 4) and out_has


class TestFieldVariants:
    def test_direct_coefficient_field_rows(self):
        normalizer = SceneNormalizer(center=torch.zeros(3), half_extent=torch.ones(3))
        basis = DCTBasis.create(8)
        field = DirectCoefficientField(4, normalizer, basis)
        with torch.no_grad():
            field.phi[2, 0, 0] = 1.0
        g = make_set([[0.0, 0, 0.5]] * 4, dtype=torch.float32)
        state = field.deform(g, 0)
        expected = float(basis.table[0, 0])
        assert state.delta_positions[2, 0].item() == pytest.approx(expected, rel=1e-6)
        assert state.delta_positions[[0, 1, 3]].abs().max().item() == 0.0
        dpos, _ = field.deltas_at(g.positions[[2]], 0, rows=torch.tensor([2]))
        assert dpos[0, 0].item() == pytest.approx(expected, rel=1e-6)

    def test_direct_time_field_zero_init_and_time_dependence(self):
        normalizer = SceneNormalizer(center=torch.zeros(3), half_extent=torch.ones(3))
        field = DirectTimeField(normalizer, total_frames=8, plane_resolution=8,
                                plane_channels=4, hidden=16, seed=0)
        g = make_set([[0.2, 0, 0.1]], dtype=torch.float32)
        s = field.deform(g, 3)
        assert torch.equal(s.delta_positions, torch.zeros(1, 3))


class TestBuildMotionField:
    def test_from_cameras(self):
        cams = _cameras_at([[0.0, 0, 0], [2.0, 1, 1], [1.0, 0.5, 2.0]])
        cfg = TrainConfig(plane_resolution=8, plane_channels=4, hidden_width=16)
        field = build_motion_field(cams, 12, cfg)
        assert field.basis.K == 3 and field.basis.T == 12
        g = make_set([[0.0, 0, 0.5]], dtype=torch.float32)
        state = field.deform(g, 0)
        assert torch.equal(state.delta_positions, torch.zeros(1, 3))
