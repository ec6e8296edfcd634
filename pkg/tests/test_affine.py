import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from regad.affine import (
    DET_FLOOR,
    MODE_PARAMS,
    MODES,
    AffineError,
    AffineParams,
    apply_affine,
    identity_params,
    invert_affine,
    invert_theta,
    params_to_theta,
    project_theta,
    theta_to_params,
)

IDENTITY = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _bilinear_oracle(img, theta):
    """Per-pixel loop over normalized coordinates, zero outside."""
    c, h, w = img.shape
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            xn = (2 * j + 1) / w - 1
            yn = (2 * i + 1) / h - 1
            xs = theta[0, 0] * xn + theta[0, 1] * yn + theta[0, 2]
            ys = theta[1, 0] * xn + theta[1, 1] * yn + theta[1, 2]
            px = ((xs + 1) * w - 1) / 2
            py = ((ys + 1) * h - 1) / 2
            x0, y0 = math.floor(px), math.floor(py)
            for yy in (y0, y0 + 1):
                for xx in (x0, x0 + 1):
                    if 0 <= xx < w and 0 <= yy < h:
                        wgt = (1 - abs(px - xx)) * (1 - abs(py - yy))
                        out[:, i, j] += wgt * img[:, yy, xx]
    return out


class TestApplyAffine:
    def test_identity_bitwise(self):
        x = torch.randn(2, 5, 7, 9)
        assert torch.equal(apply_affine(x, torch.tensor(IDENTITY)), x)

    def test_identity_float64_and_unbatched(self):
        x = torch.randn(3, 6, 6, dtype=torch.float64)
        assert torch.equal(apply_affine(x, AffineParams.identity()), x)

    def test_one_cell_translation(self):
        w = 8
        x = torch.randn(1, 2, 6, w, dtype=torch.float64)
        theta = torch.tensor([[1.0, 0.0, 2.0 / w], [0.0, 1.0, 0.0]], dtype=torch.float64)
        out = apply_affine(x, theta)
        torch.testing.assert_close(out[..., :-1], x[..., 1:], rtol=0, atol=1e-12)
        assert torch.all(out[..., -1] == 0)

    def test_vertical_translation(self):
        h = 6
        x = torch.randn(1, 2, h, 5, dtype=torch.float64)
        theta = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, -2.0 / h]], dtype=torch.float64)
        out = apply_affine(x, theta)
        torch.testing.assert_close(out[..., 1:, :], x[..., :-1, :], rtol=0, atol=1e-12)

    def test_double_half_turn(self):
        x = torch.randn(1, 4, 16, 16, dtype=torch.float64)
        half = torch.tensor([[math.cos(math.pi), -math.sin(math.pi), 0.0],
                             [math.sin(math.pi), math.cos(math.pi), 0.0]], dtype=torch.float64)
        out = apply_affine(apply_affine(x, half), half)
        interior = (slice(None), slice(None), slice(1, -1), slice(1, -1))
        assert (out[interior] - x[interior]).abs().mean() <= 1e-4

    def test_matches_loop_oracle(self, rng):
        img = rng.standard_normal((2, 5, 7))
        theta = np.array([[0.9, -0.3, 0.1], [0.25, 1.1, -0.2]])
        got = apply_affine(torch.from_numpy(img), torch.from_numpy(theta)).numpy()
        np.testing.assert_allclose(got, _bilinear_oracle(img, theta), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1.5, 1.5), min_size=6, max_size=6), st.integers(3, 9),
           st.integers(3, 9))
    def test_matches_grid_sample(self, vals, h, w):
        theta = torch.tensor(vals, dtype=torch.float64).reshape(1, 2, 3)
        x = torch.randn(1, 3, h, w, dtype=torch.float64)
        grid = F.affine_grid(theta, (1, 3, h, w), align_corners=False)
        ref = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        torch.testing.assert_close(apply_affine(x, theta), ref, rtol=0, atol=1e-10)

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(1, 3, 8, 8, dtype=torch.float64, generator=gen, requires_grad=True)
        theta = torch.tensor([[[0.93, -0.21, 0.037], [0.17, 1.04, -0.051]]],
                             dtype=torch.float64, requires_grad=True)
        weights = torch.randn(1, 3, 8, 8, dtype=torch.float64, generator=gen)

        def objective(xx, tt):
            return (apply_affine(xx, tt) * weights).sum()

        gx, gt = torch.autograd.grad(objective(x, theta), (x, theta))
        eps = 1e-6
        with torch.no_grad():
            for idx in [(0, 0, 0), (0, 1, 1), (0, 0, 2), (1, 0, 2), (0, 1, 2)]:
                t_plus, t_minus = theta.clone(), theta.clone()
                t_plus[0][idx[0], idx[1]] += eps
                t_minus[0][idx[0], idx[1]] -= eps
                fd = (objective(x, t_plus) - objective(x, t_minus)) / (2 * eps)
                assert abs(fd - gt[0][idx[0], idx[1]]) <= 1e-3 * max(abs(fd), 1e-8)
            flat = x.detach().clone().reshape(-1)
            for i in (0, 37, 101, 190):
                plus, minus = flat.clone(), flat.clone()
                plus[i] += eps
                minus[i] -= eps
                fd = (objective(plus.reshape(x.shape), theta)
                      - objective(minus.reshape(x.shape), theta)) / (2 * eps)
                g = gx.reshape(-1)[i]
                assert abs(fd - g) <= 1e-3 * max(abs(fd), 1e-8)

    def test_bad_theta_shape(self):
        with pytest.raises(AffineError):
            apply_affine(torch.zeros(2, 1, 4, 4), torch.zeros(3, 2, 3))


class TestInverse:
    def test_scale_two(self):
        inv = invert_affine(AffineParams(np.array([[2.0, 0, 0], [0, 2.0, 0]])))
        np.testing.assert_allclose(inv.theta, [[0.5, 0, 0], [0, 0.5, 0]], atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
    def test_composition_is_identity(self, vals):
        p = AffineParams(np.array(vals))
        assume(abs(p.det) >= 0.05)
        inv = invert_affine(p)
        np.testing.assert_allclose(p.homogeneous() @ inv.homogeneous(), np.eye(3), atol=1e-10)
        np.testing.assert_allclose(inv.homogeneous() @ p.homogeneous(), np.eye(3), atol=1e-10)

    def test_near_singular_rejected(self):
        with pytest.raises(AffineError, match="near-singular"):
            invert_affine(AffineParams(np.array([[1.0, 1.0, 0], [1.0, 1.0 + 1e-5, 0]])))

    def test_batched_matches_numpy(self, rng):
        thetas = rng.standard_normal((5, 2, 3)) + np.array([[2.0, 0, 0], [0, 2.0, 0]])
        got = invert_theta(torch.from_numpy(thetas)).numpy()
        for t, g in zip(thetas, got):
            np.testing.assert_allclose(g, invert_affine(AffineParams(t)).theta, atol=1e-12)

    def test_inverse_undoes_warp_in_interior(self):
        # A smooth field, so the two bilinear passes lose little.
        yy, xx = torch.meshgrid(torch.linspace(0, 1, 24, dtype=torch.float64),
                                torch.linspace(0, 1, 24, dtype=torch.float64), indexing="ij")
        x = torch.stack([torch.sin(2 * xx + yy), torch.cos(3 * yy - xx)])[None]
        theta = torch.tensor([[0.95, -0.1, 0.0], [0.1, 0.95, 0.0]], dtype=torch.float64)
        back = apply_affine(apply_affine(x, theta), invert_theta(theta[None])[0])
        core = (slice(None), slice(None), slice(6, -6), slice(6, -6))
        assert (back[core] - x[core]).abs().max() < 5e-3


class TestModes:
    @pytest.mark.parametrize("mode", MODES)
    def test_identity_parameters(self, mode):
        theta = params_to_theta(identity_params(mode)[None].double(), mode)
        np.testing.assert_array_equal(theta[0].numpy(), IDENTITY)
        assert AffineParams(theta[0].numpy(), mode).satisfies_mode()

    def test_rotation_scale_factorization(self, rng):
        params = torch.from_numpy(np.c_[rng.uniform(0.2, 3, 20), rng.uniform(-3, 3, 20)])
        theta = params_to_theta(params, "rotation_scale")
        for t, (s, phi) in zip(theta.numpy(), params.numpy()):
            assert np.allclose(t[:, 2], 0)
            rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
            assert np.abs(t[:, :2] - s * rot).max() < 1e-6
            assert np.isclose(np.linalg.det(t[:, :2]), s * s)

    def test_round_trip(self, rng):
        params = torch.from_numpy(np.c_[rng.uniform(0.2, 3, 10), rng.uniform(-3, 3, 10),
                                        rng.uniform(-1, 1, 10), rng.uniform(-1, 1, 10)])
        mode = "translation_rotation_scale"
        back = theta_to_params(params_to_theta(params, mode), mode)
        torch.testing.assert_close(back, params, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("mode", [m for m in MODES if m != "none"])
    def test_projection_is_idempotent(self, mode, rng):
        theta = torch.from_numpy(rng.standard_normal((6, 2, 3)) * 0.3
                                 + np.array([[1.0, 0, 0], [0, 1.0, 0]]))
        once = project_theta(theta, mode)
        torch.testing.assert_close(project_theta(once, mode), once, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("mode", [m for m in MODES if m != "none"])
    def test_det_floor(self, mode):
        n = len(MODE_PARAMS[mode])
        for raw in (torch.zeros(4, n), torch.full((4, n), 1e-4), torch.full((4, n), 5.0),
                    torch.full((4, n), -5.0)):
            theta = params_to_theta(raw.double(), mode)
            det = torch.linalg.det(theta[:, :, :2]).abs()
            assert torch.all(det >= DET_FLOOR * (1 - 1e-9))

    def test_translation_mode_has_identity_linear_part(self):
        theta = params_to_theta(torch.tensor([[0.3, -0.2]]), "translation")
        np.testing.assert_array_equal(theta[0, :, :2].numpy(), np.eye(2))

    def test_unknown_mode(self):
        with pytest.raises(AffineError, match="unknown transformation mode"):
            identity_params("projective")
