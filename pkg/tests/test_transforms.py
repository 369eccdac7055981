import math

import numpy as np
import pytest
import torch

from ssmri.ops import grad_check
from ssmri.physics import gen_gaussian_1d_mask
from ssmri.transforms import (
    GroupElement,
    KSpacePerturbation,
    apply,
    integrate_diffeo,
    inverse,
    jacobian_determinant,
    perturb_kspace,
    sample_group,
)


def smooth_image(h: int, w: int, channels: int = 2) -> torch.Tensor:
    gy, gx = torch.meshgrid(
        torch.linspace(-1, 1, h), torch.linspace(-1, 1, w), indexing="ij"
    )
    base = torch.exp(-(gy**2 + gx**2) * 3) + 0.3 * torch.cos(3 * gx) * torch.sin(2 * gy)
    return base.expand(1, channels, h, w).clone()


class TestSampleGroup:
    def test_identity_consumes_nothing(self):
        rng = np.random.default_rng(0)
        g = sample_group(rng, "identity", 0.0)
        assert g.kind == "identity"
        assert rng.uniform() == np.random.default_rng(0).uniform()

    def test_zero_magnitude_diffeo_is_identity_field(self):
        g = sample_group(np.random.default_rng(1), "diffeo", 0.0)
        assert torch.all(g.velocity == 0)

    def test_diffeo_velocity_shape(self):
        g = sample_group(np.random.default_rng(2), "diffeo", 0.3)
        assert g.velocity.shape == (4, 4, 2)

    def test_shift_rot_small_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            g = sample_group(rng, "shift_rot_small", 100.0)
            assert abs(g.shift[0]) <= 10.0
            assert abs(g.shift[1]) <= 10.0
            assert abs(g.angle) <= 15.0

    def test_rotation_angles_uniform(self):
        rng = np.random.default_rng(4)
        n = 10_000
        angles = np.array([sample_group(rng, "rotation", 0.0).angle for _ in range(n)])
        assert angles.min() >= 0 and angles.max() < 360
        counts, _ = np.histogram(angles, bins=8, range=(0, 360))
        expected = n / 8
        bound = 3 * math.sqrt(n * (1 / 8) * (7 / 8))
        assert np.abs(counts - expected).max() <= bound

    def test_unknown_group_rejected(self):
        with pytest.raises(ValueError):
            sample_group(np.random.default_rng(0), "lorentz", 1.0)

    def test_negative_magnitude_rejected(self):
        with pytest.raises(ValueError):
            sample_group(np.random.default_rng(0), "diffeo", -0.1)


class TestApplyRigid:
    def test_identity_exact(self):
        x = torch.randn(2, 2, 8, 8, generator=torch.Generator().manual_seed(0))
        assert apply(GroupElement(), x) is x

    def test_full_turn(self):
        x = smooth_image(32, 32)
        out = apply(GroupElement(kind="rotation", angle=360.0), x)
        assert (out - x).abs().max().item() <= 1e-3

    def test_quarter_turn_impulse(self):
        x = torch.zeros(1, 1, 5, 5)
        x[0, 0, 1, 2] = 1.0  # one pixel above center
        out = apply(GroupElement(kind="rotation", angle=90.0), x)
        assert out[0, 0, 2, 3].item() == pytest.approx(1.0, abs=1e-6)
        assert out.sum().item() == pytest.approx(1.0, abs=1e-5)

    def test_integer_shift(self):
        x = torch.randn(1, 2, 8, 8, generator=torch.Generator().manual_seed(1))
        out = apply(GroupElement(kind="shift", shift=(0.0, 1.0)), x)
        # content moves one pixel to the right
        assert torch.allclose(out[..., :, 1:], x[..., :, :-1], atol=1e-6)

    def test_rigid_inverse_roundtrip(self):
        x = smooth_image(48, 48)
        for g in (
            GroupElement(kind="rotation", angle=23.0),
            GroupElement(kind="shift", shift=(1.7, -2.3)),
            GroupElement(kind="shift_rot", angle=-31.0, shift=(2.0, 1.0)),
        ):
            back = apply(inverse(g), apply(g, x))
            interior = (slice(None), slice(None), slice(8, -8), slice(8, -8))
            assert (back[interior] - x[interior]).abs().max().item() <= 1e-2

    def test_inverse_parameters(self):
        assert inverse(GroupElement(kind="rotation", angle=30.0)).angle == -30.0
        assert inverse(GroupElement(kind="shift", shift=(2.0, -1.0))).shift == (-2.0, 1.0)
        assert inverse(GroupElement()).kind == "identity"


class TestDiffeo:
    def test_zero_velocity_zero_displacement(self):
        disp = integrate_diffeo(torch.zeros(4, 4, 2), 8, 16, 16)
        assert torch.all(disp == 0)

    def test_zero_velocity_apply_exact(self):
        x = torch.randn(1, 2, 16, 16, generator=torch.Generator().manual_seed(0))
        g = GroupElement(kind="diffeo", velocity=torch.zeros(4, 4, 2))
        assert torch.equal(apply(g, x), x)

    def test_jacobian_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            g = sample_group(rng, "diffeo", 0.3)
            disp = integrate_diffeo(g.velocity, 8, 64, 64)
            assert jacobian_determinant(disp).min().item() > 0

    def test_forward_inverse_composition(self):
        rng = np.random.default_rng(1)
        gy, gx = torch.meshgrid(torch.arange(64.0), torch.arange(64.0), indexing="ij")
        coords = torch.stack((gy, gx))[None]
        for _ in range(20):
            g = sample_group(rng, "diffeo", 0.3)
            back = apply(inverse(g), apply(g, coords))
            interior = (slice(None), slice(None), slice(8, -8), slice(8, -8))
            err = (back[interior] - coords[interior]).abs().max().item()
            assert err <= 0.5

    def test_integration_converged(self):
        g = sample_group(np.random.default_rng(2), "diffeo", 0.3)
        d6 = integrate_diffeo(g.velocity, 6, 64, 64)
        d8 = integrate_diffeo(g.velocity, 8, 64, 64)
        assert (d6 - d8).abs().max().item() <= 1e-2

    def test_bad_steps_rejected(self):
        with pytest.raises(ValueError):
            integrate_diffeo(torch.zeros(4, 4, 2), 0, 8, 8)

    def test_nonfinite_velocity_rejected(self):
        v = torch.zeros(4, 4, 2)
        v[0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            integrate_diffeo(v, 8, 8, 8)


class TestApplyGradients:
    @pytest.mark.parametrize(
        "g",
        [
            GroupElement(kind="rotation", angle=17.0),
            GroupElement(kind="shift", shift=(0.6, -1.2)),
            GroupElement(kind="diffeo", velocity=torch.randn(4, 4, 2, generator=torch.Generator().manual_seed(5)) * 0.3),
        ],
        ids=["rotation", "shift", "diffeo"],
    )
    def test_grad_check(self, g):
        x = smooth_image(8, 8).double().requires_grad_(True)

        def f():
            return apply(g, x).pow(2).sum()

        assert grad_check(f, [x]) <= 1e-3


class TestPerturbKspace:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.mask = gen_gaussian_1d_mask(rng, 16, 16, 2, 0.125)[None, None]
        g = torch.Generator().manual_seed(0)
        self.y = self.mask * torch.randn(2, 2, 16, 16, generator=g)

    def test_zero_scales_unchanged(self):
        rng = np.random.default_rng(1)
        out = perturb_kspace(rng, KSpacePerturbation("noise", sigma=0.0), self.y, self.mask)
        assert torch.equal(out, self.y)
        out = perturb_kspace(rng, KSpacePerturbation("phase_error", alpha=0.0), self.y, self.mask)
        assert torch.equal(out, self.y)

    def test_noise_only_on_sampled(self):
        rng = np.random.default_rng(2)
        out = perturb_kspace(rng, KSpacePerturbation("noise", sigma=1.0), self.y, self.mask)
        assert not torch.equal(out, self.y)
        assert ((out - self.y) * (1 - self.mask)).abs().max().item() == 0.0

    def test_phase_preserves_magnitude(self):
        rng = np.random.default_rng(3)
        out = perturb_kspace(rng, KSpacePerturbation("phase_error", alpha=1.0), self.y, self.mask)
        mag_in = torch.sqrt(self.y[:, 0] ** 2 + self.y[:, 1] ** 2)
        mag_out = torch.sqrt(out[:, 0] ** 2 + out[:, 1] ** 2)
        assert (mag_in - mag_out).abs().max().item() <= 1e-6
        assert (out * (1 - self.mask)).abs().max().item() == 0.0

    def test_deterministic_given_seed(self):
        a = perturb_kspace(np.random.default_rng(9), KSpacePerturbation("noise", sigma=0.5), self.y, self.mask)
        b = perturb_kspace(np.random.default_rng(9), KSpacePerturbation("noise", sigma=0.5), self.y, self.mask)
        assert torch.equal(a, b)

    def test_negative_scale_rejected(self):
        with pytest.raises(ValueError):
            perturb_kspace(
                np.random.default_rng(0), KSpacePerturbation("noise", sigma=-1.0), self.y, self.mask
            )

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            perturb_kspace(np.random.default_rng(0), KSpacePerturbation("blur"), self.y, self.mask)
