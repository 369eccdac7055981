import math

import numpy as np
import pytest
import torch

from ssmri.ops import fft2c, ifft2c, to_complex
from ssmri.physics import (
    MriOperator,
    acs_columns,
    acs_plane,
    data_consistency,
    gen_gaussian_1d_mask,
    gen_split_masks,
    mask_pdf,
    splitting_weight_map,
)


def rand_image(rng: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=rng)


def make_mask(rng: np.random.Generator, h: int = 16, w: int = 16) -> torch.Tensor:
    return gen_gaussian_1d_mask(rng, width=w, height=h, acceleration=2, acs_fraction=0.125)


class TestMriOperator:
    def test_full_mask_is_fft(self):
        g = torch.Generator().manual_seed(0)
        x = rand_image(g, 2, 2, 8, 8)
        op = MriOperator(torch.ones(8, 8))
        assert torch.equal(op.forward(x), fft2c(x))
        assert torch.equal(op.adjoint(x), ifft2c(x))

    def test_zero_mask_annihilates(self):
        g = torch.Generator().manual_seed(1)
        x = rand_image(g, 1, 2, 8, 8)
        op = MriOperator(torch.zeros(8, 8))
        assert op.forward(x).abs().max().item() == 0.0

    def test_forward_zero_off_mask(self):
        rng = np.random.default_rng(0)
        mask = make_mask(rng)
        g = torch.Generator().manual_seed(2)
        x = rand_image(g, 1, 2, 16, 16)
        y = MriOperator(mask).forward(x)
        assert (y * (1 - mask)).abs().max().item() == 0.0

    def test_adjoint_identity_random_trials(self):
        g = torch.Generator().manual_seed(3)
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            mask = make_mask(rng)
            op = MriOperator(mask)
            x = rand_image(g, 1, 2, 16, 16)
            y = rand_image(g, 1, 2, 16, 16)
            lhs = (to_complex(op.forward(x)) * to_complex(y).conj()).sum().real
            rhs = (to_complex(x) * to_complex(op.adjoint(y)).conj()).sum().real
            err = abs((lhs - rhs).item()) / (x.norm().item() * y.norm().item())
            worst = max(worst, err)
        assert worst <= 1e-5

    def test_projection_identity(self):
        # A A^T y = mask * y when y is already zero-filled
        rng = np.random.default_rng(4)
        mask = make_mask(rng)
        op = MriOperator(mask)
        g = torch.Generator().manual_seed(4)
        y = mask * rand_image(g, 1, 2, 16, 16)
        assert (op.forward(op.adjoint(y)) - y).abs().max().item() <= 1e-5

    def test_normal_operator_idempotent(self):
        rng = np.random.default_rng(5)
        op = MriOperator(make_mask(rng))
        g = torch.Generator().manual_seed(5)
        x = rand_image(g, 1, 2, 16, 16)
        once = op.adjoint(op.forward(x))
        twice = op.adjoint(op.forward(once))
        assert (once - twice).abs().max().item() <= 1e-6

    def test_shape_mismatch_rejected(self):
        op = MriOperator(torch.ones(8, 8))
        with pytest.raises(ValueError):
            op.forward(torch.zeros(1, 2, 8, 9))
        with pytest.raises(ValueError):
            op.adjoint(torch.zeros(1, 3, 8, 8))

    def test_nonbinary_mask_rejected(self):
        with pytest.raises(ValueError):
            MriOperator(torch.full((4, 4), 0.5))

    def test_acs_outside_mask_rejected(self):
        mask = torch.zeros(4, 4)
        mask[:, 0] = 1
        acs = torch.zeros(4, 4)
        acs[:, 1] = 1
        with pytest.raises(ValueError):
            MriOperator(mask, acs)

    def test_select_per_sample(self):
        rng = np.random.default_rng(6)
        masks = torch.stack([make_mask(rng) for _ in range(3)])
        op = MriOperator(masks)
        sub = op.select(1)
        assert torch.equal(sub.mask[0, 0], masks[1])


class TestGaussian1dMask:
    def test_column_budget_64(self):
        rng = np.random.default_rng(0)
        center = acs_columns(64, 0.08)
        assert center.size == 5
        for _ in range(20):
            mask = gen_gaussian_1d_mask(rng, width=64, height=64, acceleration=4, acs_fraction=0.08)
            cols = mask[0]
            assert int(cols.sum().item()) == 16
            assert torch.all(mask[:, center] == 1)

    def test_column_budget_320(self):
        rng = np.random.default_rng(1)
        center = acs_columns(320, 0.08)
        assert center.size == 26
        mask = gen_gaussian_1d_mask(rng, width=320, height=8, acceleration=6, acs_fraction=0.08)
        assert int(mask[0].sum().item()) == 53
        assert torch.all(mask[:, center] == 1)

    def test_columns_constant(self):
        rng = np.random.default_rng(2)
        mask = gen_gaussian_1d_mask(rng, width=32, height=16, acceleration=4, acs_fraction=0.1)
        assert torch.all(mask == mask[0:1])

    def test_full_sampling(self):
        rng = np.random.default_rng(3)
        mask = gen_gaussian_1d_mask(rng, width=16, height=4, acceleration=1, acs_fraction=0.1)
        assert torch.all(mask == 1)

    def test_acs_exceeding_budget_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            gen_gaussian_1d_mask(rng, width=64, height=4, acceleration=8.0, acs_fraction=0.5)

    def test_deterministic_given_seed(self):
        a = gen_gaussian_1d_mask(np.random.default_rng(7), 64, 8, 4, 0.08)
        b = gen_gaussian_1d_mask(np.random.default_rng(7), 64, 8, 4, 0.08)
        assert torch.equal(a, b)


class TestSplitMasks:
    @pytest.mark.parametrize("kind", ["gaussian2d", "gaussian1d", "uniform"])
    def test_partition_identities(self, kind):
        rng = np.random.default_rng(0)
        base = make_mask(rng)
        acs = acs_plane(16, 16, 0.125)
        for _ in range(10):
            m1, m2 = gen_split_masks(rng, base, 0.6, kind, acs=acs)
            assert torch.equal(m1 + m2, base)
            assert torch.all(m1 * m2 == 0)

    def test_exact_count(self):
        # base with 100 non-ACS sampled points, keep 0.6 -> exactly 60 in M1
        rng = np.random.default_rng(1)
        base = torch.zeros(10, 12)
        base.view(-1)[:100] = 1
        m1, m2 = gen_split_masks(rng, base, 0.6, "uniform")
        assert int(m1.sum().item()) == 60
        assert int(m2.sum().item()) == 40

    def test_acs_always_kept(self):
        rng = np.random.default_rng(2)
        base = make_mask(rng)
        acs = acs_plane(16, 16, 0.125)
        for _ in range(10):
            m1, _ = gen_split_masks(rng, base, 0.3, acs=acs)
            assert torch.all(m1[acs > 0] == 1)

    def test_keep_all(self):
        rng = np.random.default_rng(3)
        base = make_mask(rng)
        m1, m2 = gen_split_masks(rng, base, 1.0)
        assert torch.equal(m1, base)
        assert torch.all(m2 == 0)

    def test_empty_base_rejected(self):
        with pytest.raises(ValueError):
            gen_split_masks(np.random.default_rng(0), torch.zeros(8, 8), 0.5)

    def test_unknown_kind_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            gen_split_masks(rng, make_mask(rng), 0.5, "chebyshev")

    def test_bad_ratio_rejected(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError):
            gen_split_masks(rng, make_mask(rng), 0.0)


class TestMaskPdf:
    def test_full(self):
        assert torch.all(mask_pdf("full", height=4, width=6) == 1)

    def test_range_and_acs(self):
        pdf = mask_pdf("gaussian1d", width=64, height=8, acceleration=4, acs_fraction=0.08)
        assert pdf.shape == (8, 64)
        assert torch.all(pdf >= 0) and torch.all(pdf <= 1)
        assert torch.all(pdf[:, acs_columns(64, 0.08)] == 1)

    def test_sums_to_budget(self):
        pdf = mask_pdf("gaussian1d", width=64, height=1, acceleration=4, acs_fraction=0.08)
        assert pdf.sum().item() == pytest.approx(16.0, abs=1e-6)

    def test_monte_carlo_matches_generator(self):
        rng = np.random.default_rng(0)
        trials = 10_000
        counts = np.zeros(64)
        for _ in range(trials):
            mask = gen_gaussian_1d_mask(rng, width=64, height=1, acceleration=4, acs_fraction=0.08)
            counts += mask[0].numpy()
        freq = counts / trials
        pdf = mask_pdf("gaussian1d", width=64, height=1, acceleration=4, acs_fraction=0.08)
        assert np.abs(freq - pdf[0].numpy()).max() <= 0.02

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            mask_pdf("poisson", height=4, width=4)


class TestSplittingWeightMap:
    def test_reference_value(self):
        p = torch.full((2, 2), 0.5)
        pt = torch.full((2, 2), 0.6)
        w = splitting_weight_map(p, pt)
        assert w[0, 0].item() == pytest.approx(1.870829, abs=1e-5)
        # closed form: K = (1 - 0.6*0.5)^-1 * 0.5 = 0.714286
        assert w[0, 0].item() == pytest.approx(math.sqrt(3.5), abs=1e-5)

    def test_fully_sampled_weight_one(self):
        w = splitting_weight_map(torch.ones(3, 3), torch.full((3, 3), 0.6))
        assert torch.all(w == 1)

    def test_zero_split_pdf_reduces(self):
        p = torch.full((2, 2), 0.25)
        w = splitting_weight_map(p, torch.zeros(2, 2))
        assert torch.allclose(w, p**-0.5)

    def test_never_sampled_location_rejected(self):
        p = torch.tensor([[0.0, 0.5]])
        with pytest.raises(ValueError):
            splitting_weight_map(p, torch.full((1, 2), 0.5))

    def test_weight_at_least_one(self):
        p = torch.rand(8, 8) * 0.8 + 0.1
        pt = torch.rand(8, 8) * 0.9 + 0.05
        assert torch.all(splitting_weight_map(p, pt) >= 1)


class TestDataConsistency:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.mask = make_mask(self.rng)
        g = torch.Generator().manual_seed(0)
        self.x = rand_image(g, 1, 2, 16, 16)
        self.z = rand_image(g, 1, 2, 16, 16)
        self.y = self.mask * fft2c(self.x)

    def test_prior_dominated_limit(self):
        out = data_consistency(self.z, self.y, self.mask, torch.tensor(1e8))
        rel = (out - self.z).norm().item() / self.z.norm().item()
        assert rel <= 1e-4

    def test_data_dominated_limit(self):
        out = data_consistency(self.z, self.y, self.mask, torch.tensor(1e-8))
        k = self.mask * fft2c(out)
        rel = (k - self.y).norm().item() / self.y.norm().item()
        assert rel <= 1e-4

    def test_zero_filled_fixed_point(self):
        # z = A^T y leaves the unsampled k-space at zero for any lambda
        op = MriOperator(self.mask)
        zf = op.adjoint(self.y)
        for lam in (0.1, 1.0, 17.0):
            out = data_consistency(zf, self.y, self.mask, torch.tensor(lam))
            assert (out - zf).abs().max().item() <= 1e-6

    def test_nonpositive_lambda_rejected(self):
        with pytest.raises(ValueError):
            data_consistency(self.z, self.y, self.mask, torch.tensor(0.0))
        with pytest.raises(ValueError):
            data_consistency(self.z, self.y, self.mask, torch.tensor(-1.0))

    def test_differentiable_in_z_and_lambda(self):
        z = self.z.double().requires_grad_(True)
        lam = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
        out = data_consistency(z, self.y.double(), self.mask.double(), lam)
        out.pow(2).sum().backward()
        assert z.grad is not None and torch.isfinite(z.grad).all()
        assert lam.grad is not None and torch.isfinite(lam.grad)
