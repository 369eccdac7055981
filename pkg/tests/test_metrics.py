import math

import numpy as np
import pytest
import torch

from ssmri.metrics import MetricReport, compute_metrics, psnr, ssim
from ssmri.ops import fft2c, ifft2c


def make_image(seed: int, b: int = 2, h: int = 32, w: int = 32, dtype=torch.float32) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.standard_normal((b, 2, h, w))).to(dtype)
    return x.abs() * 0.3


def smooth_image(seed: int, b: int = 1, h: int = 32, w: int = 32) -> torch.Tensor:
    # band-limit a noise image so SSIM sees structure instead of texture
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.standard_normal((b, 2, h, w))).float()
    k = fft2c(x)
    keep = torch.zeros(1, 1, h, w)
    keep[..., h // 2 - 4 : h // 2 + 4, w // 2 - 4 : w // 2 + 4] = 1.0
    x = ifft2c(k * keep)
    x[:, 1] = 0.0
    lo = x[:, :1].flatten(1).min(dim=1).values.view(-1, 1, 1, 1)
    hi = x[:, :1].flatten(1).max(dim=1).values.view(-1, 1, 1, 1)
    x[:, :1] = (x[:, :1] - lo) / (hi - lo)
    return x


class TestPsnr:
    def test_identical_images_are_infinite(self):
        x = make_image(0)
        out = psnr(x, x)
        assert all(v == math.inf for v in out.tolist())

    def test_constant_offset_oracle(self):
        # |x_hat| = |x| + 0.1 at peak 1 gives mse 0.01, i.e. exactly 20 dB
        x = make_image(1)
        x_hat = x.clone()
        x_hat[:, 0] = x[:, 0].hypot(x[:, 1]) + 0.1
        x_hat[:, 1] = 0.0
        out = psnr(x_hat, x)
        assert torch.allclose(out, torch.full_like(out, 20.0), atol=1e-5)

    def test_monotone_in_noise_level(self):
        x = make_image(2, b=1).double()
        rng = np.random.default_rng(3)
        noise = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
        values = [float(psnr(x + s * noise, x)[0]) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_global_phase_invariance(self):
        x = make_image(4, dtype=torch.float64)
        x_hat = x + 0.05
        phi = 1.234
        rotated = torch.stack(
            [
                x_hat[:, 0] * math.cos(phi) - x_hat[:, 1] * math.sin(phi),
                x_hat[:, 0] * math.sin(phi) + x_hat[:, 1] * math.cos(phi),
            ],
            dim=1,
        )
        assert torch.allclose(psnr(rotated, x), psnr(x_hat, x), atol=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            psnr(make_image(0, h=32), make_image(0, h=16))

    def test_bad_peak_rejected(self):
        x = make_image(0)
        with pytest.raises(ValueError, match="peak"):
            psnr(x, x, peak=0.0)


class TestSsim:
    def test_identical_images_score_one(self):
        x = make_image(5)
        out = ssim(x, x)
        assert all(v == 1.0 for v in out.tolist())

    def test_constant_images_oracle(self):
        # mu terms dominate: (2 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4)
        a = torch.zeros(1, 2, 16, 16, dtype=torch.float64)
        b = torch.zeros(1, 2, 16, 16, dtype=torch.float64)
        a[:, 0] = 0.5
        b[:, 0] = 0.6
        expected = (2 * 0.5 * 0.6 + 1e-4) / (0.5**2 + 0.6**2 + 1e-4)
        assert abs(float(ssim(a, b)[0]) - expected) <= 1e-9

    def test_symmetry(self):
        a = make_image(6, dtype=torch.float64)
        b = make_image(7, dtype=torch.float64)
        assert torch.allclose(ssim(a, b), ssim(b, a), atol=1e-9)

    def test_bounded_and_below_one_for_different_images(self):
        for seed in range(5):
            a = smooth_image(seed)
            b = smooth_image(seed + 100)
            v = float(ssim(a, b)[0])
            assert -1.0 <= v < 1.0

    def test_global_phase_invariance(self):
        x = smooth_image(8).double()
        x_hat = x * 0.9 + 0.01
        phi = -0.7
        rotated = torch.stack(
            [
                x_hat[:, 0] * math.cos(phi) - x_hat[:, 1] * math.sin(phi),
                x_hat[:, 0] * math.sin(phi) + x_hat[:, 1] * math.cos(phi),
            ],
            dim=1,
        )
        assert torch.allclose(ssim(rotated, x), ssim(x_hat, x), atol=1e-9)

    def test_degrades_with_noise(self):
        x = smooth_image(9).double()
        rng = np.random.default_rng(10)
        noise = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
        values = [float(ssim(x + s * noise, x)[0]) for s in (0.0, 0.05, 0.2)]
        assert values[0] == 1.0
        assert values[0] > values[1] > values[2]

    def test_small_image_rejected(self):
        x = make_image(0, h=6, w=6)
        with pytest.raises(ValueError, match="at least"):
            ssim(x, x)


class TestReport:
    def test_means_are_arithmetic(self):
        r = MetricReport(psnr_values=[20.0, 30.0], ssim_values=[0.5, 0.7])
        assert r.psnr_db == 25.0
        assert abs(r.ssim - 0.6) < 1e-12

    def test_compute_metrics_collects_per_sample_values(self):
        x = make_image(11, b=3)
        x_hat = x + 0.05
        report = compute_metrics(x_hat, x)
        assert len(report.psnr_values) == 3
        assert len(report.ssim_values) == 3
        assert report.psnr_db == pytest.approx(float(psnr(x_hat, x).mean()))

    def test_zero_filled_phantom_band(self):
        # sanity band for an undersampled reconstruction baseline
        from ssmri.physics import MriOperator, gen_gaussian_1d_mask

        h = w = 64
        yy, xx = torch.meshgrid(
            torch.linspace(-0.5, 0.5, h), torch.linspace(-0.5, 0.5, w), indexing="ij"
        )
        mag = torch.zeros(h, w)
        mag[(yy / 0.35) ** 2 + (xx / 0.3) ** 2 <= 1] = 0.6
        mag[(yy / 0.15) ** 2 + ((xx - 0.1) / 0.1) ** 2 <= 1] = 1.0
        x = torch.zeros(1, 2, h, w)
        x[:, 0] = mag
        rng = np.random.default_rng(12)
        mask = gen_gaussian_1d_mask(rng, w, h, acceleration=4.0, acs_fraction=0.08)
        op = MriOperator(mask)
        zf = op.adjoint(op.forward(x))
        value = float(psnr(zf, x)[0])
        assert 15.0 <= value <= 35.0
