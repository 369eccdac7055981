"""Reconstruction quality metrics on complex magnitudes.

Both metrics compare magnitude images with a fixed peak value (ground
truth is normalized to [0, 1] at generation time), so they are invariant
to any global phase on the reconstruction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import torch
import torch.nn.functional as F

from .ops import complex_magnitude

__all__ = ["psnr", "ssim", "MetricReport", "compute_metrics"]

_WINDOW = 7
_SIGMA = 1.5


def _check_pair(x_hat: torch.Tensor, x: torch.Tensor, peak: float) -> None:
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    if x_hat.dim() != 4 or x_hat.shape[1] != 2:
        raise ValueError("expected (B, 2, H, W) complex-plane images")
    if peak <= 0:
        raise ValueError("peak must be positive")


def psnr(x_hat: torch.Tensor, x: torch.Tensor, peak: float = 1.0) -> torch.Tensor:
    """Per-sample peak signal-to-noise ratio in dB; +inf on exact match."""
    _check_pair(x_hat, x, peak)
    a = complex_magnitude(x_hat).to(torch.float64)
    b = complex_magnitude(x).to(torch.float64)
    mse = (a - b).pow(2).flatten(1).mean(dim=1)
    out = torch.full_like(mse, math.inf)
    nz = mse > 0
    out[nz] = 10.0 * torch.log10(peak**2 / mse[nz])
    return out


def _gaussian_window(dtype: torch.dtype) -> torch.Tensor:
    half = _WINDOW // 2
    coords = torch.arange(-half, half + 1, dtype=dtype)
    g = torch.exp(-0.5 * (coords / _SIGMA) ** 2)
    g = g / g.sum()
    return torch.outer(g, g)[None, None]


def ssim(x_hat: torch.Tensor, x: torch.Tensor, peak: float = 1.0) -> torch.Tensor:
    """Per-sample mean structural similarity over Gaussian windows.

    7x7 windows (sigma 1.5), C1 = (0.01 peak)^2, C2 = (0.03 peak)^2,
    computed on magnitudes at valid positions only (no padding).
    """
    _check_pair(x_hat, x, peak)
    if min(x.shape[-2:]) < _WINDOW:
        raise ValueError(f"images must be at least {_WINDOW}x{_WINDOW}")
    a = complex_magnitude(x_hat).to(torch.float64)
    b = complex_magnitude(x).to(torch.float64)
    w = _gaussian_window(torch.float64)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = F.conv2d(a, w)
    mu_b = F.conv2d(b, w)
    var_a = F.conv2d(a * a, w) - mu_a**2
    var_b = F.conv2d(b * b, w) - mu_b**2
    cov = F.conv2d(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).flatten(1).mean(dim=1)


@dataclass
class MetricReport:
    """Per-sample metric values with their arithmetic means."""

    psnr_values: List[float] = field(default_factory=list)
    ssim_values: List[float] = field(default_factory=list)

    @property
    def psnr_db(self) -> float:
        return sum(self.psnr_values) / len(self.psnr_values)

    @property
    def ssim(self) -> float:
        return sum(self.ssim_values) / len(self.ssim_values)

    def __str__(self) -> str:
        return f"psnr={self.psnr_db:.2f}dB ssim={self.ssim:.4f} (n={len(self.psnr_values)})"


def compute_metrics(x_hat: torch.Tensor, x: torch.Tensor, peak: float = 1.0) -> MetricReport:
    return MetricReport(
        psnr_values=[float(v) for v in psnr(x_hat, x, peak)],
        ssim_values=[float(v) for v in ssim(x_hat, x, peak)],
    )
