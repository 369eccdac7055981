"""Complex-image tensor primitives: centered FFTs, bilinear warping, gradient checks.

Complex images and k-space grids are stored as real tensors with a
two-plane channel axis, shape ``(..., 2, H, W)`` where channel 0 is the
real plane and channel 1 the imaginary plane.  All operations here are
differentiable through torch autograd.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch

__all__ = [
    "to_complex",
    "from_complex",
    "complex_magnitude",
    "fft2c",
    "ifft2c",
    "warp_bilinear",
    "grad_check",
]


def to_complex(x: torch.Tensor) -> torch.Tensor:
    """(..., 2, H, W) real planes -> (..., H, W) complex tensor."""
    return torch.complex(x.select(-3, 0), x.select(-3, 1))


def from_complex(z: torch.Tensor) -> torch.Tensor:
    """(..., H, W) complex tensor -> (..., 2, H, W) real planes."""
    return torch.stack((z.real, z.imag), dim=-3)


def complex_magnitude(x: torch.Tensor) -> torch.Tensor:
    """Pointwise modulus of a two-plane tensor, keeping a singleton channel.

    (..., 2, H, W) -> (..., 1, H, W)
    """
    return torch.sqrt(x.select(-3, 0) ** 2 + x.select(-3, 1) ** 2).unsqueeze(-3)


def fft2c(x: torch.Tensor) -> torch.Tensor:
    """Centered orthonormal 2-D Fourier transform of a two-plane image.

    DC ends up at ``(H//2, W//2)``; scaling is 1/sqrt(HW) so the map is
    unitary (and hence its adjoint equals its inverse).
    """
    z = to_complex(x)
    z = torch.fft.ifftshift(z, dim=(-2, -1))
    z = torch.fft.fft2(z, norm="ortho")
    z = torch.fft.fftshift(z, dim=(-2, -1))
    return from_complex(z)


def ifft2c(y: torch.Tensor) -> torch.Tensor:
    """Exact inverse (and adjoint) of :func:`fft2c`."""
    z = to_complex(y)
    z = torch.fft.ifftshift(z, dim=(-2, -1))
    z = torch.fft.ifft2(z, norm="ortho")
    z = torch.fft.fftshift(z, dim=(-2, -1))
    return from_complex(z)


def _reflect_index(idx: torch.Tensor, n: int) -> torch.Tensor:
    # Mirror without repeating the border sample (period 2(n-1)).
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    m = torch.remainder(idx, period)
    return torch.minimum(m, period - m)


def warp_bilinear(x: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` at ``p + disp(p)`` with bilinear interpolation.

    Args:
        x: (..., C, H, W) real tensor (a two-plane complex image is just C=2).
        disp: (..., H, W, 2) displacement in pixels, last axis is (dy, dx).
            Leading axes must broadcast against those of ``x``.

    Out-of-range samples are reflected at the borders.  Differentiable in
    both ``x`` and ``disp``; a zero displacement reproduces ``x`` exactly.
    """
    *bx, c, h, w = x.shape
    *bd, hd, wd, two = disp.shape
    if (hd, wd, two) != (h, w, 2):
        raise ValueError(f"displacement shape {tuple(disp.shape)} does not match image {h}x{w}")
    batch = torch.broadcast_shapes(tuple(bx), tuple(bd))
    x = x.expand(*batch, c, h, w).reshape(-1, c, h, w)
    disp = disp.expand(*batch, h, w, 2).reshape(-1, h, w, 2)
    n = x.shape[0]

    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=x.dtype, device=x.device),
        torch.arange(w, dtype=x.dtype, device=x.device),
        indexing="ij",
    )
    py = gy + disp[..., 0]
    px = gx + disp[..., 1]

    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy = (py - y0).unsqueeze(1)
    wx = (px - x0).unsqueeze(1)
    y0 = y0.long()
    x0 = x0.long()

    flat = x.reshape(n, c, h * w)

    def corner(yi, xi):
        yi = _reflect_index(yi, h)
        xi = _reflect_index(xi, w)
        idx = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
        return torch.gather(flat, 2, idx).reshape(n, c, h, w)

    v00 = corner(y0, x0)
    v01 = corner(y0, x0 + 1)
    v10 = corner(y0 + 1, x0)
    v11 = corner(y0 + 1, x0 + 1)
    out = (
        (1 - wy) * (1 - wx) * v00
        + (1 - wy) * wx * v01
        + wy * (1 - wx) * v10
        + wy * wx * v11
    )
    return out.reshape(*batch, c, h, w)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-4,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    (re-seed any internal randomness on every call).  Error per element is
    ``|analytic - numeric| / (|numeric| + 1e-12)``; the max over all elements
    of all parameters is returned.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    out = f()
    if out.dim() != 0:
        raise ValueError("f must return a scalar")
    if not torch.isfinite(out):
        raise ValueError("f evaluated to a non-finite value")
    analytic = torch.autograd.grad(out, params, allow_unused=True)
    analytic = [
        torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)
    ]

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                err = abs(gflat[i].item() - numeric) / (abs(numeric) + 1e-12)
                worst = max(worst, err)
    return worst
