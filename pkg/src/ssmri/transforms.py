"""Group actions on images and measurement-domain perturbations.

Rigid elements (rotations, shifts, and their composition) and smooth
deformations act on two-plane complex images through the same bilinear
warp, so every action is differentiable and admits an explicit inverse.
Deformations use a stationary velocity field on a coarse control grid,
integrated by scaling and squaring; the inverse element simply negates
the field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .ops import warp_bilinear

__all__ = [
    "GroupElement",
    "KSpacePerturbation",
    "sample_group",
    "apply",
    "inverse",
    "integrate_diffeo",
    "jacobian_determinant",
    "perturb_kspace",
]

CONTROL_GRID = 4
INTEGRATION_STEPS = 8
# velocity coefficients are in units of min(H, W) / VELOCITY_UNIT pixels
VELOCITY_UNIT = 16.0


@dataclass(frozen=True)
class GroupElement:
    """One transform: identity, rotation, shift, rotation+shift, or diffeo.

    ``angle`` is degrees; ``shift`` is (dy, dx) pixels; ``velocity`` is a
    (grid, grid, 2) coefficient tensor for the diffeo kind.
    """

    kind: str = "identity"
    angle: float = 0.0
    shift: Tuple[float, float] = (0.0, 0.0)
    velocity: Optional[torch.Tensor] = field(default=None, repr=False)


@dataclass(frozen=True)
class KSpacePerturbation:
    """Measurement-domain corruption: additive noise or per-column phase error."""

    kind: str
    sigma: float = 0.0
    alpha: float = 0.0


def sample_group(rng: np.random.Generator, group: str, magnitude: float) -> GroupElement:
    """Draw a random group element.

    Kinds:
      - "identity": the unit element; consumes no randomness.
      - "rotation": angle uniform in [0, 360); magnitude unused.
      - "diffeo": velocity coefficients ~ Normal(0, magnitude^2) on the
        control grid.
      - "shift_rot_small": magnitude is the image size in pixels; shifts
        uniform within +-10% of it and angle uniform within +-15 degrees.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be nonnegative")
    if group == "identity":
        return GroupElement()
    if group == "rotation":
        return GroupElement(kind="rotation", angle=float(rng.uniform(0.0, 360.0)))
    if group == "diffeo":
        v = rng.normal(0.0, magnitude, size=(CONTROL_GRID, CONTROL_GRID, 2))
        return GroupElement(kind="diffeo", velocity=torch.from_numpy(v).to(torch.float32))
    if group == "shift_rot_small":
        dy = float(rng.uniform(-0.1, 0.1) * magnitude)
        dx = float(rng.uniform(-0.1, 0.1) * magnitude)
        angle = float(rng.uniform(-15.0, 15.0))
        return GroupElement(kind="shift_rot", angle=angle, shift=(dy, dx))
    raise ValueError(f"unknown group {group!r}")


def _rigid_displacement(
    angle: float, shift: Tuple[float, float], h: int, w: int, dtype: torch.dtype
) -> torch.Tensor:
    """Pull-back displacement of rotate-about-center-then-shift."""
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    py = gy - cy - shift[0]
    px = gx - cx - shift[1]
    src_y = cy + cos_t * py - sin_t * px
    src_x = cx + sin_t * py + cos_t * px
    return torch.stack((src_y - gy, src_x - gx), dim=-1)


def apply(g: GroupElement, x: torch.Tensor) -> torch.Tensor:
    """Act on (..., C, H, W); channels are transformed identically."""
    if g.kind == "identity":
        return x
    h, w = x.shape[-2], x.shape[-1]
    if g.kind in ("rotation", "shift", "shift_rot"):
        disp = _rigid_displacement(g.angle, g.shift, h, w, x.dtype)
        return warp_bilinear(x, disp)
    if g.kind == "diffeo":
        disp = integrate_diffeo(g.velocity, INTEGRATION_STEPS, h, w).to(x.dtype)
        return warp_bilinear(x, disp)
    raise ValueError(f"unknown group element kind {g.kind!r}")


def inverse(g: GroupElement) -> GroupElement:
    """Element such that apply(inverse(g), apply(g, x)) recovers x."""
    if g.kind == "identity":
        return g
    if g.kind == "rotation":
        return GroupElement(kind="rotation", angle=-g.angle)
    if g.kind == "shift":
        return GroupElement(kind="shift", shift=(-g.shift[0], -g.shift[1]))
    if g.kind == "shift_rot":
        # T = shift o rotate, so T^-1 shifts by -R(-angle) @ shift
        theta = math.radians(g.angle)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        dy, dx = g.shift
        return GroupElement(
            kind="shift_rot",
            angle=-g.angle,
            shift=(-(cos_t * dy - sin_t * dx), -(sin_t * dy + cos_t * dx)),
        )
    if g.kind == "diffeo":
        return GroupElement(kind="diffeo", velocity=-g.velocity)
    raise ValueError(f"unknown group element kind {g.kind!r}")


def integrate_diffeo(velocity: torch.Tensor, steps: int, height: int, width: int) -> torch.Tensor:
    """Displacement field of the stationary velocity field's flow.

    The coarse (grid, grid, 2) coefficients are bilinearly upsampled to
    (H, W, 2), scaled to pixels, divided by 2^steps and composed with
    itself ``steps`` times (scaling and squaring).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not torch.isfinite(velocity).all():
        raise ValueError("velocity field must be finite")
    coarse = velocity.permute(2, 0, 1)[None].to(torch.float32)
    full = F.interpolate(coarse, size=(height, width), mode="bilinear", align_corners=True)[0]
    scale = min(height, width) / VELOCITY_UNIT
    disp = full.permute(1, 2, 0) * (scale / 2.0**steps)
    for _ in range(steps):
        moved = warp_bilinear(disp.permute(2, 0, 1)[None], disp)[0].permute(1, 2, 0)
        disp = disp + moved
    return disp


def jacobian_determinant(disp: torch.Tensor) -> torch.Tensor:
    """det of the forward map id + disp via forward differences.

    ``disp`` is (H, W, 2); returns (H-1, W-1). Positive everywhere means
    the map is locally orientation-preserving.
    """
    dy = disp[1:, :-1] - disp[:-1, :-1]
    dx = disp[:-1, 1:] - disp[:-1, :-1]
    return (1 + dy[..., 0]) * (1 + dx[..., 1]) - dy[..., 1] * dx[..., 0]


def perturb_kspace(
    rng: np.random.Generator,
    p: KSpacePerturbation,
    y: torch.Tensor,
    mask: torch.Tensor,
) -> torch.Tensor:
    """Corrupt measurements on their sampled support.

    "noise" adds per-plane Gaussian noise with std sigma times the median
    magnitude of the sampled entries (per sample). "phase_error" rotates
    each sampled column by a random angle uniform within +-alpha * 10
    degrees, leaving magnitudes unchanged. Unsampled locations stay zero.
    """
    if p.sigma < 0 or p.alpha < 0:
        raise ValueError("perturbation scales must be nonnegative")
    b, _, hh, ww = y.shape
    mask_b = mask.expand(b, 1, hh, ww)
    if p.kind == "noise":
        if p.sigma == 0:
            return y
        mag = torch.sqrt(y[:, 0] ** 2 + y[:, 1] ** 2)
        noise = torch.from_numpy(rng.standard_normal((b, 2, hh, ww))).to(y.dtype)
        out = y.clone()
        for i in range(b):
            sampled = mag[i][mask_b[i, 0] > 0]
            med = sampled.median() if sampled.numel() else torch.tensor(0.0, dtype=y.dtype)
            out[i] = y[i] + p.sigma * med * noise[i] * mask_b[i]
        return out
    if p.kind == "phase_error":
        if p.alpha == 0:
            return y
        bound = p.alpha * math.pi / 18.0
        phi = torch.from_numpy(rng.uniform(-bound, bound, size=(b, ww))).to(y.dtype)
        cos_p = torch.cos(phi)[:, None, None, :]
        sin_p = torch.sin(phi)[:, None, None, :]
        re = y[:, 0:1] * cos_p - y[:, 1:2] * sin_p
        im = y[:, 0:1] * sin_p + y[:, 1:2] * cos_p
        return torch.cat((re, im), dim=1) * mask_b
    raise ValueError(f"unknown perturbation kind {p.kind!r}")
