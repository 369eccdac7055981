"""Undersampled MRI forward model: masked Fourier operator, mask generators,
mask probability densities, and the closed-form data-consistency step.

Masks live on the full k-space grid (zero-filled convention) so splitting and
weighting are elementwise. Column masks are generated with an exact column
budget: inclusion probabilities are capped-proportional to a Gaussian profile
and realized by randomized systematic sampling, which keeps the per-column
inclusion probability analytic (see :func:`mask_pdf`).
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
import torch

from .ops import fft2c, ifft2c

__all__ = [
    "MriOperator",
    "acs_columns",
    "gen_gaussian_1d_mask",
    "gen_split_masks",
    "mask_pdf",
    "splitting_weight_map",
    "data_consistency",
]


def _as_mask_tensor(mask: torch.Tensor) -> torch.Tensor:
    """Normalize a mask to (B, 1, H, W) float32 and validate binarity."""
    if mask.dim() == 2:
        mask = mask[None, None]
    elif mask.dim() == 3:
        mask = mask[:, None]
    elif mask.dim() != 4:
        raise ValueError(f"mask must have 2-4 dims, got {mask.dim()}")
    if mask.shape[-3] != 1:
        raise ValueError("mask channel dim must be 1")
    mask = mask.to(torch.float32)
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    return mask


class MriOperator:
    """A = M ∘ F: fft2c followed by a binary k-space projection.

    ``mask`` is (H, W), (B, H, W) or (B, 1, H, W); it is stored as
    (B, 1, H, W) and broadcasts against two-plane images (B, 2, H, W).
    ``acs`` optionally marks the always-sampled calibration region (a
    binary plane of the same spatial size, subset of the mask).
    """

    def __init__(self, mask: torch.Tensor, acs: Optional[torch.Tensor] = None):
        self.mask = _as_mask_tensor(mask)
        if acs is None:
            acs = torch.zeros_like(self.mask)
        self.acs = _as_mask_tensor(acs)
        if self.acs.shape[-2:] != self.mask.shape[-2:]:
            raise ValueError("acs spatial size must match mask")
        if torch.any(self.acs * (1 - self.mask) != 0):
            raise ValueError("acs region must be sampled by the mask")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mask.shape[-2], self.mask.shape[-1]

    def _check(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[-3] != 2:
            raise ValueError(f"expected (B, 2, H, W) input, got {tuple(x.shape)}")
        if x.shape[-2:] != self.mask.shape[-2:]:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} does not match mask {self.shape}"
            )
        if self.mask.shape[0] not in (1, x.shape[0]):
            raise ValueError("batch size does not match mask batch")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Masked k-space of an image: mask ⊙ fft2c(x)."""
        self._check(x)
        return self.mask * fft2c(x)

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        """Zero-filled reconstruction: ifft2c(mask ⊙ y)."""
        self._check(y)
        return ifft2c(self.mask * y)

    def select(self, i: int) -> "MriOperator":
        """Single-sample view (mask batch of size 1)."""
        if self.mask.shape[0] == 1:
            return MriOperator(self.mask, self.acs)
        acs = self.acs if self.acs.shape[0] == 1 else self.acs[i : i + 1]
        return MriOperator(self.mask[i : i + 1], acs)


def _capped_proportional(weights: np.ndarray, count: int) -> np.ndarray:
    """Inclusion probabilities pi = min(1, c*w) with sum(pi) = count."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.size
    if not 0 <= count <= n:
        raise ValueError(f"count {count} out of range for {n} items")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    pi = np.zeros(n)
    if count == 0:
        return pi
    free = np.ones(n, dtype=bool)
    remaining = float(count)
    while True:
        total = w[free].sum()
        if total <= 0:
            raise ValueError("not enough positive weight to reach the target count")
        scaled = remaining / total * w
        over = free & (scaled >= 1.0)
        if not over.any():
            pi[free] = scaled[free]
            return pi
        pi[over] = 1.0
        free &= ~over
        remaining = count - float((~free).sum())
        if remaining <= 0:
            return pi


def _systematic_sample(rng: np.random.Generator, probs: np.ndarray, count: int) -> np.ndarray:
    """Draw exactly ``count`` distinct indices, index i with probability probs[i].

    Randomized systematic sampling: after a random permutation, unit-spaced
    points are dropped on the cumulative probability axis. Requires
    sum(probs) == count and probs <= 1.
    """
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    order = rng.permutation(probs.size)
    p = probs[order]
    cum = np.cumsum(p)
    cum[-1] = count  # pin fp drift; sum(probs) == count by construction
    points = rng.uniform() + np.arange(count)
    idx = np.searchsorted(cum, points, side="right")
    if len(np.unique(idx)) != count:
        raise RuntimeError("systematic sampling produced duplicate picks")
    return np.sort(order[idx])


def acs_columns(width: int, acs_fraction: float) -> np.ndarray:
    """Indices of the centered autocalibration column block."""
    if not 0 <= acs_fraction <= 1:
        raise ValueError("acs_fraction must be in [0, 1]")
    n = int(round(width * acs_fraction))
    start = width // 2 - n // 2
    return np.arange(start, start + n)


def _gaussian_column_weights(width: int) -> np.ndarray:
    cols = np.arange(width, dtype=np.float64)
    sigma = width / 4.0
    return np.exp(-0.5 * ((cols - width // 2) / sigma) ** 2)


def _column_budget(width: int, acceleration: float, acs_fraction: float) -> Tuple[int, np.ndarray]:
    if acceleration < 1:
        raise ValueError("acceleration must be >= 1")
    target = int(round(width / acceleration))
    acs = acs_columns(width, acs_fraction)
    if acs.size > target:
        raise ValueError(
            f"{acs.size} calibration columns exceed the {target}-column budget"
        )
    return target, acs


def gen_gaussian_1d_mask(
    rng: np.random.Generator,
    width: int,
    height: int,
    acceleration: float,
    acs_fraction: float = 0.0,
) -> torch.Tensor:
    """Random column mask: round(width/acceleration) columns, center-weighted.

    The centered ACS block is always on; the remaining columns are chosen
    without replacement with inclusion probability capped-proportional to a
    Gaussian profile (sigma = width/4) centered at the k-space center.
    Returns an (H, W) float32 {0,1} tensor.
    """
    target, acs = _column_budget(width, acceleration, acs_fraction)
    weights = _gaussian_column_weights(width)
    weights[acs] = 0.0
    probs = _capped_proportional(weights, target - acs.size)
    picked = _systematic_sample(rng, probs, target - acs.size)
    cols = np.zeros(width, dtype=np.float32)
    cols[acs] = 1.0
    cols[picked] = 1.0
    return torch.from_numpy(np.tile(cols, (height, 1)))


def acs_plane(height: int, width: int, acs_fraction: float) -> torch.Tensor:
    """(H, W) binary plane marking the ACS column block."""
    plane = np.zeros((height, width), dtype=np.float32)
    plane[:, acs_columns(width, acs_fraction)] = 1.0
    return torch.from_numpy(plane)


def _split_weights(base: np.ndarray, kind: str) -> np.ndarray:
    h, w = base.shape
    if kind == "uniform":
        return np.ones((h, w))
    if kind == "gaussian2d":
        sigma = w / 4.0
        gy = np.exp(-0.5 * ((np.arange(h) - h // 2) / sigma) ** 2)
        gx = np.exp(-0.5 * ((np.arange(w) - w // 2) / sigma) ** 2)
        return np.outer(gy, gx)
    if kind == "gaussian1d":
        return np.tile(_gaussian_column_weights(w), (h, 1))
    raise ValueError(f"unknown split kind {kind!r}")


def gen_split_masks(
    rng: np.random.Generator,
    base: torch.Tensor,
    keep_ratio: float,
    kind: str = "gaussian2d",
    acs: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Partition a sampled mask into (M1, M2) with M1 + M2 = base, M1 ⊙ M2 = 0.

    Exactly round(keep_ratio * n) of the n sampled non-ACS locations go to M1
    (weighted by ``kind``); the ACS region always goes to M1. keep_ratio = 1
    returns (base, 0).
    """
    if not 0 < keep_ratio <= 1:
        raise ValueError("keep_ratio must be in (0, 1]")
    base_np = base.detach().cpu().numpy().reshape(base.shape[-2], base.shape[-1])
    if base_np.sum() == 0:
        raise ValueError("base mask is all zero")
    if keep_ratio == 1.0:
        return base.clone(), torch.zeros_like(base)
    acs_np = (
        np.zeros_like(base_np)
        if acs is None
        else acs.detach().cpu().numpy().reshape(base_np.shape)
    )
    candidates = (base_np > 0) & (acs_np == 0)
    flat_idx = np.flatnonzero(candidates)
    n = flat_idx.size
    k = int(round(keep_ratio * n))
    weights = _split_weights(base_np, kind).reshape(-1)[flat_idx]
    probs = _capped_proportional(weights, k)
    picked = flat_idx[_systematic_sample(rng, probs, k)]
    m1 = np.where(acs_np > 0, base_np, 0.0).astype(np.float32).reshape(-1)
    m1[picked] = 1.0
    m1 = m1.reshape(base_np.shape)
    m2 = base_np - m1
    m1_t = torch.from_numpy(m1).to(base.dtype).reshape(base.shape)
    m2_t = torch.from_numpy(m2.astype(np.float32)).to(base.dtype).reshape(base.shape)
    return m1_t, m2_t


def mask_pdf(kind: str, **params) -> torch.Tensor:
    """Per-location inclusion probability of a mask generator, as (H, W).

    Kinds:
      - "full": all ones; params height, width.
      - "gaussian1d": pdf of :func:`gen_gaussian_1d_mask`; params width,
        height, acceleration, acs_fraction.
      - "uniform1d": same budget but flat column weights.
    ACS locations have probability exactly 1.
    """
    if kind == "full":
        return torch.ones(params["height"], params["width"])
    if kind in ("gaussian1d", "uniform1d"):
        width = params["width"]
        height = params["height"]
        target, acs = _column_budget(width, params["acceleration"], params.get("acs_fraction", 0.0))
        if kind == "gaussian1d":
            weights = _gaussian_column_weights(width)
        else:
            weights = np.ones(width)
        weights[acs] = 0.0
        probs = _capped_proportional(weights, target - acs.size)
        probs[acs] = 1.0
        return torch.from_numpy(np.tile(probs, (height, 1))).to(torch.float32)
    raise ValueError(f"unknown pdf kind {kind!r}")


def splitting_weight_map(p: torch.Tensor, p_tilde: torch.Tensor) -> torch.Tensor:
    """Elementwise residual weighting (1 - K)^(-1/2), K = (1 - P̃P)^(-1)(1 - P).

    ``p`` is the imaging-mask pdf, ``p_tilde`` the splitting-mask pdf; both
    diagonal, so K reduces to scalar arithmetic per location. Fully sampled
    locations (P = 1) get weight 1.
    """
    p = p.to(torch.float64)
    p_tilde = p_tilde.to(torch.float64)
    k = torch.where(p >= 1.0, torch.zeros_like(p), (1.0 - p) / (1.0 - p_tilde * p))
    one_minus_k = 1.0 - k
    if torch.any(one_minus_k <= 0):
        raise ValueError("weight map undefined: 1 - K <= 0 at some location")
    return (one_minus_k ** -0.5).to(torch.float32)


def data_consistency(
    z: torch.Tensor, y: torch.Tensor, mask: torch.Tensor, lam: torch.Tensor
) -> torch.Tensor:
    """Closed-form argmin_x ‖M F x − y‖² + λ‖x − z‖².

    Solved per k-space location: X = (mask ⊙ y + λ · fft2c(z)) / (mask + λ);
    returns ifft2c(X). Differentiable in z, y and λ.
    """
    lam_t = torch.as_tensor(lam)
    if torch.any(lam_t <= 0):
        raise ValueError("lambda must be positive")
    num = mask * y + lam_t * fft2c(z)
    return ifft2c(num / (mask + lam_t))
