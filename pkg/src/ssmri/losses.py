"""Training objectives for measurement-only reconstruction.

Every loss maps (model, batch, rng, config) to a differentiable scalar.
Randomness is drawn from named streams (one per kind of draw) so that a
loss which skips a draw leaves the other streams untouched; that makes
the reduction identities between the composite losses hold bitwise when
two losses are evaluated with the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .models import Reconstructor
from .ops import complex_magnitude, fft2c
from .physics import (
    MriOperator,
    acs_plane,
    gen_gaussian_1d_mask,
    gen_split_masks,
    mask_pdf,
    splitting_weight_map,
)
from .transforms import KSpacePerturbation, apply, perturb_kspace, sample_group

__all__ = [
    "Batch",
    "LossConfig",
    "LossRng",
    "LossSpec",
    "REGISTRY",
    "loss_mc",
    "loss_ssdu",
    "loss_ssdu_fixed",
    "loss_weighted_ssdu",
    "loss_ei",
    "loss_moi",
    "loss_moei",
    "loss_vortex",
    "loss_adversarial_g",
    "loss_adversarial_d",
    "loss_uair",
    "loss_uair_d",
    "loss_supervised",
    "loss_a2a",
]


@dataclass
class Batch:
    """Measurements with their operators and, when available, ground truth."""

    y: torch.Tensor
    op: MriOperator
    x_gt: Optional[torch.Tensor] = None
    ids: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.y.dim() != 4 or self.y.shape[1] != 2:
            raise ValueError("y must be (B, 2, H, W)")
        if self.x_gt is not None and self.x_gt.shape != self.y.shape:
            raise ValueError("x_gt shape must match y")

    @property
    def size(self) -> int:
        return self.y.shape[0]


@dataclass
class LossConfig:
    """Knobs shared by the losses; defaults match the desk-scale setup."""

    metric: str = "l2"  # l2 | l1
    split_ratio: float = 0.6
    split_kind: str = "gaussian2d"  # gaussian2d | gaussian1d | uniform
    group: str = "diffeo"  # identity | rotation | diffeo | shift_rot_small
    group_magnitude: float = 0.3
    op_sampler: str = "gaussian1d"  # gaussian1d | fixed
    acceleration: float = 4.0
    acs_fraction: float = 0.08
    noise_sigma: float = 1.0
    phase_alpha: float = 1.0
    mc_weight: float = 1.0
    adv_weight: float = 1.0
    a2a_parts: int = 2
    a2a_seed: int = 0


_STREAMS = ("group", "op", "split", "perturb", "adv")


class LossRng:
    """Independent named randomness streams derived from one seed.

    Rebuilding with the same seed replays every stream, so a loss
    evaluated twice (or two losses that consume the same subset of
    streams) sees identical draws.
    """

    def __init__(self, seed):
        entropy = seed if isinstance(seed, (tuple, list)) else (int(seed),)
        for i, name in enumerate(_STREAMS):
            ss = np.random.SeedSequence((*entropy, i))
            setattr(self, name, np.random.Generator(np.random.PCG64(ss)))


def _default_cfg(cfg: Optional[LossConfig]) -> LossConfig:
    return cfg if cfg is not None else LossConfig()


def _reduce(cfg: LossConfig, diff: torch.Tensor) -> torch.Tensor:
    if cfg.metric == "l2":
        per = diff.pow(2).flatten(1).sum(dim=1)
    elif cfg.metric == "l1":
        per = diff.abs().flatten(1).sum(dim=1)
    else:
        raise ValueError(f"unknown metric {cfg.metric!r}")
    return per.mean()


def _sample_operator(rng: LossRng, cfg: LossConfig, op: MriOperator) -> MriOperator:
    if cfg.op_sampler == "fixed":
        return op
    if cfg.op_sampler == "gaussian1d":
        h, w = op.shape
        mask = gen_gaussian_1d_mask(rng.op, w, h, cfg.acceleration, cfg.acs_fraction)
        return MriOperator(mask, acs_plane(h, w, cfg.acs_fraction))
    raise ValueError(f"unknown operator sampler {cfg.op_sampler!r}")


def loss_mc(model: Reconstructor, batch: Batch, cfg: Optional[LossConfig] = None) -> torch.Tensor:
    """Measurement consistency: re-measure the estimate and compare to y."""
    cfg = _default_cfg(cfg)
    x_hat = model(batch.y, batch.op)
    return _reduce(cfg, batch.op.forward(x_hat) - batch.y)


def _per_sample_masks(op: MriOperator, b: int):
    for i in range(b):
        j = min(i, op.mask.shape[0] - 1)
        yield op.mask[j, 0], op.acs[min(i, op.acs.shape[0] - 1), 0]


def _draw_split(rng: LossRng, base: torch.Tensor, acs: torch.Tensor, cfg: LossConfig):
    for _ in range(2):
        m1, m2 = gen_split_masks(rng.split, base, cfg.split_ratio, cfg.split_kind, acs=acs)
        if m2.sum() > 0:
            return m1, m2
    raise ValueError("splitting left an empty loss set twice in a row")


def _ssdu_term(
    model: Reconstructor,
    batch: Batch,
    m_in: torch.Tensor,
    m_out: torch.Tensor,
    cfg: LossConfig,
    weight: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    acs_in = batch.op.acs * m_in
    op_in = MriOperator(m_in, acs_in)
    pred = model(m_in * batch.y, op_in)
    resid = m_out * fft2c(pred) - m_out * batch.y
    if weight is not None:
        resid = weight * resid
    return _reduce(cfg, resid)


def _stack_split(rng: LossRng, batch: Batch, cfg: LossConfig):
    ones, twos = [], []
    for base, acs in _per_sample_masks(batch.op, batch.size):
        if int((base - acs).sum().item()) < 2:
            raise ValueError("mask needs at least 2 non-calibration samples to split")
        m1, m2 = _draw_split(rng, base, acs, cfg)
        ones.append(m1)
        twos.append(m2)
    return torch.stack(ones)[:, None], torch.stack(twos)[:, None]


def loss_ssdu(
    model: Reconstructor, batch: Batch, rng: LossRng, cfg: Optional[LossConfig] = None
) -> torch.Tensor:
    """Measurement splitting: reconstruct from one part, test on the other.

    A fresh split is drawn per sample on every call; the calibration
    region always stays on the input side.
    """
    cfg = _default_cfg(cfg)
    if not 0 < cfg.split_ratio < 1:
        raise ValueError("split_ratio must be in (0, 1)")
    m1, m2 = _stack_split(rng, batch, cfg)
    return _ssdu_term(model, batch, m1, m2, cfg)


def loss_ssdu_fixed(
    model: Reconstructor,
    batch: Batch,
    m_in: torch.Tensor,
    m_out: torch.Tensor,
    cfg: Optional[LossConfig] = None,
) -> torch.Tensor:
    """Splitting loss with caller-supplied masks (no randomness)."""
    cfg = _default_cfg(cfg)
    return _ssdu_term(model, batch, _expand_mask(m_in), _expand_mask(m_out), cfg)


def loss_weighted_ssdu(
    model: Reconstructor, batch: Batch, rng: LossRng, cfg: Optional[LossConfig] = None
) -> torch.Tensor:
    """Splitting loss with the density-compensation weighting.

    The split keeps base ⊙ M̃ where M̃ is an independent column mask of
    keep rate split_ratio; the residual is weighted by (1 - K)^(-1/2)
    with K = (1 - P̃P)^(-1)(1 - P) built from the two generator pdfs,
    which removes the sampling bias of the split.
    """
    cfg = _default_cfg(cfg)
    if not 0 < cfg.split_ratio < 1:
        raise ValueError("split_ratio must be in (0, 1)")
    h, w = batch.op.shape
    p = mask_pdf(
        "gaussian1d", width=w, height=h,
        acceleration=cfg.acceleration, acs_fraction=cfg.acs_fraction,
    )
    p_tilde = mask_pdf(
        "gaussian1d", width=w, height=h,
        acceleration=1.0 / cfg.split_ratio, acs_fraction=cfg.acs_fraction,
    )
    weight = splitting_weight_map(p, p_tilde)
    ones, twos = [], []
    for base, _ in _per_sample_masks(batch.op, batch.size):
        m1 = m2 = None
        for _ in range(2):
            tilde = gen_gaussian_1d_mask(rng.split, w, h, 1.0 / cfg.split_ratio, cfg.acs_fraction)
            m1 = base * tilde
            m2 = base - m1
            if m2.sum() > 0:
                break
        if m2.sum() == 0:
            raise ValueError("splitting left an empty loss set twice in a row")
        ones.append(m1)
        twos.append(m2)
    m1 = torch.stack(ones)[:, None]
    m2 = torch.stack(twos)[:, None]
    return _ssdu_term(model, batch, m1, m2, cfg, weight=weight)


def _consistency_term(
    model: Reconstructor,
    batch: Batch,
    rng: LossRng,
    cfg: LossConfig,
    use_group: bool,
    sample_op: bool,
) -> torch.Tensor:
    x_hat = model(batch.y, batch.op)
    mc = _reduce(cfg, batch.op.forward(x_hat) - batch.y)
    target = x_hat
    if use_group:
        g = sample_group(rng.group, cfg.group, cfg.group_magnitude)
        target = apply(g, x_hat)
    a = _sample_operator(rng, cfg, batch.op) if sample_op else batch.op
    x_again = model(a.forward(target), a)
    return cfg.mc_weight * mc + _reduce(cfg, target - x_again)


def loss_ei(
    model: Reconstructor, batch: Batch, rng: LossRng, cfg: Optional[LossConfig] = None
) -> torch.Tensor:
    """Equivariance: a transformed estimate must survive re-measurement by
    the same operator."""
    return _consistency_term(model, batch, rng, _default_cfg(cfg), use_group=True, sample_op=False)


def loss_moi(
    model: Reconstructor, batch: Batch, rng: LossRng, cfg: Optional[LossConfig] = None
) -> torch.Tensor:
    """Operator diversity: the estimate must survive re-measurement by a
    freshly drawn operator."""
    return _consistency_term(model, batch, rng, _default_cfg(cfg), use_group=False, sample_op=True)


def loss_moei(
    model: Reconstructor, batch: Batch, rng: LossRng, cfg: Optional[LossConfig] = None
) -> torch.Tensor:
    """Both at once: transformed estimate, fresh operator. Reduces to the
    two special cases under a trivial group or a fixed operator."""
    return _consistency_term(model, batch, rng, _default_cfg(cfg), use_group=True, sample_op=True)


def loss_vortex(
    model: Reconstructor, batch: Batch, rng: LossRng, cfg: Optional[LossConfig] = None
) -> torch.Tensor:
    """Augmentation consistency: reconstructions from clean and corrupted
    measurements must agree after a shared image-domain transform."""
    cfg = _default_cfg(cfg)
    x_hat = model(batch.y, batch.op)
    mc = _reduce(cfg, batch.op.forward(x_hat) - batch.y)
    g2 = sample_group(rng.group, cfg.group, cfg.group_magnitude)
    y1 = perturb_kspace(
        rng.perturb, KSpacePerturbation("noise", sigma=cfg.noise_sigma), batch.y, batch.op.mask
    )
    y1 = perturb_kspace(
        rng.perturb, KSpacePerturbation("phase_error", alpha=cfg.phase_alpha), y1, batch.op.mask
    )
    x_pert = model(y1, batch.op)
    return cfg.mc_weight * mc + _reduce(cfg, apply(g2, x_hat) - apply(g2, x_pert))


def _lift(y: torch.Tensor, op: MriOperator) -> torch.Tensor:
    return complex_magnitude(op.adjoint(y))


def _rolled_real(batch: Batch) -> torch.Tensor:
    mask = batch.op.mask
    acs = batch.op.acs
    if mask.shape[0] > 1:
        mask = mask.roll(1, dims=0)
        acs = acs.roll(1, dims=0)
    other = MriOperator(mask, acs)
    return _lift(batch.y.roll(1, dims=0), other)


def loss_adversarial_g(
    model: Reconstructor,
    d_model,
    batch: Batch,
    rng: LossRng,
    cfg: Optional[LossConfig] = None,
) -> torch.Tensor:
    """Least-squares generator objective plus measurement consistency."""
    cfg = _default_cfg(cfg)
    if batch.size < 2:
        raise ValueError("adversarial losses need batch size >= 2")
    x_hat = model(batch.y, batch.op)
    mc = _reduce(cfg, batch.op.forward(x_hat) - batch.y)
    a = _sample_operator(rng, cfg, batch.op)
    fake = _lift(a.forward(x_hat), a)
    score = d_model(fake)
    return cfg.mc_weight * mc + cfg.adv_weight * 0.5 * (score - 1.0).pow(2).mean()


def loss_adversarial_d(
    model: Reconstructor,
    d_model,
    batch: Batch,
    rng: LossRng,
    cfg: Optional[LossConfig] = None,
) -> torch.Tensor:
    """Least-squares critic objective: real measurements vs re-measured
    estimates (detached)."""
    cfg = _default_cfg(cfg)
    if batch.size < 2:
        raise ValueError("adversarial losses need batch size >= 2")
    with torch.no_grad():
        x_hat = model(batch.y, batch.op)
    a = _sample_operator(rng, cfg, batch.op)
    fake = _lift(a.forward(x_hat), a).detach()
    real = _rolled_real(batch)
    return 0.5 * ((d_model(real) - 1.0).pow(2).mean() + d_model(fake).pow(2).mean())


def loss_uair(
    model: Reconstructor,
    d_model,
    batch: Batch,
    rng: LossRng,
    cfg: Optional[LossConfig] = None,
) -> torch.Tensor:
    """Adversarial term on re-measured estimates plus a cycle term through a
    second reconstruction."""
    cfg = _default_cfg(cfg)
    if batch.size < 2:
        raise ValueError("adversarial losses need batch size >= 2")
    x_hat = model(batch.y, batch.op)
    a = _sample_operator(rng, cfg, batch.op)
    y_hat = a.forward(x_hat)
    score = d_model(_lift(y_hat, a))
    cycle = _reduce(cfg, a.forward(model(y_hat, a)) - y_hat)
    return cfg.adv_weight * 0.5 * (score - 1.0).pow(2).mean() + cycle


def loss_uair_d(
    model: Reconstructor,
    d_model,
    batch: Batch,
    rng: LossRng,
    cfg: Optional[LossConfig] = None,
) -> torch.Tensor:
    cfg = _default_cfg(cfg)
    if batch.size < 2:
        raise ValueError("adversarial losses need batch size >= 2")
    with torch.no_grad():
        x_hat = model(batch.y, batch.op)
    a = _sample_operator(rng, cfg, batch.op)
    fake = _lift(a.forward(x_hat), a).detach()
    real = _lift(batch.y, batch.op)
    return 0.5 * ((d_model(real) - 1.0).pow(2).mean() + d_model(fake).pow(2).mean())


def loss_supervised(
    model: Reconstructor, batch: Batch, cfg: Optional[LossConfig] = None
) -> torch.Tensor:
    """Distance to ground truth; the oracle upper bound."""
    cfg = _default_cfg(cfg)
    if batch.x_gt is None:
        raise ValueError("supervised loss needs ground truth in the batch")
    return _reduce(cfg, model(batch.y, batch.op) - batch.x_gt)


def _expand_mask(m: torch.Tensor) -> torch.Tensor:
    if m.dim() == 2:
        return m[None, None]
    if m.dim() == 3:
        return m[:, None]
    return m


def _derived_partition(batch: Batch, cfg: LossConfig) -> List[torch.Tensor]:
    """Fixed per-sample partition of each mask into a2a_parts disjoint sets,
    derived from a2a_seed so every call sees the same sets."""
    parts = [[] for _ in range(cfg.a2a_parts)]
    for i, (base, _) in enumerate(_per_sample_masks(batch.op, batch.size)):
        sid = batch.ids[i] if batch.ids is not None else i
        rng = np.random.default_rng(np.random.SeedSequence((cfg.a2a_seed, int(sid))))
        # split off equal shares one at a time; the leftover is the last part
        remaining = base
        for j in range(cfg.a2a_parts - 1):
            piece, remaining = gen_split_masks(rng, remaining, 1.0 / (cfg.a2a_parts - j), "uniform")
            parts[j].append(piece)
        parts[-1].append(remaining)
    return [torch.stack(p)[:, None] for p in parts]


def loss_a2a(
    model: Reconstructor,
    batch: Batch,
    cfg: Optional[LossConfig] = None,
    partition: Optional[Sequence[torch.Tensor]] = None,
) -> torch.Tensor:
    """Sum of splitting losses over all ordered pairs of a fixed disjoint
    partition of each sampling mask."""
    cfg = _default_cfg(cfg)
    if partition is None:
        if cfg.a2a_parts < 2:
            raise ValueError("a2a needs at least 2 partition parts")
        parts = _derived_partition(batch, cfg)
    else:
        parts = [_expand_mask(m) for m in partition]
        if len(parts) < 2:
            raise ValueError("a2a needs at least 2 partition parts")
        stack = torch.stack([p.expand_as(parts[0]) for p in parts])
        if torch.any(stack.sum(dim=0) > 1):
            raise ValueError("partition parts overlap")
        for p in parts:
            if torch.any(p * (1 - batch.op.mask) != 0):
                raise ValueError("partition exceeds the sampling mask")
    total = None
    for k, mk in enumerate(parts):
        acs_k = batch.op.acs * mk
        op_k = MriOperator(mk, acs_k)
        pred_k = fft2c(model(mk * batch.y, op_k))
        for l, ml in enumerate(parts):
            if l == k:
                continue
            term = _reduce(cfg, ml * pred_k - ml * batch.y)
            total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class LossSpec:
    """Registry entry: how the trainer should drive a loss."""

    generator: Callable
    discriminator: Optional[Callable] = None
    needs_gt: bool = False
    reconstructions: int = 1  # forward passes per step, for budgeting


def _no_rng(fn):
    return lambda model, batch, rng, cfg: fn(model, batch, cfg)


REGISTRY: Dict[str, LossSpec] = {
    "mc": LossSpec(_no_rng(loss_mc)),
    "ssdu": LossSpec(loss_ssdu),
    "n2i": LossSpec(loss_ssdu),  # trained like ssdu; differs at evaluation
    "weighted_ssdu": LossSpec(loss_weighted_ssdu),
    "ei": LossSpec(loss_ei, reconstructions=2),
    "moi": LossSpec(loss_moi, reconstructions=2),
    "moei": LossSpec(loss_moei, reconstructions=2),
    "vortex": LossSpec(loss_vortex, reconstructions=2),
    "adversarial": LossSpec(loss_adversarial_g, discriminator=loss_adversarial_d, reconstructions=2),
    "uair": LossSpec(loss_uair, discriminator=loss_uair_d, reconstructions=3),
    "supervised": LossSpec(_no_rng(loss_supervised), needs_gt=True),
    "a2a": LossSpec(lambda m, b, r, c: loss_a2a(m, b, c), reconstructions=2),
}
