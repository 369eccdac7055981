"""Reconstruction network and adversarial discriminator.

The reconstructor unrolls a few iterations of denoise / data-consistency
(MoDL style) around a residual convolutional denoiser with no
normalization layers. With all denoiser weights at zero the network is
exactly the zero-filled adjoint, which pins the no-learning baseline.
"""

from __future__ import annotations

import math
import struct
from typing import BinaryIO, Dict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .physics import MriOperator, data_consistency

__all__ = [
    "ResUNet",
    "ConvDenoiser",
    "Reconstructor",
    "Discriminator",
    "init_params",
    "init_discriminator",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"SSMRCKPT"
CKPT_VERSION = 1


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        return F.relu(self.conv2(x))


class ResUNet(nn.Module):
    """Residual encoder-decoder denoiser: output is input plus a correction.

    ``depth`` counts resolution levels; spatial size must be divisible by
    2^(depth-1). No normalization layers anywhere.
    """

    def __init__(self, in_channels: int = 2, base: int = 32, depth: int = 3):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        widths = [base * 2**i for i in range(depth)]
        self.encoders = nn.ModuleList()
        ch = in_channels
        for wd in widths:
            self.encoders.append(ConvBlock(ch, wd))
            ch = wd
        self.up_convs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for wd in reversed(widths[:-1]):
            self.up_convs.append(nn.Conv2d(ch, wd, 1))
            self.decoders.append(ConvBlock(2 * wd, wd))
            ch = wd
        self.head = nn.Conv2d(ch, in_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        factor = 2 ** (self.depth - 1)
        if h % factor or w % factor:
            raise ValueError(f"spatial size {h}x{w} not divisible by {factor}")
        skips = []
        z = x
        for i, enc in enumerate(self.encoders):
            z = enc(z)
            if i < self.depth - 1:
                skips.append(z)
                z = F.avg_pool2d(z, 2)
        for up, dec, skip in zip(self.up_convs, self.decoders, reversed(skips)):
            z = up(F.interpolate(z, scale_factor=2, mode="bilinear", align_corners=False))
            z = dec(torch.cat((z, skip), dim=1))
        return x + self.head(z)


class ConvDenoiser(nn.Module):
    """Two-layer residual corrector with a smooth activation.

    Small enough for finite-difference gradient audits, which need a
    twice-differentiable forward (hence tanh instead of relu).
    """

    def __init__(self, in_channels: int = 2, hidden: int = 4):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(torch.tanh(self.conv1(x)))


class Reconstructor(nn.Module):
    """Unrolled reconstruction f(y, A): adjoint init, then alternate the
    denoiser with closed-form data consistency for a fixed iteration count.

    The data-consistency weight is trained in log space so it stays positive.
    """

    def __init__(self, denoiser: nn.Module, unrolled_iters: int = 3, lam: float = 1.0):
        super().__init__()
        if unrolled_iters < 1:
            raise ValueError("unrolled_iters must be >= 1")
        if lam <= 0:
            raise ValueError("lam must be positive")
        self.denoiser = denoiser
        self.unrolled_iters = unrolled_iters
        self.log_lambda = nn.Parameter(torch.tensor(math.log(lam)))

    @property
    def lam(self) -> torch.Tensor:
        return self.log_lambda.exp()

    def forward(self, y: torch.Tensor, op: MriOperator) -> torch.Tensor:
        x = op.adjoint(y)
        for _ in range(self.unrolled_iters):
            z = self.denoiser(x)
            x = data_consistency(z, y, op.mask, self.lam)
        return x


class Discriminator(nn.Module):
    """Patch-pooling convolutional critic with residual skips and a smooth
    activation; returns one unbounded score per input image."""

    def __init__(self, in_channels: int = 1, base: int = 16, blocks: int = 3):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, base, 3, padding=1)
        self.blocks = nn.ModuleList(
            nn.Conv2d(base, base, 3, padding=1) for _ in range(blocks)
        )
        self.head = nn.Linear(base, 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4:
            raise ValueError("expected (B, C, H, W) input")
        z = torch.tanh(self.stem(img))
        for blk in self.blocks:
            z = z + torch.tanh(blk(z))
            if min(z.shape[-2:]) >= 4:
                z = F.avg_pool2d(z, 2)
        z = z.mean(dim=(-2, -1))
        return self.head(z).squeeze(-1)


def _fan_in(p: torch.Tensor) -> int:
    if p.dim() <= 1:
        return max(p.numel(), 1)
    return p[0].numel()


def deterministic_init_(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialize weights to U(-1/sqrt(fan_in), +1/sqrt(fan_in)) from a
    dedicated generator, so identical seeds give bitwise-identical params."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                bound = 1.0 / math.sqrt(_fan_in(m.weight))
                m.weight.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=g)
    return module


def zero_init_(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                m.weight.zero_()
                if m.bias is not None:
                    m.bias.zero_()
    return module


def init_params(
    seed: int,
    denoiser: str = "unet",
    base: int = 32,
    depth: int = 3,
    unrolled_iters: int = 3,
    lam: float = 1.0,
    zero_init: bool = False,
) -> Reconstructor:
    """Build a reconstructor with deterministic initialization.

    ``denoiser`` is "unet" (residual U-Net, ``base``/``depth``) or "conv2"
    (two-layer corrector with ``base`` hidden channels). ``zero_init``
    zeroes the correction path so the model is exactly the adjoint.
    """
    if denoiser == "unet":
        net = ResUNet(base=base, depth=depth)
    elif denoiser == "conv2":
        net = ConvDenoiser(hidden=base)
    else:
        raise ValueError(f"unknown denoiser {denoiser!r}")
    model = Reconstructor(net, unrolled_iters=unrolled_iters, lam=lam)
    deterministic_init_(model, seed)
    if zero_init:
        zero_init_(model)
    return model


def init_discriminator(
    seed: int, in_channels: int = 1, base: int = 16, zero_init: bool = False
) -> Discriminator:
    d = Discriminator(in_channels=in_channels, base=base)
    deterministic_init_(d, seed)
    if zero_init:
        zero_init_(d)
    return d


def _write_tensor(fh: BinaryIO, name: str, t: torch.Tensor) -> None:
    data = t.detach().cpu().to(torch.float32).numpy().astype("<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def save_checkpoint(path: str, module: nn.Module) -> None:
    """Write all module parameters and buffers as named f32 tensors."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, t in module.state_dict().items():
            _write_tensor(fh, name, t)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def read_checkpoint(path: str) -> Dict[str, torch.Tensor]:
    tensors: Dict[str, torch.Tensor] = {}
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            count = 1
            for d in dims:
                count *= d
            raw = _read_exact(fh, 4 * count)
            flat = torch.frombuffer(bytearray(raw), dtype=torch.float32)
            tensors[name] = flat.reshape(dims).clone()
    return tensors


def load_checkpoint(path: str, module: nn.Module) -> nn.Module:
    """Load a checkpoint into a module; names and shapes must match."""
    tensors = read_checkpoint(path)
    state = module.state_dict()
    if set(tensors) != set(state):
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(state[name].shape):
            raise ValueError(
                f"shape mismatch for {name}: file {tuple(t.shape)}, "
                f"model {tuple(state[name].shape)}"
            )
    module.load_state_dict(tensors)
    return module
