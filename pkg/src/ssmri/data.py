"""Synthetic phantom data, the dataset container format, and slice ingestion.

Container layout ("SSMRIDS1"): magic, u32 little-endian header length, a
JSON header, then per-sample float32 little-endian planes in field order
x_gt_re, x_gt_im, y_re, y_im, mask.

Raw slice layout ("SSMRSLC1"): magic, u32 height, u32 width, one float32
little-endian magnitude plane.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .losses import Batch
from .ops import fft2c
from .physics import MriOperator, acs_plane, gen_gaussian_1d_mask

__all__ = [
    "PhantomSpec",
    "gen_phantom",
    "Dataset",
    "simulate_dataset",
    "ingest_slices",
    "write_slice",
    "read_slice",
]

DATASET_MAGIC = b"SSMRIDS1"
SLICE_MAGIC = b"SSMRSLC1"
DATASET_VERSION = 1
FIELDS = ("x_gt_re", "x_gt_im", "y_re", "y_im", "mask")

MASK_MODES = ("per_sample", "fixed")


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the random ellipse phantoms."""

    size: int = 64
    n_ellipses: Tuple[int, int] = (4, 9)
    intensity: Tuple[float, float] = (0.2, 1.0)
    rotation: Tuple[float, float] = (0.0, 180.0)
    phase: bool = True

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("size must be at least 16")
        for name in ("n_ellipses", "intensity", "rotation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted")
        if self.n_ellipses[0] < 1:
            raise ValueError("need at least one ellipse")
        if not 0 < self.intensity[0] <= self.intensity[1] <= 1:
            raise ValueError("intensity bounds must lie in (0, 1]")


def gen_phantom(rng: np.random.Generator, spec: PhantomSpec) -> torch.Tensor:
    """Random ellipse-sum phantom as a (2, H, W) float32 image.

    Magnitudes are clipped to the intensity ceiling and min-max
    normalized to [0, 1], so the brightest pixel is exactly 1. With
    ``spec.phase`` a smooth low-order polynomial phase is applied,
    otherwise the imaginary plane is zero.
    """
    s = spec.size
    axis = np.linspace(-0.5, 0.5, s)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")

    n = int(rng.integers(spec.n_ellipses[0], spec.n_ellipses[1] + 1))
    centers = rng.uniform(-0.35, 0.35, size=(n, 2))
    semi = rng.uniform(0.08, 0.4, size=(n, 2))
    theta = np.deg2rad(rng.uniform(spec.rotation[0], spec.rotation[1], size=n))
    values = rng.uniform(spec.intensity[0], spec.intensity[1], size=n)

    mag = np.zeros((s, s))
    for i in range(n):
        dy = yy - centers[i, 0]
        dx = xx - centers[i, 1]
        u = np.cos(theta[i]) * dx + np.sin(theta[i]) * dy
        v = -np.sin(theta[i]) * dx + np.cos(theta[i]) * dy
        mag += values[i] * ((u / semi[i, 0]) ** 2 + (v / semi[i, 1]) ** 2 <= 1.0)

    mag = np.clip(mag, 0.0, spec.intensity[1])
    peak = mag.max()
    if peak <= 0:
        raise RuntimeError("degenerate phantom: no ellipse hit the grid")
    mag = (mag - mag.min()) / (peak - mag.min())

    if spec.phase:
        c = rng.uniform(-np.pi / 2, np.pi / 2, size=6)
        u, v = 2 * xx, 2 * yy
        phi = c[0] + c[1] * u + c[2] * v + c[3] * u * v + c[4] * u**2 + c[5] * v**2
        planes = np.stack([mag * np.cos(phi), mag * np.sin(phi)])
    else:
        planes = np.stack([mag, np.zeros_like(mag)])
    return torch.from_numpy(planes).to(torch.float32)


class Dataset:
    """In-memory dataset of ground-truth images, measurements and masks."""

    def __init__(
        self,
        x_gt: torch.Tensor,
        y: torch.Tensor,
        masks: torch.Tensor,
        header: dict,
    ):
        if x_gt.shape != y.shape or x_gt.shape[0] != masks.shape[0]:
            raise ValueError("x_gt, y and masks disagree on sample count or size")
        self.x_gt = x_gt
        self.y = y
        self.masks = masks
        self.header = header

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def height(self) -> int:
        return self.y.shape[-2]

    @property
    def width(self) -> int:
        return self.y.shape[-1]

    @property
    def has_gt(self) -> bool:
        return bool(self.header.get("has_gt", True))

    @property
    def train_ids(self) -> List[int]:
        return list(self.header["train_ids"])

    @property
    def test_ids(self) -> List[int]:
        return list(self.header["test_ids"])

    def _acs(self) -> Optional[torch.Tensor]:
        frac = float(self.header.get("acs_fraction", 0.0))
        if frac <= 0:
            return None
        return acs_plane(self.height, self.width, frac)

    def operator(self, ids: Sequence[int]) -> MriOperator:
        return MriOperator(self.masks[list(ids)], self._acs())

    def gt(self, ids: Sequence[int]) -> torch.Tensor:
        """Ground-truth images; the only sanctioned GT access path."""
        if not self.has_gt:
            raise ValueError("dataset carries no ground truth")
        return self.x_gt[list(ids)]

    def batch(self, ids: Sequence[int], with_gt: bool = False) -> Batch:
        ids = list(ids)
        return Batch(
            y=self.y[ids],
            op=self.operator(ids),
            x_gt=self.gt(ids) if with_gt else None,
            ids=ids,
        )

    def strip_gt(self) -> "Dataset":
        """Copy with ground truth removed (planes zeroed, flag cleared)."""
        header = dict(self.header)
        header["has_gt"] = False
        return Dataset(torch.zeros_like(self.x_gt), self.y, self.masks, header)

    def save(self, path: str) -> None:
        header = dict(self.header)
        header.setdefault("version", DATASET_VERSION)
        header["n_samples"] = self.n
        header["height"] = self.height
        header["width"] = self.width
        header["fields"] = list(FIELDS)
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(DATASET_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            planes = torch.cat(
                [self.x_gt, self.y, self.masks.expand(-1, 1, -1, -1)], dim=1
            )
            f.write(planes.numpy().astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str) -> "Dataset":
        with open(path, "rb") as f:
            magic = f.read(len(DATASET_MAGIC))
            if magic != DATASET_MAGIC:
                raise ValueError(f"not a dataset file: bad magic {magic!r}")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode())
            if header.get("version") != DATASET_VERSION:
                raise ValueError(f"unsupported dataset version {header.get('version')}")
            n = header["n_samples"]
            h, w = header["height"], header["width"]
            body = f.read()
        expected = n * len(FIELDS) * h * w * 4
        if len(body) != expected:
            raise ValueError(f"truncated dataset: {len(body)} bytes, expected {expected}")
        planes = torch.from_numpy(
            np.frombuffer(body, dtype="<f4").reshape(n, len(FIELDS), h, w).copy()
        )
        return cls(
            x_gt=planes[:, 0:2].contiguous(),
            y=planes[:, 2:4].contiguous(),
            masks=planes[:, 4:5].contiguous(),
            header=header,
        )


def _sample_rngs(seed: int, sample_id: int) -> Tuple[np.random.Generator, np.random.Generator]:
    children = np.random.SeedSequence((seed, sample_id)).spawn(2)
    return np.random.default_rng(children[0]), np.random.default_rng(children[1])


def _split_ids(seed: int, n: int, train_fraction: float) -> Tuple[List[int], List[int]]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, n + 1)))
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    return sorted(int(i) for i in perm[:n_train]), sorted(int(i) for i in perm[n_train:])


def _measure(
    x_gt: torch.Tensor,
    seed: int,
    mask_mode: str,
    acceleration: float,
    acs_fraction: float,
) -> Tuple[torch.Tensor, torch.Tensor]:
    if mask_mode not in MASK_MODES:
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    n, _, h, w = x_gt.shape
    if mask_mode == "fixed":
        rng = np.random.default_rng(np.random.SeedSequence((seed, n)))
        one = gen_gaussian_1d_mask(rng, w, h, acceleration, acs_fraction)
        masks = one[None, None].repeat(n, 1, 1, 1)
    else:
        rows = []
        for i in range(n):
            _, mask_rng = _sample_rngs(seed, i)
            rows.append(gen_gaussian_1d_mask(mask_rng, w, h, acceleration, acs_fraction))
        masks = torch.stack(rows)[:, None]
    y = masks * fft2c(x_gt)
    return y, masks


def simulate_dataset(
    seed: int,
    n_samples: int,
    spec: PhantomSpec,
    mask_mode: str = "per_sample",
    acceleration: float = 4.0,
    acs_fraction: float = 0.08,
    train_fraction: float = 0.8,
    out_path: Optional[str] = None,
) -> Dataset:
    """Simulate measurements of random phantoms, optionally writing a file."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    x_gt = torch.stack(
        [gen_phantom(_sample_rngs(seed, i)[0], spec) for i in range(n_samples)]
    )
    y, masks = _measure(x_gt, seed, mask_mode, acceleration, acs_fraction)
    train_ids, test_ids = _split_ids(seed, n_samples, train_fraction)
    header = {
        "version": DATASET_VERSION,
        "mask_mode": mask_mode,
        "seed": seed,
        "acceleration": acceleration,
        "acs_fraction": acs_fraction,
        "phase": spec.phase,
        "has_gt": True,
        "train_ids": train_ids,
        "test_ids": test_ids,
    }
    ds = Dataset(x_gt, y, masks, header)
    if out_path is not None:
        ds.save(out_path)
    return ds


def write_slice(path: str, plane: np.ndarray) -> None:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ValueError("slice must be a 2-D plane")
    with open(path, "wb") as f:
        f.write(SLICE_MAGIC)
        f.write(struct.pack("<II", plane.shape[0], plane.shape[1]))
        f.write(plane.astype("<f4").tobytes())


def read_slice(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(SLICE_MAGIC))
        if magic != SLICE_MAGIC:
            raise ValueError(f"not a slice file: bad magic {magic!r}")
        h, w = struct.unpack("<II", f.read(8))
        body = f.read()
    if len(body) != h * w * 4:
        raise ValueError(f"truncated slice: {len(body)} bytes for {h}x{w}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def ingest_slices(
    dir_path: str,
    seed: int,
    mask_mode: str = "per_sample",
    acceleration: float = 4.0,
    acs_fraction: float = 0.08,
    train_fraction: float = 0.8,
    out_path: Optional[str] = None,
) -> Dataset:
    """Build a dataset from a directory of raw magnitude slices.

    Files are taken in sorted name order; each slice is min-max
    normalized to [0, 1] (constant slices are rejected) and measured
    with the configured masks. Slices are treated as real images.
    """
    names = sorted(f for f in os.listdir(dir_path) if f.endswith(".slc"))
    if not names:
        raise ValueError(f"no .slc files in {dir_path}")
    planes = []
    size = None
    for name in names:
        plane = read_slice(os.path.join(dir_path, name))
        if size is None:
            size = plane.shape
        elif plane.shape != size:
            raise ValueError(f"slice {name} has size {plane.shape}, expected {size}")
        lo, hi = plane.min(), plane.max()
        if hi <= lo:
            raise ValueError(f"constant slice rejected: {name}")
        planes.append((plane - lo) / (hi - lo))
    mag = torch.from_numpy(np.stack(planes)).to(torch.float32)
    x_gt = torch.stack([mag, torch.zeros_like(mag)], dim=1)
    y, masks = _measure(x_gt, seed, mask_mode, acceleration, acs_fraction)
    train_ids, test_ids = _split_ids(seed, len(names), train_fraction)
    header = {
        "version": DATASET_VERSION,
        "mask_mode": mask_mode,
        "seed": seed,
        "acceleration": acceleration,
        "acs_fraction": acs_fraction,
        "phase": False,
        "has_gt": True,
        "train_ids": train_ids,
        "test_ids": test_ids,
        "source": "slices",
    }
    ds = Dataset(x_gt, y, masks, header)
    if out_path is not None:
        ds.save(out_path)
    return ds
