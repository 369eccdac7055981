"""Self-supervised losses and benchmarks for accelerated MRI reconstruction."""

from .config import ConfigError, RunConfig, load_config
from .data import Dataset, PhantomSpec, gen_phantom, ingest_slices, simulate_dataset
from .estimator import SelfSupervisedReconstructor
from .losses import REGISTRY, Batch, LossConfig, LossRng
from .metrics import MetricReport, compute_metrics, psnr, ssim
from .models import Reconstructor, init_params, load_checkpoint, save_checkpoint
from .physics import MriOperator, gen_gaussian_1d_mask, gen_split_masks, mask_pdf
from .training import TrainResult, evaluate, reconstruct, run_benchmark, train

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ConfigError",
    "Dataset",
    "LossConfig",
    "LossRng",
    "MetricReport",
    "MriOperator",
    "PhantomSpec",
    "REGISTRY",
    "Reconstructor",
    "RunConfig",
    "SelfSupervisedReconstructor",
    "TrainResult",
    "compute_metrics",
    "evaluate",
    "gen_gaussian_1d_mask",
    "gen_phantom",
    "gen_split_masks",
    "ingest_slices",
    "init_params",
    "load_checkpoint",
    "load_config",
    "mask_pdf",
    "psnr",
    "reconstruct",
    "run_benchmark",
    "save_checkpoint",
    "simulate_dataset",
    "ssim",
    "train",
    "__version__",
]
