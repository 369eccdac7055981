"""Estimator front door: fit a self-supervised reconstructor on a dataset.

Wraps the training loop in the familiar fit/predict/score shape so the
losses can be swapped by name and configured through constructor
parameters (which also makes them grid-searchable).
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, config_from_dict, to_loss_config
from .data import Dataset
from .training import evaluate, reconstruct, train

__all__ = ["SelfSupervisedReconstructor"]


def _as_dataset(X) -> Dataset:
    if isinstance(X, Dataset):
        return X
    if isinstance(X, str):
        return Dataset.load(X)
    raise TypeError("X must be a Dataset or a path to a dataset file")


class SelfSupervisedReconstructor(BaseEstimator):
    """Unrolled MRI reconstructor trained with a named self-supervised loss.

    Parameters mirror the run configuration; ``loss`` picks the training
    objective from the registry. After ``fit`` the trained network is in
    ``model_`` and the per-epoch log in ``log_``.
    """

    def __init__(
        self,
        loss: str = "moei",
        metric: str = "l2",
        epochs: int = 100,
        batch_size: int = 4,
        lr: float = 1e-3,
        seed: int = 0,
        channels: int = 32,
        depth: int = 3,
        unrolled_iters: int = 3,
        lambda_init: float = 1.0,
        split_ratio: float = 0.6,
        split_kind: str = "gaussian2d",
        group: str = "diffeo",
        group_magnitude: float = 0.3,
        d_lr: float = 1e-4,
        interleave: bool = False,
        n2i_splits: int = 0,
        normalize: bool = False,
        standardize: bool = False,
        log_samples: int = 8,
    ):
        self.loss = loss
        self.metric = metric
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.channels = channels
        self.depth = depth
        self.unrolled_iters = unrolled_iters
        self.lambda_init = lambda_init
        self.split_ratio = split_ratio
        self.split_kind = split_kind
        self.group = group
        self.group_magnitude = group_magnitude
        self.d_lr = d_lr
        self.interleave = interleave
        self.n2i_splits = n2i_splits
        self.normalize = normalize
        self.standardize = standardize
        self.log_samples = log_samples

    def _config(self, dataset: Dataset) -> RunConfig:
        if dataset.height != dataset.width:
            raise ValueError("datasets must hold square images")
        return config_from_dict(
            {
                "data": {
                    "size": dataset.height,
                    "n_train": max(len(dataset.train_ids), 1),
                    "n_test": max(len(dataset.test_ids), 1),
                    "acceleration": float(dataset.header.get("acceleration", 4.0)),
                    "acs_fraction": float(dataset.header.get("acs_fraction", 0.0)),
                    "mask_mode": dataset.header.get("mask_mode", "per_sample"),
                },
                "model": {
                    "channels": self.channels,
                    "depth": self.depth,
                    "unrolled_iters": self.unrolled_iters,
                    "lambda_init": self.lambda_init,
                },
                "loss": {
                    "name": self.loss,
                    "metric": self.metric,
                    "interleave": self.interleave,
                    "split": {"ratio": self.split_ratio, "kind": self.split_kind},
                    "group": {"kind": self.group, "magnitude": self.group_magnitude},
                    "adversarial": {"d_lr": self.d_lr},
                },
                "optim": {
                    "lr": self.lr,
                    "epochs": self.epochs,
                    "batch_size": self.batch_size,
                    "seed": self.seed,
                },
                "eval": {
                    "n2i_splits": self.n2i_splits,
                    "normalize": self.normalize,
                    "standardize": self.standardize,
                    "log_samples": self.log_samples,
                },
            }
        )

    def fit(self, X, y=None) -> "SelfSupervisedReconstructor":
        """Train on the dataset's train split; ``y`` is ignored."""
        dataset = _as_dataset(X)
        config = self._config(dataset)
        result = train(config, dataset)
        self.config_ = config
        self.model_ = result.model
        self.discriminator_ = result.discriminator
        self.log_ = result.log
        self.diverged_ = result.diverged
        return self

    def predict(self, X, ids: Optional[Sequence[int]] = None) -> torch.Tensor:
        """Reconstructions, (n, 2, H, W), for the given ids (default: test split)."""
        check_is_fitted(self, "model_")
        dataset = _as_dataset(X)
        ids = list(ids) if ids is not None else (dataset.test_ids or list(range(dataset.n)))
        return reconstruct(
            self.model_,
            dataset,
            ids,
            n2i_splits=self.n2i_splits,
            loss_cfg=to_loss_config(self.config_),
            seed=self.seed,
        )

    def score(self, X, y=None) -> float:
        """Mean test PSNR in dB (higher is better)."""
        check_is_fitted(self, "model_")
        dataset = _as_dataset(X)
        report = evaluate(
            self.model_,
            dataset,
            self.config_.eval,
            loss_cfg=to_loss_config(self.config_),
            seed=self.seed,
        )
        return float(report.psnr_db)
