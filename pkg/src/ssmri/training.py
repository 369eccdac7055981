"""Training loop, evaluation, and the benchmark harness.

Everything is seeded through ``np.random.SeedSequence`` tuples so a rerun
with the same config reproduces batches, splits, and augmentations; in
single-threaded mode the resulting checkpoints are bitwise identical.
"""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import ConfigError, EvalSection, RunConfig, merge_config, to_loss_config
from .data import Dataset, write_slice
from .losses import REGISTRY, LossConfig, LossRng, LossSpec
from .metrics import MetricReport, compute_metrics
from .models import Reconstructor, init_discriminator, init_params, save_checkpoint
from .ops import complex_magnitude
from .physics import MriOperator, gen_split_masks

__all__ = ["TrainResult", "train", "reconstruct", "evaluate", "run_benchmark"]

# seed-tuple tags: keep every consumer of the run seed on its own stream
_TAG_SHUFFLE = 3
_TAG_STEP = 4
_TAG_EVAL_SPLIT = 5
_TAG_DISCRIMINATOR = 17


@dataclass
class TrainResult:
    model: Reconstructor
    discriminator: Optional[torch.nn.Module]
    log: List[dict] = field(default_factory=list)
    diverged: bool = False


def _epoch_batches(seed: int, epoch: int, ids: Sequence[int], batch_size: int) -> List[List[int]]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, _TAG_SHUFFLE, epoch)))
    perm = [ids[i] for i in rng.permutation(len(ids))]
    if len(perm) <= batch_size:
        return [perm]
    n_full = len(perm) // batch_size
    return [perm[i * batch_size : (i + 1) * batch_size] for i in range(n_full)]


def _snapshot(module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _build_model(cfg: RunConfig) -> Reconstructor:
    return init_params(
        cfg.optim.seed,
        denoiser="unet",
        base=cfg.model.channels,
        depth=cfg.model.depth,
        unrolled_iters=cfg.model.unrolled_iters,
        lam=cfg.model.lambda_init,
    )


def train(cfg: RunConfig, dataset: Dataset, log_path: Optional[str] = None) -> TrainResult:
    """Train the configured loss on the dataset's train split.

    Ground truth is requested from the dataset only on steps whose loss
    needs it. A non-finite loss aborts training and restores the last
    epoch-end parameters. Returns the model, the discriminator when the
    loss uses one, and one log record per completed epoch.
    """
    spec = REGISTRY[cfg.loss.name]
    interleave = cfg.loss.interleave
    if (spec.needs_gt or interleave) and not dataset.has_gt:
        raise ConfigError(f"loss {cfg.loss.name!r} needs ground truth, dataset has none")
    if dataset.height % 2 ** (cfg.model.depth - 1) or dataset.width % 2 ** (cfg.model.depth - 1):
        raise ConfigError("dataset size is not divisible by 2^(model.depth - 1)")

    seed = cfg.optim.seed
    loss_cfg = to_loss_config(cfg)
    model = _build_model(cfg)
    opt = torch.optim.Adam(
        model.parameters(),
        lr=cfg.optim.lr,
        betas=(cfg.optim.beta1, cfg.optim.beta2),
        eps=cfg.optim.eps,
    )
    d_model = d_opt = None
    if spec.discriminator is not None:
        d_model = init_discriminator(int(np.random.SeedSequence((seed, _TAG_DISCRIMINATOR)).generate_state(1)[0]))
        d_opt = torch.optim.Adam(
            d_model.parameters(),
            lr=cfg.loss.adversarial.d_lr,
            betas=(cfg.optim.beta1, cfg.optim.beta2),
            eps=cfg.optim.eps,
        )
    d_steps, g_steps = (int(v) for v in cfg.loss.adversarial.schedule.split(":"))

    def finite(value: torch.Tensor) -> bool:
        return bool(torch.isfinite(value.detach()))

    good = _snapshot(model)
    good_d = _snapshot(d_model) if d_model is not None else None
    sup_spec = REGISTRY["supervised"]
    log: List[dict] = []
    diverged = False
    t0 = time.monotonic()
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.optim.epochs):
            epoch_losses = []
            for step, ids in enumerate(_epoch_batches(seed, epoch, dataset.train_ids, cfg.optim.batch_size)):
                sup_step = interleave and step % 2 == 1
                step_spec = sup_spec if sup_step else spec
                batch = dataset.batch(ids, with_gt=step_spec.needs_gt)
                if step_spec.discriminator is not None:
                    for j in range(d_steps):
                        rng = LossRng((seed, _TAG_STEP, epoch, step, 0, j))
                        d_loss = step_spec.discriminator(model, d_model, batch, rng, loss_cfg)
                        if not finite(d_loss):
                            diverged = True
                            break
                        d_opt.zero_grad()
                        d_loss.backward()
                        d_opt.step()
                    for j in range(g_steps):
                        if diverged:
                            break
                        rng = LossRng((seed, _TAG_STEP, epoch, step, 1, j))
                        loss = step_spec.generator(model, d_model, batch, rng, loss_cfg)
                        if not finite(loss):
                            diverged = True
                            break
                        opt.zero_grad()
                        loss.backward()
                        opt.step()
                        epoch_losses.append(float(loss.detach()))
                else:
                    rng = LossRng((seed, _TAG_STEP, epoch, step))
                    loss = step_spec.generator(model, batch, rng, loss_cfg)
                    if not finite(loss):
                        diverged = True
                    else:
                        opt.zero_grad()
                        loss.backward()
                        opt.step()
                        epoch_losses.append(float(loss.detach()))
                if diverged:
                    break
            if diverged:
                model.load_state_dict(good)
                if d_model is not None:
                    d_model.load_state_dict(good_d)
                break
            good = _snapshot(model)
            if d_model is not None:
                good_d = _snapshot(d_model)
            record = {
                "epoch": epoch,
                "loss": sum(epoch_losses) / max(len(epoch_losses), 1),
                "wall_s": time.monotonic() - t0,
            }
            record.update(_log_metrics(model, dataset, cfg))
            # keep key order stable for readers: epoch, loss, eval, wall
            record = {k: record[k] for k in ("epoch", "loss", "eval_psnr", "eval_ssim", "wall_s")}
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return TrainResult(model=model, discriminator=d_model, log=log, diverged=diverged)


def _log_metrics(model: Reconstructor, dataset: Dataset, cfg: RunConfig) -> dict:
    if not dataset.has_gt:
        return {"eval_psnr": None, "eval_ssim": None}
    ids = dataset.test_ids or dataset.train_ids
    if cfg.eval.log_samples > 0:
        ids = ids[: cfg.eval.log_samples]
    x_hat = reconstruct(model, dataset, ids)
    report = compute_metrics(x_hat, dataset.gt(ids))
    return {"eval_psnr": report.psnr_db, "eval_ssim": report.ssim}


def reconstruct(
    model: Reconstructor,
    dataset: Dataset,
    ids: Sequence[int],
    n2i_splits: int = 0,
    loss_cfg: Optional[LossConfig] = None,
    seed: int = 0,
    batch_size: int = 8,
) -> torch.Tensor:
    """Reconstructions for the given sample ids, in id order.

    With ``n2i_splits`` N > 0 each sample is reconstructed N times from
    fresh measurement splits and the outputs are averaged.
    """
    ids = list(ids)
    loss_cfg = loss_cfg if loss_cfg is not None else LossConfig()
    outs = []
    with torch.no_grad():
        for lo in range(0, len(ids), batch_size):
            chunk = ids[lo : lo + batch_size]
            batch = dataset.batch(chunk)
            if n2i_splits <= 0:
                outs.append(model(batch.y, batch.op))
                continue
            acc = torch.zeros_like(batch.y)
            for j in range(n2i_splits):
                masks, acses = [], []
                for pos, sid in enumerate(chunk):
                    rng = np.random.default_rng(np.random.SeedSequence((seed, _TAG_EVAL_SPLIT, j, sid)))
                    base = batch.op.mask[pos, 0]
                    acs = batch.op.acs[min(pos, batch.op.acs.shape[0] - 1), 0]
                    m1, _ = gen_split_masks(rng, base, loss_cfg.split_ratio, loss_cfg.split_kind, acs=acs)
                    masks.append(m1)
                    acses.append(acs * m1)
                m_in = torch.stack(masks)[:, None]
                op_in = MriOperator(batch.op.mask * m_in, torch.stack(acses)[:, None])
                acc = acc + model(batch.y * m_in, op_in)
            outs.append(acc / n2i_splits)
    return torch.cat(outs)


def _affine_match(mag: torch.Tensor, gt_mag: torch.Tensor) -> torch.Tensor:
    flat = mag.flatten(1)
    std, mean = torch.std_mean(flat, dim=1, unbiased=False)
    gt_std, gt_mean = torch.std_mean(gt_mag.flatten(1), dim=1, unbiased=False)
    if torch.any(std <= 0):
        raise ValueError("cannot standardize a constant reconstruction")
    scale = (gt_std / std).view(-1, 1, 1, 1)
    return (mag - mean.view(-1, 1, 1, 1)) * scale + gt_mean.view(-1, 1, 1, 1)


def _min_max(mag: torch.Tensor) -> torch.Tensor:
    flat = mag.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    if torch.any(hi <= lo):
        raise ValueError("cannot normalize a constant reconstruction")
    return (mag - lo) / (hi - lo)


def _as_planes(mag: torch.Tensor) -> torch.Tensor:
    return torch.cat([mag, torch.zeros_like(mag)], dim=1)


def evaluate(
    model: Reconstructor,
    dataset: Dataset,
    opts: Optional[EvalSection] = None,
    ids: Optional[Sequence[int]] = None,
    loss_cfg: Optional[LossConfig] = None,
    seed: int = 0,
) -> MetricReport:
    """Metrics of the model on the dataset's test split (or given ids)."""
    opts = opts if opts is not None else EvalSection()
    if opts.normalize and opts.standardize:
        raise ConfigError("eval.normalize and eval.standardize are mutually exclusive")
    ids = list(ids) if ids is not None else (dataset.test_ids or list(range(dataset.n)))
    x_hat = reconstruct(model, dataset, ids, n2i_splits=opts.n2i_splits,
                        loss_cfg=loss_cfg, seed=seed)
    gt = dataset.gt(ids)
    mag = complex_magnitude(x_hat)
    gt_mag = complex_magnitude(gt)
    if opts.normalize:
        mag = _min_max(mag)
    elif opts.standardize:
        mag = _affine_match(mag, gt_mag)
    return compute_metrics(_as_planes(mag), _as_planes(gt_mag))


def _grid_image(tiles: List[List[torch.Tensor]], caption: str):
    """8-bit grayscale grid with a caption bar; tiles are (H, W) in [0, 1]."""
    from PIL import Image, ImageDraw

    pad = 2
    h, w = tiles[0][0].shape
    rows, cols = len(tiles), len(tiles[0])
    canvas = np.zeros((18 + rows * (h + pad) - pad, cols * (w + pad) - pad), dtype=np.uint8)
    for r, row in enumerate(tiles):
        for c, tile in enumerate(row):
            arr = (tile.clamp(0, 1).numpy() * 255).astype(np.uint8)
            top = 18 + r * (h + pad)
            canvas[top : top + h, c * (w + pad) : c * (w + pad) + w] = arr
    img = Image.fromarray(canvas, mode="L")
    ImageDraw.Draw(img).text((2, 2), caption, fill=255)
    return img


def _write_outputs(
    out_dir: str,
    label: str,
    dataset: Dataset,
    ids: Sequence[int],
    x_hat: torch.Tensor,
    psnr_db: float,
) -> None:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "raw"), exist_ok=True)
    show = list(ids)[: min(4, len(ids))]
    gt = complex_magnitude(dataset.gt(show))[:, 0]
    zf = complex_magnitude(dataset.batch(show).op.adjoint(dataset.y[show]))[:, 0]
    recon = complex_magnitude(x_hat)[: len(show), 0]
    tiles = [[gt[i], zf[i], recon[i]] for i in range(len(show))]
    caption = f"{label}  psnr={psnr_db:.2f}dB  (gt | zero-filled | recon)"
    _grid_image(tiles, caption).save(os.path.join(out_dir, "images", f"{label}.png"))
    for pos, sid in enumerate(ids):
        write_slice(
            os.path.join(out_dir, "raw", f"{label}_{sid:04d}.slc"),
            complex_magnitude(x_hat)[pos, 0].numpy(),
        )


def _method_overrides(entry: dict) -> Tuple[str, dict]:
    entry = dict(entry)
    name = entry.pop("name")
    label = entry.pop("label", name)
    overrides = {k: v for k, v in entry.items()}
    overrides.setdefault("loss", {})
    if name != "zero_filled":
        overrides["loss"] = {**overrides["loss"], "name": name}
    return label, overrides


def run_benchmark(
    dataset: Dataset,
    base: RunConfig,
    methods: Sequence[dict],
    out_dir: str,
    seeds: Sequence[int] = (0, 1, 2),
) -> List[dict]:
    """Train and score each method; write results.csv/.md, grids, dumps.

    Each method entry is {"name": registry key or "zero_filled"} plus
    optional config override sections. Per method the median-PSNR seed
    provides the checkpoint and images. A method failure becomes a status
    row and the suite continues. Rows come back sorted by PSNR, best
    first, with failed rows at the end.
    """
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    test_ids = dataset.test_ids or list(range(dataset.n))
    rows = []

    zf_model = init_params(0, base=base.model.channels, depth=base.model.depth,
                           unrolled_iters=base.model.unrolled_iters, zero_init=True)
    zf_report = evaluate(zf_model, dataset, base.eval, ids=test_ids)
    zf_hat = reconstruct(zf_model, dataset, test_ids)
    _write_outputs(out_dir, "zero_filled", dataset, test_ids, zf_hat, zf_report.psnr_db)
    rows.append({"method": "zero_filled", "psnr_db": zf_report.psnr_db,
                 "ssim": zf_report.ssim, "train_s": 0.0, "status": "ok"})

    for entry in methods:
        label, overrides = _method_overrides(entry)
        try:
            per_seed = []
            for seed in seeds:
                cfg = merge_config(base, {**overrides, "optim": {**overrides.get("optim", {}), "seed": seed}})
                t0 = time.monotonic()
                result = train(cfg, dataset,
                               log_path=os.path.join(out_dir, "logs", f"{label}_seed{seed}.jsonl"))
                train_s = time.monotonic() - t0
                report = evaluate(result.model, dataset, cfg.eval, ids=test_ids,
                                  loss_cfg=to_loss_config(cfg), seed=seed)
                per_seed.append((report.psnr_db, report.ssim, train_s, result, cfg))
            med_psnr = statistics.median(p for p, *_ in per_seed)
            med = min(per_seed, key=lambda r: abs(r[0] - med_psnr))
            save_checkpoint(os.path.join(out_dir, "checkpoints", f"{label}.ckpt"), med[3].model)
            x_hat = reconstruct(med[3].model, dataset, test_ids,
                                n2i_splits=med[4].eval.n2i_splits,
                                loss_cfg=to_loss_config(med[4]))
            _write_outputs(out_dir, label, dataset, test_ids, x_hat, med[0])
            rows.append({"method": label, "psnr_db": med_psnr,
                         "ssim": statistics.median(s for _, s, *_ in per_seed),
                         "train_s": statistics.median(t for _, _, t, *_ in per_seed),
                         "status": "ok"})
        except Exception as exc:  # noqa: BLE001 - a failed method must not sink the suite
            rows.append({"method": label, "psnr_db": math.nan, "ssim": math.nan,
                         "train_s": math.nan, "status": f"error: {exc}"})

    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: -r["psnr_db"])
    failed = [r for r in rows if r["status"] != "ok"]
    rows = ok + failed
    _write_results(out_dir, rows)
    return rows


def _write_results(out_dir: str, rows: List[dict]) -> None:
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["method", "psnr_db", "ssim", "train_s", "status"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "psnr_db": f"{row['psnr_db']:.4f}",
                             "ssim": f"{row['ssim']:.4f}", "train_s": f"{row['train_s']:.1f}"})
    lines = ["| method | psnr_db | ssim | train_s | status |",
             "| --- | --- | --- | --- | --- |"]
    for row in rows:
        lines.append(f"| {row['method']} | {row['psnr_db']:.2f} | {row['ssim']:.4f} "
                     f"| {row['train_s']:.1f} | {row['status']} |")
    with open(os.path.join(out_dir, "results.md"), "w") as f:
        f.write("\n".join(lines) + "\n")
