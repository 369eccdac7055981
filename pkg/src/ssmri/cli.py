"""Command line harness: generate data, train, evaluate, benchmark.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
``SSMR_THREADS`` caps torch worker threads (set it to 1 for bitwise
reproducible runs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from typing import List, Optional

import torch

from .config import ConfigError, RunConfig, load_config, to_loss_config
from .data import Dataset, PhantomSpec, simulate_dataset
from .models import init_params, load_checkpoint, save_checkpoint
from .training import evaluate, run_benchmark, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEFAULT_SUITE_METHODS = [
    "mc", "ssdu", "n2i", "weighted_ssdu", "ei", "moi", "moei",
    "vortex", "adversarial", "uair", "a2a", "supervised",
]


def _apply_thread_cap() -> None:
    value = os.environ.get("SSMR_THREADS")
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"SSMR_THREADS must be an integer, got {value!r}")
    if n < 1:
        raise ConfigError("SSMR_THREADS must be at least 1")
    torch.set_num_threads(n)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.optim.seed = args.seed
    return cfg


def _load_dataset(path: str) -> Dataset:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    return Dataset.load(path)


def cmd_generate(args) -> int:
    cfg = _load_run_config(args)
    d = cfg.data
    n = d.n_train + d.n_test
    ds = simulate_dataset(
        cfg.optim.seed,
        n,
        PhantomSpec(size=d.size, phase=d.phase),
        mask_mode=d.mask_mode,
        acceleration=d.acceleration,
        acs_fraction=d.acs_fraction,
        train_fraction=d.n_train / n,
        out_path=args.out,
    )
    print(json.dumps({"written": args.out, "n_samples": ds.n,
                      "train": len(ds.train_ids), "test": len(ds.test_ids)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    dataset = _load_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
    result = train(cfg, dataset, log_path=os.path.join(args.out, "log.jsonl"))
    save_checkpoint(os.path.join(args.out, "model.ckpt"), result.model)
    if result.discriminator is not None:
        save_checkpoint(os.path.join(args.out, "discriminator.ckpt"), result.discriminator)
    summary = {"epochs": len(result.log), "diverged": result.diverged}
    if dataset.has_gt:
        report = evaluate(result.model, dataset, cfg.eval,
                          loss_cfg=to_loss_config(cfg), seed=cfg.optim.seed)
        summary.update({"psnr_db": report.psnr_db, "ssim": report.ssim})
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    dataset = _load_dataset(args.dataset)
    model = init_params(cfg.optim.seed, base=cfg.model.channels, depth=cfg.model.depth,
                        unrolled_iters=cfg.model.unrolled_iters, lam=cfg.model.lambda_init)
    load_checkpoint(args.checkpoint, model)
    report = evaluate(model, dataset, cfg.eval,
                      loss_cfg=to_loss_config(cfg), seed=cfg.optim.seed)
    payload = {"psnr_db": report.psnr_db, "ssim": report.ssim,
               "psnr_values": report.psnr_values, "ssim_values": report.ssim_values}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w") as f:
            json.dump(payload, f, indent=2)
    print(json.dumps({"psnr_db": report.psnr_db, "ssim": report.ssim}))
    return EXIT_OK


def _load_suite(path: Optional[str]) -> dict:
    if path is None:
        return {"seeds": [0, 1, 2], "methods": [{"name": m} for m in DEFAULT_SUITE_METHODS]}
    with open(path) as f:
        try:
            suite = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"suite is not valid JSON: {exc}") from exc
    if not isinstance(suite, dict):
        raise ConfigError("suite must be a JSON object")
    for key in suite:
        if key not in ("seeds", "methods"):
            raise ConfigError(f"unknown key suite.{key}")
    seeds = suite.get("seeds", [0, 1, 2])
    methods = suite.get("methods", [])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds) or not seeds:
        raise ConfigError("suite.seeds must be a non-empty list of integers")
    if not isinstance(methods, list):
        raise ConfigError("suite.methods must be a list")
    for i, entry in enumerate(methods):
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(f"suite.methods[{i}] must be an object with a 'name'")
    return {"seeds": seeds, "methods": methods}


def cmd_benchmark(args) -> int:
    cfg = _load_run_config(args)
    dataset = _load_dataset(args.dataset)
    suite = _load_suite(args.suite)
    rows = run_benchmark(dataset, cfg, suite["methods"], args.out, seeds=suite["seeds"])
    for row in rows:
        print(f"{row['method']}: psnr={row['psnr_db']:.2f}dB ssim={row['ssim']:.4f} "
              f"[{row['status']}]")
    method_rows = [r for r in rows if r["method"] != "zero_filled"]
    if method_rows and not any(r["status"] == "ok" for r in method_rows):
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmri",
        description="Self-supervised MRI reconstruction: data, training, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="simulate a phantom dataset file")
    gen.add_argument("--config", help="run config JSON (data section drives generation)")
    gen.add_argument("--out", required=True, help="output dataset path")
    gen.add_argument("--seed", type=int, help="override optim.seed")
    gen.set_defaults(fn=cmd_generate)

    tr = sub.add_parser("train", help="train one loss on a dataset")
    tr.add_argument("--config", help="run config JSON")
    tr.add_argument("--dataset", required=True, help="dataset file from 'generate'")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--seed", type=int, help="override optim.seed")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--config", help="run config JSON")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", help="directory for metrics.json")
    ev.add_argument("--seed", type=int, help="override optim.seed")
    ev.set_defaults(fn=cmd_eval)

    be = sub.add_parser("benchmark", help="train and score a suite of methods")
    be.add_argument("--config", help="base run config JSON")
    be.add_argument("--dataset", required=True)
    be.add_argument("--out", required=True, help="output directory")
    be.add_argument("--suite", help="suite JSON: {seeds, methods}; default: all methods")
    be.set_defaults(fn=cmd_benchmark)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - boundary: map anything else to exit 3
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
