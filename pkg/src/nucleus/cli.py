"""Command line entry points; JSON configs in, CSV reports out."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import levelset
from .datasets import (PHI, DatasetError, FormatError, GeneratorConfig, load_split, read_trajectory,
                       synth_generate, write_manifest, write_trajectory)
from .fluids import FluidError
from .harness import (ABLATION_COLUMNS, BENCH_COLUMNS, BenchConfig, HarnessError, TrainConfig,
                      ablation_eikonal, bench, evaluate, finetune, rollout, train, write_rows)
from .model import ModelError, load_checkpoint, save_checkpoint
from .tensorcore import TensorError

KNOWN_ERRORS = (HarnessError, ModelError, FormatError, DatasetError, FluidError, TensorError,
                levelset.ReinitError, FileNotFoundError, json.JSONDecodeError, ValueError, KeyError)


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def cmd_gen_data(args) -> None:
    doc = _load_json(args.config)
    gen = doc.get("generator", doc if "splits" not in doc else {})
    splits = doc.get("splits", {"train": 1})
    cfg = GeneratorConfig.from_dict(gen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries, seed = [], args.seed
    for split in sorted(splits):
        for i in range(int(splits[split])):
            name = f"{split}_{i:04d}.nucl"
            write_trajectory(synth_generate(cfg, seed), out / name)
            entries.append((name, split))
            seed += 1
    write_manifest(entries, out / "manifest.json")
    print(f"wrote {len(entries)} trajectories and {out / 'manifest.json'}")


def cmd_train(args) -> None:
    doc = _load_json(args.config)
    cfg = TrainConfig.from_dict(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.log_path is None:
        cfg = dataclasses.replace(cfg, log_path=str(out / "train_log.csv"))
    ckpt = train(cfg)
    save_checkpoint(ckpt, out)
    print(json.dumps({"checkpoint": str(out), "step": ckpt.step, "best": ckpt.best}, default=float))


def cmd_finetune(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    data = load_split(args.manifest, args.split)
    tuned = finetune(ckpt, data, lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                     seed=args.seed)
    out = Path(args.out or args.ckpt)
    save_checkpoint(tuned, out)
    print(json.dumps({"checkpoint": str(out), "step": tuned.step}))


def cmd_rollout(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build()
    tr = read_trajectory(args.traj)
    F = model.config.F
    truth = tr.data[F:F + args.steps] if tr.steps >= F + args.steps else None
    res = rollout(model, tr.data[:F], tr.params, args.steps,
                  reinit=levelset.ROLLOUT_REINIT if args.reinit else None, truth=truth, dx=tr.dx)
    if args.out:
        write_trajectory(res.trajectory(tr.data[F - 1], tr.dt, tr.dx, tr.params), args.out)
    w = csv.writer(sys.stdout)
    w.writerow(["step", "eikonal_mean", "mae_T", "mae_Ux", "mae_Uy", "mae_phi"])
    for i in range(res.steps):
        mae = res.mae[i].tolist() if res.mae is not None else [""] * 4
        w.writerow([i + 1, res.eikonal[i], *mae])
    if res.diverged:
        raise HarnessError(f"rollout diverged: {res.message}")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    data = load_split(args.manifest, args.split)
    report = evaluate(ckpt.build(), data, args.steps)
    report.write_csv(args.out)
    print(f"wrote {args.out}")


def cmd_reinit(args) -> None:
    tr = read_trajectory(args.traj)
    cfg = levelset.ReinitConfig(iterations=args.iters, band_freeze=args.band)
    data = tr.data.copy()
    w = csv.writer(sys.stdout)
    w.writerow(["step", "mean_before", "max_before", "mean_after", "max_after"])
    for i in range(tr.steps):
        before = levelset.eikonal_residual(data[i, PHI], tr.dx)
        data[i, PHI] = levelset.sussman_reinit(data[i, PHI].astype(np.float64), cfg, tr.dx)
        after = levelset.eikonal_residual(data[i, PHI], tr.dx)
        w.writerow([i, before["mean"], before["max"], after["mean"], after["max"]])
    out = dataclasses.replace(tr, data=data, meta={**tr.meta, "reinit_iterations": args.iters})
    write_trajectory(out, args.out)


def cmd_bench(args) -> None:
    resolutions = [int(r) for r in args.resolutions.split(",") if r]
    cfg = BenchConfig(**(_load_json(args.config) if args.config else {}))
    rows = bench(resolutions, cfg, measure=not args.no_measure)
    write_rows(rows, args.out, BENCH_COLUMNS)
    print(f"wrote {args.out}")


def cmd_ablate(args) -> None:
    doc = _load_json(args.config)
    cfg = TrainConfig.from_dict(doc["train"])
    train_set = load_split(doc["manifest"], "train")
    test_set = load_split(doc["manifest"], "test")
    try:
        val = load_split(doc["manifest"], "val")
    except DatasetError:
        val = None
    weights = tuple(doc.get("weights", (5, 3, 1, 0.5, 0.1, 0.01, 0)))
    res = ablation_eikonal(cfg, train_set, test_set, int(doc.get("steps", 20)), weights, val_set=val)
    out = args.out or doc.get("out", "ablation.csv")
    res.write_csv(out)
    print(res.detail)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nucleus", description="Pool-boiling surrogate toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate synthetic trajectories and a manifest")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train a model from a JSON train config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("finetune", help="fine-tune a checkpoint on a new manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("rollout", help="autoregressive rollout from a trajectory's first frames")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--traj", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--reinit", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_rollout)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("reinit", help="reinitialize phi of every state in a trajectory")
    s.add_argument("--traj", required=True)
    s.add_argument("--iters", type=int, default=5)
    s.add_argument("--band", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_reinit)

    s = sub.add_parser("bench", help="analytic and measured cost of one block per resolution")
    s.add_argument("--resolutions", default="128,512,2048")
    s.add_argument("--config")
    s.add_argument("--no-measure", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("ablate-eikonal", help="Eikonal-weight sweep against rollout reinitialization")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.fn(args)
    except KNOWN_ERRORS as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
