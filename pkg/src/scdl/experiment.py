"""Run orchestration: single training runs, JSON-lines metric logs and the
three-row ablation matrix."""
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, canonical_text, config_hash
from .data import generate_dataset, load_dataset
from .train import Trainer, evaluate

log = logging.getLogger(__name__)

ABLATION_ROWS = {
    "baseline": dict(enable_cdba=False, enable_sac=False, enable_injection=False),
    "cdba": dict(enable_cdba=True, enable_sac=False, enable_injection=True),
    "cdba_sac": dict(enable_cdba=True, enable_sac=True, enable_injection=True),
}


def load_splits(cfg):
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        return load_dataset(root / "train.scds"), load_dataset(root / "test.scds")
    return generate_dataset(cfg.data), generate_dataset(cfg.test_spec())


def _record(step, seed, chash, losses, metrics):
    rec = {"step": step, "seed": seed, "config_hash": chash, "losses": losses}
    rec.update(metrics)
    rec["timestamp"] = time.time()
    return rec


def strip_timestamps(lines):
    out = []
    for line in lines:
        rec = json.loads(line)
        rec.pop("timestamp", None)
        out.append(rec)
    return out


def train_run(cfg, out_dir=None, splits=None):
    """Train ``cfg`` at ``cfg.train.seed``; returns (trainer, final eval record)."""
    cfg.validate()
    train_ds, test_ds = splits if splits is not None else load_splits(cfg)
    h, w = train_ds.images.shape[1:]
    trainer = Trainer(cfg.train, train_ds.num_classes, (h, w))
    chash = config_hash(cfg)
    seed = cfg.train.seed
    metrics_f = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(canonical_text(cfg))
        metrics_f = open(out_dir / "metrics.jsonl", "w")
    steps = cfg.train.steps
    interval = cfg.train.eval_interval
    running = {}
    n_running = 0
    rec = None
    try:
        for step in range(steps + 1):
            due = step == steps or (interval > 0 and step % interval == 0 and step > 0)
            if due:
                losses = {k: v / n_running for k, v in running.items()} if n_running else {}
                rec = _record(step, seed, chash, losses, evaluate(trainer, test_ds))
                if metrics_f is not None:
                    metrics_f.write(json.dumps(rec, sort_keys=True) + "\n")
                    metrics_f.flush()
                running, n_running = {}, 0
            if step == steps:
                break
            for k, v in trainer.fit_step(train_ds).items():
                running[k] = running.get(k, 0.0) + v
            n_running += 1
    finally:
        if metrics_f is not None:
            metrics_f.close()
    if out_dir is not None:
        checkpoint.save(out_dir / "checkpoint.scdl", trainer.state_dict())
    return trainer, rec


def _row_config(cfg, row, seed):
    train = dataclasses.replace(cfg.train, seed=seed, **ABLATION_ROWS[row])
    return dataclasses.replace(cfg, train=train, seeds=(seed,))


def _ablate_job(args):
    cfg, row, seed, out_dir = args
    _, rec = train_run(_row_config(cfg, row, seed), out_dir)
    return row, seed, rec


def ablate(cfg, out_dir, workers=1):
    """Run every ablation row for every seed and write summary.json / summary.md."""
    cfg.validate()
    out_dir = Path(out_dir)
    jobs = [(cfg, row, seed, out_dir / row / f"seed_{seed}") for row in ABLATION_ROWS for seed in cfg.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_job, jobs))
    else:
        results = [_ablate_job(j) for j in jobs]
    summary = summarize_ablation(results)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out_dir / "summary.md").write_text(format_summary(summary))
    return summary


def summarize_ablation(results):
    summary = {}
    for row in ABLATION_ROWS:
        recs = sorted(((s, r) for rw, s, r in results if rw == row), key=lambda t: t[0])
        if not recs:
            continue
        dice = np.array([r["mean_dice"] for _, r in recs])
        asd = np.array([r["mean_asd"] for _, r in recs])
        per_class = np.array([r["dice"] for _, r in recs])
        summary[row] = {
            "seeds": [s for s, _ in recs],
            "mean_dice": float(dice.mean()), "std_dice": float(dice.std()),
            "mean_asd": float(asd.mean()), "std_asd": float(asd.std()),
            "per_seed_mean_dice": dice.tolist(),
            "per_seed_class_dice": per_class.tolist(),
            "class_dice_mean": per_class.mean(axis=0).tolist(),
        }
    return summary


def format_summary(summary):
    lines = ["| row | mean Dice | mean ASD | per-class Dice |", "|---|---|---|---|"]
    for row, s in summary.items():
        cls = " / ".join(f"{v:.3f}" for v in s["class_dice_mean"][1:])
        lines.append(f"| {row} | {s['mean_dice']:.4f} ± {s['std_dice']:.4f} | "
                     f"{s['mean_asd']:.2f} ± {s['std_asd']:.2f} | {cls} |")
    return "\n".join(lines) + "\n"


def evaluate_checkpoint(cfg, ckpt_path, splits=None):
    _, test_ds = splits if splits is not None else load_splits(cfg)
    h, w = test_ds.images.shape[1:]
    trainer = Trainer(cfg.train, test_ds.num_classes, (h, w))
    trainer.load_state_dict(checkpoint.load(ckpt_path))
    return evaluate(trainer, test_ds)


def default_config():
    return RunConfig()
