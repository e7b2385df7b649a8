"""Run directories: ``config.snapshot``, ``checkpoints/``, ``metrics.log`` (one JSON object per step)."""

import json
import logging
import time
from pathlib import Path

import torch

from . import mixing
from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_config
from .train import TrainState, format_metrics, train_step

log = logging.getLogger(__name__)


def checkpoint_path(run_dir, step):
    return Path(run_dir) / "checkpoints" / f"step_{step:08d}.sdck"


def latest_checkpoint(run_dir):
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("step_*.sdck"))
    return ckpts[-1] if ckpts else None


def read_metrics(run_dir):
    path = Path(run_dir) / "metrics.log"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def make_stream(cfg):
    segment = int(round(cfg.train.segment_s * cfg.codec.sample_rate))
    if cfg.manifest:
        entries = mixing.read_manifest(cfg.manifest)
        return mixing.ManifestMixtureStream(entries, cfg.mix, segment, cfg.train.seed, cfg.codec.sample_rate)
    return mixing.ToyMixtureStream(cfg.mix, segment, cfg.train.seed, cfg.codec.sample_rate)


def run_training(cfg, run_dir, resume=False, stop_at=None, deterministic=True):
    """Train to ``cfg.train.total_steps`` (or ``stop_at``), checkpointing and logging as it goes."""
    run_dir = Path(run_dir)
    if deterministic:
        torch.use_deterministic_algorithms(True)
    stream = make_stream(cfg)
    metrics_path = run_dir / "metrics.log"
    if resume and latest_checkpoint(run_dir) is not None:
        ckpt = latest_checkpoint(run_dir)
        state = load_checkpoint(ckpt, cfg.codec)
        kept = [m for m in read_metrics(run_dir) if m["step"] <= state.step]
        metrics_path.write_text("".join(format_metrics(m) + "\n" for m in kept))
        log.info("resumed from %s at step %d", ckpt, state.step)
    else:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.snapshot").write_text(dump_config(cfg))
        metrics_path.write_text("")
        state = TrainState(cfg.codec, cfg.train, cfg.losses, cfg.disc)

    last = cfg.train.total_steps if stop_at is None else min(stop_at, cfg.train.total_steps)
    if state.step >= last:
        return state
    t0 = time.time()
    batches = mixing.prefetch(mixing.batches(stream, cfg.train.batch_size, start_step=state.step))
    with open(metrics_path, "a") as fh:
        for _, items in batches:
            metrics = train_step(state, items)
            fh.write(format_metrics(metrics) + "\n")
            fh.flush()
            if state.step % 50 == 0:
                log.info("step %d mel %.4f total %.3f (%.2f s/step)", state.step, metrics["mel"],
                         metrics["loss_total"], (time.time() - t0) / 50)
                t0 = time.time()
            if state.step % cfg.train.checkpoint_every == 0 or state.step == cfg.train.total_steps:
                save_checkpoint(state, checkpoint_path(run_dir, state.step))
            if state.step >= last:
                break
    if state.step % cfg.train.checkpoint_every and state.step != cfg.train.total_steps:
        save_checkpoint(state, checkpoint_path(run_dir, state.step))
    return state
