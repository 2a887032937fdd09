"""Training run driver: output layout, metrics stream and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from egorace import config as config_mod
from egorace.config import RunConfig
from egorace.distributed import Trainer, run_inproc, run_monolithic, run_sockets
from egorace.neural import checkpoint_from_modules, save_checkpoint
from egorace.qrsac import Learner, ReplayBuffer
from egorace.track import resolve_track

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    out_dir: Path
    learner: Learner
    trainer: Trainer | None
    checkpoints: list[Path]


def checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"epoch_{epoch:06d}.ckpt"


def save_learner(learner: Learner, path: Path, extra: dict | None = None):
    nets = learner.nets
    modules = {"actor": nets.actor, "critic1": nets.critic1, "critic2": nets.critic2,
               "target1": nets.target1, "target2": nets.target2}
    meta = {"reinit_epoch": learner.reinit_fired_at}
    meta.update(extra or {})
    save_checkpoint(path, checkpoint_from_modules(learner.epoch, learner.config.net, modules, meta))


def make_learner(cfg: RunConfig) -> Learner:
    lc = cfg.learner_config()
    buf = ReplayBuffer(cfg.train.buffer_capacity, lc.net.hidden_size,
                       with_global=not lc.net.symmetric_critic, burn_in=lc.burn_in,
                       train_len=lc.train_len, n_step=lc.n_step)
    return Learner(lc, buf)


def train(cfg: RunConfig, out_dir=None, monolithic: bool = False) -> TrainResult:
    torch.set_num_threads(1)
    out = Path(out_dir or cfg.out)
    # fail early, naming the file, rather than inside a worker
    resolve_track(cfg.race.track)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.toml").write_text(
        config_mod.tomlkit.dumps(config_mod.snapshot_dict(cfg)))
    learner = make_learner(cfg)
    rollout = cfg.rollout_config()
    saved: list[Path] = []
    epochs = cfg.train.epochs
    metrics_fh = open(out / "metrics.jsonl", "w")

    def on_epoch(lrn: Learner, m: dict):
        metrics_fh.write(json.dumps(m) + "\n")
        metrics_fh.flush()
        if m.get("reinit_fired"):
            log.info("networks reinitialized at epoch %d", lrn.epoch)
        if lrn.epoch % cfg.train.checkpoint_every == 0 or lrn.epoch == epochs:
            p = checkpoint_path(out, lrn.epoch)
            save_learner(lrn, p)
            saved.append(p)

    trainer = None
    try:
        if monolithic:
            run_monolithic(learner, rollout, cfg.harness.steps_per_epoch, epochs,
                           cfg.harness.chunk_size, on_epoch)
        elif cfg.harness.transport == "socket":
            trainer = run_sockets(learner, rollout, cfg.harness, epochs, on_epoch)
        else:
            trainer = run_inproc(learner, rollout, cfg.harness, epochs, on_epoch)
    finally:
        metrics_fh.close()
    return TrainResult(out, learner, trainer, saved)
