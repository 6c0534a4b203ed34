from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..dataset import Dataset
from ..models import TrackerModel, episode_loss
from .config import ConfigError, RunConfig

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: TrackerModel
    losses: list[float]
    checkpoint: Path | None
    loss_csv: Path | None


def input_scale(ds: Dataset) -> float:
    """Pilots enter the network in units of the receiver noise standard deviation."""
    return 1.0 / math.sqrt(10.0 ** (ds.scene.noise_dbm / 10.0))


def check_compatible(cfg: RunConfig, ds: Dataset) -> None:
    sc, dc = cfg.scene, ds.scene
    if (sc.n_beams, sc.n_antennas) != (dc.n_beams, dc.n_antennas):
        raise ConfigError(f"dataset has Q={dc.n_beams}, N_t={dc.n_antennas}; "
                          f"config expects Q={sc.n_beams}, N_t={sc.n_antennas}")
    missing = set(cfg.tbars) - set(ds.tbars)
    if missing:
        raise ConfigError(f"dataset lacks labels for instants {sorted(missing)}")


def _snapshot_stats(model: TrackerModel):
    return {k: (s.mean.copy(), s.var.copy()) for k, s in model.extractor.buffers().items()}


def _restore_stats(model: TrackerModel, snap) -> None:
    for k, s in model.extractor.buffers().items():
        s.mean, s.var = snap[k][0].copy(), snap[k][1].copy()


def mean_term_loss(model: TrackerModel, ds: Dataset, tbars, batch_size: int, gi) -> float:
    """Average cross-entropy per (slot, instant) over ``ds`` without touching BN stats."""
    snap = _snapshot_stats(model)
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            loss = episode_loss(model, ds.pilots[idx], ds.labels[idx][:, :, gi], tbars)
            total += float(loss.data) * len(idx)
            count += len(idx)
    _restore_stats(model, snap)
    return total / count / ds.labels.shape[1]


def train(cfg: RunConfig, train_ds: Dataset, out_dir: str | Path | None = None,
          model: TrackerModel | None = None, seed: int | None = None,
          steps: int | None = None) -> TrainResult:
    """Shuffled mini-batch Adam on the summed-over-slots cross-entropy.

    Logged losses are per (slot, instant) term so an untrained model sits near
    ``ln Q``.  Row 0 of the loss log is the pre-training loss.  ``steps`` caps
    the total number of optimizer steps (overfitting checks).
    """
    check_compatible(cfg, train_ds)
    seed = cfg.seed if seed is None else seed
    if model is None:
        model = TrackerModel(cfg.model, cfg.scene.n_beams, seed=seed, input_scale=input_scale(train_ds))
    tbars = list(cfg.tbars)
    gi = [train_ds.tbars.index(t) for t in tbars]
    rng = np.random.default_rng([seed, 0x7EA1])
    params = model.parameters()
    state = T.AdamState.for_params(params, learning_rate=cfg.learning_rate)
    n_slots = train_ds.labels.shape[1]
    bs = min(cfg.batch_size, len(train_ds))

    model.train()
    losses = [mean_term_loss(model, train_ds, tbars, bs, gi)]
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / f"{cfg.model}.lbmt" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    done = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_ds))
        batch_losses = []
        for start in range(0, len(order), bs):
            idx = np.sort(order[start:start + bs])
            if len(idx) * n_slots < 2:
                continue
            for p in params:
                p.grad = None
            loss = episode_loss(model, train_ds.pilots[idx], train_ds.labels[idx][:, :, gi], tbars)
            loss.backward()
            T.adam_step(params, [p.grad for p in params], state)
            batch_losses.append(float(loss.data) / n_slots)
            done += 1
            if steps is not None and done >= steps:
                break
        losses.append(float(np.mean(batch_losses)))
        log.info("%s epoch %d loss %.4f", cfg.model, epoch, losses[-1])
        if ckpt:
            model.save(ckpt)
        if steps is not None and done >= steps:
            break
    loss_csv = None
    if out:
        loss_csv = out / f"{cfg.model}_loss.csv"
        write_loss_csv(loss_csv, losses)
        model.save(ckpt)
    model.eval()
    return TrainResult(model, losses, ckpt, loss_csv)


def write_loss_csv(path: Path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, f"{v:.6g}"])
