"""The three evaluation sweeps: per training slot, per prediction instant, per noise factor.

Run directory layout (one tree per seed)::

    <run>/seed<s>/data/nf<NF>_train.lbds
    <run>/seed<s>/data/nf<NF>_val.lbds
    <run>/seed<s>/nf<NF>/<kind>.lbmt      (+ <kind>_loss.csv)
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..dataset import VAL_ID_OFFSET, Dataset, generate_split, read_dataset, write_dataset
from ..models import MODEL_KINDS
from .config import RunConfig
from .evaluate import EvalReport, evaluate
from .train import train

log = logging.getLogger(__name__)

AXES = ("training_instant", "prediction_instant", "noise_factor")
AXIS_COLUMN = {"training_instant": "slot", "prediction_instant": "tbar", "noise_factor": "noise_factor_db"}
# kinds whose forward pass never sees the prediction instant
TIME_BLIND = frozenset({"lstm"})


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RunLayout:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    def data(self, seed: int, nf: float, split: str) -> Path:
        return self.root / f"seed{seed}" / "data" / f"nf{nf:g}_{split}.lbds"

    def model_dir(self, seed: int, nf: float) -> Path:
        return self.root / f"seed{seed}" / f"nf{nf:g}"

    def checkpoint(self, seed: int, nf: float, kind: str) -> Path:
        return self.model_dir(seed, nf) / f"{kind}.lbmt"


def noise_levels(cfg: RunConfig, axis: str) -> list[float]:
    return sorted(cfg.noise_sweep) if axis == "noise_factor" else [cfg.scene.noise_figure_db]


def ensure_dataset(cfg: RunConfig, layout: RunLayout, seed: int, nf: float, split: str) -> Dataset:
    """Load the split if it is on disk, otherwise generate and store it."""
    path = layout.data(seed, nf, split)
    if path.exists():
        return read_dataset(path)
    scene = replace(cfg.scene, noise_figure_db=nf)
    count, offset = (cfg.n_train, 0) if split == "train" else (cfg.n_val, VAL_ID_OFFSET)
    log.info("generating %s split seed=%d nf=%g (%d episodes)", split, seed, nf, count)
    ds = generate_split(scene, count, seed, offset, tuple(sorted(cfg.tbars)), cfg.workers)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, ds)
    return ds


def _train_nf(cfg: RunConfig, nf: float) -> float:
    return nf if cfg.retrain_per_noise else cfg.scene.noise_figure_db


def ensure_checkpoints(cfg: RunConfig, layout: RunLayout, axis: str, kinds=MODEL_KINDS,
                       fit: bool = False) -> None:
    """Raise listing every missing checkpoint, or train them when ``fit`` is set."""
    needed = [(s, _train_nf(cfg, nf), k) for s in cfg.seeds for nf in noise_levels(cfg, axis) for k in kinds]
    needed = list(dict.fromkeys(needed))
    missing = [n for n in needed if not layout.checkpoint(*n).exists()]
    if missing and not fit:
        paths = "\n  ".join(str(layout.checkpoint(*n)) for n in missing)
        raise MissingCheckpointError(f"missing checkpoint file(s):\n  {paths}\n"
                                     "train them first or rerun the sweep with --fit")
    for seed, nf, kind in missing:
        train_ds = ensure_dataset(cfg, layout, seed, nf, "train")
        run = replace(cfg, model=kind, scene=replace(cfg.scene, noise_figure_db=nf))
        log.info("training %s seed=%d nf=%g", kind, seed, nf)
        train(run, train_ds, out_dir=layout.model_dir(seed, nf), seed=seed)


@dataclass
class SweepResult:
    axis: str
    values: list[float]
    table: dict[str, np.ndarray]                       # kind -> mean over seeds
    per_seed: dict[tuple[int, str], np.ndarray]        # (seed, kind) -> values
    raw_per_seed: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    csv_path: Path | None = None
    long_csv_path: Path | None = None
    figure_path: Path | None = None


def _reports(cfg, layout, axis, kinds, cache) -> dict[tuple[int, float, str], EvalReport]:
    out = {}
    for seed in cfg.seeds:
        for nf in noise_levels(cfg, axis):
            key_ds = (seed, nf, "val")
            if key_ds not in cache:
                cache[key_ds] = ensure_dataset(cfg, layout, seed, nf, "val")
            for kind in kinds:
                key = (seed, nf, kind)
                if key not in cache:
                    cache[key] = evaluate(layout.checkpoint(seed, _train_nf(cfg, nf), kind), cache[key_ds], kind)
                out[key] = cache[key]
    return out


def _restrict(report: EvalReport, tbars) -> np.ndarray:
    """Per-(slot, instant) SE_N restricted to the configured instants."""
    idx = [report.tbars.index(t) for t in sorted(tbars)]
    return report.se_n[:, idx]


def run_sweep(cfg: RunConfig, axis: str, run_dir: str | Path | None = None, kinds=MODEL_KINDS,
              fit: bool = False, plot: bool = True, cache: dict | None = None) -> SweepResult:
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; choose from {AXES}")
    layout = RunLayout(Path(run_dir) if run_dir is not None else cfg.resolved_out_dir())
    ensure_checkpoints(cfg, layout, axis, kinds, fit)
    reports = _reports(cfg, layout, axis, kinds, {} if cache is None else cache)
    base = cfg.scene.noise_figure_db
    per_seed, raw = {}, {}
    for seed in cfg.seeds:
        for kind in kinds:
            if axis == "noise_factor":
                vals = np.array([_restrict(reports[(seed, nf, kind)], cfg.tbars).mean()
                                 for nf in noise_levels(cfg, axis)])
            else:
                se = _restrict(reports[(seed, base, kind)], cfg.tbars)
                vals = se.mean(axis=1) if axis == "training_instant" else se.mean(axis=0)
                if axis == "prediction_instant":
                    raw[(seed, kind)] = vals
                    if kind in TIME_BLIND:
                        # one prediction per slot serves every instant: report the pooled value
                        vals = np.full_like(vals, se.mean())
            per_seed[(seed, kind)] = vals
    if axis == "training_instant":
        values = list(range(1, cfg.scene.n_slots + 1))
    elif axis == "prediction_instant":
        values = sorted(cfg.tbars)
    else:
        values = noise_levels(cfg, axis)
    table = {k: np.mean([per_seed[(s, k)] for s in cfg.seeds], axis=0) for k in kinds}
    res = SweepResult(axis, values, table, per_seed, raw)
    layout.root.mkdir(parents=True, exist_ok=True)
    res.csv_path = layout.root / f"{axis}.csv"
    res.long_csv_path = layout.root / f"{axis}_by_seed.csv"
    write_sweep_csv(res.csv_path, res)
    write_long_csv(res.long_csv_path, res)
    if plot:
        from .plotting import plot_sweep
        res.figure_path = plot_sweep(res, layout.root / f"{axis}.png")
    return res


def _fmt_axis(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else f"{v:g}"


def write_sweep_csv(path: Path, res: SweepResult) -> None:
    kinds = list(res.table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([AXIS_COLUMN[res.axis]] + kinds)
        for i, v in enumerate(res.values):
            w.writerow([_fmt_axis(v)] + [f"{res.table[k][i]:.6g}" for k in kinds])


def write_long_csv(path: Path, res: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["seed", AXIS_COLUMN[res.axis], "kind", "se_n"]
        if res.raw_per_seed:
            header.append("se_n_per_instant")
        w.writerow(header)
        for (seed, kind), vals in sorted(res.per_seed.items()):
            for i, v in enumerate(res.values):
                row = [seed, _fmt_axis(v), kind, f"{vals[i]:.6g}"]
                if res.raw_per_seed:
                    row.append(f"{res.raw_per_seed[(seed, kind)][i]:.6g}")
                w.writerow(row)


def read_sweep_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]])
