from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..channel import dft_codebook
from ..dataset import Dataset, DataError
from ..models import TrackerModel, select_beam


@dataclass
class EvalReport:
    tbars: tuple[float, ...]
    se_n: np.ndarray          # (n_slots, G) mean over episodes
    per_episode: np.ndarray   # (E, n_slots, G)

    @property
    def by_slot(self) -> np.ndarray:
        return self.se_n.mean(axis=1)

    @property
    def by_tbar(self) -> np.ndarray:
        return self.se_n.mean(axis=0)

    @property
    def overall(self) -> float:
        return float(self.se_n.mean())


def all_beam_rates(ds: Dataset) -> np.ndarray:
    """Rates of every codeword at every stored channel, shape (E, n, G, Q)."""
    if ds.channels is None or ds.channels.size == 0:
        raise DataError("dataset carries no stored channels; cannot score predictions")
    book = dft_codebook(ds.scene.n_antennas, ds.scene.n_beams)
    gains = np.abs(np.einsum("qk,engk->engq", book, np.conj(ds.channels.astype(np.complex128)))) ** 2
    return np.log2(1.0 + ds.scene.snr_linear * gains)


def score_beams(ds: Dataset, beams: np.ndarray, rates: np.ndarray | None = None) -> EvalReport:
    """Normalized spectral efficiency of predicted beams ``(E, n, G)``."""
    rates = all_beam_rates(ds) if rates is None else rates
    beams = np.asarray(beams)
    if beams.shape != rates.shape[:3]:
        raise DataError(f"predictions shaped {beams.shape}, dataset needs {rates.shape[:3]}")
    got = np.take_along_axis(rates, beams[..., None].astype(np.int64), axis=-1)[..., 0]
    se = got / rates.max(axis=-1)
    return EvalReport(tuple(ds.tbars), se.mean(axis=0), se)


def latest_sweep_beams(ds: Dataset) -> np.ndarray:
    """Non-learned reference: strongest beam of the most recent pilot sweep."""
    q = np.argmax(np.abs(ds.pilots), axis=-1)
    return np.repeat(q[:, :, None], len(ds.tbars), axis=2)


def accumulated_power_beams(ds: Dataset) -> np.ndarray:
    """Non-learned reference: strongest beam of the pilot power summed over all sweeps so far."""
    q = np.argmax(np.cumsum(np.abs(ds.pilots) ** 2, axis=1), axis=-1)
    return np.repeat(q[:, :, None], len(ds.tbars), axis=2)


def predict_beams(model: TrackerModel, ds: Dataset, batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(ds), batch_size):
        probs = model.predict_proba(ds.pilots[start:start + batch_size], ds.tbars)
        out.append(select_beam(probs))
    return np.concatenate(out, axis=0)


def evaluate(model: TrackerModel | str | Path, ds: Dataset, kind: str | None = None) -> EvalReport:
    if not isinstance(model, TrackerModel):
        model = TrackerModel.load(model)
    if kind is not None and model.kind != kind:
        raise ValueError(f"checkpoint holds a {model.kind} model, config asks for {kind}")
    if model.n_beams != ds.scene.n_beams:
        raise ValueError(f"model built for Q={model.n_beams}, dataset has Q={ds.scene.n_beams}")
    return score_beams(ds, predict_beams(model, ds))


def write_report_csv(path: str | Path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot"] + [f"{t:g}" for t in report.tbars] + ["mean"])
        for i, row in enumerate(report.se_n, 1):
            w.writerow([i] + [f"{v:.6g}" for v in row] + [f"{row.mean():.6g}"])
        w.writerow(["mean"] + [f"{v:.6g}" for v in report.by_tbar] + [f"{report.overall:.6g}"])
