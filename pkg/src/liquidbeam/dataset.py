"""Episode generation and the ``LBDS`` dataset file.

An episode follows one UE over ``n_slots`` slots.  At each slot start the UE
draws a new heading and the BS sweeps all Q beams (the pilot record).  Within
the slot the UE moves in a straight line; for every normalized instant in the
grid we store the channel, the exhaustive-search beam and its rate.  NLOS
scatterers are redrawn per slot and held fixed inside it.

File layout (little-endian)::

    header   b"LBDS" | u32 version | u32 header_len | header body | u32 crc32(body)
    body     u32 n_antennas, n_beams, n_paths, n_slots
             f64 carrier_hz, bandwidth_hz, noise_figure_db, tx_power_dbm,
                 nlos_attenuation_db, ue_speed, slot_length, inner_radius, outer_radius
             i64 scene seed | u64 master seed | u32 n_episodes | u32 G | f64 tbar[G]
    records  n_episodes x fixed-size record:
             u64 episode_id
             f32 ue[n, 4]            (x, y, heading, speed) at slot start
             f32 pilots[n, Q, 2]     (re, im)
             i32 labels[n, G]
             f32 rates[n, G]
             f32 channels[n, G, N_t, 2]

    record_size = 8 + 16 n + 8 n Q + 8 n G + 8 n G N_t
"""
from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel import (SceneConfig, UEState, advance, beam_rates, dft_codebook, draw_nlos,
                      generate_channel, pilot_sweep, spawn_ue)

MAGIC = b"LBDS"
VERSION = 1
TBAR_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
VAL_ID_OFFSET = 1 << 32
MAX_TBARS = 4096

_SCENE_INTS = ("n_antennas", "n_beams", "n_paths", "n_slots")
_SCENE_FLOATS = ("carrier_hz", "bandwidth_hz", "noise_figure_db", "tx_power_dbm", "nlos_attenuation_db",
                 "ue_speed", "slot_length", "inner_radius", "outer_radius")


class DatasetFormatError(ValueError):
    pass


class DatasetIOError(IOError):
    pass


class DataError(ValueError):
    pass


@dataclass
class Episode:
    episode_id: int
    ue: np.ndarray        # (n, 4)
    pilots: np.ndarray    # (n, Q) complex64
    labels: np.ndarray    # (n, G) int32
    rates: np.ndarray     # (n, G) float32
    channels: np.ndarray  # (n, G, N_t) complex64


def episode_rngs(seed: int, episode_id: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent geometry and noise streams keyed by (seed, episode id).

    Geometry does not depend on the noise stream, so the same key yields the
    same trajectory and channels at every noise figure.
    """
    ss = np.random.SeedSequence([int(seed), episode_id >> 32, episode_id & 0xFFFFFFFF])
    geo, noise = ss.spawn(2)
    return np.random.default_rng(geo), np.random.default_rng(noise)


def generate_episode(cfg: SceneConfig, seed: int, episode_id: int = 0,
                     tbars: Sequence[float] = TBAR_GRID) -> Episode:
    geo, noise_rng = episode_rngs(seed, episode_id)
    book = dft_codebook(cfg.n_antennas, cfg.n_beams)
    snr = cfg.snr_linear
    n, G, Q, N = cfg.n_slots, len(tbars), cfg.n_beams, cfg.n_antennas
    ue_rec = np.zeros((n, 4), dtype=np.float32)
    pilots = np.zeros((n, Q), dtype=np.complex64)
    labels = np.zeros((n, G), dtype=np.int32)
    rates = np.zeros((n, G), dtype=np.float32)
    channels = np.zeros((n, G, N), dtype=np.complex64)
    ue = spawn_ue(cfg, geo)
    for i in range(n):
        ue = UEState(ue.position, float(geo.uniform(0, 2 * np.pi)), ue.speed)
        nlos = draw_nlos(cfg, geo)
        ue_rec[i] = (*ue.position, ue.heading, ue.speed)
        h0 = generate_channel(ue, cfg, nlos=nlos)
        pilots[i] = pilot_sweep(h0, book, cfg.tx_power_dbm, cfg.noise_dbm, noise_rng)
        for g, tb in enumerate(tbars):
            h = generate_channel(advance(ue, tb * cfg.slot_length, cfg), cfg, nlos=nlos)
            h32 = h.astype(np.complex64)
            r = beam_rates(h32.astype(np.complex128), book, snr)
            q = int(np.argmax(r))
            channels[i, g] = h32
            labels[i, g] = q
            rates[i, g] = r[q]
        ue = advance(ue, cfg.slot_length, cfg)
    return Episode(episode_id, ue_rec, pilots, labels, rates, channels)


@dataclass
class Dataset:
    scene: SceneConfig
    tbars: tuple[float, ...]
    master_seed: int
    episode_ids: np.ndarray
    ue: np.ndarray
    pilots: np.ndarray
    labels: np.ndarray
    rates: np.ndarray
    channels: np.ndarray

    def __len__(self) -> int:
        return len(self.episode_ids)

    @classmethod
    def from_episodes(cls, scene: SceneConfig, tbars, master_seed: int, eps: list[Episode]) -> "Dataset":
        return cls(scene, tuple(float(t) for t in tbars), int(master_seed),
                   np.array([e.episode_id for e in eps], dtype=np.uint64),
                   np.stack([e.ue for e in eps]), np.stack([e.pilots for e in eps]),
                   np.stack([e.labels for e in eps]), np.stack([e.rates for e in eps]),
                   np.stack([e.channels for e in eps]))

    def episode(self, i: int) -> Episode:
        return Episode(int(self.episode_ids[i]), self.ue[i], self.pilots[i], self.labels[i],
                       self.rates[i], self.channels[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.scene, self.tbars, self.master_seed, self.episode_ids[idx], self.ue[idx],
                       self.pilots[idx], self.labels[idx], self.rates[idx], self.channels[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.scene == other.scene and self.tbars == other.tbars
                and self.master_seed == other.master_seed
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("episode_ids", "ue", "pilots", "labels", "rates", "channels")))

    def verify(self, fraction: float = 0.01, rng: np.random.Generator | None = None,
               tol: float = 1e-6) -> int:
        """Recompute rates and optimality on a random sample; returns episodes checked."""
        rng = rng if rng is not None else np.random.default_rng(0)
        k = max(1, int(round(fraction * len(self)))) if len(self) else 0
        book = dft_codebook(self.scene.n_antennas, self.scene.n_beams)
        snr = self.scene.snr_linear
        for e in rng.choice(len(self), size=k, replace=False):
            for i in range(self.labels.shape[1]):
                for g in range(self.labels.shape[2]):
                    r = beam_rates(self.channels[e, i, g].astype(np.complex128), book, snr)
                    q = self.labels[e, i, g]
                    if not 0 <= q < len(r) or r[q] < r.max():
                        raise DataError(f"episode {e} slot {i} instant {g}: stored beam {q} is not optimal")
                    if abs(r[q] - self.rates[e, i, g]) > tol * max(1.0, r[q]):
                        raise DataError(f"episode {e} slot {i} instant {g}: stored rate "
                                        f"{self.rates[e, i, g]} vs recomputed {r[q]}")
        return k


def generate_split(cfg: SceneConfig, count: int, seed: int, id_offset: int = 0,
                   tbars: Sequence[float] = TBAR_GRID, workers: int = 1) -> Dataset:
    if count < 1:
        raise ValueError("episode count must be >= 1")
    ids = [id_offset + i for i in range(count)]

    def one(eid):
        return generate_episode(cfg, seed, eid, tbars)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            eps = list(pool.map(one, ids))
    else:
        eps = [one(e) for e in ids]
    return Dataset.from_episodes(cfg, tbars, seed, eps)


def generate_dataset(cfg: SceneConfig, n_train: int = 10240, n_val: int = 2560, seed: int = 0,
                     tbars: Sequence[float] = TBAR_GRID, workers: int = 1) -> tuple[Dataset, Dataset]:
    """Training and validation splits with disjoint episode ids."""
    if n_train >= VAL_ID_OFFSET:
        raise ValueError("too many training episodes")
    return (generate_split(cfg, n_train, seed, 0, tbars, workers),
            generate_split(cfg, n_val, seed, VAL_ID_OFFSET, tbars, workers))


def record_size(n_slots: int, n_beams: int, n_tbars: int, n_antennas: int) -> int:
    n, Q, G, N = n_slots, n_beams, n_tbars, n_antennas
    return 8 + 16 * n + 8 * n * Q + 8 * n * G + 8 * n * G * N


def header_size(n_tbars: int) -> int:
    body = 4 * len(_SCENE_INTS) + 8 * len(_SCENE_FLOATS) + 8 + 8 + 4 + 4 + 8 * n_tbars
    return 4 + 4 + 4 + body + 4


def _header_body(ds: Dataset) -> bytes:
    sc = ds.scene
    return b"".join([
        struct.pack("<4I", *(getattr(sc, k) for k in _SCENE_INTS)),
        struct.pack(f"<{len(_SCENE_FLOATS)}d", *(getattr(sc, k) for k in _SCENE_FLOATS)),
        struct.pack("<qQII", sc.seed, ds.master_seed, len(ds), len(ds.tbars)),
        struct.pack(f"<{len(ds.tbars)}d", *ds.tbars),
    ])


def _interleave(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1).astype("<f4")


def write_dataset(path: str | Path, ds: Dataset) -> None:
    body = _header_body(ds)
    E, n, Q = ds.pilots.shape
    recs = np.empty((E,), dtype=_record_dtype(n, Q, len(ds.tbars), ds.scene.n_antennas))
    recs["id"] = ds.episode_ids
    recs["ue"] = ds.ue
    recs["pilots"] = _interleave(ds.pilots)
    recs["labels"] = ds.labels
    recs["rates"] = ds.rates
    recs["channels"] = _interleave(ds.channels)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(body)))
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))
        fh.write(recs.tobytes())


def _record_dtype(n: int, Q: int, G: int, N: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("ue", "<f4", (n, 4)), ("pilots", "<f4", (n, Q, 2)),
                     ("labels", "<i4", (n, G)), ("rates", "<f4", (n, G)),
                     ("channels", "<f4", (n, G, N, 2))])


def read_dataset(path: str | Path, verify: bool = True) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise DatasetIOError(f"{path}: truncated header at byte offset {len(buf)}")
    if buf[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {buf[:4]!r}")
    version, body_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    fixed = header_size(0) - 16
    if body_len < fixed or (body_len - fixed) % 8 or (body_len - fixed) // 8 > MAX_TBARS:
        raise DatasetFormatError(f"{path}: implausible header length {body_len}")
    end = 12 + body_len + 4
    if len(buf) < end:
        raise DatasetIOError(f"{path}: truncated header at byte offset {len(buf)} (need {end})")
    body = buf[12:12 + body_len]
    (crc,) = struct.unpack_from("<I", buf, 12 + body_len)
    if zlib.crc32(body) != crc:
        raise DatasetFormatError(f"{path}: header checksum mismatch")
    off = 0
    ints = struct.unpack_from("<4I", body, off)
    off += 16
    floats = struct.unpack_from(f"<{len(_SCENE_FLOATS)}d", body, off)
    off += 8 * len(_SCENE_FLOATS)
    scene_seed, master, E, G = struct.unpack_from("<qQII", body, off)
    off += 24
    tbars = struct.unpack_from(f"<{G}d", body, off)
    try:
        scene = SceneConfig(**dict(zip(_SCENE_INTS, ints)), **dict(zip(_SCENE_FLOATS, floats)),
                            seed=scene_seed)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: invalid scene in header: {exc}") from None
    n, Q, N = scene.n_slots, scene.n_beams, scene.n_antennas
    dt = _record_dtype(n, Q, G, N)
    need = end + E * dt.itemsize
    if len(buf) < need:
        done = (len(buf) - end) // dt.itemsize
        raise DatasetIOError(f"{path}: truncated in record {done} at byte offset {len(buf)} "
                             f"(expected {need} bytes)")
    if len(buf) > need:
        raise DatasetFormatError(f"{path}: {len(buf) - need} trailing bytes after last record")
    recs = np.frombuffer(buf, dtype=dt, count=E, offset=end)

    def cplx(a):
        return (a[..., 0] + 1j * a[..., 1]).astype(np.complex64)

    ds = Dataset(scene, tuple(tbars), int(master), recs["id"].astype(np.uint64), recs["ue"].copy(),
                 cplx(recs["pilots"]), recs["labels"].astype(np.int32), recs["rates"].copy(),
                 cplx(recs["channels"]))
    if verify and E:
        ds.verify()
    return ds
