"""Narrowband geometric mmWave channel, DFT codebook and UE mobility.

The BS sits at the origin with a half-wavelength ULA along the y axis, so a UE
at azimuth ``theta = atan2(y, x)`` sees spatial frequency ``pi * sin(theta)``.
Powers are in mW throughout (dBm helpers convert).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    n_antennas: int = 64
    n_beams: int = 64
    carrier_hz: float = 28e9
    bandwidth_hz: float = 50e6
    noise_figure_db: float = 9.0
    tx_power_dbm: float = 10.0
    n_paths: int = 3
    nlos_attenuation_db: float = 10.0
    ue_speed: float = 5.0
    slot_length: float = 0.16
    n_slots: int = 10
    inner_radius: float = 20.0
    outer_radius: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.n_antennas < 1 or self.n_beams < 1 or self.n_paths < 1:
            raise ValueError("n_antennas, n_beams and n_paths must be >= 1")
        if self.slot_length <= 0 or self.bandwidth_hz <= 0 or self.n_slots < 1:
            raise ValueError("slot_length, bandwidth_hz and n_slots must be positive")
        if not 0 < self.inner_radius < self.outer_radius:
            raise ValueError(
                f"need 0 < inner_radius < outer_radius, got {self.inner_radius}, {self.outer_radius}")

    @property
    def noise_dbm(self) -> float:
        return noise_power_dbm(self.bandwidth_hz, self.noise_figure_db)

    @property
    def snr_linear(self) -> float:
        return dbm_to_mw(self.tx_power_dbm) / dbm_to_mw(self.noise_dbm)

    def with_(self, **changes) -> "SceneConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def array_response(theta, n_antennas: int) -> np.ndarray:
    """Unit-norm ULA steering vector(s); ``theta`` may be an array (one row each)."""
    k = np.arange(n_antennas)
    th = np.asarray(theta, dtype=np.float64)
    phase = np.pi * np.multiply.outer(np.sin(th), k)
    return np.exp(1j * phase) / math.sqrt(n_antennas)


def dft_codebook(n_antennas: int, n_beams: int) -> np.ndarray:
    """Codebook as a (Q, N_t) array; row q is the beam with phase step 2*pi*q/Q.

    Beams are indexed from 0 (the math is usually written 1-based).
    """
    k = np.arange(n_antennas)
    q = np.arange(n_beams)
    return np.exp(2j * np.pi * np.outer(q, k) / n_beams) / math.sqrt(n_antennas)


def noise_power_dbm(bandwidth_hz: float, noise_figure_db: float) -> float:
    if bandwidth_hz <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth_hz}")
    return -174.0 + 10.0 * math.log10(bandwidth_hz) + noise_figure_db


def dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def dbm_to_watt(dbm: float) -> float:
    return dbm_to_mw(dbm) * 1e-3


def free_space_loss(distance: float, carrier_hz: float) -> float:
    """Linear free-space path loss ``(4 pi d f / c)^2``."""
    return (4.0 * math.pi * distance * carrier_hz / SPEED_OF_LIGHT) ** 2


@dataclass
class NlosPaths:
    angles: np.ndarray
    gains: np.ndarray


def draw_nlos(cfg: SceneConfig, rng: np.random.Generator) -> NlosPaths:
    n = cfg.n_paths - 1
    power = 10.0 ** (-cfg.nlos_attenuation_db / 10.0)
    angles = rng.uniform(-np.pi, np.pi, size=n)
    gains = math.sqrt(power / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return NlosPaths(angles, gains)


@dataclass
class UEState:
    position: np.ndarray
    heading: float
    speed: float

    @property
    def distance(self) -> float:
        return float(np.hypot(*self.position))

    @property
    def azimuth(self) -> float:
        return float(np.arctan2(self.position[1], self.position[0]))


def generate_channel(ue: UEState, cfg: SceneConfig, rng: np.random.Generator | None = None,
                     nlos: NlosPaths | None = None) -> np.ndarray:
    """LOS path plus ``n_paths - 1`` scattered paths, scaled by free-space loss.

    The NLOS geometry comes from ``nlos`` when given (held fixed within a slot),
    otherwise it is drawn from ``rng``.
    """
    d = ue.distance
    if d <= 0:
        raise GeometryError("UE at the base-station position (distance 0)")
    if nlos is None:
        if cfg.n_paths > 1 and rng is None:
            raise ValueError("need rng or nlos paths for a multipath channel")
        nlos = draw_nlos(cfg, rng) if cfg.n_paths > 1 else NlosPaths(np.zeros(0), np.zeros(0, complex))
    n = cfg.n_antennas
    h = array_response(ue.azimuth, n)
    if nlos.angles.size:
        h = h + nlos.gains @ array_response(nlos.angles, n)
    return math.sqrt(n / free_space_loss(d, cfg.carrier_hz)) * h


def beamforming_gains(h: np.ndarray, book: np.ndarray) -> np.ndarray:
    """``|h^H v_q|^2`` for every codeword."""
    return np.abs(book @ np.conj(h)) ** 2


def spectral_efficiency(h: np.ndarray, v: np.ndarray, snr_linear: float) -> float:
    if snr_linear < 0:
        raise ValueError("snr must be non-negative")
    return float(np.log2(1.0 + snr_linear * np.abs(np.vdot(h, v)) ** 2))


def beam_rates(h: np.ndarray, book: np.ndarray, snr_linear: float) -> np.ndarray:
    return np.log2(1.0 + snr_linear * beamforming_gains(h, book))


def optimal_beam(h: np.ndarray, book: np.ndarray, snr_linear: float) -> tuple[int, float]:
    """Exhaustive search; ties resolve to the lowest index."""
    rates = beam_rates(h, book, snr_linear)
    q = int(np.argmax(rates))
    return q, float(rates[q])


def pilot_sweep(h: np.ndarray, book: np.ndarray, tx_power_dbm: float, noise_dbm: float,
                rng: np.random.Generator) -> np.ndarray:
    """Received pilot (x = 1) on every beam plus circular complex Gaussian noise."""
    if book.shape[1] != h.shape[0]:
        raise ValueError(f"codebook for {book.shape[1]} antennas, channel has {h.shape[0]}")
    clean = math.sqrt(dbm_to_mw(tx_power_dbm)) * (book @ np.conj(h))
    sigma2 = dbm_to_mw(noise_dbm)
    noise = math.sqrt(sigma2 / 2) * (rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape))
    return clean + noise


def spawn_ue(cfg: SceneConfig, rng: np.random.Generator) -> UEState:
    r = math.sqrt(rng.uniform(cfg.inner_radius ** 2, cfg.outer_radius ** 2))
    phi = rng.uniform(0, 2 * np.pi)
    heading = rng.uniform(0, 2 * np.pi)
    return UEState(np.array([r * math.cos(phi), r * math.sin(phi)]), heading, cfg.ue_speed)


def _reflect_walk(p: np.ndarray, u: np.ndarray, s: float, r_in: float, r_out: float):
    # straight-line walk of length s, specular reflection off both circles
    for _ in range(64):
        b = float(p @ u)
        hits = []
        c_out = float(p @ p) - r_out ** 2
        disc = b * b - c_out
        if disc >= 0:
            t = -b + math.sqrt(disc)
            if 1e-12 < t <= s:
                hits.append(t)
        c_in = float(p @ p) - r_in ** 2
        disc = b * b - c_in
        if b < 0 and disc >= 0 and c_in > -1e-9:
            t = -b - math.sqrt(disc)
            if 1e-12 < t <= s:
                hits.append(t)
        if not hits:
            return p + s * u, u
        t = min(hits)
        p = p + t * u
        n = p / np.linalg.norm(p)
        u = u - 2 * float(u @ n) * n
        s -= t
    return p, u


def advance(ue: UEState, dt: float, cfg: SceneConfig) -> UEState:
    """Move along the current heading for ``dt`` seconds, reflecting at the annulus."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if ue.speed == 0 or dt == 0:
        return UEState(ue.position.copy(), ue.heading, ue.speed)
    u = np.array([math.cos(ue.heading), math.sin(ue.heading)])
    p, u = _reflect_walk(ue.position.astype(np.float64), u, ue.speed * dt,
                         cfg.inner_radius, cfg.outer_radius)
    return UEState(p, float(np.arctan2(u[1], u[0])) % (2 * np.pi), ue.speed)


def step_ue(ue: UEState, dt: float, cfg: SceneConfig,
            rng: np.random.Generator | None = None) -> UEState:
    """One slot of motion.  With ``rng`` the heading is redrawn first (slot boundary)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if rng is not None:
        ue = UEState(ue.position.copy(), float(rng.uniform(0, 2 * np.pi)), ue.speed)
    return advance(ue, dt, cfg)
