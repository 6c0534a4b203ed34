"""Beam tracker networks: shared conv feature extractor, recurrent cell, output layer.

Every variant consumes a batch of pilot sweeps shaped ``(B, n_slots, Q)``
(complex) and a grid of normalized instants, and returns one logit tensor per
slot of shape ``(G * B, Q)`` ordered instant-major (row ``g * B + b``).
Batching the instant grid into the row axis lets the extractor run once per
slot while each instant keeps its own hidden-state trajectory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .lnn import CfcCellParams, Dense, cfc_forward, check_tbar
from .tensor import ConfigurationError, RunningStats, Tensor
from .tensor.checkpoint import decode_text, encode_text, load_blocks, save_blocks
from .tensor.init import kaiming_uniform, xavier_uniform, zeros

MODEL_KINDS = ("lnn", "lstm", "ode-lstm")
KERNEL, STRIDE, PAD = 3, 3, 1


class DataError(ValueError):
    pass


def grid_side(n_beams: int) -> int:
    side = math.isqrt(n_beams)
    if side * side != n_beams:
        raise ConfigurationError(f"Q={n_beams} is not a perfect square; cannot reshape to a 2-D grid")
    return side


def prepare_input(y: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Complex sweeps ``(..., Q)`` to real maps ``(..., 2, side, side)``.

    Channel 0 holds the real parts, channel 1 the imaginary parts, beams laid
    out row-major on the grid.
    """
    y = np.asarray(y)
    side = grid_side(y.shape[-1])
    parts = np.stack([y.real, y.imag], axis=-2) * scale
    return parts.reshape(y.shape[:-1] + (2, side, side)).astype(T.default_dtype())


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    stats: RunningStats

    @classmethod
    def init(cls, channels: int, name: str) -> "BatchNorm":
        return cls(T.parameter(np.ones(channels), f"{name}.gamma"),
                   T.parameter(np.zeros(channels), f"{name}.beta"), RunningStats.init(channels))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.stats, train=train)


@dataclass
class Conv:
    k: Tensor
    b: Tensor

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator, name: str) -> "Conv":
        return cls(T.parameter(kaiming_uniform((c_out, c_in, KERNEL, KERNEL), rng), f"{name}.weight"),
                   T.parameter(zeros(c_out), f"{name}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(T.conv2d(x, self.k, self.b, stride=STRIDE, pad=PAD))


class FeatureExtractorParams:
    """BN1 -> Conv1 -> BN2 -> Conv2 -> BN3 -> Conv3 -> BN4 -> global average pool."""

    def __init__(self, n_beams: int, channels: Sequence[int] = (64, 256, 256),
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.side = grid_side(n_beams)
        c1, c2, c3 = channels
        self.channels = (c1, c2, c3)
        self.bn1 = BatchNorm.init(2, "extractor.bn1")
        self.conv1 = Conv.init(2, c1, rng, "extractor.conv1")
        self.bn2 = BatchNorm.init(c1, "extractor.bn2")
        self.conv2 = Conv.init(c1, c2, rng, "extractor.conv2")
        self.bn3 = BatchNorm.init(c2, "extractor.bn3")
        self.conv3 = Conv.init(c2, c3, rng, "extractor.conv3")
        self.bn4 = BatchNorm.init(c3, "extractor.bn4")
        self.shape_audit()

    @property
    def out_dim(self) -> int:
        return self.channels[2]

    def layers(self):
        return [("bn1", self.bn1), ("conv1", self.conv1), ("bn2", self.bn2), ("conv2", self.conv2),
                ("bn3", self.bn3), ("conv3", self.conv3), ("bn4", self.bn4)]

    def shape_audit(self) -> list[tuple[str, int, int, int]]:
        """Walk the layer chain symbolically: (layer, in_ch, out_ch, spatial side out)."""
        rows, ch, side = [], 2, self.side
        for name, layer in self.layers():
            if isinstance(layer, Conv):
                out_ch = layer.k.shape[0]
                side = T.conv_output_size(side, KERNEL, STRIDE, PAD)
                if side <= 0:
                    raise ConfigurationError(f"{name}: non-positive spatial size for a {self.side}x{self.side} grid")
            else:
                out_ch = layer.gamma.shape[0]
                if out_ch != ch:
                    raise ConfigurationError(f"{name}: expects {out_ch} channels, receives {ch}")
            rows.append((name, ch, out_ch, side))
            ch = out_ch
        rows.append(("pool", ch, ch, 1))
        return rows

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        for _, layer in self.layers():
            x = layer(x, train) if isinstance(layer, BatchNorm) else layer(x)
        return T.avgpool_global(x)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers():
            if isinstance(layer, BatchNorm):
                out[f"extractor.{name}.gamma"] = layer.gamma
                out[f"extractor.{name}.beta"] = layer.beta
            else:
                out[f"extractor.{name}.weight"] = layer.k
                out[f"extractor.{name}.bias"] = layer.b
        return out

    def buffers(self) -> dict[str, RunningStats]:
        return {f"extractor.{n}": l.stats for n, l in self.layers() if isinstance(l, BatchNorm)}


TABLE_II_AUDIT = [
    ("bn1", 2, 2), ("conv1", 2, 64), ("bn2", 64, 64), ("conv2", 64, 256),
    ("bn3", 256, 256), ("conv3", 256, 256), ("bn4", 256, 256), ("pool", 256, 256),
]


@dataclass
class LstmCellParams:
    """Fused gates, row blocks ordered input, forget, candidate, output."""
    gates: Dense

    @classmethod
    def init(cls, input_dim: int = 256, hidden_dim: int = 64,
             rng: np.random.Generator | None = None, name: str = "lstm") -> "LstmCellParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(Dense.init(input_dim + hidden_dim, 4 * hidden_dim, rng, f"{name}.gates"))

    @property
    def hidden_dim(self) -> int:
        return self.gates.W.shape[0] // 4

    def __call__(self, x: Tensor, h: Tensor, c: Tensor, return_gates: bool = False):
        H = self.hidden_dim
        z = self.gates(T.concat([x, h], axis=1))
        i = T.sigmoid(z[:, 0:H])
        f = T.sigmoid(z[:, H:2 * H])
        g = T.tanh(z[:, 2 * H:3 * H])
        o = T.sigmoid(z[:, 3 * H:4 * H])
        c = f * c + i * g
        h = o * T.tanh(c)
        if return_gates:
            return h, c, {"i": i, "f": f, "g": g, "o": o}
        return h, c

    def named_parameters(self, prefix: str = "lstm") -> dict[str, Tensor]:
        return self.gates.named_parameters(f"{prefix}.gates")


@dataclass
class OdeLstmParams:
    lstm: LstmCellParams
    deriv: Dense
    euler_steps: int = 10

    @classmethod
    def init(cls, input_dim: int = 256, hidden_dim: int = 64,
             rng: np.random.Generator | None = None) -> "OdeLstmParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(LstmCellParams.init(input_dim, hidden_dim, rng, "ode.lstm"),
                   Dense.init(hidden_dim, hidden_dim, rng, "ode.deriv"))

    @property
    def hidden_dim(self) -> int:
        return self.lstm.hidden_dim

    def evolve(self, h: Tensor, tbar_rows: np.ndarray, steps: int | None = None) -> Tensor:
        """Fixed-step Euler on ``h' = tanh(deriv(h))`` from 0 to each row's instant."""
        steps = steps or self.euler_steps
        dt = (np.asarray(tbar_rows, dtype=np.float64) / steps)[:, None]
        for _ in range(steps):
            h = h + T.mul(T.tanh(self.deriv(h)), dt)
        return h

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.lstm.named_parameters("ode.lstm")
        out.update(self.deriv.named_parameters("ode.deriv"))
        return out


class TrackerModel:
    def __init__(self, kind: str = "lnn", n_beams: int = 64, hidden_dim: int = 64,
                 channels: Sequence[int] = (64, 256, 256), backbone_dim: int = 128,
                 seed: int = 0, input_scale: float = 1.0):
        if kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
        rng = np.random.default_rng(seed)
        self.kind = kind
        self.n_beams = n_beams
        self.hidden_dim = hidden_dim
        self.backbone_dim = backbone_dim
        self.input_scale = float(input_scale)
        self.extractor = FeatureExtractorParams(n_beams, channels, rng)
        feat = self.extractor.out_dim
        if kind == "lnn":
            self.cell = CfcCellParams.init(feat, hidden_dim, backbone_dim, rng)
        elif kind == "lstm":
            self.cell = LstmCellParams.init(feat, hidden_dim, rng)
        else:
            self.cell = OdeLstmParams.init(feat, hidden_dim, rng)
        self.output = Dense(T.parameter(xavier_uniform((n_beams, hidden_dim), rng), "output.weight"),
                            T.parameter(zeros(n_beams), "output.bias"))
        self.train_mode = True

    # -- parameters -------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = self.extractor.named_parameters()
        out.update(self.cell.named_parameters())
        out.update(self.output.named_parameters("output"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def shared_parameter_count(self) -> int:
        shared = [p for n, p in self.named_parameters().items()
                  if n.startswith(("extractor.", "output."))]
        return sum(p.size for p in shared)

    def train(self) -> "TrackerModel":
        self.train_mode = True
        return self

    def eval(self) -> "TrackerModel":
        self.train_mode = False
        return self

    # -- forward ----------------------------------------------------------
    def features(self, x: np.ndarray) -> Tensor:
        return self.extractor(Tensor(x), self.train_mode)

    def forward(self, pilots: np.ndarray, tbars: Sequence[float]) -> list[Tensor]:
        """Logits per slot for every instant in ``tbars``.

        ``pilots`` is complex ``(B, n, Q)``.  Returns ``n`` tensors of shape
        ``(len(tbars) * B, Q)``.
        """
        pilots = np.asarray(pilots)
        if pilots.ndim == 2:
            pilots = pilots[None]
        B, n, Q = pilots.shape
        if n < 1:
            raise DataError("empty slot history")
        if Q != self.n_beams:
            raise ConfigurationError(f"model built for Q={self.n_beams}, pilots have Q={Q}")
        tb = check_tbar(np.asarray(tbars, dtype=np.float64).reshape(-1))
        G = tb.size
        tbar_rows = np.repeat(tb, B)
        # slot-major rows so slot i is a contiguous block
        x = prepare_input(pilots.transpose(1, 0, 2).reshape(n * B, Q), self.input_scale)
        if self.train_mode:
            # batch statistics span every slot of the batch
            feats = self.features(x)
        else:
            # per-slot calls keep GEMM shapes independent of history length (exact prefix causality)
            feats = T.concat([self.features(x[i * B:(i + 1) * B]) for i in range(n)], axis=0)
        H = self.hidden_dim
        dt = T.default_dtype()
        logits = []
        if self.kind == "lnn":
            h = Tensor(np.zeros((G * B, H), dtype=dt))
            for i in range(n):
                s = T.repeat_rows(feats[i * B:(i + 1) * B], G)
                h = cfc_forward(s, h, tbar_rows, self.cell)
                logits.append(self.output(h))
        else:
            lstm = self.cell if self.kind == "lstm" else self.cell.lstm
            h = Tensor(np.zeros((B, H), dtype=dt))
            c = Tensor(np.zeros((B, H), dtype=dt))
            for i in range(n):
                h, c = lstm(feats[i * B:(i + 1) * B], h, c)
                if self.kind == "lstm":
                    logits.append(T.repeat_rows(self.output(h), G))
                else:
                    e = self.cell.evolve(T.repeat_rows(h, G), tbar_rows)
                    logits.append(self.output(e))
        return logits

    def predict_proba(self, pilots: np.ndarray, tbars: Sequence[float]) -> np.ndarray:
        """Probabilities shaped ``(B, n, G, Q)`` without recording a graph."""
        pilots = np.asarray(pilots)
        if pilots.ndim == 2:
            pilots = pilots[None]
        B = pilots.shape[0]
        G = len(np.atleast_1d(tbars))
        with T.no_grad():
            logits = self.forward(pilots, np.atleast_1d(tbars))
        probs = np.stack([T.softmax(l.data.astype(np.float64)) for l in logits], axis=0)
        return probs.reshape(len(logits), G, B, -1).transpose(2, 0, 1, 3)

    # -- persistence ------------------------------------------------------
    def state_blocks(self) -> dict[str, np.ndarray]:
        blocks = {"model.kind": encode_text(self.kind),
                  "model.dims": np.array([self.n_beams, self.hidden_dim, *self.extractor.channels,
                                          self.backbone_dim], dtype=np.float32),
                  "model.input_scale": np.array([self.input_scale], dtype=np.float32)}
        blocks.update({n: p.data for n, p in self.named_parameters().items()})
        for n, st in self.extractor.buffers().items():
            blocks[f"{n}.running_mean"] = st.mean
            blocks[f"{n}.running_var"] = st.var
        return blocks

    def save(self, path: str | Path) -> None:
        save_blocks(path, self.state_blocks())

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray]) -> "TrackerModel":
        try:
            kind = decode_text(blocks["model.kind"])
            q, hid, c1, c2, c3, bb = (int(v) for v in blocks["model.dims"])
            scale = float(blocks["model.input_scale"][0])
        except KeyError as exc:
            raise DataError(f"checkpoint lacks metadata block {exc}") from None
        model = cls(kind, q, hid, (c1, c2, c3), bb, input_scale=scale)
        for name, p in model.named_parameters().items():
            if name not in blocks:
                raise DataError(f"checkpoint lacks parameter {name!r}")
            if blocks[name].shape != p.shape:
                raise DataError(f"{name}: checkpoint shape {blocks[name].shape} vs model {p.shape}")
            p.data = blocks[name].astype(p.data.dtype)
        for n, st in model.extractor.buffers().items():
            st.mean = blocks[f"{n}.running_mean"].astype(np.float32)
            st.var = blocks[f"{n}.running_var"].astype(np.float32)
        return model

    @classmethod
    def load(cls, path: str | Path) -> "TrackerModel":
        return cls.from_blocks(load_blocks(path))


def output_layer(h: Tensor, output: Dense) -> np.ndarray:
    """Linear map to Q logits followed by softmax (probabilities, no graph)."""
    return T.softmax(output(h).data.astype(np.float64))


def select_beam(p: np.ndarray) -> np.ndarray | int:
    """Argmax over the last axis; ties go to the lowest index."""
    idx = np.argmax(np.asarray(p), axis=-1)
    return int(idx) if np.ndim(idx) == 0 else idx


def _track(model: TrackerModel, kind: str, Y: np.ndarray, tbar: float) -> np.ndarray:
    if model.kind != kind:
        raise ConfigurationError(f"expected a {kind} model, got {model.kind}")
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.shape[0] == 0:
        raise DataError("need a non-empty (n_slots, Q) pilot history")
    return model.predict_proba(Y[None], [tbar])[0, :, 0, :]


def track_lnn(Y: np.ndarray, tbar: float, model: TrackerModel) -> np.ndarray:
    """Per-slot probability vectors ``(n, Q)`` at normalized instant ``tbar``."""
    return _track(model, "lnn", Y, tbar)


def track_lstm(Y: np.ndarray, model: TrackerModel) -> np.ndarray:
    return _track(model, "lstm", Y, 0.5)


def track_ode_lstm(Y: np.ndarray, tbar: float, model: TrackerModel) -> np.ndarray:
    return _track(model, "ode-lstm", Y, tbar)


def episode_loss(model: TrackerModel, pilots: np.ndarray, labels: np.ndarray,
                 tbars: Sequence[float]) -> Tensor:
    """Cross-entropy summed over slots, averaged over the instant grid and batch.

    ``labels`` holds beam indices shaped ``(B, n, G)``.
    """
    pilots = np.asarray(pilots)
    if pilots.ndim == 2:
        pilots = pilots[None]
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    B, n, _ = pilots.shape
    G = len(tbars)
    if labels.shape != (B, n, G) or np.any(labels < 0):
        raise DataError(f"labels shaped {labels.shape}, need {(B, n, G)} non-negative indices")
    logits = model.forward(pilots, tbars)
    total = None
    for i, lg in enumerate(logits):
        target = labels[:, i, :].T.reshape(-1)
        term = T.softmax_cross_entropy(lg, target)
        total = term if total is None else total + term
    return total
