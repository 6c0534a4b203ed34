"""Finite-difference gradient suite and property self-test used by the CLI."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import tensor as T
from ..channel import (SceneConfig, array_response, beam_rates, dft_codebook, generate_channel,
                       optimal_beam, pilot_sweep, spawn_ue)
from ..dataset import generate_episode
from ..lnn import CfcCellParams, LtcReferenceParams, cfc_forward, ltc_reference_step
from ..models import MODEL_KINDS, TrackerModel, episode_loss

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class Check:
    name: str
    value: float
    limit: float
    passed: bool

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.name:<34} {self.value:.3e}  (limit {self.limit:g})"


def _op_cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable, dict]]]:
    """Each case builds (loss_fn, params) on a randomized small shape."""

    def shape(lo, hi):
        return int(rng.integers(lo, hi + 1))

    def weighted(out_fn, params):
        with T.no_grad():
            w = rng.normal(size=out_fn().shape)
        return (lambda: T.mul(out_fn(), w).sum()), params

    def linear():
        b, i, o = shape(2, 5), shape(2, 7), shape(2, 6)
        x, W, bias = (T.parameter(rng.normal(size=s)) for s in ((b, i), (o, i), (o,)))
        return weighted(lambda: T.linear(x, W, bias), {"x": x, "W": W, "b": bias})

    def conv(stride, pad):
        def case():
            c, h = shape(1, 3), shape(5, 8)
            x = T.parameter(rng.normal(size=(2, c, h, h)))
            k = T.parameter(rng.normal(size=(shape(1, 4), c, 3, 3)))
            b = T.parameter(rng.normal(size=k.shape[0]))
            return weighted(lambda: T.conv2d(x, k, b, stride=stride, pad=pad), {"x": x, "k": k, "b": b})
        return case

    def batchnorm(train):
        def case():
            c = shape(2, 4)
            x = T.parameter(rng.normal(size=(3, c, 3, 3)))
            g, b = T.parameter(rng.uniform(0.5, 2, size=c)), T.parameter(rng.normal(size=c))
            stats = T.RunningStats(rng.normal(size=c), rng.uniform(0.5, 2, size=c))
            return weighted(lambda: T.batchnorm2d(x, g, b, stats, train), {"x": x, "gamma": g, "beta": b})
        return case

    def act(kind):
        def case():
            x = T.parameter(rng.normal(size=(shape(2, 5), shape(2, 6))) + 0.05)   # keep relu off its kink
            return weighted(lambda: T.activation(kind, x), {"x": x})
        return case

    def avgpool():
        x = T.parameter(rng.normal(size=(2, shape(1, 4), 3, 3)))
        return weighted(lambda: T.avgpool_global(x), {"x": x})

    def shaping():
        x = T.parameter(rng.normal(size=(3, 4)))
        y = T.parameter(rng.normal(size=(2, 4)))
        return weighted(lambda: T.reshape(T.repeat_rows(T.concat([x, y], 0), 2)[1:8, 1:3], (7, 2)),
                        {"x": x, "y": y})

    def arithmetic():
        a, b = T.parameter(rng.normal(size=(3, 4))), T.parameter(rng.normal(size=(3, 4)))
        return (lambda: T.mean_all(T.mul(T.sub(T.add(a, b), T.rsub(a, 0.5)), b))), {"a": a, "b": b}

    def cross_entropy():
        q = shape(3, 9)
        x = T.parameter(rng.normal(size=(4, q)))
        t = rng.integers(0, q, size=4)
        return (lambda: T.softmax_cross_entropy(x, t)), {"logits": x}

    def cfc():
        p = CfcCellParams.init(12, 6, 10, rng)
        feat, h = T.parameter(rng.normal(size=(3, 12))), T.parameter(np.tanh(rng.normal(size=(3, 6))))
        tb = rng.uniform(0, 1, size=3)
        return weighted(lambda: cfc_forward(feat, h, tb, p), {"feat": feat, "h": h, **p.named_parameters()})

    return {
        "linear": linear, "conv2d s1 p0": conv(1, 0), "conv2d s3 p1": conv(3, 1),
        "conv2d s1 p1": conv(1, 1), "batchnorm2d train": batchnorm(True),
        "batchnorm2d eval": batchnorm(False), "relu": act("relu"), "tanh": act("tanh"),
        "sigmoid": act("sigmoid"), "avgpool_global": avgpool, "concat/repeat/slice/reshape": shaping,
        "add/sub/rsub/mul/mean": arithmetic, "softmax_cross_entropy": cross_entropy, "cfc cell": cfc,
    }


def gradient_suite(seed: int = 0, models: bool = True) -> list[Check]:
    """Central differences at float64: per-op cases then every full model."""
    rng = np.random.default_rng(seed)
    out = []
    with T.precision("float64"):
        for name, build in _op_cases(rng).items():
            fn, params = build()
            errs = T.check_gradients(fn, params, max_entries=40, rng=rng)
            worst = max(errs.values())
            out.append(Check(name, worst, OP_TOL, worst < OP_TOL))
        if models:
            scene = SceneConfig(n_antennas=16, n_beams=16, n_slots=2)
            eps = [generate_episode(scene, seed, i, (0.2, 0.7)) for i in range(2)]
            Y = np.stack([e.pilots for e in eps])
            labels = np.stack([e.labels for e in eps])
            for kind in MODEL_KINDS:
                m = TrackerModel(kind, 16, hidden_dim=8, channels=(4, 6, 6), backbone_dim=8,
                                 seed=seed, input_scale=10 ** (-scene.noise_dbm / 20))
                for p in m.parameters():   # zero-initialized biases get random values
                    if not p.data.any():
                        p.data = rng.normal(scale=0.3, size=p.shape)
                errs = T.check_gradients(lambda: episode_loss(m, Y, labels, (0.2, 0.7)),
                                         m.named_parameters(), max_entries=8, rng=rng)
                worst = max(errs.values())
                out.append(Check(f"full model {kind}", worst, MODEL_TOL, worst < MODEL_TOL))
    return out


def _nearest_codeword(theta: float, q: int) -> int:
    omega = math.pi * math.sin(theta)
    return int(np.argmin([abs((omega - 2 * math.pi * k / q + math.pi) % (2 * math.pi) - math.pi)
                          for k in range(q)]))


def selftest(seed: int = 0) -> list[Check]:
    """Fast invariants of the channel, the cells and the output head."""
    rng = np.random.default_rng(seed)
    checks = []

    def add(name, value, limit, ok):
        checks.append(Check(name, float(value), limit, bool(ok)))

    book = dft_codebook(16, 16)
    gram = np.max(np.abs(book.conj() @ book.T - np.eye(16)))
    add("codebook orthogonality", gram, 1e-6, gram < 1e-6)

    los = SceneConfig(n_antennas=16, n_beams=16, n_paths=1)
    miss = 0
    for _ in range(200):
        ue = spawn_ue(los, rng)
        miss += optimal_beam(generate_channel(ue, los), book, los.snr_linear)[0] != _nearest_codeword(ue.azimuth, 16)
    add("single-path search = nearest codeword", miss, 0, miss == 0)

    scene = SceneConfig(n_antennas=16, n_beams=16)
    miss = 0
    for _ in range(200):
        h = generate_channel(spawn_ue(scene, rng), scene, rng)
        y = pilot_sweep(h, book, scene.tx_power_dbm, -400.0, rng)
        miss += int(np.argmax(np.abs(y))) != optimal_beam(h, book, scene.snr_linear)[0]
    add("noiseless pilot argmax = search", miss, 0, miss == 0)

    norm_err = max(abs(np.linalg.norm(array_response(t, 16)) - 1) for t in rng.uniform(-3, 3, 50))
    add("array response unit norm", norm_err, 1e-12, norm_err < 1e-12)

    with T.precision("float64"):
        p = CfcCellParams.init(12, 6, 10, rng)
        feat, h = T.Tensor(rng.normal(size=(4, 12))), T.Tensor(np.tanh(rng.normal(size=(4, 6))))
        _, parts = cfc_forward(feat, h, 0.0, p, return_parts=True)
        gate_dev = np.max(np.abs(parts["gate"].data - 0.5))
        add("cfc gate at t=0", gate_dev, 0.0, gate_dev == 0.0)
        p.head_f.W.data[:] = 0
        p.head_f.b.data[:] = 20.0
        out, parts = cfc_forward(feat, h, 1.0, p, return_parts=True)
        sat = np.max(np.abs(out.data - parts["h"].data))
        add("cfc saturation -> h branch", sat, 1e-8, sat < 1e-8)
        bound = np.max(np.abs(out.data))
        add("cfc output bound", bound, 1.0, bound < 1.0)

    ltc = LtcReferenceParams.init(8, 3, rng)
    f = rng.uniform(0.2, 1.0, size=8)
    x = np.zeros(8)
    for _ in range(500):
        x = ltc_reference_step(x, np.zeros(3), 0.1, ltc, f=f)
    fp = np.max(np.abs(x - ltc.a * f / (ltc.omega_tau + f)))
    add("ltc fixed point", fp, 1e-6, fp < 1e-6)

    rates = beam_rates(generate_channel(spawn_ue(scene, rng), scene, rng), book, scene.snr_linear)
    add("minimum beam rate >= 0", rates.min(), 0.0, rates.min() >= 0)

    logits = rng.normal(scale=5, size=(6, 16))
    probs = T.softmax(logits)
    dev = np.max(np.abs(probs.sum(axis=1) - 1))
    add("softmax rows sum to 1", dev, 1e-12, dev < 1e-12)
    return checks
