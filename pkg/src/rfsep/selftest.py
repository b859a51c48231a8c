"""Seconds-long consistency checks behind ``rfsep selftest``."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import checkpoint, dsp, rng
from . import tensor as T
from .flow import euler_sample, interpolate, target_vector
from .metrics import EmbedStats, frechet_distance


def _interp() -> str:
    s = rng.Stream(0, "selftest")
    worst = 0.0
    for _ in range(200):
        z0, z1 = s.normal(6), s.normal(6)
        sigma, t = s.uniform((), 0, 0.5), s.uniform((), 0, 0.5)
        d = s.uniform((), 0.01, 0.5)
        slope = (interpolate(z0, z1, t + d, sigma) - interpolate(z0, z1, t, sigma)) / d
        worst = max(worst, float(np.max(np.abs(slope - target_vector(z0, z1, sigma)))))
    assert worst <= 1e-6, worst
    return f"max slope error {worst:.2e}"


def _grad() -> str:
    x = T.randn((2, 3, 5, 5), 1, dtype=np.float64)
    w = T.randn((4, 3, 3, 3), 2, dtype=np.float64)

    def f(a):
        return T.sum_(T.silu(T.conv2d(a, w, padding=1)) * T.randn((2, 4, 5, 5), 3, dtype=np.float64))

    ga, gn = T.analytic_grad(f, x.data), T.finite_diff_grad(f, x, 1e-5)
    err = float(np.max(np.abs(ga - gn)) / np.max(np.abs(gn)))
    assert err <= 1e-4, err
    return f"conv+silu rel err {err:.1e}"


def _frechet() -> str:
    one = lambda m, v: EmbedStats(np.array([m]), np.array([[v]]), 2)
    vals = [frechet_distance(one(0, 1), one(1, 1)), frechet_distance(one(0, 1), one(0, 4))]
    assert all(abs(v - 1.0) <= 1e-8 for v in vals), vals
    return "1-D closed forms within 1e-8"


def _euler() -> str:
    v = T.randn((1, 4, 5, 4), 7).data
    field = lambda z_in, t, q: T.Tensor(np.broadcast_to(v, (z_in.shape[0],) + v.shape[1:]).copy())
    zm = np.zeros_like(v)
    z0 = T.randn(v.shape, 8).data
    for n in (1, 7, 100):
        out = euler_sample(field, zm, None, n, 0, z0=z0)
        np.testing.assert_allclose(out, z0 + v, atol=1e-5)
    return "constant field exact for N in {1, 7, 100}"


def _dsp() -> str:
    tgt = dsp.synth_source(dsp.random_source_spec("sine", 1))
    nse = dsp.synth_source(dsp.random_source_spec("noise_low", 2))
    err = max(abs(dsp.snr_db(m.target, m.noise) - s) for s in (-15, 0, 15) for m in [dsp.mix_at_snr(tgt, nse, s)])
    assert err <= 1e-6
    with tempfile.TemporaryDirectory() as d:
        dsp.wav_write(Path(d) / "a.wav", tgt)
        back, _ = dsp.wav_read(Path(d) / "a.wav")
    assert np.max(np.abs(back - tgt)) <= 1.0 / 32767
    return f"SNR error {err:.1e} dB, WAV within 1 LSB"


def _ckpt() -> str:
    blob = checkpoint.dumps({"a": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"step": 1})
    again = checkpoint.dumps(*checkpoint.loads(blob))
    assert blob == again
    return f"{len(blob)}-byte round trip bitwise stable"


CHECKS = [("equations", _interp), ("gradients", _grad), ("frechet", _frechet), ("euler", _euler),
          ("dsp", _dsp), ("checkpoint", _ckpt)]


def run() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            results.append((name, True, fn()))
        except AssertionError as exc:
            results.append((name, False, f"assertion failed: {exc}"))
    return results
