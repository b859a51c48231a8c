"""Audio synthesis, mixing, loudness, STFT/mel analysis and Griffin-Lim.

Waveforms are 1-D float arrays at :data:`SAMPLE_RATE`; spectrograms are
``[frames, bins]`` arrays (complex for the STFT, log10 magnitude for mels).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

from . import rng

SAMPLE_RATE = 16000
N_FFT = 1024
HOP = 160
N_MELS = 64
MEL_FLOOR = 1e-5
LOG_MEL_FLOOR = -5.0

CLASSES = ("sine", "chirp_up", "chirp_down", "am_tone", "noise_low", "noise_high")


class AudioError(ValueError):
    pass


# ----------------------------------------------------------------------------
# synthesis

@dataclass(frozen=True)
class SourceSpec:
    """One synthetic source.

    ``f0``/``f1`` are the start/end frequency of a chirp, the band edges of a
    noise source, or (with ``f1`` unused) the frequency of a sine or AM
    carrier. ``mod_hz`` is the AM rate.
    """

    class_id: str
    f0: float
    f1: float | None = None
    duration: float = 1.0
    seed: int = 0
    mod_hz: float | None = None
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.class_id not in CLASSES:
            raise AudioError(f"unknown source class {self.class_id!r}; expected one of {CLASSES}")
        nyq = self.sample_rate / 2
        for f in (self.f0, self.f1):
            if f is not None and not 0 <= f < nyq:
                raise AudioError(f"frequency {f} Hz outside [0, {nyq})")
        if self.class_id in ("chirp_up", "chirp_down", "noise_low", "noise_high") and self.f1 is None:
            raise AudioError(f"{self.class_id} needs both f0 and f1")
        if self.class_id == "chirp_up" and not self.f1 > self.f0:
            raise AudioError("chirp_up needs f1 > f0")
        if self.class_id == "chirp_down" and not self.f1 < self.f0:
            raise AudioError("chirp_down needs f1 < f0")
        if self.class_id.startswith("noise") and not self.f1 > self.f0:
            raise AudioError("noise band needs f1 > f0")


PEAK = 0.5


def synth_source(spec: SourceSpec) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    t = np.arange(n) / sr
    c = spec.class_id
    if c == "sine":
        x = np.sin(2 * np.pi * spec.f0 * t)
    elif c in ("chirp_up", "chirp_down"):
        k = (spec.f1 - spec.f0) / spec.duration
        x = np.sin(2 * np.pi * (spec.f0 * t + 0.5 * k * t * t))
    elif c == "am_tone":
        m = spec.mod_hz if spec.mod_hz is not None else 6.0
        x = (1.0 + 0.8 * np.sin(2 * np.pi * m * t)) * np.sin(2 * np.pi * spec.f0 * t)
    else:
        white = rng.normal(rng.derive_seed(spec.seed, "noise"), n)
        spec_ = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        spec_[(freqs < spec.f0) | (freqs > spec.f1)] = 0.0
        x = np.fft.irfft(spec_, n)
    peak = np.max(np.abs(x))
    if peak == 0:
        raise AudioError("synthesised source is silent")
    return x * (PEAK / peak)


# parameter ranges per class, drawn by random_source_spec
_RANGES = {
    "sine": dict(f0=(300.0, 1500.0)),
    "am_tone": dict(f0=(300.0, 1500.0), mod_hz=(4.0, 10.0)),
    "chirp_up": dict(f0=(200.0, 600.0), f1=(1500.0, 3000.0)),
    "chirp_down": dict(f0=(1500.0, 3000.0), f1=(200.0, 600.0)),
    "noise_low": dict(f0=(80.0, 150.0), f1=(600.0, 900.0)),
    "noise_high": dict(f0=(2500.0, 3500.0), f1=(5500.0, 7000.0)),
}


def random_source_spec(class_id: str, seed: int, duration: float = 1.0) -> SourceSpec:
    if class_id not in _RANGES:
        raise AudioError(f"unknown source class {class_id!r}")
    s = rng.Stream(seed, "source", class_id)
    kw = {k: float(s.uniform((), lo, hi)) for k, (lo, hi) in _RANGES[class_id].items()}
    return SourceSpec(class_id=class_id, duration=duration, seed=seed, **kw)


# ----------------------------------------------------------------------------
# mixing and loudness

def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


class Mix(NamedTuple):
    mixture: np.ndarray
    target: np.ndarray
    noise: np.ndarray
    noise_gain: float
    gain: float


def mix_at_snr(target: np.ndarray, noise: np.ndarray, snr_db: float, peak_limit: float = 1.0) -> Mix:
    """Scale ``noise`` so the target-to-noise power ratio is ``snr_db``, then sum.

    If the mixture peak exceeds ``peak_limit`` both components are scaled by
    the same factor, recorded in ``gain``; the SNR is unaffected.
    """
    if len(target) != len(noise):
        raise AudioError(f"length mismatch: target {len(target)} vs noise {len(noise)}")
    pn = power(noise)
    if pn == 0:
        raise AudioError("noise is silent; SNR undefined")
    pt = power(target)
    noise_gain = float(np.sqrt(pt / (pn * 10.0 ** (snr_db / 10.0))))
    scaled = noise * noise_gain
    mixture = target + scaled
    gain = 1.0
    peak = float(np.max(np.abs(mixture)))
    if peak > peak_limit:
        gain = peak_limit / peak
        target = target * gain
        scaled = scaled * gain
        mixture = target + scaled
    return Mix(mixture, target, scaled, noise_gain, gain)


def snr_db(target: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * np.log10(power(target) / power(noise))


def _biquad_high_shelf(fc, gain_db, q, fs):
    a = 10.0 ** (gain_db / 40.0)
    w0 = 2 * np.pi * fc / fs
    alpha = np.sin(w0) / (2 * q)
    cw = np.cos(w0)
    sa = 2 * np.sqrt(a) * alpha
    b = [a * ((a + 1) + (a - 1) * cw + sa), -2 * a * ((a - 1) + (a + 1) * cw), a * ((a + 1) + (a - 1) * cw - sa)]
    den = [(a + 1) - (a - 1) * cw + sa, 2 * ((a - 1) - (a + 1) * cw), (a + 1) - (a - 1) * cw - sa]
    return np.array(b) / den[0], np.array(den) / den[0]


def _biquad_high_pass(fc, q, fs):
    w0 = 2 * np.pi * fc / fs
    alpha = np.sin(w0) / (2 * q)
    cw = np.cos(w0)
    b = [(1 + cw) / 2, -(1 + cw), (1 + cw) / 2]
    den = [1 + alpha, -2 * cw, 1 - alpha]
    return np.array(b) / den[0], np.array(den) / den[0]


def k_weighting(fs: int = SAMPLE_RATE):
    """The two K-weighting biquads (shelf, high-pass) as ``[(b, a), (b, a)]``."""
    return [_biquad_high_shelf(1500.0, 4.0, 1 / np.sqrt(2), fs), _biquad_high_pass(38.0, 0.5, fs)]


def measure_loudness(x: np.ndarray, fs: int = SAMPLE_RATE) -> float:
    """Integrated loudness in LUFS with only the -70 LUFS absolute gate."""
    x = np.asarray(x, dtype=np.float64)
    block = int(round(0.4 * fs))
    step = block // 4
    if len(x) < block:
        raise AudioError("loudness needs at least 0.4 s of audio")
    y = x
    for b, a in k_weighting(fs):
        y = lfilter(b, a, y)
    n_blocks = 1 + (len(y) - block) // step
    sq = np.square(y)
    csum = np.concatenate([[0.0], np.cumsum(sq)])
    starts = np.arange(n_blocks) * step
    z = (csum[starts + block] - csum[starts]) / block
    with np.errstate(divide="ignore"):
        block_lufs = -0.691 + 10 * np.log10(z)
    kept = z[block_lufs > -70.0]
    if kept.size == 0:
        raise AudioError("signal is silent; loudness undefined")
    return float(-0.691 + 10 * np.log10(kept.mean()))


def normalize_to_lufs(x: np.ndarray, target_lufs: float, fs: int = SAMPLE_RATE) -> tuple[np.ndarray, float]:
    """Return ``(scaled, gain)`` with the scaled signal at ``target_lufs``."""
    gain = 10.0 ** ((target_lufs - measure_loudness(x, fs)) / 20.0)
    return x * gain, gain


# ----------------------------------------------------------------------------
# STFT

def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _check_fft(n_fft: int, hop: int):
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise AudioError(f"n_fft must be a power of two, got {n_fft}")
    if not 1 <= hop <= n_fft:
        raise AudioError(f"hop must be in [1, n_fft], got {hop}")


def _frames(y: np.ndarray, n_fft: int, hop: int, n_frames: int) -> np.ndarray:
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return y[idx]


def stft(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centre-padded (reflect) STFT with a periodic Hann window, shape [frames, n_fft//2+1]."""
    _check_fft(n_fft, hop)
    x = np.asarray(x, dtype=np.float64)
    if len(x) < hop:
        raise AudioError(f"waveform of {len(x)} samples is shorter than one hop ({hop})")
    y = np.pad(x, n_fft // 2, mode="reflect")
    n_frames = 1 + len(x) // hop
    return np.fft.rfft(_frames(y, n_fft, hop, n_frames) * hann(n_fft), axis=1)


def _stft_raw(y: np.ndarray, n_fft: int, hop: int, n_frames: int) -> np.ndarray:
    return np.fft.rfft(_frames(y, n_fft, hop, n_frames) * hann(n_fft), axis=1)


def _istft_raw(spec: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Least-squares inverse of :func:`_stft_raw` over the un-padded frame domain."""
    n_frames = spec.shape[0]
    w = hann(n_fft)
    frames = np.fft.irfft(spec, n_fft, axis=1) * w
    length = (n_frames - 1) * hop + n_fft
    y = np.zeros(length)
    wsum = np.zeros(length)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    np.add.at(y, idx, frames)
    np.add.at(wsum, idx, np.broadcast_to(w * w, frames.shape))
    nz = wsum > 1e-10
    y[nz] /= wsum[nz]
    y[~nz] = 0.0
    return y


def istft(spec: np.ndarray, n_fft: int = N_FFT, hop: int = HOP, length: int | None = None) -> np.ndarray:
    y = _istft_raw(spec, n_fft, hop)
    n = (spec.shape[0] - 1) * hop if length is None else length
    out = y[n_fft // 2 : n_fft // 2 + n]
    return np.pad(out, (0, n - len(out)))


# ----------------------------------------------------------------------------
# mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int = N_FFT, n_mels: int = N_MELS, sr: int = SAMPLE_RATE, fmin: float = 0.0, fmax: float = 8000.0):
    """Triangular HTK-mel filters with unit peak, shape [n_mels, n_fft//2+1]."""
    if n_mels < 2:
        raise AudioError("n_mels must be at least 2")
    if fmax > sr / 2:
        raise AudioError(f"fmax {fmax} exceeds Nyquist {sr / 2}")
    if not 0 <= fmin < fmax:
        raise AudioError("need 0 <= fmin < fmax")
    bins = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_spectrogram(spec: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """log10 mel magnitude [frames, n_mels], floored at 1e-5."""
    return np.log10(np.maximum(np.abs(spec) @ fb.T, MEL_FLOOR))


def wav_to_mel(x: np.ndarray, fb: np.ndarray | None = None, n_fft: int = N_FFT, hop: int = HOP, frames: int | None = None) -> np.ndarray:
    if fb is None:
        fb = mel_filterbank(n_fft)
    mel = mel_spectrogram(stft(x, n_fft, hop), fb)
    if frames is not None:
        if mel.shape[0] < frames:
            mel = np.pad(mel, ((0, frames - mel.shape[0]), (0, 0)), constant_values=LOG_MEL_FLOOR)
        mel = mel[:frames]
    return mel


def invert_mel(mel: np.ndarray, fb: np.ndarray, iters: int = 200) -> np.ndarray:
    """Non-negative least-squares linear magnitude [frames, bins] whose mel projection matches ``mel``.

    Starts from the clamped pseudo-inverse and refines with multiplicative
    updates, which keep every entry non-negative.
    """
    target = 10.0 ** np.asarray(mel, dtype=np.float64)
    target = np.where(mel <= LOG_MEL_FLOOR, 0.0, target)
    s = np.maximum(target @ np.linalg.pinv(fb).T, 0.0) + 1e-8 * (target @ fb).clip(min=0)
    s = np.maximum(s, 1e-12) * (fb.sum(axis=0) > 0)
    num = target @ fb
    for _ in range(iters):
        s *= num / np.maximum((s @ fb.T) @ fb, 1e-20)
    return s


def griffin_lim(
    mag: np.ndarray,
    iters: int = 32,
    n_fft: int = N_FFT,
    hop: int = HOP,
    length: int | None = None,
    seed: int = 0,
    history: bool = False,
):
    """Phase retrieval for a [frames, bins] magnitude.

    Iterates over the un-padded frame domain, where the inverse STFT is an
    exact least-squares projection; that is what makes the spectral
    convergence non-increasing. With ``history=True`` also returns the
    per-iteration spectral convergence.
    """
    if iters < 1:
        raise AudioError("griffin_lim needs at least one iteration")
    mag = np.asarray(mag, dtype=np.float64)
    n_frames = mag.shape[0]
    out_len = (n_frames - 1) * hop if length is None else length
    norm = np.linalg.norm(mag)
    if norm == 0:
        out = np.zeros(out_len)
        return (out, [0.0] * iters) if history else out
    phase = np.exp(2j * np.pi * rng.uniform(rng.derive_seed(seed, "griffin_lim"), mag.size).reshape(mag.shape))
    conv = []
    y = _istft_raw(mag * phase, n_fft, hop)
    for _ in range(iters):
        spec = _stft_raw(y, n_fft, hop, n_frames)
        conv.append(float(np.linalg.norm(mag - np.abs(spec)) / norm))
        y = _istft_raw(mag * np.exp(1j * np.angle(spec)), n_fft, hop)
    out = y[n_fft // 2 : n_fft // 2 + out_len]
    out = np.pad(out, (0, out_len - len(out)))
    return (out, conv) if history else out


def spectral_convergence(mag: np.ndarray, x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> float:
    est = np.abs(stft(x, n_fft, hop))[: mag.shape[0]]
    return float(np.linalg.norm(mag - est) / np.linalg.norm(mag))


# ----------------------------------------------------------------------------
# WAV

def wav_write(path, x: np.ndarray, sr: int = SAMPLE_RATE) -> None:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise AudioError("cannot write non-finite samples")
    if np.max(np.abs(x), initial=0.0) > 1.0:
        raise AudioError("samples exceed [-1, 1]; rescale before writing")
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sr)
        f.writeframes(pcm.tobytes())


def wav_read(path) -> tuple[np.ndarray, int]:
    try:
        f = wave.open(str(path), "rb")
    except wave.Error as e:
        raise AudioError(f"{path}: unsupported WAV ({e})") from e
    with f:
        if f.getnchannels() != 1:
            raise AudioError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise AudioError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        sr = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, sr
