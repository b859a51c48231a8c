"""Convolutional VAE between log-mel spectrograms and the flow latent space.

Geometry for the 1 s preset: mel [1, 100, 64] -> two stride-2 stages ->
stats [8, 25, 16] (mu and logvar, 4 channels each) -> decoder back to
[1, 100, 64].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .dsp import LOG_MEL_FLOOR
from .nn import Conv2d, GroupNorm, Module
from .tensor import Tensor

# fixed affine map of log10-mel values into a unit-ish range
MEL_CENTER = -2.0
MEL_SCALE = 2.0


@dataclass(frozen=True)
class VAEConfig:
    frames: int = 100
    n_mels: int = 64
    latent_channels: int = 4
    widths: tuple[int, int] = (32, 64)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.frames // 4, self.n_mels // 4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VAEConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class VAE(Module):
    def __init__(self, config: VAEConfig = VAEConfig(), seed: int = 0):
        if config.frames % 4 or config.n_mels % 4:
            raise ValueError("frames and n_mels must be divisible by 4")
        self.config = config
        w0, w1 = config.widths
        lc = config.latent_channels
        # stage 1 is a 2x2 stride-2 conv, stage 2 a 3x3 stride-2 conv
        self.enc_down1 = Conv2d(1, w0, 2, stride=2, padding=0, seed=seed, name="enc_down1")
        self.enc_down2 = Conv2d(w0, w1, 3, stride=2, seed=seed, name="enc_down2")
        self.enc_norm2 = GroupNorm(w1)
        self.enc_mid = Conv2d(w1, w1, 3, seed=seed, name="enc_mid")
        self.enc_norm3 = GroupNorm(w1)
        self.enc_out = Conv2d(w1, 2 * lc, 3, seed=seed, name="enc_out")
        self.dec_in = Conv2d(lc, w1, 3, seed=seed, name="dec_in")
        self.dec_mid = Conv2d(w1, w1, 3, seed=seed, name="dec_mid")
        self.dec_norm1 = GroupNorm(w1)
        self.dec_up1 = Conv2d(w1, w0, 3, seed=seed, name="dec_up1")
        self.dec_norm2 = GroupNorm(w0)
        # sub-pixel output stage: 4 channels shuffled into a 2x2 cell each
        self.dec_out = Conv2d(w0, 4, 3, seed=seed, name="dec_out")
        self.enc_out.weight.data *= 0.1

    def _check_mel(self, mel: Tensor) -> Tensor:
        c = self.config
        if mel.ndim == 2:
            mel = T.reshape(mel, (1, 1) + mel.shape)
        elif mel.ndim == 3:
            mel = T.reshape(mel, (mel.shape[0], 1) + mel.shape[1:])
        if mel.shape[1:] != (1, c.frames, c.n_mels):
            raise ValueError(f"mel must be [B, 1, {c.frames}, {c.n_mels}], got {mel.shape}")
        return mel

    def encode(self, mel) -> tuple[Tensor, Tensor]:
        """(mu, logvar), each [B, C, T/4, F/4]."""
        mel = self._check_mel(mel if isinstance(mel, Tensor) else Tensor(np.asarray(mel, np.float32)))
        x = (mel - MEL_CENTER) * (1.0 / MEL_SCALE)
        h = T.silu(self.enc_down1(x))
        h = T.silu(self.enc_norm2(self.enc_down2(h)))
        h = T.silu(self.enc_norm3(self.enc_mid(h)))
        stats = self.enc_out(h)
        lc = self.config.latent_channels
        return T.slice_channels(stats, 0, lc), T.slice_channels(stats, lc, 2 * lc)

    def decode_raw(self, z) -> Tensor:
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, np.float32))
        if z.ndim == 3:
            z = T.reshape(z, (1,) + z.shape)
        if z.shape[1:] != self.config.latent_shape:
            raise ValueError(f"latent must be [B, {self.config.latent_shape}], got {z.shape}")
        h = T.silu(self.dec_in(z))
        h = T.silu(self.dec_norm1(self.dec_mid(h)))
        h = T.silu(self.dec_norm2(self.dec_up1(T.upsample2x(h))))
        return T.depth_to_space(self.dec_out(h), 2) * MEL_SCALE + MEL_CENTER

    def decode(self, z: Tensor) -> Tensor:
        """Log-mel [B, 1, T, F], never below the mel floor."""
        return T.clamp_min(self.decode_raw(z), LOG_MEL_FLOOR)


def reparameterize(mu: Tensor, logvar: Tensor, seed: int) -> Tensor:
    eps = T.randn(mu.shape, seed, dtype=mu.dtype)
    return mu + T.exp(logvar * 0.5) * eps


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over latent elements of KL(N(mu, exp(logvar)) || N(0, 1))."""
    n = mu.data.size
    terms = 1.0 + logvar - mu * mu - T.exp(logvar)
    return T.sum_(terms) * (-0.5 / n)


def vae_loss(vae: VAE, mel, beta: float, seed: int) -> tuple[Tensor, float, float]:
    """``(loss, reconstruction_mse, kl)``; the KL term is left out entirely when ``beta == 0``."""
    mel = vae._check_mel(mel if isinstance(mel, Tensor) else Tensor(np.asarray(mel, np.float32)))
    mu, logvar = vae.encode(mel)
    recon = T.mse(vae.decode(reparameterize(mu, logvar, seed)), mel)
    if beta == 0:
        return recon, float(recon.data), 0.0
    kl = kl_divergence(mu, logvar)
    return recon + kl * beta, float(recon.data), float(kl.data)


@dataclass
class LatentStats:
    """Per-channel affine standardisation of latents."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, latents: np.ndarray) -> "LatentStats":
        axes = (0, 2, 3)
        mean = latents.mean(axis=axes, dtype=np.float64)
        std = latents.std(axis=axes, dtype=np.float64)
        return cls(mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32))

    def standardize(self, z: np.ndarray) -> np.ndarray:
        return ((z - self.mean[:, None, None]) / self.std[:, None, None]).astype(np.float32)

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return (z * self.std[:, None, None] + self.mean[:, None, None]).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentStats":
        return cls(np.asarray(d["mean"], np.float32), np.asarray(d["std"], np.float32))
