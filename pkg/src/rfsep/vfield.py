"""Conditional UNet-lite predicting a velocity (or noise) latent."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .condition import QUERY_DIM, time_embedding
from .nn import Conv2d, GroupNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class VFieldConfig:
    in_channels: int = 8
    out_channels: int = 4
    widths: tuple[int, int, int] = (32, 64, 128)
    time_dim: int = 64
    query_dim: int = QUERY_DIM
    mlp_hidden: int = 128

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VFieldConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class FiLMBlock(Module):
    """conv -> group-norm -> (1 + scale) * h + shift -> SiLU."""

    def __init__(self, c_in, c_out, stride, seed, name):
        self.conv = Conv2d(c_in, c_out, 3, stride, seed=seed, name=name + ".conv")
        self.norm = GroupNorm(c_out)
        self.channels = c_out

    def __call__(self, x: Tensor, film: Tensor) -> Tensor:
        c = self.channels
        b = film.shape[0]
        scale = T.reshape(T.slice_axis(film, 1, 0, c), (b, c, 1, 1))
        shift = T.reshape(T.slice_axis(film, 1, c, 2 * c), (b, c, 1, 1))
        h = self.norm(self.conv(x))
        return T.silu(h + h * scale + shift)


class VFieldNet(Module):
    """Two-level UNet with skip connections and per-block FiLM from [time ⊕ query]."""

    def __init__(self, config: VFieldConfig = VFieldConfig(), seed: int = 0):
        self.config = config
        c = config
        w0, w1, w2 = c.widths
        self.stem = Conv2d(c.in_channels, w0, 3, seed=seed, name="stem")
        self.block0 = FiLMBlock(w0, w0, 1, seed, "block0")
        self.down1 = FiLMBlock(w0, w1, 2, seed, "down1")
        self.down2 = FiLMBlock(w1, w2, 2, seed, "down2")
        self.mid = FiLMBlock(w2, w2, 1, seed, "mid")
        self.up2 = FiLMBlock(w2 + w1, w1, 1, seed, "up2")
        self.up1 = FiLMBlock(w1 + w0, w0, 1, seed, "up1")
        film_out = 2 * sum(b.channels for b in self.blocks)
        self.mlp1 = Linear(c.time_dim + c.query_dim, c.mlp_hidden, seed=seed, name="mlp1")
        self.mlp2 = Linear(c.mlp_hidden, film_out, seed=seed, name="mlp2", zero=True)
        self.head = Conv2d(w0, c.out_channels, 3, seed=seed, name="head", zero=True)

    @property
    def blocks(self) -> list[FiLMBlock]:
        return [self.block0, self.down1, self.down2, self.mid, self.up2, self.up1]

    def __call__(self, z_in: Tensor, t, query: Tensor) -> Tensor:
        c = self.config
        if z_in.ndim != 4 or z_in.shape[1] != c.in_channels:
            raise ValueError(f"vector-field input must be [B, {c.in_channels}, H, W], got {z_in.shape}")
        b = z_in.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        if query.ndim == 1:
            query = T.reshape(query, (1, -1)) if b == 1 else T.add(T.zeros((b, query.shape[0]), dtype=query.dtype), query)
        if query.shape != (b, c.query_dim):
            raise ValueError(f"query embedding must be [B, {c.query_dim}], got {query.shape}")
        cond = T.concat([Tensor(time_embedding(t, c.time_dim, z_in.dtype)), query], axis=1)
        film = self.mlp2(T.silu(self.mlp1(cond)))
        films = []
        off = 0
        for blk in self.blocks:
            films.append(T.slice_axis(film, 1, off, off + 2 * blk.channels))
            off += 2 * blk.channels

        h, w = z_in.shape[2], z_in.shape[3]
        s0 = self.block0(self.stem(z_in), films[0])
        s1 = self.down1(s0, films[1])
        x = self.down2(s1, films[2])
        x = self.mid(x, films[3])
        x = T.crop2d(T.upsample2x(x), s1.shape[2], s1.shape[3])
        x = self.up2(T.concat_channels(x, s1), films[4])
        x = T.crop2d(T.upsample2x(x), h, w)
        x = self.up1(T.concat_channels(x, s0), films[5])
        return self.head(x)
