"""Rectified flow matching and the DDPM/DDIM baseline.

A *vector field* here is any callable ``net(z_in, t, query) -> Tensor`` where
``z_in`` is the channel concatenation [state, mixture latent] of shape
[B, 2C, H, W], ``t`` a length-B array and ``query`` a [B, D] embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng
from . import tensor as T
from .condition import channel_concat
from .tensor import Tensor

VectorField = Callable[[Tensor, np.ndarray, Tensor], Tensor]

SIGMA_MIN = 1e-5


@dataclass(frozen=True)
class FlowConfig:
    sigma_min: float = SIGMA_MIN
    num_steps: int = 10
    seed: int = 0
    method: str = "euler"

    def __post_init__(self):
        if not 0 <= self.sigma_min < 1:
            raise ValueError("sigma_min must lie in [0, 1)")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.method not in ("euler", "midpoint"):
            raise ValueError(f"unknown ODE method {self.method!r}")


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def interpolate(z0, z1, t: float, sigma: float = SIGMA_MIN) -> np.ndarray:
    """Noisy state ``(1 - (1 - sigma) t) z0 + t z1``."""
    z0, z1 = _arr(z0), _arr(z1)
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {z1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    t = t.reshape(t.shape + (1,) * (z0.ndim - t.ndim)) if t.ndim else t
    return ((1.0 - (1.0 - sigma) * t) * z0 + t * z1).astype(z0.dtype)


def target_vector(z0, z1, sigma: float = SIGMA_MIN) -> np.ndarray:
    """Path velocity ``z1 - (1 - sigma) z0``; constant in t."""
    z0, z1 = _arr(z0), _arr(z1)
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {z1.shape}")
    return (z1 - (1.0 - sigma) * z0).astype(z0.dtype)


def item_noise(shape: Sequence[int], seeds: Sequence[int], dtype=np.float32) -> np.ndarray:
    """One independent normal draw per batch item, so an item's noise does not depend on its batch."""
    return np.stack([T.randn(shape, int(s), dtype=dtype).data for s in seeds])


def _item_seeds(seed, batch: int) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [rng.derive_seed(int(seed), "item", i) for i in range(batch)]
    seeds = [int(s) for s in seed]
    if len(seeds) != batch:
        raise ValueError(f"{len(seeds)} seeds for a batch of {batch}")
    return seeds


def rfm_loss(net: VectorField, z1: np.ndarray, query: Tensor, zm: np.ndarray, sigma: float, seed: int, t=None, z0=None):
    """Regression loss of ``net`` onto the path velocity at random ``(t, z0)``.

    ``t`` and ``z0`` may be pinned instead of drawn. Returns ``(loss, z_in, v)``;
    call inside a :class:`~rfsep.tensor.Tape` to train.
    """
    z1, zm = _arr(z1), _arr(zm)
    if z1.shape != zm.shape:
        raise ValueError(f"target latent {z1.shape} and mixture latent {zm.shape} differ")
    b = z1.shape[0]
    s = rng.Stream(seed, "rfm")
    if t is None:
        t = s.uniform(b)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    noise = s.normal(z1.shape).astype(z1.dtype)
    z0 = noise if z0 is None else _arr(z0)
    zt = interpolate(z0, z1, t, sigma)
    v = target_vector(z0, z1, sigma)
    z_in = channel_concat(Tensor(zt), Tensor(zm))
    pred = net(z_in, t, query)
    if pred.shape != v.shape:
        raise ValueError(f"vector field returned {pred.shape}, expected {v.shape}")
    return T.mse(pred, Tensor(v)), z_in, v


def rfm_training_step(net: VectorField, params, z1, query_fn, zm, config: FlowConfig, seed: int) -> float:
    """One forward/backward pass; gradients land on ``params``. ``query_fn()`` builds E inside the tape."""
    with T.Tape() as tape:
        loss, _, _ = rfm_loss(net, z1, query_fn(), zm, config.sigma_min, seed)
    tape.backward(loss, wrt=params)
    return float(loss.data)


def euler_sample(net: VectorField, zm, query: Tensor, num_steps: int, seed, method: str = "euler", z0=None) -> np.ndarray:
    """Integrate the learned field from Gaussian noise at t=0 to t=1.

    ``seed`` is an int (one derived stream per batch position) or one seed per item.
    Euler uses left endpoints ``t_i = i / N``. The state is accumulated in
    float64 so long trajectories do not drift by rounding.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    zm = _arr(zm)
    b = zm.shape[0]
    z = item_noise(zm.shape[1:], _item_seeds(seed, b), zm.dtype) if z0 is None else _arr(z0)
    z = z.astype(np.float64)
    zm_t = Tensor(zm)
    dt = 1.0 / num_steps

    def field(state, t):
        return net(channel_concat(Tensor(state.astype(zm.dtype)), zm_t), np.full(b, t), query).data.astype(np.float64)

    for i in range(num_steps):
        t = i / num_steps
        if method == "euler":
            z = z + dt * field(z, t)
        elif method == "midpoint":
            half = z + 0.5 * dt * field(z, t)
            z = z + dt * field(half, t + 0.5 * dt)
        else:
            raise ValueError(f"unknown ODE method {method!r}")
    return z.astype(zm.dtype)


# ----------------------------------------------------------------------------
# diffusion baseline

@dataclass(frozen=True)
class DiffusionConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.steps, dtype=np.float64)

    @property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[t]`` for t = 0..T with ``alpha_bar[0] = 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])


def ddpm_forward(x0, t: int, eps, schedule: DiffusionConfig) -> np.ndarray:
    """Sample of q(x_t | x_0) for the given noise."""
    x0, eps = _arr(x0), _arr(eps)
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.steps):
        raise ValueError(f"diffusion step must lie in [1, {schedule.steps}]")
    ab = schedule.alpha_bar[t]
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim)) if ab.ndim else ab
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def ddpm_loss(net: VectorField, x0, query: Tensor, zm, schedule: DiffusionConfig, seed: int, t=None):
    """Noise-prediction loss; returns ``(loss, z_in, eps)``. The net sees time as ``t / T``."""
    x0, zm = _arr(x0), _arr(zm)
    b = x0.shape[0]
    s = rng.Stream(seed, "ddpm")
    if t is None:
        t = 1 + s.integers(schedule.steps, b)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
    eps = s.normal(x0.shape).astype(x0.dtype)
    xt = ddpm_forward(x0, t, eps, schedule)
    z_in = channel_concat(Tensor(xt), Tensor(zm))
    pred = net(z_in, t / schedule.steps, query)
    return T.mse(pred, Tensor(eps)), z_in, eps


def ddpm_training_step(net: VectorField, params, x0, query_fn, zm, schedule: DiffusionConfig, seed: int) -> float:
    with T.Tape() as tape:
        loss, _, _ = ddpm_loss(net, x0, query_fn(), zm, schedule, seed)
    tape.backward(loss, wrt=params)
    return float(loss.data)


def ddim_timesteps(num_steps: int, total: int) -> np.ndarray:
    """Uniform increasing subsequence of {1..total} with ``num_steps`` entries, ending at ``total``."""
    if num_steps < 1 or num_steps > total:
        raise ValueError(f"DDIM needs 1 <= steps <= {total}, got {num_steps}")
    ts = np.round(np.arange(1, num_steps + 1) * total / num_steps).astype(np.int64)
    return ts


def ddim_sample(net: VectorField, zm, query: Tensor, num_steps: int, seed, schedule: DiffusionConfig = DiffusionConfig(),
                xT=None, clip_x0: float | None = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM from x_T ~ N(0, I) down to x_0.

    ``clip_x0`` clamps each predicted x_0 to ``[-clip_x0, clip_x0]`` and
    re-derives the noise from it. Near t = T the x_0 estimate divides the
    noise error by sqrt(alpha_bar_T) ~ 6e-3, so an unclamped sampler can leave
    the data range entirely.
    """
    zm = _arr(zm)
    b = zm.shape[0]
    ts = ddim_timesteps(num_steps, schedule.steps)
    ab = schedule.alpha_bar
    x = item_noise(zm.shape[1:], _item_seeds(seed, b), np.float64) if xT is None else np.array(_arr(xT), dtype=np.float64)
    zm_t = Tensor(zm)
    for i in range(len(ts) - 1, -1, -1):
        t = ts[i]
        t_prev = ts[i - 1] if i > 0 else 0
        eps = net(channel_concat(Tensor(x.astype(zm.dtype)), zm_t), np.full(b, t / schedule.steps), query).data.astype(np.float64)
        x0_pred = (x - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
        if clip_x0 is not None:
            x0_pred = np.clip(x0_pred, -clip_x0, clip_x0)
            eps = (x - np.sqrt(ab[t]) * x0_pred) / np.sqrt(1.0 - ab[t])
        x = np.sqrt(ab[t_prev]) * x0_pred + np.sqrt(1.0 - ab[t_prev]) * eps
    return x.astype(zm.dtype)
