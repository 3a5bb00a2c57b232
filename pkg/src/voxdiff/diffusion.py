"""Noise schedule, forward process, reverse steps, and the denoising loss.

Timesteps are 1-indexed: t runs over {1..T}, with table entry beta[t-1].
The accumulated product is extended by alpha_bar(0) = 1 so samplers can land
exactly on clean data. The reverse transition uses beta_t as its variance,
taken literally from the transition definition (not the posterior-corrected
beta-tilde variant).

These functions are latent-shape agnostic: they act on plain arrays, and the
denoiser/score callable decides what a latent looks like. ``training_loss``
works with both autograd tensors (training) and bare arrays (oracle tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from voxdiff.nn import autograd as ag


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        b = self.beta
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("beta table must be a non-empty 1D array")
        if not (0.0 < b[0] and b[-1] < 1.0):
            raise ValueError("beta values must lie strictly inside (0, 1)")
        if (np.diff(b) < 0).any():
            raise ValueError("beta table must be non-decreasing")
        if (np.diff(self.alpha_bar) >= 0).any():
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return len(self.beta)

    def beta_at(self, t):
        self._check_t(t, low=1)
        return self.beta[np.asarray(t) - 1]

    def alpha_at(self, t):
        self._check_t(t, low=1)
        return self.alpha[np.asarray(t) - 1]

    def alpha_bar_at(self, t):
        """alpha_bar with the t=0 extension (alpha_bar(0) = 1)."""
        self._check_t(t, low=0)
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def _check_t(self, t, low):
        t = np.asarray(t)
        if (t < low).any() or (t > self.T).any():
            raise ValueError(f"timestep out of range [{low}, {self.T}]: {t}")


def build_schedule(T: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unknown schedule kind: {kind!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T < 1:
        raise ValueError("T must be at least 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta, alpha, alpha_bar)


def q_sample(z0: np.ndarray, t, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal: z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps.

    ``t`` may be a scalar or a per-sample array broadcast over the batch axis.
    """
    if (np.asarray(t) < 1).any():
        raise ValueError(f"timestep out of range [1, {s.T}]: {t}")
    ab = s.alpha_bar_at(t)
    if np.ndim(ab) > 0:
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    ab = ab.astype(z0.dtype)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def ddpm_step(z_t: np.ndarray, t: int, eps_hat: np.ndarray, s: NoiseSchedule,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse transition t -> t-1 with variance beta_t; no noise at t=1."""
    beta = float(s.beta_at(t))
    ab = float(s.alpha_bar_at(t))
    alpha = float(s.alpha_at(t))
    mean = (z_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    mean = mean.astype(z_t.dtype, copy=False)
    if t == 1 or noise is None:
        return mean
    return mean + z_t.dtype.type(np.sqrt(beta)) * noise


def ddim_step(z_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray,
              s: NoiseSchedule, eta: float = 0.0,
              noise: np.ndarray | None = None) -> np.ndarray:
    """Deterministic (eta=0) or stochastic jump t -> t_prev along the chain."""
    if not (0 <= t_prev < t <= s.T):
        raise ValueError(f"need 0 <= t_prev < t <= {s.T}, got ({t}, {t_prev})")
    ab_t = float(s.alpha_bar_at(t))
    ab_prev = float(s.alpha_bar_at(t_prev))
    z0_pred = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    direction = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    out = np.sqrt(ab_prev) * z0_pred + direction
    out = out.astype(z_t.dtype, copy=False)
    if sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise array")
        out = out + z_t.dtype.type(sigma) * noise
    return out


def ddim_step_grid(T: int, num_steps: int) -> np.ndarray:
    """Evenly spaced subsequence of {0..T}, endpoints included, ascending."""
    if not (1 <= num_steps <= T):
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    grid = np.unique(np.round(np.linspace(0, T, num_steps + 1)).astype(np.int64))
    return grid


def training_loss(denoiser, z0, cond, s: NoiseSchedule, rng: np.random.Generator):
    """Noise-prediction MSE at a uniformly drawn timestep per sample.

    ``denoiser(z_t, t, cond)`` may return an autograd Tensor (training) or a
    plain array (closed-form oracles in tests). Returns (loss, t, eps) so
    callers can log the drawn step; loss matches the denoiser's return kind.
    """
    batch = z0.shape[0]
    t = rng.integers(1, s.T + 1, size=batch)
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    z_t = q_sample(z0, t, eps, s)
    eps_hat = denoiser(z_t, t, cond)
    if isinstance(eps_hat, ag.Tensor):
        if not np.isfinite(eps_hat.data).all():
            raise FloatingPointError("denoiser produced non-finite output")
        diff = eps_hat - ag.Tensor(eps)
        loss = (diff * diff).mean()
    else:
        if not np.isfinite(eps_hat).all():
            raise FloatingPointError("denoiser produced non-finite output")
        loss = float(np.mean((eps_hat - eps) ** 2))
    return loss, t, eps


def sample_loop(score_fn, s: NoiseSchedule, shape: tuple,
                num_steps: int | None = None, sampler: str = "ddim",
                eta: float = 0.0, rng: np.random.Generator | None = None,
                dtype=np.float32) -> np.ndarray:
    """Run the reverse chain from z_T ~ N(0, I) down to z_0.

    ``score_fn(z_t, t)`` returns the (guided) noise prediction; conditioning
    is baked into the closure by the caller. DDPM walks every step and
    therefore requires num_steps == T; DDIM jumps along an evenly spaced
    grid and accepts any num_steps <= T.
    """
    if rng is None:
        rng = np.random.default_rng()
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler: {sampler!r}")
    if num_steps is None:
        num_steps = s.T if sampler == "ddpm" else min(50, s.T)
    if num_steps > s.T:
        raise ValueError(f"num_steps {num_steps} exceeds schedule length {s.T}")

    z = rng.standard_normal(shape).astype(dtype)
    if sampler == "ddpm":
        if num_steps != s.T:
            raise ValueError(
                "ddpm walks the full chain; pass num_steps == T or use ddim")
        for t in range(s.T, 0, -1):
            eps_hat = score_fn(z, t)
            noise = rng.standard_normal(shape).astype(dtype) if t > 1 else None
            z = ddpm_step(z, t, eps_hat, s, noise)
        return z

    grid = ddim_step_grid(s.T, num_steps)
    for i in range(len(grid) - 1, 0, -1):
        t, t_prev = int(grid[i]), int(grid[i - 1])
        eps_hat = score_fn(z, t)
        noise = rng.standard_normal(shape).astype(dtype) if eta > 0.0 else None
        z = ddim_step(z, t, t_prev, eps_hat, s, eta=eta, noise=noise)
    return z
