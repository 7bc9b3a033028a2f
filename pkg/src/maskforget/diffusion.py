"""Linear-beta DDPM schedule, forward noising, the denoising loss and ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DenoiserParams, denoise_batch, vjp_batch


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer) or np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return t


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def noisify(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; works row-wise when ``t`` is a vector."""
    t = sched.check_t(t)
    abar = sched.alpha_bar[t - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    if np.ndim(t) == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * np.asarray(eps, dtype=np.float64)


@dataclass(frozen=True)
class NoisedBatch:
    x0: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    x_t: np.ndarray


def draw_noised(x0, sched: NoiseSchedule, rng: np.random.Generator) -> NoisedBatch:
    """Uniform ``t`` per row and standard normal noise, then forward noising."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("batch must be a non-empty (n, d) array")
    t = rng.integers(1, sched.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return NoisedBatch(x0, t, eps, noisify(x0, t, eps, sched))


def diffusion_loss_and_grad(params: DenoiserParams, x0, cond, sched: NoiseSchedule,
                            rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Mean squared error between drawn noise and predicted noise, with its gradient.

    The mean runs over batch rows and data coordinates.
    """
    nb = draw_noised(x0, sched, rng)
    cond = np.broadcast_to(np.asarray(cond), (nb.x0.shape[0],))
    pred = denoise_batch(params, nb.x_t, nb.t, cond, sched.T)
    resid = pred - nb.eps
    loss = float(np.mean(resid ** 2))
    grad = vjp_batch(params, nb.x_t, nb.t, cond, 2.0 * resid / resid.size, sched.T)
    return loss, grad


def sample(params: DenoiserParams, cond, sched: NoiseSchedule, rng: np.random.Generator, n: int) -> np.ndarray:
    """Ancestral DDPM sampling from x_T ~ N(0, I); ``cond`` is a token or an ``(n,)`` array of tokens."""
    if n < 1:
        raise ValueError("n must be >= 1")
    d = params.arch.data_dim
    cond = np.broadcast_to(np.asarray(cond), (n,))
    x = rng.standard_normal((n, d))
    for t in range(sched.T, 0, -1):
        eps_hat = denoise_batch(params, x, t, cond, sched.T)
        beta, alpha, abar = sched.beta[t - 1], sched.alpha[t - 1], sched.alpha_bar[t - 1]
        x = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
        if t > 1:
            x = x + np.sqrt(beta) * rng.standard_normal((n, d))
    return x
