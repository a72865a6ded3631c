"""Noise schedules, forward noising, the training loss, and reverse samplers.

The reverse update is a^{k-1} = alpha(k) (a^k - gamma(k) eps_theta(o, a^k, k))
+ sigma(k) n with n standard normal; k runs from K (pure noise) down to 1,
and sigma at the final step is zero.  The forward process is the standard
affine one, a^k = sqrt(abar_k) a^0 + sqrt(1 - abar_k) eps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step coefficients, 1-indexed; index 0 holds the data level."""

    K: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    step_scale: np.ndarray  # alpha(k) = 1/sqrt(1 - beta_k)
    eps_scale: np.ndarray   # gamma(k) = beta_k / sqrt(1 - abar_k)
    sigmas: np.ndarray      # posterior std; sigmas[1] = 0


def make_schedule(K: int, kind: str = "cosine") -> NoiseSchedule:
    if K < 1:
        raise ValueError(f"schedule needs K >= 1, got {K}")
    if kind != "cosine":
        raise ValueError(f"unknown schedule kind {kind!r}")
    s = 0.008

    def f(k):
        return math.cos((k / K + s) / (1 + s) * math.pi / 2) ** 2

    raw = np.array([f(k) / f(0) for k in range(K + 1)])
    betas = np.zeros(K + 1)
    for k in range(1, K + 1):
        betas[k] = min(max(1.0 - raw[k] / raw[k - 1], 1e-8), 0.999)
    alphas = 1.0 - betas
    alphas[0] = 1.0
    alpha_bars = np.cumprod(alphas)
    step_scale = np.zeros(K + 1)
    eps_scale = np.zeros(K + 1)
    sigmas = np.zeros(K + 1)
    for k in range(1, K + 1):
        step_scale[k] = 1.0 / math.sqrt(alphas[k])
        eps_scale[k] = betas[k] / math.sqrt(1.0 - alpha_bars[k])
        sigmas[k] = math.sqrt(
            betas[k] * (1.0 - alpha_bars[k - 1]) / (1.0 - alpha_bars[k])
        )
    return NoiseSchedule(K, betas, alphas, alpha_bars, step_scale, eps_scale, sigmas)


@dataclass(frozen=True, eq=False)
class NoisySample:
    a_k: np.ndarray
    k: np.ndarray
    eps: np.ndarray


def add_noise(schedule: NoiseSchedule, a0: np.ndarray, k, eps: np.ndarray) -> np.ndarray:
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != a0.shape:
        raise ValueError(f"noise shape {eps.shape} does not match data shape {a0.shape}")
    abar = schedule.alpha_bars[np.asarray(k)]
    if a0.ndim == 2:
        abar = np.reshape(abar, (-1, 1)) if np.ndim(abar) else abar
    return np.sqrt(abar) * a0 + np.sqrt(1.0 - abar) * eps


def sample_noisy(schedule: NoiseSchedule, a0: np.ndarray,
                 rng: np.random.Generator) -> NoisySample:
    a0 = np.atleast_2d(a0)
    ks = rng.integers(1, schedule.K + 1, size=a0.shape[0])
    eps = rng.standard_normal(a0.shape)
    return NoisySample(add_noise(schedule, a0, ks, eps), ks, eps)


def training_loss(net, schedule: NoiseSchedule, obs: np.ndarray, act: np.ndarray,
                  rng: np.random.Generator | None = None, grid=None,
                  ks=None, eps=None) -> tuple[float, NoisySample]:
    """Mean squared error between predicted and injected noise, plus gradients.

    Samples k uniformly in [1, K] and eps standard normal per batch row
    unless both are supplied; gradients accumulate into the network.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    act = np.atleast_2d(np.asarray(act, dtype=np.float64))
    if obs.shape[0] == 0:
        raise ValueError("training batch is empty")
    if ks is None:
        ks = rng.integers(1, schedule.K + 1, size=act.shape[0])
    if eps is None:
        eps = rng.standard_normal(act.shape)
    a_k = add_noise(schedule, act, ks, eps)
    pred = net.forward(obs, a_k, ks, grid) if grid is not None else net.forward(obs, a_k, ks)
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    net.backward(2.0 * diff / diff.size)
    return loss, NoisySample(a_k, np.asarray(ks), eps)


def ddpm_step(net, schedule: NoiseSchedule, obs, a_k, k: int,
              noise_draw: np.ndarray, grid=None) -> np.ndarray:
    if not 1 <= k <= schedule.K:
        raise ValueError(f"step index {k} outside [1, {schedule.K}]")
    eps_hat = net.forward(obs, a_k, k, grid) if grid is not None else net.forward(obs, a_k, k)
    return (
        schedule.step_scale[k] * (a_k - schedule.eps_scale[k] * eps_hat)
        + schedule.sigmas[k] * noise_draw
    )


def ddim_step(net, schedule: NoiseSchedule, obs, a_k, k: int, k_next: int,
              grid=None) -> np.ndarray:
    if not 1 <= k <= schedule.K:
        raise ValueError(f"step index {k} outside [1, {schedule.K}]")
    if not 0 <= k_next < k:
        raise ValueError(f"target step {k_next} must be in [0, {k})")
    eps_hat = net.forward(obs, a_k, k, grid) if grid is not None else net.forward(obs, a_k, k)
    abar_k = schedule.alpha_bars[k]
    abar_n = schedule.alpha_bars[k_next]
    x0 = (a_k - math.sqrt(1.0 - abar_k) * eps_hat) / math.sqrt(abar_k)
    return math.sqrt(abar_n) * x0 + math.sqrt(1.0 - abar_n) * eps_hat


def ddim_ladder(K: int, steps: int) -> list[int]:
    """Evenly spaced descending step indices from K to 0, inclusive."""
    if not 1 <= steps <= K:
        raise ValueError(f"DDIM step count {steps} must be in [1, {K}]")
    ladder = np.unique(np.round(np.linspace(0, K, steps + 1)).astype(int))
    return [int(v) for v in ladder[::-1]]


def make_noise(batch: int, dim: int, schedule: NoiseSchedule, sampler: str,
               rng: np.random.Generator) -> list[np.ndarray]:
    """Materialize every Gaussian draw a sampler run will consume, in order."""
    noises = [rng.standard_normal((batch, dim))]
    if sampler == "ddpm":
        for _ in range(schedule.K):
            noises.append(rng.standard_normal((batch, dim)))
    return noises


def sample(net, schedule: NoiseSchedule, obs, sampler: str = "ddpm",
           steps: int | None = None, seed: int | None = 0,
           noises: list[np.ndarray] | None = None, grid=None) -> np.ndarray:
    """Run the reverse process; deterministic given a seed or explicit noises."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    dim = net.config.act_rep.dim
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {sampler!r}")
    if noises is None:
        rng = np.random.default_rng(seed)
        noises = make_noise(obs.shape[0], dim, schedule, sampler, rng)
    a = np.array(noises[0], dtype=np.float64)
    if sampler == "ddpm":
        if len(noises) != schedule.K + 1:
            raise ValueError(
                f"ddpm needs 1 + K = {schedule.K + 1} noise arrays, got {len(noises)}"
            )
        for i, k in enumerate(range(schedule.K, 0, -1)):
            a = ddpm_step(net, schedule, obs, a, k, noises[i + 1], grid)
        return a
    ladder = ddim_ladder(schedule.K, steps or 16)
    for k, k_next in zip(ladder[:-1], ladder[1:]):
        a = ddim_step(net, schedule, obs, a, k, k_next, grid)
    return a
