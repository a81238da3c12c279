"""Noise schedule, forward noising, epsilon loss and the ancestral sampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .errors import ContractError, DimensionError, ScheduleError, StateError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # beta[t - 1] for t = 1..T
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T_steps(self) -> int:
        return len(self.beta)

    def params(self) -> dict:
        return {"T_steps": self.T_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def ab(self, t) -> np.ndarray:
        """``alpha_bar`` at 1-based timestep(s) ``t``; ``t = 0`` maps to 1 (clean)."""
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() > self.T_steps):
            raise ScheduleError(f"timestep outside [1, {self.T_steps}]: {t}")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def build_schedule(T_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T_steps < 1:
        raise ContractError(f"T_steps must be >= 1, got {T_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T_steps, dtype=np.float64) if T_steps > 1 else np.array([beta_start])
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta, alpha_bar, float(beta_start), float(beta_end))


def _per_sample(coef: np.ndarray, ndim: int) -> np.ndarray:
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def forward_noise(schedule: NoiseSchedule, x0, t, epsilon):
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * epsilon``.

    ``t`` is a scalar or one timestep per leading (batch) index. Accepts and
    returns numpy arrays or tensors.
    """
    t_arr = np.asarray(t)
    if t_arr.size == 0 or t_arr.min() < 1:
        raise ScheduleError(f"timestep must be in [1, {schedule.T_steps}], got {t}")
    ab = schedule.ab(t_arr)
    x_shape = x0.shape
    if tuple(x_shape) != tuple(epsilon.shape):
        raise DimensionError(f"x0 shape {x_shape} != epsilon shape {epsilon.shape}")
    a = _per_sample(np.sqrt(ab), len(x_shape))
    s = _per_sample(np.sqrt(1.0 - ab), len(x_shape))
    if isinstance(x0, Tensor) or isinstance(epsilon, Tensor):
        dt = (x0 if isinstance(x0, Tensor) else epsilon).dtype
        return ad.as_tensor(x0) * a.astype(dt) + ad.as_tensor(epsilon) * s.astype(dt)
    dt = np.result_type(x0, epsilon)
    return (a * x0 + s * epsilon).astype(dt)


def epsilon_loss(pred: Tensor, true) -> Tensor:
    true = ad.as_tensor(true)
    if pred.shape != true.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {true.shape}")
    diff = pred - true
    return (diff * diff).mean()


def sampling_timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    """Descending, evenly spaced timesteps from T down to 1 (respaced DDPM)."""
    if steps < 0:
        raise ContractError(f"steps must be >= 0, got {steps}")
    if steps == 0:
        return []
    steps = min(steps, schedule.T_steps)
    ts = np.round(np.linspace(schedule.T_steps, 1, steps)).astype(int)
    return [int(t) for t in dict.fromkeys(ts.tolist())]


def ddpm_step(schedule: NoiseSchedule, x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              noise: np.ndarray | None, x0_clamp: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """One ancestral step from ``t`` to ``t_prev`` (``t_prev = 0`` returns the x0 estimate).

    ``x0_clamp`` maps the x0 estimate back onto the data range before the
    posterior mean is formed.
    """
    ab_t, ab_prev = float(schedule.ab(t)), float(schedule.ab(t_prev))
    beta = 1.0 - ab_t / ab_prev
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if x0_clamp is not None:
        x0_hat = x0_clamp(x0_hat)
    if t_prev == 0:
        return x0_hat.astype(x_t.dtype)
    mean = (np.sqrt(ab_prev) * beta / (1.0 - ab_t)) * x0_hat + (np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)) * x_t
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    out = mean if noise is None else mean + np.sqrt(var) * noise
    return out.astype(x_t.dtype)


def ddpm_sample(eps_fn: Callable[[np.ndarray, int], np.ndarray], x_T: np.ndarray, schedule: NoiseSchedule,
                steps: int, rng: RngStream) -> np.ndarray:
    """Run the ancestral loop from ``x_T``; ``eps_fn(x_t, t)`` predicts the noise."""
    ts = sampling_timesteps(schedule, steps)
    x = x_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        noise = rng.normal(x.shape, x.dtype) if t_prev > 0 else None
        x = ddpm_step(schedule, x, eps_fn(x, t), t, t_prev, noise)
    return x


def sample_video(model, bundles, seed: int, steps: int, mode: str = "full", fresh_prompt_noise: bool = False,
                 value_recursion: bool = False, clip_denoised: bool = True) -> np.ndarray:
    """Ancestral sampling of one latent video per prompt bundle.

    ``model`` supplies ``schedule``, ``config.unet`` and ``predict_eps``.
    Every draw for batch item ``i`` comes from ``RngStream(seed).child(i)``,
    so an item's video does not depend on what else is in the batch. The
    prompt latent is re-noised to the current timestep at every step with
    one epsilon drawn per generation, unless ``fresh_prompt_noise`` asks
    for a new draw at each step. With ``clip_denoised`` each x0 estimate is
    projected through the model's codec onto the valid pixel range. Returns ``[B, F, C, H, W]``.
    """
    if model is None or getattr(model, "store", None) is None or "conv_in.weight" not in model.store:
        raise StateError("no trained checkpoint loaded")
    single = not isinstance(bundles, (list, tuple))
    bundles = [bundles] if single else list(bundles)
    cfg = model.config.unet
    shape = (cfg.frames, cfg.in_channels, cfg.height, cfg.width)
    pshape = (cfg.in_channels, cfg.height, cfg.width)
    dt = ad.get_default_dtype()
    streams = [RngStream(seed).child(i) for i in range(len(bundles))]
    x = np.stack([s.child("x_T").normal(shape, dt) for s in streams])
    prompt_rngs = [s.child("prompt") for s in streams]
    step_rngs = [s.child("steps") for s in streams]
    eps_prompt = np.stack([r.normal(pshape, dt) for r in prompt_rngs])
    ts = sampling_timesteps(model.schedule, steps)
    codec = getattr(model, "codec", None)
    clamp = codec.clamp if clip_denoised and codec is not None else None
    with ad.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            if fresh_prompt_noise and i:
                eps_prompt = np.stack([r.normal(pshape, dt) for r in prompt_rngs])
            tb = np.full(len(bundles), t)
            eps_hat = model.predict_eps(x, tb, bundles, mode, eps_prompt if mode == "full" else None,
                                        value_recursion=value_recursion).data
            noise = np.stack([r.normal(shape, dt) for r in step_rngs]) if t_prev > 0 else None
            x = ddpm_step(model.schedule, x, eps_hat, t, t_prev, noise, clamp)
    return x[0] if single else x
