"""DDPM schedules and the deterministic DDIM sampler / inverter.

Timesteps are 1-based (``1..T``). Timestep ``0`` is the data boundary whose
cumulative alpha is taken to be exactly 1, so the last sampler update lands
on the predicted clean sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import NumericalError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sampler_steps: tuple[int, ...]
    kind: str = "scaled_linear"

    @property
    def num_sampler_steps(self) -> int:
        return len(self.sampler_steps)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 0..{self.T}")
        return float(self.alpha_bars[t - 1])

    def prev_timestep(self, i: int) -> int:
        """Timestep reached after sampler step ``i`` (0 at the data boundary)."""
        return self.sampler_steps[i + 1] if i + 1 < len(self.sampler_steps) else 0

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "sampler_steps": list(self.sampler_steps),
                "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def make_schedule(T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012,
                  kind: str = "scaled_linear", sampler_S: int = 50) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= sampler_S <= T:
        raise ValueError(f"need 1 <= sampler_S <= T, got sampler_S={sampler_S}, T={T}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    steps = tuple(int(round(k * T / sampler_S)) for k in range(sampler_S, 0, -1))
    if len(set(steps)) != len(steps):
        raise ValueError("sampler steps collide; choose a smaller sampler_S")
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars,
                         sampler_steps=steps, kind=kind)


def _check_same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(x0, eps, t: int, schedule: NoiseSchedule):
    _check_same_shape(x0, eps, "add_noise")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def cfg_combine(eps_uncond, eps_cond, w: float):
    # (1-w)*u + w*c is exact at w in {0, 1}, unlike u + w*(c-u).
    _check_same_shape(eps_uncond, eps_cond, "cfg_combine")
    return (1.0 - w) * eps_uncond + w * eps_cond


def ddim_step(z_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule):
    """One deterministic DDIM update from ``t`` down to ``t_prev``."""
    if t <= t_prev:
        raise ValueError(f"ddim_step needs t > t_prev, got {t}, {t_prev}")
    _check_same_shape(z_t, eps_hat, "ddim_step")
    ab_t, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    if ab_t <= 0.0:
        raise NumericalError("alpha_bar is zero", phase="ddim_step")
    pred_x0 = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * pred_x0 + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_invert_step(z_tprev, eps_hat, t_prev: int, t: int, schedule: NoiseSchedule):
    """Inverse of :func:`ddim_step` for the same ``eps_hat``."""
    if t <= t_prev:
        raise ValueError(f"ddim_invert_step needs t > t_prev, got {t_prev}, {t}")
    _check_same_shape(z_tprev, eps_hat, "ddim_invert_step")
    ab_t, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    if ab_prev <= 0.0:
        raise NumericalError("alpha_bar is zero", phase="ddim_invert_step")
    pred_x0 = (z_tprev - math.sqrt(1.0 - ab_prev) * eps_hat) / math.sqrt(ab_prev)
    return math.sqrt(ab_t) * pred_x0 + math.sqrt(1.0 - ab_t) * eps_hat


@dataclass
class LatentState:
    z: torch.Tensor
    t_index: int
    t: int


@dataclass
class Trajectory:
    """Ordered latents; ``states[0]`` is where the run started."""

    states: list[LatentState] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1].z

    def at_timestep(self, t: int) -> torch.Tensor:
        for s in self.states:
            if s.t == t:
                return s.z
        raise KeyError(t)

    def timesteps(self) -> list[int]:
        return [s.t for s in self.states]

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"z_{s.t_index}": s.z.detach().cpu().numpy() for s in self.states}
        out["timesteps"] = np.asarray(self.timesteps(), dtype=np.int64)
        return out


def _check_finite(z: torch.Tensor, phase: str, step: int) -> None:
    if not torch.isfinite(z).all():
        raise NumericalError("non-finite latent", phase=phase, step=step)


EpsModel = Callable[..., torch.Tensor]


@torch.no_grad()
def ddim_sample(model: EpsModel, z_T: torch.Tensor, cond, null_embs, w: float,
                schedule: NoiseSchedule, controller=None, blender=None,
                start_index: int = 0) -> Trajectory:
    """Guided DDIM sampling from ``z_T``.

    ``null_embs`` is a single null embedding or a sequence with one entry per
    sampler step. ``controller`` (optional) supplies per-step attention hooks
    for the conditional pass via ``controller.hooks(step_index)``; ``blender``
    (optional) is called as ``blender(step_index, z)`` after every update and
    returns the latent to carry forward. ``start_index`` skips the first
    sampler steps (used by partial-noise baselines).
    """
    steps = schedule.sampler_steps
    z = z_T
    traj = Trajectory([LatentState(z, start_index, steps[start_index] if start_index < len(steps) else 0)])
    for i in range(start_index, len(steps)):
        t, t_prev = steps[i], schedule.prev_timestep(i)
        null_i = _null_for_step(null_embs, i)
        hooks = controller.hooks(i) if controller is not None else None
        eps_c = model(z, t, cond, hooks=hooks)
        if eps_c.shape != z.shape:
            raise NumericalError(f"model output shape {tuple(eps_c.shape)} != {tuple(z.shape)}",
                                 phase="ddim_sample", step=i)
        if w == 1.0:
            eps = eps_c
        else:
            eps = cfg_combine(model(z, t, null_i), eps_c, w)
        z = ddim_step(z, eps, t, t_prev, schedule)
        if blender is not None:
            z = blender(i, z)
        _check_finite(z, "ddim_sample", i)
        traj.states.append(LatentState(z, i + 1, t_prev))
    return traj


def _null_for_step(null_embs, i: int):
    if isinstance(null_embs, (list, tuple)):
        return null_embs[i]
    return null_embs


@torch.no_grad()
def ddim_invert(model: EpsModel, x0: torch.Tensor, cond, schedule: NoiseSchedule,
                fixed_point_iters: int = 0) -> Trajectory:
    """Unguided DDIM inversion, data to noise.

    The noise estimate for the hop ``t_prev -> t`` is taken at the known
    latent ``z_{t_prev}`` with timestep ``t``. ``fixed_point_iters > 0``
    re-evaluates it at the current estimate of ``z_t`` that many times,
    which drives the inversion toward an exact inverse of the sampler.
    """
    steps = list(reversed(schedule.sampler_steps))
    S = len(steps)
    z = x0
    traj = Trajectory([LatentState(z, S, 0)])
    t_prev = 0
    for k, t in enumerate(steps):
        eps = model(z, t, cond)
        z_next = ddim_invert_step(z, eps, t_prev, t, schedule)
        for _ in range(fixed_point_iters):
            eps = model(z_next, t, cond)
            z_next = ddim_invert_step(z, eps, t_prev, t, schedule)
        z = z_next
        _check_finite(z, "ddim_invert", k)
        traj.states.append(LatentState(z, S - 1 - k, t))
        t_prev = t
    return traj
