"""Pretraining, one-shot clip finetuning and null-text inversion."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, Trajectory, add_noise, cfg_combine, ddim_step
from .errors import NumericalError
from .model import TextEmbedding, UNet, trainable_attention_names

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 300
    learning_rate: float = 3e-4
    batch: int = 1
    seed: int = 0
    trainable: Optional[Callable[[str], bool]] = None
    cfg_dropout: float = 0.1

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class ImageDataset:
    images: torch.Tensor  # N x C x H x W, model scale [-1, 1]
    token_ids: torch.Tensor  # N x L

    def __len__(self) -> int:
        return self.images.shape[0]


def epsilon_loss(model: UNet, x0, t, eps, ctx, ctx_mask, schedule: NoiseSchedule):
    """Mean squared noise-prediction error at timesteps ``t`` (one per sample)."""
    ab = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[t - 1][:, None, None, None]
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    return F.mse_loss(model.forward_batch(x_t, t, ctx, ctx_mask), eps)


def pretrain_2d(model: UNet, dataset: ImageDataset, config: TrainConfig,
                schedule: NoiseSchedule, log_every: int = 0) -> tuple[UNet, list[float]]:
    """Fit the image model to the noise-prediction objective, in place."""
    if model.video:
        raise ValueError("pretraining expects the image model")
    gen = torch.Generator().manual_seed(config.seed)
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    pad = model.text.vocab.pad_id
    null_ids = model.text.ids("")
    images = dataset.images.to(dtype)
    losses: list[float] = []
    for step in range(config.steps):
        idx = torch.randint(0, len(dataset), (config.batch,), generator=gen)
        x0 = images[idx]
        ids = dataset.token_ids[idx].clone()
        drop = torch.rand(config.batch, generator=gen) < config.cfg_dropout
        ids[drop] = null_ids
        mask = (ids != pad) | drop[:, None]
        t = torch.randint(1, schedule.T + 1, (config.batch,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64).to(dtype)
        loss = epsilon_loss(model, x0, t, eps, model.text.embed_ids(ids), mask, schedule)
        if not torch.isfinite(loss):
            raise NumericalError("training loss diverged", phase="pretrain", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.5f", step, loss.item())
    return model, losses


def finetune_one_shot(model3d: UNet, video: torch.Tensor, prompt: str, config: TrainConfig,
                      schedule: NoiseSchedule) -> tuple[UNet, list[float]]:
    """Tune the attention layers of a copy of ``model3d`` on one captioned clip.

    One (t, eps) draw per step; every parameter outside the cross, ST and
    temporal attention layers keeps its exact value.
    """
    if not model3d.video:
        raise ValueError("finetuning expects the inflated model")
    model = copy.deepcopy(model3d)
    names = set(trainable_attention_names(model))
    if config.trainable is not None:
        names = {n for n in names if config.trainable(n)}
    params = []
    for n, p in model.named_parameters():
        p.requires_grad_(n in names)
        if n in names:
            params.append(p)
    if config.steps == 0:
        return model, []
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    with torch.no_grad():
        text = model.encode_text(prompt)
    ctx, mask = text.embeddings[None], text.key_mask[None]
    x0 = video.to(next(model.parameters()).dtype)
    losses: list[float] = []
    for step in range(config.steps):
        t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        loss = clip_loss(model, x0, t, eps, ctx, mask, schedule)
        if not torch.isfinite(loss):
            raise NumericalError("finetuning loss diverged", phase="finetune", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    for p in model.parameters():
        p.requires_grad_(True)
    return model, losses


def clip_loss(model: UNet, x0, t: int, eps, ctx, mask, schedule: NoiseSchedule):
    x_t = add_noise(x0, eps, t, schedule)
    return F.mse_loss(model.forward_batch(x_t, t, ctx, mask), eps)


def probe_loss(model: UNet, video: torch.Tensor, prompt: str, schedule: NoiseSchedule,
               n: int = 16, seed: int = 1234) -> float:
    """Noise-prediction loss averaged over a fixed set of (t, eps) draws."""
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    x0 = video.to(dtype)
    total = 0.0
    with torch.no_grad():
        text = model.encode_text(prompt)
        for _ in range(n):
            t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
            eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
            total += clip_loss(model, x0, t, eps, text.embeddings[None], text.key_mask[None],
                               schedule).item()
    return total / n


@dataclass
class NullTextResult:
    null_embs: list[TextEmbedding]
    losses: list[list[float]] = field(default_factory=list)  # per step, per iteration

    @property
    def per_step(self):
        return self.null_embs


def nti_step_loss(model: UNet, z_bar, t: int, t_prev: int, eps_cond, null: TextEmbedding,
                  w: float, target, schedule: NoiseSchedule):
    eps_u = model(z_bar, t, null)
    z_prev = ddim_step(z_bar, cfg_combine(eps_u, eps_cond, w), t, t_prev, schedule)
    return F.mse_loss(z_prev, target)


def null_text_invert(model: UNet, inversion: Trajectory, cond: TextEmbedding, w: float,
                     inner_iters: int, schedule: NoiseSchedule, null_init: TextEmbedding,
                     learning_rate: float = 3000.0, max_halvings: int = 6) -> NullTextResult:
    """Per-step optimisation of the null embedding along an inversion trajectory.

    For each sampler step (noisiest first) the null embedding is moved by
    gradient descent so that one guided DDIM step from the current
    reconstruction lands on the inverted latent of the next timestep. The
    step size starts at ``learning_rate`` and is halved whenever a step
    would increase the loss (the step is then retried); a step that still
    fails after ``max_halvings`` halvings is skipped, so the per-step loss
    never increases. Each step warm-starts from the previous result.
    """
    if not null_init.null_flag:
        raise ValueError("null_init must be a null embedding")
    for p in model.parameters():
        p.requires_grad_(False)
    steps = schedule.sampler_steps
    z_bar = inversion.at_timestep(steps[0])
    emb = null_init.embeddings.detach().clone()
    out = NullTextResult([])
    try:
        for i, t in enumerate(steps):
            t_prev = schedule.prev_timestep(i)
            target = inversion.at_timestep(t_prev)
            with torch.no_grad():
                eps_c = model(z_bar, t, cond)
            history: list[float] = []
            if w != 1.0 and inner_iters > 0:
                emb, history = _descend(model, z_bar, t, t_prev, eps_c, null_init, emb, w,
                                        target, schedule, inner_iters, learning_rate, max_halvings, i)
            null_i = null_init.with_embeddings(emb.detach().clone())
            out.null_embs.append(null_i)
            out.losses.append(history)
            with torch.no_grad():
                eps = cfg_combine(model(z_bar, t, null_i), eps_c, w)
                z_bar = ddim_step(z_bar, eps, t, t_prev, schedule)
            if not torch.isfinite(z_bar).all():
                raise NumericalError("non-finite latent", phase="null_text_invert", step=i)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    return out


def _descend(model, z_bar, t, t_prev, eps_c, null_init, emb, w, target, schedule,
             iters, lr, max_halvings, step_index):
    def loss_at(e):
        return nti_step_loss(model, z_bar, t, t_prev, eps_c, null_init.with_embeddings(e),
                             w, target, schedule)

    emb = emb.detach().clone().requires_grad_(True)
    loss = loss_at(emb)
    if not torch.isfinite(loss):
        raise NumericalError("non-finite loss", phase="null_text_invert", step=step_index)
    history = [loss.item()]
    (grad,) = torch.autograd.grad(loss, emb)
    for k in range(iters):
        accepted = False
        for _ in range(max_halvings + 1):
            cand = (emb - lr * grad).detach().requires_grad_(True)
            cand_loss = loss_at(cand)
            if torch.isfinite(cand_loss) and cand_loss.item() <= loss.item():
                accepted = True
                break
            lr *= 0.5
        if accepted:
            emb, loss = cand, cand_loss
            if k + 1 < iters:
                (grad,) = torch.autograd.grad(loss, emb)
        history.append(loss.item())
        if not accepted:
            break
    return emb.detach(), history
