"""Two-stage editing runs, baselines and their artifacts.

Stage 1 inflates the pretrained image model and tunes its attention layers
on the source clip. Stage 2 inverts the clip with DDIM, fits per-step null
embeddings, and samples a source branch and an edit branch side by side;
the edit branch receives the source attention maps and is composited with
the source branch through the blending mask.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import storage
from .blending import blend_latents, compute_blend_mask, upsample_mask
from .config import RunConfig, load_config
from .control import AttentionController, align_tokens, injection_cutoff
from .data import SceneParams, Vocab, generate_scene, random_image
from .diffusion import (LatentState, NoiseSchedule, Trajectory, add_noise, cfg_combine, ddim_invert,
                        ddim_sample, ddim_step, make_schedule)
from .errors import NumericalError, PhaseError
from .metrics import (REPORT_COLUMNS, MetricReport, ToyEmbedder, frame_consistency, mask_iou, psnr,
                      text_alignment)
from .model import ModelConfig, TextEmbedding, UNet, inflate
from .training import (ImageDataset, NullTextResult, TrainConfig, finetune_one_shot, null_text_invert,
                       pretrain_2d)

log = logging.getLogger(__name__)
DTYPE = torch.float64
BLEND_HW = (8, 8)


def to_latent(frames: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(frames), dtype=DTYPE) * 2 - 1


def to_frames(z: torch.Tensor) -> np.ndarray:
    return ((z.detach().cpu().numpy() + 1) / 2).clip(0, 1)


def schedule_for(config: RunConfig) -> NoiseSchedule:
    return make_schedule(config.num_train_timesteps, config.beta_start, config.beta_end,
                         config.beta_schedule, config.sampler_steps)


# -- stage 0: image model ----------------------------------------------------

def pretrain_dataset(config: RunConfig, vocab: Vocab, max_len: int) -> ImageDataset:
    rng = np.random.default_rng(config.pretrain_seed)
    images, ids = [], []
    for _ in range(config.pretrain_dataset_size):
        img, caption = random_image(rng)
        images.append(img)
        ids.append(vocab.tokenize(caption, max_len))
    return ImageDataset(to_latent(np.stack(images)).float(), torch.tensor(ids))


def pretrain(config: RunConfig, path: Optional[Path] = None) -> tuple[UNet, list[float]]:
    """Train the image model (float32) and save it as float64 weights."""
    torch.manual_seed(config.pretrain_seed)
    model = UNet(ModelConfig())
    data = pretrain_dataset(config, model.text.vocab, model.config.max_len)
    tc = TrainConfig(steps=config.pretrain_steps, learning_rate=config.pretrain_lr,
                     batch=config.pretrain_batch, seed=config.pretrain_seed)
    model, losses = pretrain_2d(model, data, tc, schedule_for(config), log_every=500)
    model = model.to(DTYPE)
    if path is not None:
        storage.save_weights(model, path, extra={"pretrain_key": config.pretrain_key()})
        storage.write_csv(Path(path).with_suffix(".loss.csv"), ("step", "loss"), enumerate(losses))
    return model, losses


def load_or_pretrain(config: RunConfig) -> UNet:
    path = config.weights_path()
    if path.exists():
        return storage.load_weights(path, DTYPE)
    if config.weights:
        raise FileNotFoundError(f"weights {path} not found; run the pretrain command first")
    log.info("no pretrained weights at %s; pretraining", path)
    model, _ = pretrain(config, path)
    return model


# -- source clip ---------------------------------------------------------------

def scene_params(config: RunConfig) -> SceneParams:
    return SceneParams(color=config.scene_color, shape=config.scene_shape,
                       direction=config.scene_direction, num_frames=config.num_frames)


def load_source(config: RunConfig) -> tuple[np.ndarray, Optional[np.ndarray], str]:
    """(frames, truth masks or None, caption)."""
    if config.video:
        frames = storage.load_video(config.video)
        masks = None
        mpath = Path(config.video).with_name(Path(config.video).stem + "_masks.npz")
        if mpath.exists():
            with np.load(mpath) as d:
                masks = d["masks"]
        if not config.source_prompt:
            raise ValueError("source_prompt is required with an external video")
        return frames, masks, config.source_prompt
    scene = generate_scene(scene_params(config), config.scene_seed)
    return scene.frames, scene.masks, config.source_prompt or scene.caption


# -- stage 1 and 2(a) ------------------------------------------------------------

@dataclass
class Session:
    config: RunConfig
    schedule: NoiseSchedule
    model: UNet  # tuned video model
    frames: np.ndarray
    x0: torch.Tensor
    truth_masks: Optional[np.ndarray]
    source_prompt: str
    source_emb: TextEmbedding
    null_init: TextEmbedding
    finetune_losses: list[float] = field(default_factory=list)
    inversion: Optional[Trajectory] = None
    nti: Optional[NullTextResult] = None

    def nulls(self):
        return self.nti.null_embs if self.nti is not None else self.null_init


@contextlib.contextmanager
def phase(name: str):
    try:
        yield
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(name, exc) from exc


def prepare(config: RunConfig, invert: bool = True) -> Session:
    config.validate()
    schedule = schedule_for(config)
    with phase("pretrain"):
        model2d = load_or_pretrain(config)
    with phase("load_source"):
        frames, masks, caption = load_source(config)
    x0 = to_latent(frames)
    with phase("inflate"):
        model3d = inflate(model2d)
    with phase("finetune"):
        tc = TrainConfig(steps=config.finetune_steps, learning_rate=config.finetune_lr, seed=config.seed)
        tuned, losses = finetune_one_shot(model3d, x0, caption, tc, schedule)
        tuned.eval()
    with torch.no_grad():
        src = tuned.encode_text(caption).detach()
        null = tuned.encode_text("").detach()
    s = Session(config, schedule, tuned, frames, x0, masks, caption, src, null, losses)
    if invert:
        with phase("invert"):
            s.inversion = ddim_invert(tuned, x0, src, schedule, config.inversion_fixed_point_iters)
        if config.null_text:
            with phase("null_text"):
                s.nti = null_text_invert(tuned, s.inversion, src, config.guidance_scale,
                                         config.nti_inner_iters, schedule, null, config.nti_lr)
    return s


# -- stage 2(b) ------------------------------------------------------------------

@dataclass
class EditResult:
    recon: torch.Tensor
    edited: torch.Tensor
    masks: dict[int, torch.Tensor]  # step -> (F, 8, 8) bool, blended steps only
    trajectory: Trajectory  # edit branch
    controller: AttentionController

    @property
    def final_mask(self) -> Optional[torch.Tensor]:
        return self.masks[max(self.masks)] if self.masks else None


@torch.no_grad()
def edit_sample(session: Session, target_prompt: str, blending: bool = True, tc_blending: bool = True,
                injection=None, blend_words: Optional[tuple[Sequence[int], Sequence[int]]] = None,
                keep_attention: bool = False) -> EditResult:
    """Run the source and edit branches in lockstep from the inverted noise."""
    cfg = session.config
    schedule, model = session.schedule, session.model
    injection = injection or cfg.injection()
    tgt = model.encode_text(target_prompt)
    vocab = model.text.vocab
    alignment = align_tokens(session.source_emb.token_ids.tolist(), tgt.token_ids.tolist(), vocab.pad_id)
    src_words, tgt_words = blend_words or (alignment.src_edit_indices, alignment.tgt_edit_indices)
    S = schedule.num_sampler_steps
    ctrl = AttentionController(injection, alignment, S, keep_history=keep_attention)
    blend_from = injection_cutoff(injection.blend_start, S)
    nulls = session.nulls()
    w = cfg.guidance_scale
    z_T = session.inversion.at_timestep(schedule.sampler_steps[0])
    zs = ze = z_T
    traj = Trajectory()
    traj.states.append(LatentState(ze, 0, schedule.sampler_steps[0]))
    masks: dict[int, torch.Tensor] = {}
    for i, t in enumerate(schedule.sampler_steps):
        t_prev = schedule.prev_timestep(i)
        null_i = nulls[i] if isinstance(nulls, list) else nulls
        eps_s = cfg_combine(model(zs, t, null_i), model(zs, t, session.source_emb, ctrl.source_hooks(i)), w)
        eps_e = cfg_combine(model(ze, t, null_i), model(ze, t, tgt, ctrl.hooks(i)), w)
        zs_next = ddim_step(zs, eps_s, t, t_prev, schedule)
        ze_next = ddim_step(ze, eps_e, t, t_prev, schedule)
        if blending and i >= blend_from:
            mask = compute_blend_mask(ctrl.source_records, ctrl.edit_records, ctrl.edit_records,
                                      src_words, tgt_words, injection.blend_threshold, BLEND_HW,
                                      temporal=tc_blending)
            masks[i] = mask
            ze_next = blend_latents(zs_next, ze_next, mask)
        zs, ze = zs_next, ze_next
        if not (torch.isfinite(zs).all() and torch.isfinite(ze).all()):
            raise NumericalError("non-finite latent", phase="edit_sample", step=i)
        traj.states.append(LatentState(ze, i + 1, t_prev))
    return EditResult(zs, ze, masks, traj, ctrl)


@torch.no_grad()
def reconstruct(session: Session, guidance: Optional[float] = None, nulls=None) -> torch.Tensor:
    w = session.config.guidance_scale if guidance is None else guidance
    nulls = session.nulls() if nulls is None else nulls
    z_T = session.inversion.at_timestep(session.schedule.sampler_steps[0])
    return ddim_sample(session.model, z_T, session.source_emb, nulls, w, session.schedule).final


def initial_noise(session: Session) -> torch.Tensor:
    gen = torch.Generator().manual_seed(session.config.seed)
    return torch.randn(session.x0.shape, generator=gen, dtype=DTYPE)


@torch.no_grad()
def baseline_generate(session: Session, target_prompt: str) -> torch.Tensor:
    tgt = session.model.encode_text(target_prompt)
    return ddim_sample(session.model, initial_noise(session), tgt, session.null_init,
                       session.config.guidance_scale, session.schedule).final


@torch.no_grad()
def baseline_sdedit(session: Session, target_prompt: str, t0: Optional[int] = None) -> torch.Tensor:
    """Noise the source ``t0`` sampler steps deep, then denoise toward the target prompt.

    ``t0 = 0`` returns the source untouched; ``t0 = S`` starts from the same
    pure noise as :func:`baseline_generate`.
    """
    schedule = session.schedule
    S = schedule.num_sampler_steps
    t0 = session.config.sdedit_t0 if t0 is None else t0
    if not 0 <= t0 <= S:
        raise ValueError(f"t0 must lie in [0, {S}]")
    if t0 == 0:
        return session.x0.clone()
    eps = initial_noise(session)
    start = S - t0
    if t0 == S:
        z = eps
    else:
        z = add_noise(session.x0, eps, schedule.sampler_steps[start], schedule)
    tgt = session.model.encode_text(target_prompt)
    return ddim_sample(session.model, z, tgt, session.null_init, session.config.guidance_scale,
                       schedule, start_index=start).final


# -- reporting ---------------------------------------------------------------------

def score(method: str, frames: np.ndarray, source: np.ndarray, prompt: Optional[str], embedder,
          config: RunConfig, truth: Optional[np.ndarray] = None, mask=None) -> MetricReport:
    iou = None
    if mask is not None and truth is not None:
        up = upsample_mask(torch.as_tensor(np.asarray(mask), dtype=torch.bool), tuple(truth.shape[-2:]))
        iou = mask_iou(up.numpy(), truth)
    ta = text_alignment(frames, prompt, embedder) if prompt else None
    fc = frame_consistency(frames) if frames.shape[0] >= 2 else None
    return MetricReport(method=method, psnr_db=psnr(frames, source), mask_iou=iou, frame_consistency=fc,
                        text_alignment=ta, lpips=None, config_hash=config.hash(), seed=config.seed)


def evaluate_output(session: Session, method: str, output: torch.Tensor, prompt: Optional[str],
                    mask: Optional[torch.Tensor] = None) -> MetricReport:
    embedder = ToyEmbedder(session.model) if session.config.text_alignment_plugin else None
    return score(method, to_frames(output), session.frames, prompt, embedder, session.config,
                 session.truth_masks, mask)


def method_name(config: RunConfig) -> str:
    if config.mode != "edit":
        return config.mode
    if not config.blending:
        return "edit"
    return "edit_tc" if config.tc_blending else "edit_framewise"


def evaluate_run(run_dir: str | Path, use_text_alignment: bool = True) -> list[MetricReport]:
    """Recompute report rows from the artifacts of a finished run directory."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.yaml"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{run_dir} has no config.yaml; not a run directory")
    config = load_config(cfg_path)
    source = storage.load_video(run_dir / "source.npz")
    truth = None
    if (run_dir / "source_masks.npz").exists():
        with np.load(run_dir / "source_masks.npz") as d:
            truth = d["masks"]
    final_mask = None
    if (run_dir / "masks.npz").exists():
        with np.load(run_dir / "masks.npz") as d:
            last = max(int(k.split("_")[1]) for k in d.files)
            final_mask = np.stack([d[f"mask_{last}_{f}"] for f in range(source.shape[0])])
    embedder = None
    if use_text_alignment and (run_dir / "tuned.npz").exists():
        embedder = ToyEmbedder(storage.load_weights(run_dir / "tuned.npz", DTYPE))
    source_prompt = config.source_prompt or generate_scene(scene_params(config), config.scene_seed).caption
    candidates = [("edited.npz", method_name(config), config.target_prompt, final_mask),
                  ("reconstruction.npz", "reconstruct", source_prompt, None),
                  ("output.npz", config.mode, config.target_prompt, None)]
    reports = []
    for name, method, prompt, mask in candidates:
        if (run_dir / name).exists():
            frames = storage.load_video(run_dir / name)
            reports.append(score(method, frames, source, prompt, embedder, config, truth, mask))
    if not reports:
        raise FileNotFoundError(f"no output videos in {run_dir}")
    return reports


def emit_report(reports: Sequence[MetricReport], path: str | Path,
                videos: Optional[Sequence[np.ndarray]] = None) -> Path:
    """CSV with one row per method; optional grid image next to it."""
    if not reports:
        raise ValueError("need at least one report")
    path = Path(path)
    storage.write_csv(path, REPORT_COLUMNS, [r.row() for r in reports])
    if videos is not None:
        storage.save_grid(path.with_suffix(".png"), list(videos))
    return path


def _write_common(out: Path, session: Session) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(session.config.to_yaml())
    storage.save_video(out / "source.npz", session.frames)
    storage.save_weights(session.model, out / "tuned.npz")
    if session.truth_masks is not None:
        np.savez(out / "source_masks.npz", masks=session.truth_masks)
    if session.finetune_losses:
        storage.write_csv(out / "finetune_loss.csv", ("step", "loss"),
                          ((i, f"{v:.10g}") for i, v in enumerate(session.finetune_losses)))


def _write_inversion(out: Path, session: Session) -> None:
    if session.inversion is None:
        return
    arrays = session.inversion.to_arrays()
    if session.nti is not None:
        arrays["null_embeddings"] = torch.stack([n.embeddings for n in session.nti.null_embs]).numpy()
        storage.write_csv(out / "nti_loss.csv", ("step", "iteration", "loss"),
                          ((i, k, f"{v:.10g}") for i, h in enumerate(session.nti.losses) for k, v in enumerate(h)))
    storage.save_trajectory(out / "inversion.npz", arrays, session.schedule.to_dict())


def _flush_partial(out: Path, session: Optional[Session]) -> None:
    if session is None:
        return
    with contextlib.suppress(Exception):
        _write_common(out, session)
        _write_inversion(out, session)


def run_edit(config: RunConfig, session: Optional[Session] = None) -> tuple[MetricReport, EditResult]:
    out = config.output_path()
    try:
        session = session or prepare(config)
        with phase("edit"):
            result = edit_sample(session, config.target_prompt, blending=config.blending,
                                 tc_blending=config.tc_blending, keep_attention=config.dump_attention)
    except PhaseError:
        _flush_partial(out, session)
        raise
    _write_common(out, session)
    _write_inversion(out, session)
    report = evaluate_output(session, method_name(config), result.edited, config.target_prompt, result.final_mask)
    edited = to_frames(result.edited)
    storage.save_video(out / "edited.npz", edited)
    storage.save_video(out / "edited_frames", edited)
    storage.save_video(out / "reconstruction.npz", to_frames(result.recon))
    arrays = result.trajectory.to_arrays()
    arrays["recon_z0"] = result.recon.numpy()
    if config.dump_attention:
        for r in result.controller.history:
            arrays[f"attn_{r.step_index}_{r.layer_id}"] = r.map.numpy()
    storage.save_trajectory(out / "edit_trajectory.npz", arrays, session.schedule.to_dict())
    if result.masks:
        storage.save_masks(out / "masks.npz", {k: v.numpy() for k, v in result.masks.items()})
        storage.export_mask_images(out / "final_mask", result.final_mask.numpy())
    emit_report([report], out / "report.csv", [session.frames, edited])
    return report, result


def run_reconstruct(config: RunConfig, session: Optional[Session] = None) -> MetricReport:
    out = config.output_path()
    session = session or prepare(config)
    with phase("reconstruct"):
        z = reconstruct(session)
    _write_common(out, session)
    _write_inversion(out, session)
    frames = to_frames(z)
    storage.save_video(out / "reconstruction.npz", frames)
    report = evaluate_output(session, "reconstruct", z, session.source_prompt)
    emit_report([report], out / "report.csv", [session.frames, frames])
    return report


def _run_baseline(config: RunConfig, method: str, fn, session: Optional[Session]) -> MetricReport:
    out = config.output_path()
    session = session or prepare(config, invert=False)
    with phase(method):
        z = fn(session, config.target_prompt)
    _write_common(out, session)
    frames = to_frames(z)
    storage.save_video(out / "output.npz", frames)
    storage.save_trajectory(out / "output_latent.npz", {"z_0": z.numpy()}, session.schedule.to_dict())
    report = evaluate_output(session, method, z, config.target_prompt)
    emit_report([report], out / "report.csv", [session.frames, frames])
    return report


def run_baseline_generate(config: RunConfig, session: Optional[Session] = None) -> MetricReport:
    return _run_baseline(config, "baseline_generate", baseline_generate, session)


def run_baseline_sdedit(config: RunConfig, session: Optional[Session] = None) -> MetricReport:
    return _run_baseline(config, "baseline_sdedit", baseline_sdedit, session)


def run(config: RunConfig):
    config.validate()
    if config.mode == "edit":
        return run_edit(config)[0]
    if config.mode == "reconstruct":
        return run_reconstruct(config)
    if config.mode == "baseline_generate":
        return run_baseline_generate(config)
    return run_baseline_sdedit(config)
