"""Evaluation metrics and the per-method report row."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
import torch

PSNR_CAP = 99.0
REPORT_COLUMNS = ("method", "text_alignment", "lpips", "psnr", "mask_iou", "frame_consistency",
                  "config_hash", "seed")


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _np(a).astype(np.float64), _np(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def mask_iou(pred, truth) -> float:
    pred, truth = _np(pred).astype(bool), _np(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask_iou: shape mismatch {pred.shape} vs {truth.shape}")
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def frame_consistency(video) -> float:
    """Mean cosine similarity of adjacent vectorised frames; zero frames are skipped."""
    v = _np(video).astype(np.float64)
    if v.shape[0] < 2:
        raise ValueError("frame_consistency needs at least two frames")
    flat = v.reshape(v.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    sims = [float(flat[f] @ flat[f + 1] / (norms[f] * norms[f + 1]))
            for f in range(len(flat) - 1) if norms[f] > 0 and norms[f + 1] > 0]
    if not sims:
        raise ValueError("every adjacent frame pair has a zero-norm frame")
    return float(np.mean(sims))


class Embedder(Protocol):
    def embed_text(self, prompt: str) -> np.ndarray: ...

    def embed_frames(self, video) -> np.ndarray: ...


def text_alignment(video, prompt: str, embedder: Optional[Embedder]) -> Optional[float]:
    """100 x mean cosine between the prompt embedding and each frame embedding."""
    if embedder is None:
        return None
    t = _np(embedder.embed_text(prompt)).astype(np.float64).ravel()
    frames = _np(embedder.embed_frames(video)).astype(np.float64)
    frames = frames.reshape(frames.shape[0], -1)
    cos = frames @ t / (np.linalg.norm(frames, axis=1) * np.linalg.norm(t))
    return float(100.0 * cos.mean())


class ToyEmbedder:
    """Prompt/frame embeddings read off the toy model's last cross-attention layer.

    Text: key projection of the mean visible token embedding. Frames: query
    projection of the mean 8x8 token features at timestep 1 under the null
    prompt. Only a rough stand-in for a contrastive image-text model.
    """

    def __init__(self, model):
        self.model = model

    @torch.no_grad()
    def embed_text(self, prompt: str) -> np.ndarray:
        text = self.model.encode_text(prompt)
        vis = text.embeddings[text.key_mask].mean(dim=0)
        return self.model.attn_up.attn2.to_k(vis).numpy()

    @torch.no_grad()
    def embed_frames(self, video) -> np.ndarray:
        x = torch.as_tensor(_np(video), dtype=next(self.model.parameters()).dtype) * 2 - 1
        feats = []
        layer = self.model.attn_up.attn2
        handle = layer.register_forward_hook(lambda _m, inp, _o: feats.append(inp[0]))
        try:
            null = self.model.encode_text("")
            self.model(x, 1, null)
        finally:
            handle.remove()
        return layer.to_q(feats[0].mean(dim=1)).numpy()


@dataclass
class MetricReport:
    method: str
    psnr_db: float
    mask_iou: Optional[float] = None
    frame_consistency: Optional[float] = None
    text_alignment: Optional[float] = None
    lpips: Optional[float] = None
    config_hash: str = ""
    seed: Optional[int] = None

    def row(self) -> list:
        def fmt(v):
            return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)
        return [self.method, fmt(self.text_alignment), fmt(self.lpips), fmt(self.psnr_db),
                fmt(self.mask_iou), fmt(self.frame_consistency), self.config_hash,
                "" if self.seed is None else self.seed]
