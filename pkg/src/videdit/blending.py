"""Temporally consistent blending masks and latent compositing.

Word heatmaps from cross-attention are normalised per frame, propagated
through the sparse ST attention of each frame (which looks at the first and
previous frame), thresholded, and unioned over the replaced and the new
word. The resulting binary mask keeps the reconstruction outside the edit
region.
"""
from __future__ import annotations

from typing import Iterable, Optional, Sequence

import torch
import torch.nn.functional as F

from .model import AttentionRecord


def normalize_heatmap(m: torch.Tensor) -> torch.Tensor:
    """(F, H, W) or (F, HW) -> (F, HW) with every frame summing to one."""
    flat = m.reshape(m.shape[0], -1)
    if (flat < 0).any():
        raise ValueError("heatmap has negative entries")
    sums = flat.sum(dim=1, keepdim=True)
    if (sums <= 0).any():
        bad = torch.nonzero(sums[:, 0] <= 0).flatten().tolist()
        raise ValueError(f"heatmap frames {bad} have zero mass (word absent?)")
    return flat / sums


def propagate_mask(m_first: torch.Tensor, m_prev: torch.Tensor, st_map: torch.Tensor) -> torch.Tensor:
    """Attention-weighted average of the first- and previous-frame maps.

    ``st_map`` is (HW, 2HW) with rows over keys [first frame; previous frame].
    """
    n = m_first.shape[-1]
    if m_prev.shape[-1] != n or st_map.shape != (n, 2 * n):
        raise ValueError(f"resolution mismatch: maps {n}, {m_prev.shape[-1]}; st map {tuple(st_map.shape)}")
    return st_map @ torch.cat([m_first, m_prev], dim=-1)


def propagate_all(m_tilde: torch.Tensor, st_maps: torch.Tensor) -> torch.Tensor:
    """Apply :func:`propagate_mask` to every frame; frame 1 keeps its own map."""
    out = [m_tilde[0]]
    for f in range(1, m_tilde.shape[0]):
        out.append(propagate_mask(m_tilde[0], m_tilde[f - 1], st_maps[f]))
    return torch.stack(out)


def binarize_mask(m_hat: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-frame max-rescale, then keep entries at or above ``tau``."""
    flat = m_hat.reshape(m_hat.shape[0], -1)
    if not torch.isfinite(flat).all() or (flat < 0).any():
        raise ValueError("m_hat must be finite and non-negative")
    peak = flat.max(dim=1, keepdim=True).values
    scaled = torch.where(peak > 0, flat / torch.where(peak > 0, peak, torch.ones_like(peak)),
                         torch.zeros_like(flat))
    mask = (scaled >= tau) & (peak > 0)
    return mask.reshape(m_hat.shape)


def union_masks(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a | b


def upsample_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour upsampling of an (F, h, w) mask to (F, H, W)."""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    up = F.interpolate(mask[:, None].to(torch.float32), size=size, mode="nearest")
    return up[:, 0] > 0.5


def blend_latents(z_recon: torch.Tensor, z_edit: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Keep ``z_recon`` outside the mask and ``z_edit`` inside it.

    ``mask`` is (F, h, w); it is upsampled to the latent grid if needed and
    broadcast over channels.
    """
    if z_recon.shape != z_edit.shape:
        raise ValueError(f"latent shapes differ: {tuple(z_recon.shape)} vs {tuple(z_edit.shape)}")
    if mask.ndim != 3 or mask.shape[0] != z_recon.shape[0]:
        raise ValueError(f"mask shape {tuple(mask.shape)} incompatible with latents {tuple(z_recon.shape)}")
    alpha = upsample_mask(mask.bool(), tuple(z_recon.shape[-2:])).to(z_recon.dtype)[:, None]
    return z_recon * (1 - alpha) + z_edit * alpha


def _select(records: Iterable[AttentionRecord], attn_type: str) -> list[AttentionRecord]:
    return [r for r in records if r.attn_type == attn_type]


def word_heatmap(cross_records: Sequence[AttentionRecord], token_indices: Sequence[int],
                 hw: tuple[int, int]) -> torch.Tensor:
    """Mean cross-attention mass on ``token_indices`` over layers: (F, H', W')."""
    recs = [r for r in _select(cross_records, "cross") if r.map.shape[-2] == hw[0] * hw[1]]
    if not recs:
        raise ValueError(f"no cross-attention records at resolution {hw}")
    idx = torch.as_tensor(list(token_indices), dtype=torch.long)
    maps = torch.stack([r.map[..., idx].mean(dim=-1) for r in recs]).mean(dim=0)
    return maps.reshape(maps.shape[0], *hw)


def mean_st_map(st_records: Sequence[AttentionRecord], hw: tuple[int, int]) -> torch.Tensor:
    n = hw[0] * hw[1]
    recs = [r for r in _select(st_records, "st") if r.map.shape[-2] == n]
    if not recs:
        raise ValueError(f"no ST-attention records at resolution {hw}")
    return torch.stack([r.map for r in recs]).mean(dim=0)


def word_mask(m: torch.Tensor, st_maps: Optional[torch.Tensor], tau: float) -> torch.Tensor:
    """Binary (F, H', W') mask for one word; ``st_maps=None`` skips propagation."""
    m_tilde = normalize_heatmap(m)
    m_hat = m_tilde if st_maps is None else propagate_all(m_tilde, st_maps)
    return binarize_mask(m_hat, tau).reshape(m.shape)


def compute_blend_mask(cross_records_src: Sequence[AttentionRecord],
                       cross_records_tgt: Sequence[AttentionRecord],
                       st_records: Sequence[AttentionRecord],
                       src_indices: Sequence[int], tgt_indices: Sequence[int],
                       tau: float, hw: tuple[int, int], temporal: bool = True,
                       frame_range: Optional[slice] = None) -> torch.Tensor:
    """Union of the source-word and target-word masks, (F, H', W') bool.

    Source-word heatmaps come from the source branch, target-word heatmaps
    from the edit branch, and the ST maps (edit branch) drive propagation.
    ``temporal=False`` gives plain frame-wise masks.
    """
    st = mean_st_map(st_records, hw) if temporal else None
    masks = []
    for recs, idx in ((cross_records_src, src_indices), (cross_records_tgt, tgt_indices)):
        if idx:
            masks.append(word_mask(word_heatmap(recs, idx, hw), st, tau))
    if not masks:
        n_frames = _select(cross_records_tgt, "cross")[0].map.shape[0]
        out = torch.zeros((n_frames, *hw), dtype=torch.bool)
    else:
        out = masks[0]
        for m in masks[1:]:
            out = union_masks(out, m)
    if frame_range is not None:
        out = out[frame_range]
    return out
