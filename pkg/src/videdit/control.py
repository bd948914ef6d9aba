"""Record attention in the source branch and replay it into the edit branch."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .model import AttentionRecord

ATTN_TYPES = ("cross", "st", "temporal")


@dataclass
class InjectionConfig:
    dur_cross: float = 0.2
    dur_st: float = 0.5
    dur_temporal: float = 0.8
    blend_threshold: float = 0.25
    blend_start: float = 0.0

    def __post_init__(self):
        for name in ("dur_cross", "dur_st", "dur_temporal", "blend_start"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def duration(self, attn_type: str) -> float:
        try:
            return {"cross": self.dur_cross, "st": self.dur_st, "temporal": self.dur_temporal}[attn_type]
        except KeyError:
            raise ValueError(f"unknown attention type {attn_type!r}") from None


@dataclass
class TokenAlignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    src_edit_indices: list[int] = field(default_factory=list)
    tgt_edit_indices: list[int] = field(default_factory=list)


def align_tokens(src_ids: Sequence[int], tgt_ids: Sequence[int], pad_id: Optional[int] = None) -> TokenAlignment:
    """Longest-common-subsequence alignment of two token sequences.

    Padding positions take no part: they are neither paired nor edits.
    """
    src = [int(i) for i in src_ids]
    tgt = [int(i) for i in tgt_ids]
    if pad_id is not None:
        src = [i for i in src if i != pad_id]
        tgt = [i for i in tgt if i != pad_id]
    n, m = len(src), len(tgt)
    lcs = [[0] * (m + 1) for _ in range(n + 1)]
    for a in range(n - 1, -1, -1):
        for b in range(m - 1, -1, -1):
            lcs[a][b] = lcs[a + 1][b + 1] + 1 if src[a] == tgt[b] else max(lcs[a + 1][b], lcs[a][b + 1])
    pairs = []
    a = b = 0
    while a < n and b < m:
        if src[a] == tgt[b]:
            pairs.append((a, b))
            a += 1
            b += 1
        elif lcs[a + 1][b] >= lcs[a][b + 1]:
            a += 1
        else:
            b += 1
    src_hit = {p[0] for p in pairs}
    tgt_hit = {p[1] for p in pairs}
    return TokenAlignment(pairs,
                          [i for i in range(n) if i not in src_hit],
                          [j for j in range(m) if j not in tgt_hit])


def injection_cutoff(duration: float, total_steps: int) -> int:
    # round half up; Python's round() is half-to-even
    return int(math.floor(duration * total_steps + 0.5))


def should_inject(attn_type: str, step_index: int, total_steps: int, config: InjectionConfig) -> bool:
    if not 0 <= step_index < total_steps:
        raise ValueError(f"step_index {step_index} outside [0, {total_steps})")
    return step_index < injection_cutoff(config.duration(attn_type), total_steps)


def inject_cross(src_map: torch.Tensor, tgt_map: torch.Tensor, alignment: TokenAlignment) -> torch.Tensor:
    """Copy source token columns into their aligned target positions.

    Columns of newly introduced target words keep the target values. When
    such columns exist the copied columns are rescaled so each row still sums
    to one.
    """
    if src_map.shape[:-1] != tgt_map.shape[:-1]:
        raise ValueError(f"cross map shapes differ: {tuple(src_map.shape)} vs {tuple(tgt_map.shape)}")
    L = tgt_map.shape[-1]
    for i, j in alignment.pairs:
        if not (0 <= i < src_map.shape[-1] and 0 <= j < L):
            raise ValueError(f"alignment pair {(i, j)} outside token range")
    if not alignment.pairs:
        return tgt_map.clone()
    src_idx = torch.tensor([p[0] for p in alignment.pairs])
    tgt_idx = torch.tensor([p[1] for p in alignment.pairs])
    out = tgt_map.clone()
    out[..., tgt_idx] = src_map[..., src_idx]
    if alignment.tgt_edit_indices:
        copied = out[..., tgt_idx].sum(dim=-1, keepdim=True)
        rest = out.sum(dim=-1, keepdim=True) - copied
        scale = (1.0 - rest).clamp(min=0.0) / copied.clamp(min=1e-30)
        out[..., tgt_idx] = out[..., tgt_idx] * scale
    return out


def inject_full(src_map: torch.Tensor, tgt_map: torch.Tensor) -> torch.Tensor:
    if src_map.shape != tgt_map.shape:
        raise ValueError(f"map shapes differ: {tuple(src_map.shape)} vs {tuple(tgt_map.shape)}")
    return src_map


class MissingRecordError(KeyError):
    pass


class AttentionController:
    """Stateful record/replay across the two branches of one edit session.

    Per sampler step the source branch runs first with
    :meth:`source_hooks`, storing its per-head maps; the edit branch then
    runs with :meth:`hooks`, which swaps in source maps while
    :func:`should_inject` holds. Head-averaged maps of both branches for the
    current step are exposed to mask computation via ``source_records`` and
    ``edit_records``.
    """

    def __init__(self, config: InjectionConfig, alignment: TokenAlignment, total_steps: int,
                 keep_history: bool = False):
        self.config = config
        self.alignment = alignment
        self.total_steps = total_steps
        self.keep_history = keep_history
        self.step = -1
        self._source: dict[str, torch.Tensor] = {}
        self.source_records: list[AttentionRecord] = []
        self.edit_records: list[AttentionRecord] = []
        self.history: list[AttentionRecord] = []
        self.calls = 0
        self.injections = 0

    def _begin(self, step_index: int) -> None:
        if step_index != self.step:
            self.step = step_index
            self._source = {}
            self.source_records = []
            self.edit_records = []

    def load_source(self, step_index: int, maps: dict[str, torch.Tensor]) -> None:
        """Provide source maps directly (per head) instead of recording them."""
        self._begin(step_index)
        self._source = dict(maps)

    def source_hooks(self, step_index: int):
        self._begin(step_index)

        def hook(layer_id: str, kind: str, probs: torch.Tensor) -> torch.Tensor:
            self._source[layer_id] = probs.detach()
            rec = AttentionRecord(layer_id, kind, step_index, probs.detach().mean(dim=1))
            self.source_records.append(rec)
            if self.keep_history:
                self.history.append(rec)
            return probs

        return hook

    def hooks(self, step_index: int):
        self._begin(step_index)

        def hook(layer_id: str, kind: str, probs: torch.Tensor) -> torch.Tensor:
            self.calls += 1
            if should_inject(kind, step_index, self.total_steps, self.config):
                if layer_id not in self._source:
                    raise MissingRecordError(f"no source map for layer {layer_id!r} at step {step_index}")
                src = self._source[layer_id]
                probs = inject_cross(src, probs, self.alignment) if kind == "cross" else inject_full(src, probs)
                self.injections += 1
            self.edit_records.append(AttentionRecord(layer_id, kind, step_index, probs.detach().mean(dim=1)))
            return probs

        return hook


def controller_run(source_records: dict[int, dict[str, torch.Tensor]], config: InjectionConfig,
                   alignment: TokenAlignment, total_steps: int):
    """Injection hook factory for replaying precomputed per-head source maps.

    ``source_records[step][layer_id]`` holds per-head maps. Returns an object
    with ``hooks(step_index)`` suitable for :func:`ddim_sample`.
    """
    ctrl = AttentionController(config, alignment, total_steps)

    class _Replay:
        controller = ctrl

        @staticmethod
        def hooks(step_index: int):
            ctrl.load_source(step_index, source_records.get(step_index, {}))
            return ctrl.hooks(step_index)

    return _Replay()
