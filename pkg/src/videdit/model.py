"""Toy text-conditioned noise predictor and its video inflation.

The same :class:`UNet` class serves both roles. With ``video=False`` the
batch axis holds independent images and the attention layers are ordinary
self/cross attention. :func:`inflate` builds the ``video=True`` variant in
which the batch axis holds the frames of one clip, every convolution is a
1x3x3 (or 1x1x1) 3D convolution, self-attention becomes sparse
spatio-temporal attention over the first and previous frames, and a
zero-initialised temporal attention layer is appended to each transformer
block.

Attention probabilities can be observed and replaced through a ``hooks``
callable, ``hooks(layer_id, kind, probs) -> probs``, with ``probs`` of shape

* cross:    (F, heads, HW, L)
* st:       (F, heads, HW, 2HW)
* self:     (B, heads, HW, HW)    (2D model only)
* temporal: (HW, heads, F, F)
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .data import Vocab
from .errors import NumericalError

Hooks = Callable[[str, str, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    base_channels: int = 16
    mid_channels: int = 32
    heads: int = 2
    d_text: int = 32
    max_len: int = 8
    time_dim: int = 64
    groups: int = 8
    vocab_size: int = 25
    # tie the self/ST attention key projection to the query projection so the
    # attention scores are a feature-similarity kernel
    shared_qk: bool = True

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TextEmbedding:
    token_ids: torch.Tensor  # (L,) int64
    embeddings: torch.Tensor  # (L, d_text)
    null_flag: bool = False
    pad_id: int = 0

    @property
    def key_mask(self) -> torch.Tensor:
        """Positions visible to cross-attention.

        Padding is hidden for real prompts. The null embedding is a free
        context (it is what null-text optimisation tunes), so all of its
        positions stay visible.
        """
        if self.null_flag:
            return torch.ones_like(self.token_ids, dtype=torch.bool)
        return self.token_ids != self.pad_id

    def with_embeddings(self, emb: torch.Tensor) -> "TextEmbedding":
        return TextEmbedding(self.token_ids, emb, self.null_flag, self.pad_id)

    def detach(self) -> "TextEmbedding":
        return self.with_embeddings(self.embeddings.detach().clone())


@dataclass
class AttentionRecord:
    layer_id: str
    attn_type: str
    step_index: int
    map: torch.Tensor  # head-averaged


class Recorder:
    """Hook that keeps a head-averaged copy of every attention map."""

    def __init__(self, step_index: int = 0, inner: Optional[Hooks] = None):
        self.step_index = step_index
        self.inner = inner
        self.records: list[AttentionRecord] = []

    def __call__(self, layer_id: str, kind: str, probs: torch.Tensor) -> torch.Tensor:
        if self.inner is not None:
            probs = self.inner(layer_id, kind, probs)
        self.records.append(AttentionRecord(layer_id, kind, self.step_index,
                                            probs.detach().mean(dim=1)))
        return probs


def _attend(q, k, v, heads: int, mask=None):
    """Multi-head attention; q (B, Nq, D), k/v (B, Nk, D). Returns out, probs."""
    B, Nq, D = q.shape
    Nk = k.shape[1]
    dh = D // heads
    if dh == 0:
        raise ValueError("attention head dimension is zero")
    q = q.reshape(B, Nq, heads, dh).transpose(1, 2)
    k = k.reshape(B, Nk, heads, dh).transpose(1, 2)
    v = v.reshape(B, Nk, heads, dh).transpose(1, 2)
    logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
    return logits.softmax(dim=-1), v


def _merge(probs, v):
    out = probs @ v  # (B, heads, Nq, dh)
    B, h, Nq, dh = out.shape
    return out.transpose(1, 2).reshape(B, Nq, h * dh)


class SelfAttention(nn.Module):
    """Spatial self-attention; in video mode it attends to frames 1 and f-1."""

    def __init__(self, dim: int, heads: int, layer_id: str, video: bool = False,
                 shared_qk: bool = False):
        super().__init__()
        self.heads, self.layer_id, self.video = heads, layer_id, video
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = self.to_q if shared_qk else nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    @property
    def kind(self) -> str:
        return "st" if self.video else "self"

    def forward(self, x, hooks: Optional[Hooks] = None):
        q, k, v = self.to_q(x), self.to_k(x), self.to_v(x)
        if self.video:
            k, v = sparse_keys(k), sparse_keys(v)
        probs, vh = _attend(q, k, v, self.heads)
        if hooks is not None:
            probs = hooks(self.layer_id, self.kind, probs)
        return self.to_out(_merge(probs, vh))


def sparse_keys(k: torch.Tensor) -> torch.Tensor:
    """(F, N, D) -> (F, 2N, D) holding [frame 1; frame f-1] for each frame f.

    Frame 1 has no predecessor and uses itself twice.
    """
    nf = k.shape[0]
    prev = torch.clamp(torch.arange(nf) - 1, min=0)
    first = k[:1].expand(nf, -1, -1)
    return torch.cat([first, k[prev]], dim=1)


def st_attention(z_f, z_1, z_prev, to_q, to_k, to_v, heads: int = 1):
    """Single-frame sparse ST attention on token matrices (HW, dim).

    Returns (output before the output projection, head-averaged map HW x 2HW).
    """
    q = to_q(z_f)[None]
    keys = torch.cat([z_1, z_prev], dim=0)
    probs, v = _attend(q, to_k(keys)[None], to_v(keys)[None], heads)
    return _merge(probs, v)[0], probs[0].mean(dim=0)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, d_text: int, heads: int, layer_id: str):
        super().__init__()
        self.heads, self.layer_id = heads, layer_id
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(d_text, dim, bias=False)
        self.to_v = nn.Linear(d_text, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, ctx, ctx_mask, hooks: Optional[Hooks] = None):
        B = x.shape[0]
        k = self.to_k(ctx).expand(B, -1, -1) if ctx.shape[0] == 1 else self.to_k(ctx)
        v = self.to_v(ctx).expand(B, -1, -1) if ctx.shape[0] == 1 else self.to_v(ctx)
        mask = ctx_mask.expand(B, -1) if ctx_mask.shape[0] == 1 else ctx_mask
        probs, vh = _attend(self.to_q(x), k, v, self.heads, mask)
        if hooks is not None:
            probs = hooks(self.layer_id, "cross", probs)
        return self.to_out(_merge(probs, vh))


class TemporalAttention(nn.Module):
    """Attention across frames at each spatial location, with residual.

    The output projection starts at zero, so a fresh layer is the identity.
    """

    def __init__(self, dim: int, heads: int, layer_id: str):
        super().__init__()
        self.heads, self.layer_id = heads, layer_id
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def forward(self, x, hooks: Optional[Hooks] = None):
        # x: (F, N, D) -> per-location sequences (N, F, D)
        h = self.norm(x).transpose(0, 1)
        probs, vh = _attend(self.to_q(h), self.to_k(h), self.to_v(h), self.heads)
        if hooks is not None:
            probs = hooks(self.layer_id, "temporal", probs)
        return x + self.to_out(_merge(probs, vh)).transpose(0, 1)


def temporal_attention(z: torch.Tensor, module: TemporalAttention, hooks=None) -> torch.Tensor:
    """Apply ``module`` to a clip laid out as (F, C, H, W)."""
    nf, c, hgt, wid = z.shape
    tokens = z.reshape(nf, c, hgt * wid).transpose(1, 2)
    out = module(tokens, hooks)
    return out.transpose(1, 2).reshape(nf, c, hgt, wid)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, d_text: int, heads: int, name: str, video: bool,
                 shared_qk: bool = False):
        super().__init__()
        self.norm_in = nn.GroupNorm(8, dim)
        self.proj_in = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = SelfAttention(dim, heads, f"{name}.st" if video else f"{name}.self", video,
                                   shared_qk)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = CrossAttention(dim, d_text, heads, f"{name}.cross")
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.attn_temp = TemporalAttention(dim, heads, f"{name}.temporal") if video else None
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, x, ctx, ctx_mask, hooks=None):
        B, C, H, W = x.shape
        h = self.norm_in(x).reshape(B, C, H * W).transpose(1, 2)
        h = self.proj_in(h)
        h = h + self.attn1(self.norm1(h), hooks)
        h = h + self.attn2(self.norm2(h), ctx, ctx_mask, hooks)
        h = h + self.ff(self.norm3(h))
        if self.attn_temp is not None:
            h = self.attn_temp(h, hooks)
        h = self.proj_out(h)
        return x + h.transpose(1, 2).reshape(B, C, H, W)


class InflatedConv(nn.Module):
    """k x k conv lifted to a 1 x k x k 3D conv; frames stay on the batch axis."""

    def __init__(self, weight: torch.Tensor, bias: Optional[torch.Tensor], stride: int, padding: int):
        super().__init__()
        self.weight = nn.Parameter(weight.detach().clone().unsqueeze(2))
        self.bias = None if bias is None else nn.Parameter(bias.detach().clone())
        self.stride, self.padding = stride, padding

    def forward(self, x):
        y = F.conv3d(x.transpose(0, 1)[None], self.weight, self.bias,
                     stride=(1, self.stride, self.stride), padding=(0, self.padding, self.padding))
        return y[0].transpose(0, 1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TextEncoder(nn.Module):
    def __init__(self, vocab: Vocab, d_text: int, max_len: int):
        super().__init__()
        self.vocab, self.max_len = vocab, max_len
        self.tok = nn.Embedding(len(vocab), d_text)
        self.pos = nn.Parameter(torch.randn(max_len, d_text) * 0.1)

    def ids(self, prompt: str) -> torch.Tensor:
        return torch.tensor(self.vocab.tokenize(prompt, self.max_len), dtype=torch.long)

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok(ids) + self.pos

    def encode(self, prompt: str) -> TextEmbedding:
        ids = self.ids(prompt)
        return TextEmbedding(ids, self.embed_ids(ids), null_flag=prompt.strip() == "",
                             pad_id=self.vocab.pad_id)


class UNet(nn.Module):
    """Two-level UNet: 16x16 conv stage, 8x8 stage with two transformer blocks."""

    def __init__(self, config: ModelConfig = ModelConfig(), vocab: Optional[Vocab] = None,
                 video: bool = False):
        super().__init__()
        vocab = vocab or Vocab.default()
        if len(vocab) != config.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} words, config expects {config.vocab_size}")
        c0, c1, g = config.base_channels, config.mid_channels, config.groups
        temb = 2 * config.time_dim
        self.config, self.video = config, video
        self.text = TextEncoder(vocab, config.d_text, config.max_len)
        self.time_mlp = nn.Sequential(nn.Linear(config.time_dim, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(config.in_channels, c0, 3, padding=1)
        self.res_in = ResBlock(c0, c0, temb, g)
        self.down = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.res_down = ResBlock(c1, c1, temb, g)
        self.attn_down = TransformerBlock(c1, config.d_text, config.heads, "down", video,
                                          config.shared_qk)
        self.res_mid = ResBlock(c1, c1, temb, g)
        self.attn_up = TransformerBlock(c1, config.d_text, config.heads, "up", video,
                                        config.shared_qk)
        self.up = Upsample(c1, c0)
        self.res_out = ResBlock(2 * c0, c0, temb, g)
        self.norm_out = nn.GroupNorm(g, c0)
        self.conv_out = nn.Conv2d(c0, config.in_channels, 3, padding=1)

    # -- text -----------------------------------------------------------
    def encode_text(self, prompt: str) -> TextEmbedding:
        return self.text.encode(prompt)

    def attention_layers(self) -> dict[str, nn.Module]:
        out = {}
        for blk in (self.attn_down, self.attn_up):
            out[blk.attn1.layer_id] = blk.attn1
            out[blk.attn2.layer_id] = blk.attn2
            if blk.attn_temp is not None:
                out[blk.attn_temp.layer_id] = blk.attn_temp
        return out

    # -- forward --------------------------------------------------------
    def forward(self, z: torch.Tensor, t, text: TextEmbedding, hooks: Optional[Hooks] = None):
        """Noise prediction for one clip (video mode) or one batch of images
        sharing a prompt (image mode). ``z`` is (B, C, H, W)."""
        ctx = text.embeddings[None]
        mask = text.key_mask[None]
        return self.forward_batch(z, t, ctx, mask, hooks)

    def forward_batch(self, z, t, ctx, ctx_mask, hooks: Optional[Hooks] = None):
        B = z.shape[0]
        t = torch.as_tensor(t, dtype=torch.float64)
        if t.ndim == 0:
            t = t.expand(B)
        emb = self.time_mlp(timestep_embedding(t, self.config.time_dim).to(z.dtype))
        h0 = self.res_in(self.conv_in(z), emb)
        h = self.res_down(self.down(h0), emb)
        h = self.attn_down(h, ctx, ctx_mask, hooks)
        h = self.res_mid(h, emb)
        h = self.attn_up(h, ctx, ctx_mask, hooks)
        h = self.up(h)
        h = self.res_out(torch.cat([h, h0], dim=1), emb)
        out = self.conv_out(F.silu(self.norm_out(h)))
        if not torch.isfinite(out).all():
            raise NumericalError(_first_nonfinite_layer(self, z, t, ctx, ctx_mask), phase="forward")
        return out


def _first_nonfinite_layer(model: UNet, z, t, ctx, mask) -> str:
    bad = []

    def probe(name):
        def fn(_m, _i, out):
            if not bad and isinstance(out, torch.Tensor) and not torch.isfinite(out).all():
                bad.append(name)
        return fn

    handles = [m.register_forward_hook(probe(n)) for n, m in model.named_modules() if n]
    try:
        with torch.no_grad():
            emb = model.time_mlp(timestep_embedding(t, model.config.time_dim).to(z.dtype))
            h0 = model.res_in(model.conv_in(z), emb)
            h = model.attn_down(model.res_down(model.down(h0), emb), ctx, mask)
            h = model.attn_up(model.res_mid(h, emb), ctx, mask)
            h = model.res_out(torch.cat([model.up(h), h0], dim=1), emb)
            model.conv_out(F.silu(model.norm_out(h)))
    finally:
        for hd in handles:
            hd.remove()
    return f"non-finite output at layer {bad[0] if bad else '?'}"


def forward2d(model: UNet, z: torch.Tensor, t, text: TextEmbedding) -> torch.Tensor:
    """Single image (C, H, W) through the 2D model."""
    if model.video:
        raise ValueError("forward2d needs the image model")
    return model(z[None], t, text)[0]


def forward3d(model: UNet, z: torch.Tensor, t, text: TextEmbedding, record: bool = False,
              hooks: Optional[Hooks] = None, step_index: int = 0):
    """Clip (F, C, H, W) through the inflated model; returns (eps, records)."""
    if not model.video:
        raise ValueError("forward3d needs the inflated model")
    if z.ndim != 4 or z.shape[0] < 1:
        raise ValueError(f"expected (F, C, H, W) with F >= 1, got {tuple(z.shape)}")
    if not record:
        return model(z, t, text, hooks), []
    rec = Recorder(step_index, hooks)
    return model(z, t, text, rec), rec.records


def _inflate_convs(module: nn.Module) -> None:
    for name, child in list(module.named_children()):
        if isinstance(child, nn.Conv2d):
            setattr(module, name, InflatedConv(child.weight, child.bias, child.stride[0], child.padding[0]))
        elif isinstance(child, InflatedConv):
            continue
        else:
            _inflate_convs(child)


def inflate(model2d: UNet, seed: int = 0) -> UNet:
    """Build the video model from trained image weights.

    Convolution kernels gain a temporal axis of extent 1 with identical
    values, self-attention projections are reused by the sparse ST
    attention, and new temporal attention layers start as the identity.
    Their remaining projections are drawn from ``seed`` in float32, not the global RNG.
    """
    if model2d.video:
        raise ValueError("model is already inflated")
    known = (UNet, TextEncoder, nn.Sequential, nn.Linear, nn.SiLU, nn.GELU, nn.Conv2d,
             nn.GroupNorm, nn.LayerNorm, nn.Embedding, ResBlock, Upsample, TransformerBlock,
             SelfAttention, CrossAttention)
    for name, m in model2d.named_modules():
        if not isinstance(m, known):
            raise TypeError(f"cannot inflate layer {name!r} of kind {type(m).__name__}")
    prev = torch.get_default_dtype()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        torch.set_default_dtype(torch.float32)  # init draws must not depend on the caller's default
        try:
            model3d = UNet(model2d.config, model2d.text.vocab, video=True)
        finally:
            torch.set_default_dtype(prev)
    dtype = next(model2d.parameters()).dtype
    model3d.to(dtype)
    src = model2d.state_dict()
    missing, unexpected = model3d.load_state_dict(src, strict=False)
    if unexpected or any(".attn_temp." not in k for k in missing):
        raise RuntimeError(f"inflation mismatch: missing={missing}, unexpected={unexpected}")
    _inflate_convs(model3d)
    return model3d


def trainable_attention_names(model: UNet) -> list[str]:
    """Parameters of the cross, ST and temporal attention layers."""
    keys = (".attn1.", ".attn2.", ".attn_temp.")
    return [n for n, _ in model.named_parameters() if any(k in n for k in keys)]


def parameter_digest(model: nn.Module, names=None) -> str:
    h = hashlib.sha256()
    for n, p in model.named_parameters():
        if names is None or n in names:
            h.update(n.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
