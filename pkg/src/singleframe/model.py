"""Vision encoder, language encoder, multi-modal encoder and the heads on top of them."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
from einops import rearrange

from .config import ModelConfig
from .errors import ConfigError, InputError
from .layers import LN_EPS, INIT_STD, EncoderBlock, FusionBlock, init_weights
from .tokenizer import TokenSequence

TAU_MIN, TAU_MAX = 0.01, 1.0
PROJ_EPS = 1e-12


@dataclass
class EncodedSequence:
    states: torch.Tensor  # (B, L, D)
    mask: torch.Tensor  # (B, L) bool, True = valid
    pooled: torch.Tensor  # (B, D)

    @property
    def batch_size(self) -> int:
        return self.states.shape[0]

    def select(self, index) -> "EncodedSequence":
        return EncodedSequence(self.states[index], self.mask[index], self.pooled[index])


@dataclass
class FusedOutput:
    states: torch.Tensor  # (B, L_l, D)
    match_logit: torch.Tensor  # (B,)


class VisionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.patch_embed = nn.Linear(cfg.patch_size * cfg.patch_size * cfg.channels, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.vision_len, d))
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.vision_layers))
        self.norm = nn.LayerNorm(d, eps=LN_EPS)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: (B, H, W, C)
        p = self.cfg.patch_size
        patches = rearrange(frames, "b (h p1) (w p2) c -> b (h w) (p1 p2 c)", p1=p, p2=p)
        x = self.patch_embed(patches)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.tok_embed = nn.Embedding(cfg.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_text_len, d))
        self.blocks = nn.ModuleList(EncoderBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.text_layers))
        self.norm = nn.LayerNorm(d, eps=LN_EPS)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_embed(ids) + self.pos_embed[:, : ids.shape[1]]

    def forward(self, ids, mask):
        x = self.embed(ids)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)


class MultimodalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.blocks = nn.ModuleList(FusionBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.multimodal_layers))
        self.norm = nn.LayerNorm(d, eps=LN_EPS)

    def forward(self, x, context, text_mask=None, context_mask=None, causal=False):
        for blk in self.blocks:
            x = blk(x, context, text_mask, context_mask, causal)
        return self.norm(x)


class MLMHead(nn.Module):
    def __init__(self, dim: int, vocab_size: int):
        super().__init__()
        self.dense = nn.Linear(dim, dim)
        self.act = nn.GELU()
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.decoder = nn.Linear(dim, vocab_size)

    def forward(self, x):
        return self.decoder(self.norm(self.act(self.dense(x))))


class VideoTextModel(nn.Module):
    """Single-frame video-language model.

    ``temporal`` and ``decoder`` are optional submodules attached by
    :func:`singleframe.temporal.attach_temporal` and :func:`singleframe.qa.attach_decoder`.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.vision = VisionEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.fusion = MultimodalEncoder(cfg)
        self.vision_proj = nn.Linear(d, cfg.proj_dim, bias=False)
        self.text_proj = nn.Linear(d, cfg.proj_dim, bias=False)
        self.match_head = nn.Linear(d, 1)
        self.mlm_head = MLMHead(d, cfg.vocab_size)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.temperature_init)))
        self.temporal = None
        self.decoder = None

        g = torch.Generator().manual_seed(seed)
        init_weights(self, g)
        for p in (self.vision.cls_token, self.vision.pos_embed, self.text.pos_embed):
            nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=g)

    @property
    def dtype(self):
        return self.log_tau.dtype

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)

    def encode_frame(self, frames: torch.Tensor) -> EncodedSequence:
        """Encode (H, W, C) or (B, H, W, C) frames into (B, L_v, D) states; pooled = CLS."""
        cfg = self.cfg
        if frames.dim() == 3:
            frames = frames.unsqueeze(0)
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if frames.dim() != 4 or tuple(frames.shape[1:]) != expected:
            raise ConfigError(f"frame shape {tuple(frames.shape)} does not match config {expected}")
        states = self.vision(frames.to(self.dtype))
        mask = torch.ones(states.shape[:2], dtype=torch.bool, device=states.device)
        return EncodedSequence(states, mask, states[:, 0])

    def encode_text(self, tokens: TokenSequence) -> EncodedSequence:
        ids, mask = tokens.ids, tokens.mask
        if ids.dim() == 1:
            ids, mask = ids.unsqueeze(0), mask.unsqueeze(0)
        if ids.shape[1] > self.cfg.max_text_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_text_len {self.cfg.max_text_len}")
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise InputError("token id out of vocabulary range")
        mask = mask.bool()
        # right padding only: once False, stays False
        if (mask[:, 1:] & ~mask[:, :-1]).any():
            raise InputError("token mask must be a prefix of valid positions")
        states = self.text(ids, mask)
        return EncodedSequence(states, mask, states[:, 0])

    def multimodal_fuse(self, text: EncodedSequence, visual: EncodedSequence) -> FusedOutput:
        """Text is the query side of every layer; visual tokens only enter as cross-attention keys/values."""
        if visual.states.shape[1] == 0:
            raise InputError("visual input has zero tokens")
        if text.states.shape[-1] != visual.states.shape[-1]:
            raise ConfigError("text and visual hidden sizes differ")
        if text.states.shape[0] != visual.states.shape[0]:
            raise ConfigError("text and visual batch sizes differ")
        states = self.fusion(text.states, visual.states, text.mask, visual.mask)
        return FusedOutput(states, self.match_head(states[:, 0]).squeeze(-1))

    def project_pool(self, seq: EncodedSequence, head: str) -> torch.Tensor:
        """CLS pooling, bias-free linear map, L2 normalisation (eps added to the denominator)."""
        if head == "vision":
            z = self.vision_proj(seq.pooled)
        elif head == "text":
            z = self.text_proj(seq.pooled)
        else:
            raise ValueError(f"unknown projection head {head!r}")
        return z / (z.norm(dim=-1, keepdim=True) + PROJ_EPS)

    def mlm_logits(self, fused_states: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(fused_states)


def concat_frames(encodings: list[EncodedSequence]) -> EncodedSequence:
    """Concatenate per-frame encodings along the token axis ((T*L_v) x D)."""
    if not encodings:
        raise InputError("no frame encodings given")
    dims = {e.states.shape[-1] for e in encodings}
    if len(dims) != 1:
        raise ConfigError("frame encodings have different hidden sizes")
    states = torch.cat([e.states for e in encodings], dim=1)
    mask = torch.cat([e.mask for e in encodings], dim=1)
    pooled = torch.stack([e.pooled for e in encodings], dim=1).mean(dim=1)
    return EncodedSequence(states, mask, pooled)
