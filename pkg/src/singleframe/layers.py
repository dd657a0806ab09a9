"""Pre-norm transformer building blocks shared by every encoder."""
from __future__ import annotations

import torch
import torch.nn as nn
from einops import rearrange

LN_EPS = 1e-6
INIT_STD = 0.02


class Attention(nn.Module):
    """Multi-head attention. With ``context`` given it is cross-attention (queries from x, keys/values from context)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim)
        self.to_kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None, key_mask=None, causal=False):
        context = x if context is None else context
        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.heads)
        k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in self.to_kv(context).chunk(2, dim=-1))
        dots = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        neg = torch.finfo(dots.dtype).min
        if key_mask is not None:
            dots = dots.masked_fill(~key_mask[:, None, None, :], neg)
        if causal:
            n, m = dots.shape[-2:]
            allowed = torch.ones(n, m, dtype=torch.bool, device=dots.device).tril()
            dots = dots.masked_fill(~allowed, neg)
        out = torch.matmul(dots.softmax(dim=-1), v)
        return self.proj(rearrange(out, "b h n d -> b n (h d)"))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.ffn = FeedForward(dim, dim * mlp_ratio)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), key_mask=mask)
        return x + self.ffn(self.norm2(x))


class FusionBlock(nn.Module):
    """Self-attention over text, cross-attention into visual tokens, then FFN."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim, eps=LN_EPS)
        self.ffn = FeedForward(dim, dim * mlp_ratio)

    def forward(self, x, context, text_mask=None, context_mask=None, causal=False):
        x = x + self.self_attn(self.norm1(x), key_mask=text_mask, causal=causal)
        x = x + self.cross_attn(self.norm2(x), context=context, key_mask=context_mask)
        return x + self.ffn(self.norm3(x))


def init_weights(module: nn.Module, generator: torch.Generator | None = None, std: float = INIT_STD) -> None:
    """Truncated-normal(std, cut at 2 std) for weights and embeddings, zero biases, identity layer norms."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
