"""Building blocks shared by the object generator and the blending network."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def positional_encode(x: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """sin/cos features at frequencies 2^l * pi, l < n_freqs, per input scalar.

    Layout is dimension-major, frequency-minor, with sin and cos interleaved:
    (sin f0 x0, cos f0 x0, sin f1 x0, cos f1 x0, ..., sin f0 x1, ...).
    Output width is 2 * n_freqs * x.shape[-1].
    """
    scales = 2.0 ** torch.arange(n_freqs, dtype=x.dtype, device=x.device)
    # 2^l * x is exact and so is its remainder mod 2, so the phase keeps full precision at
    # high frequencies and the encoding has period 2 exactly
    ang = torch.remainder(x.unsqueeze(-1) * scales, 2.0) * math.pi  # (..., d, L)
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., d, L, 2)
    return out.flatten(start_dim=-3)


class PartEncoder(nn.Module):
    """label embedding + per-dimension positional encodings -> embed_dim.

    Continuous attributes are expected in [-1, 1]; they are halved before the
    encoding so that the whole range sits inside one period (the encoding of
    p and p + 2 coincide).
    """

    def __init__(self, n_labels: int, embed_dim: int = 64, n_freqs: int = 32, concat_dim: int = 512):
        super().__init__()
        self.n_freqs = n_freqs
        self.label_embedding = nn.Embedding(n_labels, embed_dim)
        width = embed_dim + 2 * n_freqs * (3 + 3 + 6)
        self.to_concat = nn.Linear(width, concat_dim)
        self.out = nn.Linear(concat_dim, embed_dim)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return positional_encode(0.5 * x, self.n_freqs)

    def forward(self, labels: torch.Tensor, translation: torch.Tensor, rotation: torch.Tensor,
                size: torch.Tensor) -> torch.Tensor:
        h = torch.cat(
            [self.label_embedding(labels), self.encode(size), self.encode(translation), self.encode(rotation)],
            dim=-1,
        )
        return self.out(self.to_concat(h))


class MultiHeadAttention(nn.Module):
    """Attention with a query/key/value width independent of the model width."""

    def __init__(self, dim: int, n_heads: int, qkv_dim: int):
        super().__init__()
        if qkv_dim % n_heads:
            raise ValueError(f"qkv_dim {qkv_dim} must be divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = qkv_dim // n_heads
        self.q = nn.Linear(dim, qkv_dim)
        self.k = nn.Linear(dim, qkv_dim)
        self.v = nn.Linear(dim, qkv_dim)
        self.o = nn.Linear(qkv_dim, dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, Q, dim), ctx: (B, S, dim), key_mask: (B, S) True for valid keys."""
        B, Q, _ = x.shape
        S = ctx.shape[1]
        q = self.q(x).view(B, Q, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k(ctx).view(B, S, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v(ctx).view(B, S, self.n_heads, self.head_dim).transpose(1, 2)
        att = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, Q, -1)
        return self.o(y)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Post-norm self-attention block (no positional encoding anywhere)."""

    def __init__(self, dim, n_heads, qkv_dim, mlp_dim):
        super().__init__()
        self.attn = MultiHeadAttention(dim, n_heads, qkv_dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mlp_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, mask=None):
        x = self.norm1(x + self.attn(x, x, mask))
        return self.norm2(x + self.ff(x))


class CrossAttentionLayer(nn.Module):
    """Queries attend to a context only; queries never see each other."""

    def __init__(self, dim, n_heads, qkv_dim, mlp_dim):
        super().__init__()
        self.attn = MultiHeadAttention(dim, n_heads, qkv_dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mlp_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, ctx, ctx_mask=None):
        x = self.norm1(x + self.attn(x, ctx, ctx_mask))
        return self.norm2(x + self.ff(x))


class MLP(nn.Module):
    """Two-layer ReLU MLP used by the attribute heads."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.net(x)
