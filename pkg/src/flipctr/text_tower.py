"""Compact pre-norm transformer encoder standing in for the PLM."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .textualize import DEFAULT_L_MAX, PAD_ID


@dataclass
class EncoderSpec:
    V: int = 30000
    D_text: int = 128
    n_layers: int = 2
    n_heads: int = 4
    L_max: int = DEFAULT_L_MAX
    dropout: float = 0.0

    def __post_init__(self):
        if self.D_text % self.n_heads:
            raise ValueError(f"D_text={self.D_text} not divisible by n_heads={self.n_heads}")


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.last_probs: torch.Tensor | None = None
        self.keep_probs = False

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // self.heads)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        if self.keep_probs:
            self.last_probs = probs.detach()
        out = (self.drop(probs) @ v).transpose(1, 2).reshape(B, L, D)
        return self.out(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask):
        x = x + self.drop(self.attn(self.ln1(x), key_mask))
        return x + self.drop(self.ff(self.ln2(x)))


class TextTower(nn.Module):
    """h_PLM: token IDs (B x L) -> last-layer states w (B x L x D_text); w[:, 0] is [CLS]."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.d_text = spec.D_text
        self.tok = nn.Embedding(spec.V, spec.D_text, padding_idx=PAD_ID)
        self.pos = nn.Embedding(spec.L_max, spec.D_text)
        nn.init.normal_(self.tok.weight, std=0.02)
        nn.init.normal_(self.pos.weight, std=0.02)
        with torch.no_grad():
            self.tok.weight[PAD_ID].zero_()
        self.blocks = nn.ModuleList(Block(spec.D_text, spec.n_heads, spec.dropout) for _ in range(spec.n_layers))
        self.ln_f = nn.LayerNorm(spec.D_text)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        L = tokens.shape[1]
        return self.tok(tokens) + self.pos(torch.arange(L, device=tokens.device))[None]

    def forward(self, tokens: torch.Tensor, attention_mask: torch.Tensor | None = None,
                inputs_embeds: torch.Tensor | None = None) -> torch.Tensor:
        if tokens.shape[1] > self.spec.L_max:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds L_max={self.spec.L_max}")
        if attention_mask is None:
            attention_mask = tokens != PAD_ID
        x = self.embed(tokens) if inputs_embeds is None else inputs_embeds
        for blk in self.blocks:
            x = blk(x, attention_mask)
        x = self.ln_f(x)
        return x * attention_mask[..., None].to(x.dtype)

    def attention_probes(self, on: bool = True) -> None:
        for blk in self.blocks:
            blk.attn.keep_probs = on
            if not on:
                blk.attn.last_probs = None
