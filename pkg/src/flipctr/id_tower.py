"""ID-based tower: shared embedding table (with a <MASK> row) and feature-interaction backbones."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch
from torch import nn

BACKBONES = ("dcnv2", "deepfm", "autoint")


@dataclass
class IdTowerSpec:
    kind: str = "dcnv2"
    emb_dim: int = 32
    dnn_sizes: List[int] = field(default_factory=lambda: [300, 300, 128])
    cross_depth: int = 3
    att_layers: int = 2
    att_heads: int = 2
    att_dim: int = 16

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.kind!r}; choose from {BACKBONES}")


def _xavier(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class MLP(nn.Sequential):
    def __init__(self, in_dim: int, sizes: Sequence[int]):
        layers = []
        for h in sizes:
            layers += [nn.Linear(in_dim, h), nn.ReLU()]
            in_dim = h
        super().__init__(*layers)
        self.out_dim = in_dim


class EmbeddingTable(nn.Module):
    """(M + 1) x D table; row M is the <MASK> feature shared by every field."""

    def __init__(self, M: int, dim: int):
        super().__init__()
        self.M = M
        self.weight = nn.Parameter(torch.empty(M + 1, dim).uniform_(-0.01, 0.01))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) > self.M):
            raise IndexError(f"feature id outside [0, {self.M}]")
        return self.weight[ids]


def dcnv2_cross(x0: torch.Tensor, xl: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """One DCNv2 cross layer: x0 * (W xl + b) + xl."""
    return x0 * (xl @ W.T + b) + xl


class CrossNetV2(nn.Module):
    def __init__(self, dim: int, depth: int):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(dim, dim) for _ in range(depth))

    def forward(self, x0: torch.Tensor) -> torch.Tensor:
        x = x0
        for lin in self.layers:
            x = dcnv2_cross(x0, x, lin.weight, lin.bias)
        return x


def fm_interaction(emb: torch.Tensor) -> torch.Tensor:
    """Pairwise FM term 0.5 * [(sum_f e_f)^2 - sum_f e_f^2], kept per embedding dim."""
    s = emb.sum(dim=1)
    return 0.5 * (s * s - (emb * emb).sum(dim=1))


class InteractingLayer(nn.Module):
    """AutoInt multi-head self-attention over fields with a residual projection."""

    def __init__(self, in_dim: int, att_dim: int, heads: int):
        super().__init__()
        self.heads, self.att_dim = heads, att_dim
        out = att_dim * heads
        self.q = nn.Linear(in_dim, out, bias=False)
        self.k = nn.Linear(in_dim, out, bias=False)
        self.v = nn.Linear(in_dim, out, bias=False)
        self.res = nn.Linear(in_dim, out, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, F, _ = x.shape

        def split(t):
            return t.view(B, F, self.heads, self.att_dim).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        att = torch.softmax(q @ k.transpose(-1, -2) / self.att_dim ** 0.5, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, F, -1)
        return torch.relu(out + self.res(x))


class IdTower(nn.Module):
    """h_ID: feature IDs (B x F) -> tabular representation v (B x d_tab)."""

    def __init__(self, M: int, num_fields: int, spec: IdTowerSpec):
        super().__init__()
        self.spec, self.M, self.num_fields = spec, M, num_fields
        D = spec.emb_dim
        flat = num_fields * D
        self.embedding = EmbeddingTable(M, D)
        self.dnn = MLP(flat, spec.dnn_sizes)
        if spec.kind == "dcnv2":
            self.cross = CrossNetV2(flat, spec.cross_depth)
            side = flat
        elif spec.kind == "deepfm":
            side = D
        else:
            dims = [D] + [spec.att_dim * spec.att_heads] * spec.att_layers
            self.interacting = nn.ModuleList(
                InteractingLayer(dims[i], spec.att_dim, spec.att_heads) for i in range(spec.att_layers))
            side = num_fields * dims[-1]
        self.d_tab = side + self.dnn.out_dim
        _xavier(self.dnn)
        for name in ("cross", "interacting"):
            if hasattr(self, name):
                _xavier(getattr(self, name))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        emb = self.embedding(ids)
        flat = emb.flatten(start_dim=1)
        deep = self.dnn(flat)
        if self.spec.kind == "dcnv2":
            side = self.cross(flat)
        elif self.spec.kind == "deepfm":
            side = fm_interaction(emb)
        else:
            x = emb
            for layer in self.interacting:
                x = layer(x)
            side = x.flatten(start_dim=1)
        return torch.cat([side, deep], dim=1)


def predict_id(v: torch.Tensor, head: nn.Linear) -> Tuple[torch.Tensor, torch.Tensor]:
    logit = head(v).squeeze(-1)
    return logit, torch.sigmoid(logit)
