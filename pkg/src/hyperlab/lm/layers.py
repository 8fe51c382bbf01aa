"""Pre-LN transformer decoder blocks shared by the target model and the draft head."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def causal_mask(n: int, device=None) -> torch.Tensor:
    """Boolean [n, n] mask, True where attention is allowed."""
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


def attend(q, k, v, mask):
    """Masked softmax attention. q: [B,H,Sq,dh], k/v: [B,H,Sk,dh], mask True = keep."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, t):
        B, S, D = t.shape
        return t.view(B, S, self.heads, D // self.heads).transpose(1, 2)

    def forward(self, x, mask=None, extra_kv=None):
        """Returns (output, (k, v)) where k/v cover only ``x``'s own positions.

        ``extra_kv`` are cached keys/values prepended to this call's keys; the
        mask then spans [cached + own] key positions.
        """
        B, S, D = x.shape
        q, k, v = (self._split(t) for t in self.qkv(x).chunk(3, dim=-1))
        keys, vals = k, v
        if extra_kv is not None:
            keys = torch.cat([extra_kv[0], k], dim=2)
            vals = torch.cat([extra_kv[1], v], dim=2)
        if mask is None:
            mask = causal_mask(S, x.device)
        out = attend(q, keys, vals, mask)
        out = out.transpose(1, 2).reshape(B, S, D)
        return self.proj(out), (k, v)


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.fc_in = nn.Linear(dim, mlp_ratio * dim)
        self.fc_out = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x, mask=None, extra_kv=None, return_kv: bool = False):
        a, kv = self.attn(self.ln1(x), mask, extra_kv)
        x = x + a
        x = x + self.fc_out(F.gelu(self.fc_in(self.ln2(x))))
        return (x, kv) if return_kv else x

    def zero_output_projections(self) -> None:
        """With both output projections at zero the block is the identity map."""
        for lin in (self.attn.proj, self.fc_out):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
