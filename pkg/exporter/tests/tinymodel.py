"""Tiny two-block transformer-shaped model for exporter tests."""

import torch
from torch import nn


class Block(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)
        self.gate_proj = nn.Linear(d, 2 * d, bias=False)
        self.up_proj = nn.Linear(d, 2 * d, bias=False)
        self.down_proj = nn.Linear(2 * d, d, bias=False)

    def forward(self, x):
        a = self.o_proj(torch.tanh(self.q_proj(x) + self.k_proj(x)) * self.v_proj(x))
        x = x + a
        m = self.down_proj(torch.nn.functional.silu(self.gate_proj(x)) * self.up_proj(x))
        return x + m


class TinyLM(nn.Module):
    def __init__(self, vocab=32, d=8, n_blocks=2):
        super().__init__()
        self.embed_tokens = nn.Embedding(vocab, d)
        self.blocks = nn.ModuleList(Block(d) for _ in range(n_blocks))
        self.lm_head = nn.Linear(d, vocab, bias=False)

    def forward(self, ids):
        h = self.embed_tokens(ids)
        for block in self.blocks:
            h = block(h)
        return self.lm_head(h)


def build() -> TinyLM:
    torch.manual_seed(0)
    return TinyLM()
