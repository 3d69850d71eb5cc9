"""Multi-head scaled-dot-product self-attention with exportable weights."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn

from .corpus import Utterance


class AttentionOutput(NamedTuple):
    z: torch.Tensor        # (n, heads * head_dim)
    weights: torch.Tensor  # (heads, n, n), rows sum to 1


class AttentionRow(NamedTuple):
    i: int
    j: int
    token_i: str
    token_j: str
    weight: float


class MultiHeadSelfAttention(nn.Module):
    """Per-head ReLU affine projections to query/key/value, softmax over keys.

    Weights for head p: a_ijp = softmax_j(q_ip . k_jp / sqrt(head_dim)); the
    head outputs z_ip = sum_j a_ijp * v_jp concatenate into z_i.
    """

    def __init__(self, input_dim: int, heads: int = 4, head_dim: int | None = None):
        super().__init__()
        if heads < 1:
            raise ValueError("need at least one attention head")
        if head_dim is None:
            head_dim = math.ceil(input_dim / heads)
        self.input_dim = input_dim
        self.heads = heads
        self.head_dim = head_dim
        self.query = nn.Linear(input_dim, heads * head_dim)
        self.key = nn.Linear(input_dim, heads * head_dim)
        self.value = nn.Linear(input_dim, heads * head_dim)

    @property
    def output_dim(self) -> int:
        return self.heads * self.head_dim

    def forward(self, h: torch.Tensor, mask: torch.Tensor | None = None):
        """(B, T, input_dim) -> z (B, T, heads * head_dim), weights (B, heads, T, T)."""
        b, t, _ = h.shape
        q = torch.relu(self.query(h)).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = torch.relu(self.key(h)).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = torch.relu(self.value(h)).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask.view(b, 1, 1, t), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        z = torch.matmul(weights, v)  # (B, heads, T, head_dim)
        z = z.transpose(1, 2).contiguous().view(b, t, self.output_dim)
        if mask is not None:
            z = z * mask.unsqueeze(-1).to(z.dtype)
        return z, weights


def attend(h: torch.Tensor, attention: MultiHeadSelfAttention) -> AttentionOutput:
    """Apply self-attention to a single (n, input_dim) hidden sequence."""
    if h.dim() != 2 or h.shape[0] == 0:
        raise ValueError("h must be a non-empty (n, input_dim) tensor")
    z, weights = attention(h.unsqueeze(0))
    return AttentionOutput(z=z[0], weights=weights[0])


def export_attention(output: AttentionOutput, utterance: Utterance, head: int) -> list[AttentionRow]:
    """Token-pair weights of one head, sorted by weight descending."""
    heads, n, _ = output.weights.shape
    if not (0 <= head < heads):
        raise ValueError(f"head {head} out of range for {heads} heads")
    if n != len(utterance.tokens):
        raise ValueError(f"{n} attention rows for {len(utterance.tokens)} tokens")
    rows = []
    w = output.weights[head].detach().cpu()
    for i in range(n):
        for j in range(n):
            rows.append(
                AttentionRow(i=i, j=j, token_i=utterance.tokens[i], token_j=utterance.tokens[j], weight=float(w[i, j]))
            )
    rows.sort(key=lambda r: (-r.weight, r.i, r.j))
    return rows


def write_attention_csv(fh, output: AttentionOutput, utterance: Utterance, heads: Sequence[int] | None = None) -> None:
    """CSV with columns head,i,j,token_i,token_j,weight covering the given heads."""
    writer = csv.writer(fh)
    writer.writerow(["head", "i", "j", "token_i", "token_j", "weight"])
    head_list = range(output.weights.shape[0]) if heads is None else heads
    for head in head_list:
        for row in export_attention(output, utterance, head):
            writer.writerow([head, row.i, row.j, row.token_i, row.token_j, repr(row.weight)])


def read_attention_csv(fh) -> list[tuple[int, AttentionRow]]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header != ["head", "i", "j", "token_i", "token_j", "weight"]:
        raise ValueError("unexpected attention CSV header")
    out = []
    for rec in reader:
        head, i, j, tok_i, tok_j, weight = rec
        out.append((int(head), AttentionRow(int(i), int(j), tok_i, tok_j, float(weight))))
    return out
