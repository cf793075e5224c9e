"""A tiny pre-LN decoder-only transformer with read/write hooks.

Parameter names follow the TransformerLens layout so per-head weights are
separate slices (``W_Q[h]``, ``W_O[h]``) and a single head can be trained,
captured, or ablated without touching its neighbours.

Hooks act at one position per prompt (the final prompt token) and at one of
two site kinds:

* ``resid``: the residual stream after block ``layer``;
* ``head``: the contribution of head ``h`` in block ``layer`` (its output
  after ``W_O``, before the output bias), a ``d_model`` vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

# (layer, component) where component is "resid" or a head index.
SiteKey = tuple[int, "str | int"]
PatchFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class Dims:
    vocab_size: int
    layers: int
    heads: int
    d_model: int
    n_ctx: int

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def d_mlp(self) -> int:
        return 4 * self.d_model


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.w = nn.Parameter(torch.ones(d))
        self.b = nn.Parameter(torch.zeros(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, (x.shape[-1],), self.w, self.b, eps=1e-5)


class Attention(nn.Module):
    def __init__(self, dims: Dims):
        super().__init__()
        H, D, dh = dims.heads, dims.d_model, dims.d_head
        self.W_Q = nn.Parameter(torch.empty(H, D, dh))
        self.W_K = nn.Parameter(torch.empty(H, D, dh))
        self.W_V = nn.Parameter(torch.empty(H, D, dh))
        self.W_O = nn.Parameter(torch.empty(H, dh, D))
        self.b_Q = nn.Parameter(torch.zeros(H, dh))
        self.b_K = nn.Parameter(torch.zeros(H, dh))
        self.b_V = nn.Parameter(torch.zeros(H, dh))
        self.b_O = nn.Parameter(torch.zeros(D))
        self.register_buffer(
            "mask", torch.tril(torch.ones(dims.n_ctx, dims.n_ctx, dtype=torch.bool)), persistent=False
        )
        self.scale = 1.0 / math.sqrt(dh)

    def head_results(self, x: torch.Tensor) -> torch.Tensor:
        """Per-head contributions, shape (batch, pos, head, d_model)."""
        q = torch.einsum("bpd,hde->bphe", x, self.W_Q) + self.b_Q
        k = torch.einsum("bpd,hde->bphe", x, self.W_K) + self.b_K
        v = torch.einsum("bpd,hde->bphe", x, self.W_V) + self.b_V
        scores = torch.einsum("bqhe,bkhe->bhqk", q, k) * self.scale
        T = x.shape[1]
        scores = scores.masked_fill(~self.mask[:T, :T], float("-inf"))
        pattern = scores.softmax(dim=-1)
        z = torch.einsum("bhqk,bkhe->bqhe", pattern, v)
        return torch.einsum("bqhe,hed->bqhd", z, self.W_O)


class MLP(nn.Module):
    def __init__(self, dims: Dims):
        super().__init__()
        self.W_in = nn.Parameter(torch.empty(dims.d_model, dims.d_mlp))
        self.b_in = nn.Parameter(torch.zeros(dims.d_mlp))
        self.W_out = nn.Parameter(torch.empty(dims.d_mlp, dims.d_model))
        self.b_out = nn.Parameter(torch.zeros(dims.d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(x @ self.W_in + self.b_in) @ self.W_out + self.b_out


class Block(nn.Module):
    def __init__(self, dims: Dims):
        super().__init__()
        self.ln1 = LayerNorm(dims.d_model)
        self.attn = Attention(dims)
        self.ln2 = LayerNorm(dims.d_model)
        self.mlp = MLP(dims)


class TinyTransformer(nn.Module):
    def __init__(self, dims: Dims):
        super().__init__()
        if dims.d_model % dims.heads:
            raise ValueError("d_model must be divisible by heads")
        self.dims = dims
        self.embed = nn.Parameter(torch.empty(dims.vocab_size, dims.d_model))
        self.pos_embed = nn.Parameter(torch.empty(dims.n_ctx, dims.d_model))
        self.blocks = nn.ModuleList(Block(dims) for _ in range(dims.layers))
        self.ln_final = LayerNorm(dims.d_model)
        self.W_U = nn.Parameter(torch.empty(dims.d_model, dims.vocab_size))
        self.b_U = nn.Parameter(torch.zeros(dims.vocab_size))

    def init_weights(self, generator: torch.Generator) -> None:
        std = 0.02
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith(("ln1.w", "ln2.w", "ln_final.w")):
                    continue
                if name.split(".")[-1].startswith("b"):
                    continue
                p.copy_(torch.randn(p.shape, generator=generator) * std)

    def forward(
        self,
        tokens: torch.Tensor,
        *,
        read_pos: torch.Tensor | None = None,
        capture: set[SiteKey] | None = None,
        patches: dict[SiteKey, PatchFn] | None = None,
    ) -> tuple[torch.Tensor, dict[SiteKey, torch.Tensor]]:
        """Return logits (batch, pos, vocab) and captured vectors at ``read_pos``.

        ``read_pos`` gives, per batch row, the position where capture and
        patching act. A patch function receives the (batch, d_model) vectors at
        that position and returns their replacement.
        """
        B, T = tokens.shape
        capture = capture or set()
        patches = patches or {}
        rows = torch.arange(B)
        if (capture or patches) and read_pos is None:
            raise ValueError("read_pos is required for capture or patching")
        cache: dict[SiteKey, torch.Tensor] = {}

        x = self.embed[tokens] + self.pos_embed[:T]
        for layer, block in enumerate(self.blocks):
            results = block.attn.head_results(block.ln1(x))
            head_sites = [
                h for h in range(self.dims.heads) if (layer, h) in capture or (layer, h) in patches
            ]
            if head_sites:
                results = results.clone()
                for h in head_sites:
                    site = (layer, h)
                    at = results[rows, read_pos, h]
                    if site in capture:
                        cache[site] = at.detach().clone()
                    if site in patches:
                        results[rows, read_pos, h] = patches[site](at)
            x = x + results.sum(dim=2) + block.attn.b_O
            x = x + block.mlp(block.ln2(x))
            site = (layer, "resid")
            if site in capture or site in patches:
                at = x[rows, read_pos]
                if site in capture:
                    cache[site] = at.detach().clone()
                if site in patches:
                    x = x.clone()
                    x[rows, read_pos] = patches[site](at)
        logits = self.ln_final(x) @ self.W_U + self.b_U
        return logits, cache
