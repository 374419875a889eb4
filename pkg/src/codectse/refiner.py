"""One-step encoder-only refiner: [E_r, E_m, coarse] -> fine codec embeddings.

Attention is bidirectional over the concatenation; only the positions aligned
with the coarse segment are read out. The head predicts a correction that is
added to the coarse input, so an untrained refiner passes the coarse
embedding through unchanged.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from . import codec as codec_mod
from .audio import Waveform
from .config import RefinerConfig
from .layers import TransformerBlock, sinusoid


class RefinerError(ValueError):
    pass


class Refiner(nn.Module):
    def __init__(self, cfg: RefinerConfig, context_dim: int, codec_dim: int):
        super().__init__()
        self.cfg, self.codec_dim = cfg, codec_dim
        self.ctx_proj = nn.Linear(context_dim, cfg.dim) if context_dim != cfg.dim else nn.Identity()
        self.coarse_proj = nn.Linear(codec_dim, cfg.dim)
        self.seg_emb = nn.Embedding(3, cfg.dim)
        nn.init.normal_(self.seg_emb.weight, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.dim, cfg.heads, cfg.ffn_mult, cfg.dropout) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, codec_dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _segment(self, x: torch.Tensor, seg: int) -> torch.Tensor:
        return x + self.seg_emb.weight[seg] + sinusoid(torch.arange(len(x)), self.cfg.dim)

    def forward(self, E_r: torch.Tensor, E_m: torch.Tensor, coarse: torch.Tensor) -> torch.Tensor:
        if len(coarse) == 0:
            raise RefinerError("empty coarse input")
        if coarse.shape[1] != self.codec_dim:
            raise RefinerError(f"coarse dim {coarse.shape[1]} != codec dim {self.codec_dim}")
        parts = []
        if self.cfg.input_mode in ("all", "ref_only"):
            parts.append(self._segment(self.ctx_proj(E_r), 0))
        if self.cfg.input_mode in ("all", "mix_only"):
            parts.append(self._segment(self.ctx_proj(E_m), 1))
        parts.append(self._segment(self.coarse_proj(coarse), 2))
        x = torch.cat(parts)
        for block in self.blocks:
            x = block(x)
        h = self.norm(x[-len(coarse) :])
        return coarse + self.head(h)


def refine(E_r, E_m, coarse, refiner: Refiner) -> torch.Tensor:
    return refiner(E_r, E_m, coarse)


def regression_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean absolute error plus mean squared error, weight 1 each."""
    if pred.shape != truth.shape:
        raise RefinerError(f"shape mismatch {tuple(pred.shape)} vs {tuple(truth.shape)}")
    return F.l1_loss(pred, truth) + F.mse_loss(pred, truth)


def synthesize(pred: torch.Tensor, codec: codec_mod.ToyCodec) -> Waveform:
    return codec_mod.codec_decode(pred.detach(), codec)
