"""Shared Conformer adapter: log-mel frames -> continuous embeddings.

One parameter set encodes both the reference and the mixture. In
``chunk_causal`` mode frame t only attends to frames of its own and earlier
chunks and the depthwise convolution is left-padded, so appending audio never
changes already-computed frames.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .audio import MelFrames
from .config import AdapterConfig
from .layers import MultiHeadAttention, chunk_causal_mask, sinusoid


class AdapterError(ValueError):
    pass


class ConvModule(nn.Module):
    def __init__(self, dim: int, kernel_size: int, causal: bool, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(dim, 2 * dim)
        self.dw = nn.Conv1d(dim, dim, kernel_size, groups=dim)
        # LayerNorm instead of BatchNorm: utterance-at-a-time training, no batch statistics
        self.dw_norm = nn.LayerNorm(dim)
        self.pw2 = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.kernel_size, self.causal = kernel_size, causal

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.glu(self.pw1(self.norm(x)), dim=-1)
        k = self.kernel_size
        left, right = (k - 1, 0) if self.causal else ((k - 1) // 2, k // 2)
        h = F.pad(h.T.unsqueeze(0), (left, right))
        h = self.dw(h)[0].T
        h = self.pw2(F.silu(self.dw_norm(h)))
        return self.drop(h)


class ConformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int, kernel_size: int, causal: bool, dropout: float):
        super().__init__()

        def ffn():
            return nn.Sequential(
                nn.LayerNorm(dim),
                nn.Linear(dim, ffn_mult * dim),
                nn.SiLU(),
                nn.Dropout(dropout),
                nn.Linear(ffn_mult * dim, dim),
                nn.Dropout(dropout),
            )

        self.ffn1 = ffn()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.attn_drop = nn.Dropout(dropout)
        self.conv = ConvModule(dim, kernel_size, causal, dropout)
        self.ffn2 = ffn()
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        x = x + 0.5 * self.ffn1(x)
        x = x + self.attn_drop(self.attn(self.attn_norm(x), mask))
        x = x + self.conv(x)
        x = x + 0.5 * self.ffn2(x)
        return self.out_norm(x)


class ConformerAdapter(nn.Module):
    def __init__(self, n_mels: int, cfg: AdapterConfig):
        super().__init__()
        self.n_mels, self.cfg = n_mels, cfg
        causal = cfg.causal_mode == "chunk_causal"
        self.in_norm = nn.LayerNorm(n_mels)
        self.in_proj = nn.Linear(n_mels, cfg.dim)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.dim, cfg.heads, cfg.ffn_mult, cfg.kernel_size, causal, cfg.dropout)
            for _ in range(cfg.layers)
        )

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def mask(self, T: int) -> torch.Tensor | None:
        if self.cfg.causal_mode == "chunk_causal":
            return chunk_causal_mask(T, self.cfg.chunk_frames)
        return None

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.ndim != 2 or mel.shape[1] != self.n_mels:
            raise AdapterError(f"mel of shape {tuple(mel.shape)} does not match adapter input F={self.n_mels}")
        T = mel.shape[0]
        x = self.in_proj(self.in_norm(mel)) + sinusoid(torch.arange(T), self.cfg.dim)
        mask = self.mask(T)
        for block in self.blocks:
            x = block(x, mask)
        return x


def adapt(mel, adapter: ConformerAdapter) -> torch.Tensor:
    """Encode (T, F) log-mel frames to (T, dim) embeddings."""
    if isinstance(mel, MelFrames):
        mel = mel.frames
    if not isinstance(mel, torch.Tensor):
        mel = torch.as_tensor(mel, dtype=torch.float32)
    return adapter(mel.float())
