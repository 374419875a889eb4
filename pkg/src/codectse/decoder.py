"""Decoder-only transformer over ``[bos, E_r, sep, E_m, tse, D_n]``.

Every token carries a (segment rank, index-within-segment) pair. Attention
masks are computed from those pairs rather than from storage order, which
lets the KV cache accept new mixture frames after output tokens have already
been generated (streaming) while computing exactly what a single pass over
the composite sequence computes.

With ``chunk_frames`` set, the position that predicts output frame i only
sees mixture frames of the chunks up to the one frame i belongs to. This is
what makes chunked streaming reproduce offline decoding token for token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .codec import embed_sum
from .config import DecoderConfig
from .layers import TransformerBlock

BOS, REF, SEP, MIX, TSE, OUT = range(6)
_GROUP = {BOS: 0, REF: 0, SEP: 0, MIX: 1, TSE: 2, OUT: 2}
_ORDER_SCALE = 1 << 32
_NO_LIMIT = 1 << 62


class DecoderError(ValueError):
    pass


@dataclass
class SeqLayout:
    pos_bos: int
    ref_range: tuple[int, int]
    pos_sep: int | None
    mix_range: tuple[int, int]
    pos_tse: int
    out_range: tuple[int, int]

    @property
    def total(self) -> int:
        return self.out_range[1]

    def ranks(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-position (segment rank, index within segment)."""
        rank = torch.empty(self.total, dtype=torch.long)
        idx = torch.zeros(self.total, dtype=torch.long)
        rank[self.pos_bos] = BOS
        for r, (a, b) in ((REF, self.ref_range), (MIX, self.mix_range), (OUT, self.out_range)):
            rank[a:b] = r
            idx[a:b] = torch.arange(b - a)
        if self.pos_sep is not None:
            rank[self.pos_sep] = SEP
        rank[self.pos_tse] = TSE
        return rank, idx


class SpecialTokens(nn.Module):
    def __init__(self, dim: int, K: int):
        super().__init__()
        self.bos = nn.Parameter(torch.randn(dim) * 0.02)
        self.sep = nn.Parameter(torch.randn(dim) * 0.02)
        self.tse = nn.Parameter(torch.randn(dim) * 0.02)
        self.eos_id = K


def build_sequence(
    E_r: torch.Tensor,
    E_m: torch.Tensor,
    coarse_embed: torch.Tensor | None,
    specials: SpecialTokens,
    with_sep: bool = True,
) -> tuple[torch.Tensor, SeqLayout]:
    """Concatenate ``[bos, E_r, sep, E_m, tse, coarse]`` (sep dropped when with_sep is False)."""
    dim = specials.bos.shape[0]
    if coarse_embed is None:
        coarse_embed = E_m.new_zeros(0, dim)
    for name, t in (("E_r", E_r), ("E_m", E_m), ("coarse", coarse_embed)):
        if t.ndim != 2 or t.shape[1] != dim:
            raise DecoderError(f"{name} has shape {tuple(t.shape)}, expected (*, {dim})")
    parts = [specials.bos[None], E_r]
    pos = 1 + len(E_r)
    ref_range = (1, pos)
    pos_sep = None
    if with_sep:
        parts.append(specials.sep[None])
        pos_sep = pos
        pos += 1
    mix_range = (pos, pos + len(E_m))
    pos_tse = mix_range[1]
    parts += [E_m, specials.tse[None], coarse_embed]
    out_range = (pos_tse + 1, pos_tse + 1 + len(coarse_embed))
    layout = SeqLayout(0, ref_range, pos_sep, mix_range, pos_tse, out_range)
    return torch.cat(parts), layout


def mix_limit(rank: torch.Tensor, idx: torch.Tensor, chunk: int | None) -> torch.Tensor:
    """Exclusive bound on visible mixture frames for each query position."""
    limit = torch.full_like(idx, _NO_LIMIT)
    if chunk:
        predicted = torch.where(rank == TSE, torch.zeros_like(idx), idx + 1)
        out = (rank == TSE) | (rank == OUT)
        limit = torch.where(out, (predicted // chunk + 1) * chunk, limit)
    return limit


def visibility(q_rank, q_idx, k_rank, k_idx, chunk: int | None) -> torch.Tensor:
    q_order = q_rank * _ORDER_SCALE + q_idx
    k_order = k_rank * _ORDER_SCALE + k_idx
    mask = k_order[None, :] <= q_order[:, None]
    if chunk:
        lim = mix_limit(q_rank, q_idx, chunk)
        mask &= ~((k_rank == MIX)[None, :] & (k_idx[None, :] >= lim[:, None]))
    return mask


class ARDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, codec_dim: int, K: int, chunk_frames: int | None = None):
        super().__init__()
        self.cfg, self.K, self.codec_dim = cfg, K, codec_dim
        self.chunk_frames = chunk_frames
        self.specials = SpecialTokens(cfg.dim, K)
        self.seg_emb = nn.Embedding(6, cfg.dim)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.dim)
        nn.init.normal_(self.seg_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        self.coarse_proj = nn.Linear(codec_dim, cfg.dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.dim, cfg.heads, cfg.ffn_mult, cfg.dropout) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self.heads = nn.ModuleList(nn.Linear(cfg.dim, K + 1) for _ in range(cfg.n_ar))

    @property
    def dim(self) -> int:
        return self.cfg.dim

    @property
    def eos_id(self) -> int:
        return self.K

    @property
    def with_sep(self) -> bool:
        return self.cfg.output_mode != "ref_output"

    def embed_coarse(self, coarse: torch.Tensor) -> torch.Tensor:
        """Codec-space (T, d) sums -> model width."""
        return self.coarse_proj(coarse)

    def _inputs(self, content: torch.Tensor, rank: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        if len(idx) and int(idx.max()) >= self.cfg.max_len:
            raise DecoderError(f"segment index {int(idx.max())} exceeds max_len {self.cfg.max_len}")
        return content + self.seg_emb(rank) + self.pos_emb(idx)

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        """(T, dim) -> (T, n_ar, K + 1)"""
        return torch.stack([head(hidden) for head in self.heads], dim=1)

    def hidden(self, seq: torch.Tensor, layout: SeqLayout) -> torch.Tensor:
        if layout.total > self.cfg.max_len:
            raise DecoderError(f"sequence length {layout.total} exceeds max_len {self.cfg.max_len}")
        rank, idx = layout.ranks()
        x = self._inputs(seq, rank, idx)
        mask = visibility(rank, idx, rank, idx, self.chunk_frames)
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x)

    def forward_teacher_forced(self, seq: torch.Tensor, layout: SeqLayout) -> torch.Tensor:
        """Logits for output frames 0..|out| (the last row predicts what follows the given coarse frames)."""
        h = self.hidden(seq, layout)
        return self.logits(h[layout.pos_tse : layout.out_range[1]])

    def forward(self, E_r, E_m, coarse_tokens: torch.Tensor, codebooks: torch.Tensor) -> torch.Tensor:
        coarse = embed_sum(coarse_tokens, codebooks, self.cfg.n_ar) if len(coarse_tokens) else None
        coarse = self.embed_coarse(coarse) if coarse is not None else None
        seq, layout = build_sequence(E_r, E_m, coarse, self.specials, self.with_sep)
        return self.forward_teacher_forced(seq, layout)


# ---------------------------------------------------------------- losses


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over positions and layers; logits (T, n, K+1), target (T, n)."""
    if logits.shape[:2] != target.shape:
        raise DecoderError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    V = logits.shape[-1]
    if target.numel() and (int(target.max()) >= V or int(target.min()) < 0):
        raise DecoderError(f"target index outside [0, {V - 1}]")
    return F.cross_entropy(logits.reshape(-1, V), target.reshape(-1).long())


def with_eos(tokens: torch.Tensor, n: int, eos_id: int) -> torch.Tensor:
    """First n layers of a token grid plus a terminal eos row."""
    eos = torch.full((1, n), eos_id, dtype=torch.long)
    return torch.cat([tokens[:, :n].long(), eos])


def coarse_to_embedding(tokens: torch.Tensor, codebooks: torch.Tensor) -> torch.Tensor:
    K = codebooks.shape[1]
    if tokens.numel() and int(tokens.max()) >= K:
        raise DecoderError("coarse tokens contain eos; strip it before embedding")
    if len(tokens) == 0:
        return codebooks.new_zeros(0, codebooks.shape[2])
    return embed_sum(tokens, codebooks, tokens.shape[1])


# ------------------------------------------------------------- generation


@dataclass
class DecodeConfig:
    mode: str = "greedy"  # greedy | top_k
    k: int = 1
    temperature: float = 1.0
    max_frames: int | None = None
    seed: int = 0


class DecoderCache:
    """Per-layer K/V stored in three groups kept in composite order: prompt head, mixture, output tail."""

    def __init__(self, n_layers: int):
        self.kv: list[list[list[torch.Tensor]]] = [[[], [], []] for _ in range(n_layers)]
        self.meta: list[list[tuple[torch.Tensor, torch.Tensor]]] = [[], [], []]

    def size(self, group: int) -> int:
        return sum(len(r) for r, _ in self.meta[group])

    def ordered_meta(self) -> tuple[torch.Tensor, torch.Tensor]:
        items = [m for g in self.meta for m in g]
        return torch.cat([r for r, _ in items]), torch.cat([i for _, i in items])

    def ordered_kv(self, layer: int) -> tuple[torch.Tensor, torch.Tensor]:
        chunks = [kv for g in self.kv[layer] for kv in g]
        return torch.cat([k for k, _ in chunks], dim=1), torch.cat([v for _, v in chunks], dim=1)


@torch.no_grad()
def feed(decoder: ARDecoder, cache: DecoderCache, content: torch.Tensor, rank: torch.Tensor, idx: torch.Tensor):
    """Append tokens of a single group to the cache; returns their final hidden states."""
    groups = {_GROUP[int(r)] for r in rank}
    if len(groups) != 1:
        raise DecoderError("feed() takes tokens of one cache group at a time")
    g = groups.pop()
    cache.meta[g].append((rank, idx))
    k_rank, k_idx = cache.ordered_meta()
    if len(k_rank) > decoder.cfg.max_len:
        raise DecoderError(f"sequence length {len(k_rank)} exceeds max_len {decoder.cfg.max_len}")
    mask = visibility(rank, idx, k_rank, k_idx, decoder.chunk_frames)
    x = decoder._inputs(content, rank, idx)
    for layer, block in enumerate(decoder.blocks):
        q, k, v = block.attn.project(block.norm1(x))
        cache.kv[layer][g].append((k, v))
        K, V = cache.ordered_kv(layer)
        x = x + block.attn.attend(q, K, V, mask)
        x = x + block.ffn(block.norm2(x))
    return decoder.norm(x)


def choose(logits: torch.Tensor, cfg: DecodeConfig, eos_id: int, gen: torch.Generator | None) -> torch.Tensor:
    """Pick one token per head from (n_ar, K+1) logits. Only layer 1 may emit eos."""
    logits = logits.clone()
    logits[1:, eos_id] = float("-inf")
    if cfg.mode == "greedy":
        return logits.argmax(-1)
    if cfg.mode != "top_k":
        raise DecoderError(f"unknown decode mode {cfg.mode!r}")
    k = max(1, min(cfg.k, logits.shape[-1]))
    vals, ids = torch.topk(logits / cfg.temperature, k, dim=-1)
    probs = torch.softmax(vals, dim=-1)
    pick = torch.multinomial(probs, 1, generator=gen)[:, 0]
    return ids.gather(1, pick[:, None])[:, 0]


@dataclass
class DecodingSession:
    """Incremental decoding state; offline generation and streaming both drive one of these."""

    decoder: ARDecoder
    codebooks: torch.Tensor
    cfg: DecodeConfig = field(default_factory=DecodeConfig)
    cache: DecoderCache = field(init=False)
    generated: list[torch.Tensor] = field(default_factory=list)
    n_mix: int = 0
    finished: bool = False
    _tse_fed: bool = False
    _pending: torch.Tensor | None = None
    _gen: torch.Generator | None = None

    def __post_init__(self):
        self.cache = DecoderCache(len(self.decoder.blocks))
        self._gen = torch.Generator().manual_seed(self.cfg.seed)

    def open(self, E_r: torch.Tensor) -> None:
        sp = self.decoder.specials
        n = len(E_r)
        if self.decoder.with_sep:
            content = torch.cat([sp.bos[None], E_r, sp.sep[None]])
            rank = torch.tensor([BOS] + [REF] * n + [SEP])
            idx = torch.cat([torch.zeros(1, dtype=torch.long), torch.arange(n), torch.zeros(1, dtype=torch.long)])
        else:
            content = torch.cat([sp.bos[None], E_r])
            rank = torch.tensor([BOS] + [REF] * n)
            idx = torch.cat([torch.zeros(1, dtype=torch.long), torch.arange(n)])
        with torch.no_grad():
            feed(self.decoder, self.cache, content, rank, idx)

    def add_mix(self, E_m_new: torch.Tensor) -> None:
        if len(E_m_new) == 0:
            return
        n = len(E_m_new)
        rank = torch.full((n,), MIX)
        idx = torch.arange(self.n_mix, self.n_mix + n)
        feed(self.decoder, self.cache, E_m_new, rank, idx)
        self.n_mix += n

    def _next_logits(self) -> torch.Tensor:
        if not self._tse_fed:
            h = feed(self.decoder, self.cache, self.decoder.specials.tse[None], torch.tensor([TSE]), torch.tensor([0]))
            self._tse_fed = True
        else:
            j = len(self.generated) - 1
            with torch.no_grad():
                emb = self.decoder.embed_coarse(coarse_to_embedding(self.generated[j][None], self.codebooks))
            h = feed(self.decoder, self.cache, emb, torch.tensor([OUT]), torch.tensor([j]))
        return self.decoder.logits(h)[-1]

    def run(self, limit: int) -> list[torch.Tensor]:
        """Generate until eos or until ``limit`` frames exist in total; returns the new frames."""
        new = []
        while not self.finished and len(self.generated) < limit:
            if self._pending is None:
                self._pending = self._next_logits()
            tok = choose(self._pending, self.cfg, self.decoder.eos_id, self._gen)
            self._pending = None
            if int(tok[0]) == self.decoder.eos_id:
                self.finished = True
                break
            self.generated.append(tok)
            new.append(tok)
        return new

    def tokens(self) -> torch.Tensor:
        if not self.generated:
            return torch.zeros(0, self.decoder.cfg.n_ar, dtype=torch.long)
        return torch.stack(self.generated)


def default_max_frames(decoder: ARDecoder, n_ref: int, n_mix: int) -> int:
    extra = n_ref if decoder.cfg.output_mode == "ref_output" else 0
    return n_mix + extra + 16


@torch.no_grad()
def generate(decoder: ARDecoder, E_r, E_m, codebooks, cfg: DecodeConfig | None = None) -> torch.Tensor:
    """Frame-by-frame decoding with the KV cache; returns (T_s, n_ar) tokens, eos row excluded."""
    cfg = cfg or DecodeConfig()
    max_frames = cfg.max_frames if cfg.max_frames is not None else default_max_frames(decoder, len(E_r), len(E_m))
    if max_frames <= 0:
        raise DecoderError("max_frames must be positive")
    session = DecodingSession(decoder, codebooks, cfg)
    session.open(E_r)
    session.add_mix(E_m)
    session.run(max_frames)
    return session.tokens()


@torch.no_grad()
def generate_naive(decoder: ARDecoder, E_r, E_m, codebooks, cfg: DecodeConfig | None = None) -> torch.Tensor:
    """Reference decoder: recompute the whole composite sequence at every step (no cache)."""
    cfg = cfg or DecodeConfig()
    max_frames = cfg.max_frames if cfg.max_frames is not None else default_max_frames(decoder, len(E_r), len(E_m))
    if max_frames <= 0:
        raise DecoderError("max_frames must be positive")
    gen = torch.Generator().manual_seed(cfg.seed)
    out: list[torch.Tensor] = []
    while len(out) < max_frames:
        tokens = torch.stack(out) if out else torch.zeros(0, decoder.cfg.n_ar, dtype=torch.long)
        logits = decoder(E_r, E_m, tokens, codebooks)[-1]
        tok = choose(logits, cfg, decoder.eos_id, gen)
        if int(tok[0]) == decoder.eos_id:
            break
        out.append(tok)
    return torch.stack(out) if out else torch.zeros(0, decoder.cfg.n_ar, dtype=torch.long)
