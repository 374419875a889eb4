"""Toy neural audio codec with residual vector quantization.

log-mel frame -> per-frame latent -> L residual codebooks -> per-frame
synthesizer with Hann overlap-add. Codec frames are 1:1 with mel frames.
Index 0 of every codebook is pinned to the zero vector, so quantizing a
residual can never increase its norm.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import audio
from .archive import read_archive, write_archive
from .config import CodecConfig, DataConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CodecError(ValueError):
    pass


class ToyCodec(nn.Module):
    def __init__(self, n_mels=80, dim=128, n_layers=4, codebook_size=64, hidden=256, win=512, hop=256):
        super().__init__()
        self.n_mels, self.dim, self.hidden = n_mels, dim, hidden
        self.n_layers, self.codebook_size = n_layers, codebook_size
        self.win, self.hop = win, hop
        self.register_buffer("mel_mean", torch.zeros(n_mels))
        self.register_buffer("mel_std", torch.ones(n_mels))
        self.encoder = nn.Linear(n_mels, dim)
        self.register_buffer("codebooks", torch.zeros(n_layers, codebook_size, dim))
        self.decoder = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.Tanh(),
            nn.Linear(hidden, hidden),
            nn.Tanh(),
            nn.Linear(hidden, win),
        )
        for m in self.decoder:
            if isinstance(m, nn.Linear):
                nn.init.zeros_(m.bias)
        self.register_buffer("window", torch.from_numpy(audio.hann(win).copy()).float())

    def freeze(self) -> "ToyCodec":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def header(self) -> dict[str, object]:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "codec",
            "L": self.n_layers,
            "K": self.codebook_size,
            "d": self.dim,
            "hop": self.hop,
            "win": self.win,
            "F": self.n_mels,
            "hidden": self.hidden,
        }


# ------------------------------------------------------------------ encoding


def _as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, audio.MelFrames):
        x = x.frames
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)
    return x


def latent_encode(mel, codec: ToyCodec) -> torch.Tensor:
    """Per-frame tanh(affine(normalized mel)); (T, F) -> (T, d)."""
    x = _as_tensor(mel)
    if x.ndim != 2 or x.shape[1] != codec.n_mels:
        raise CodecError(f"mel frames of shape {tuple(x.shape)} do not match codec F={codec.n_mels}")
    x = (x.to(codec.mel_mean.dtype) - codec.mel_mean) / codec.mel_std
    return torch.tanh(codec.encoder(x))


class RVQResult(NamedTuple):
    tokens: torch.Tensor  # (T, L) long
    residuals: torch.Tensor  # (L, T, d): residual after each layer
    norms: torch.Tensor  # (T, L + 1): norm before layer 1, then after each layer


def _sq_dist(r: torch.Tensor, cb: torch.Tensor, chunk_elems: int = 1 << 22) -> torch.Tensor:
    # explicit differences (no |a|^2 - 2ab + |b|^2 expansion) so the distance to
    # the zero codeword is exactly |r|^2 and ties compare exactly
    step = max(1, chunk_elems // (cb.shape[0] * cb.shape[1]))
    out = [((r[i : i + step, None, :] - cb[None]) ** 2).sum(-1) for i in range(0, r.shape[0], step)]
    return torch.cat(out) if out else r.new_zeros(0, cb.shape[0])


def rvq_encode(latent: torch.Tensor, codebooks: torch.Tensor) -> RVQResult:
    latent = _as_tensor(latent)
    L, K, d = codebooks.shape
    if latent.ndim != 2 or latent.shape[1] != d:
        raise CodecError(f"latent of shape {tuple(latent.shape)} does not match codebook dim {d}")
    codebooks = codebooks.to(latent.dtype)
    T = latent.shape[0]
    tokens = torch.zeros(T, L, dtype=torch.long)
    residuals = latent.new_zeros(L, T, d)
    sq = latent.new_zeros(T, L + 1)
    r = latent
    for l in range(L):
        dist = _sq_dist(r, codebooks[l])
        if l == 0:
            sq[:, 0] = dist[:, 0] if T else sq[:, 0]
        idx = torch.argmin(dist, dim=1)  # first minimum wins ties
        tokens[:, l] = idx
        sq[:, l + 1] = dist.gather(1, idx[:, None])[:, 0]
        r = r - codebooks[l][idx]
        residuals[l] = r
    return RVQResult(tokens, residuals, sq.sqrt())


def embed_sum(tokens: torch.Tensor, codebooks: torch.Tensor, n: int) -> torch.Tensor:
    """Sum of codeword embeddings over the first n layers; (T, >=n) -> (T, d)."""
    L = codebooks.shape[0]
    if not 1 <= n <= L:
        raise CodecError(f"layer count n={n} outside [1, {L}]")
    if tokens.shape[1] < n:
        raise CodecError(f"token grid has {tokens.shape[1]} layers, need {n}")
    tokens = tokens.long()
    if tokens.numel() and (tokens[:, :n].min() < 0 or tokens[:, :n].max() >= codebooks.shape[1]):
        raise CodecError("token index outside codebook")
    out = codebooks[0][tokens[:, 0]]
    for l in range(1, n):
        out = out + codebooks[l][tokens[:, l]]
    return out


def overlap_add(frames: torch.Tensor, hop: int) -> torch.Tensor:
    """(T, win) -> ((T - 1) * hop + win,)"""
    T, win = frames.shape
    if T == 0:
        return frames.new_zeros(0)
    out = F.fold(
        frames.T.unsqueeze(0),
        output_size=(1, (T - 1) * hop + win),
        kernel_size=(1, win),
        stride=(1, hop),
    )
    return out.reshape(-1)


def decode_tensor(embeddings: torch.Tensor, codec: ToyCodec) -> torch.Tensor:
    T = embeddings.shape[0]
    frames = codec.decoder(embeddings) * codec.window
    return overlap_add(frames, codec.hop)[: T * codec.hop]


def codec_decode(embeddings, codec: ToyCodec) -> audio.Waveform:
    emb = _as_tensor(embeddings)
    if not torch.isfinite(emb).all():
        raise CodecError("non-finite embeddings")
    with torch.no_grad():
        wav = decode_tensor(emb.float(), codec)
    return audio.Waveform(wav.double().numpy())


def encode_waveform(w: audio.Waveform, codec: ToyCodec, data: DataConfig | None = None) -> RVQResult:
    data = data or DataConfig()
    mel = audio.log_mel(w, codec.win, codec.hop, codec.n_mels, data.mel_floor)
    with torch.no_grad():
        return rvq_encode(latent_encode(mel, codec), codec.codebooks)


def round_trip(w: audio.Waveform, codec: ToyCodec, n: int | None = None) -> audio.Waveform:
    res = encode_waveform(w, codec)
    return codec_decode(embed_sum(res.tokens, codec.codebooks, n or codec.n_layers), codec)


def codebook_perplexity(tokens: torch.Tensor, K: int) -> list[float]:
    out = []
    for l in range(tokens.shape[1]):
        p = torch.bincount(tokens[:, l], minlength=K).double()
        p = p / p.sum()
        nz = p[p > 0]
        out.append(float(torch.exp(-(nz * nz.log()).sum())))
    return out


# ------------------------------------------------------------------ training


def torch_log_mel(x: torch.Tensor, win: int, hop: int, n_mels: int, floor: float = 1e-10) -> torch.Tensor:
    """Differentiable twin of audio.log_mel for the reconstruction loss."""
    frames = x.unfold(0, win, hop) * torch.from_numpy(audio.hann(win).copy()).to(x.dtype)
    spec = torch.fft.rfft(frames, n=win, dim=1)
    pw = spec.real**2 + spec.imag**2
    fb = torch.from_numpy(audio.mel_filterbank(n_mels, win).copy()).to(x.dtype)
    return torch.log(torch.clamp(pw @ fb.T, min=floor))


@dataclass
class _Clip:
    wave: torch.Tensor
    mel: torch.Tensor


class KMeansEMA:
    """EMA k-means over residuals for one codebook; codeword 0 stays at zero."""

    def __init__(self, init: torch.Tensor, decay: float, eps: float = 1e-5):
        self.codes = init.clone()
        self.codes[0] = 0.0
        self.decay, self.eps = decay, eps
        K = init.shape[0]
        self.count = torch.ones(K, dtype=init.dtype)
        self.total = self.codes.clone()
        self.usage = torch.zeros(K, dtype=init.dtype)

    def assign(self, r: torch.Tensor) -> torch.Tensor:
        return torch.argmin(_sq_dist(r, self.codes), dim=1)

    def update(self, r: torch.Tensor, idx: torch.Tensor) -> None:
        K = self.codes.shape[0]
        onehot = F.one_hot(idx, K).to(r.dtype)
        n = onehot.sum(0)
        s = onehot.T @ r
        self.usage += n
        self.count.mul_(self.decay).add_(n, alpha=1 - self.decay)
        self.total.mul_(self.decay).add_(s, alpha=1 - self.decay)
        total_n = self.count.sum()
        smoothed = (self.count + self.eps) / (total_n + K * self.eps) * total_n
        self.codes = self.total / smoothed[:, None]
        self.codes[0] = 0.0

    def reinit_dead(self, pool: torch.Tensor, threshold: float, gen: torch.Generator) -> int:
        dead = torch.nonzero(self.usage[1:] < threshold)[:, 0] + 1
        if len(dead) and len(pool):
            pick = torch.randint(len(pool), (len(dead),), generator=gen)
            self.codes[dead] = pool[pick]
            self.total[dead] = pool[pick]
            self.count[dead] = 1.0
        self.usage.zero_()
        return int(len(dead))


def fit_codebook_1d(data: torch.Tensor, K: int, epochs: int, decay: float, seed: int = 0) -> torch.Tensor:
    """Single-layer EMA k-means with pinned zero code (used for small checks)."""
    gen = torch.Generator().manual_seed(seed)
    init = data[torch.randint(len(data), (K,), generator=gen)]
    km = KMeansEMA(init, decay)
    for _ in range(epochs):
        idx = km.assign(data)
        km.update(data, idx)
    return km.codes


def fit_rvq(latents: torch.Tensor, cfg: CodecConfig, gen: torch.Generator) -> torch.Tensor:
    """EMA k-means per residual layer over a fixed frame set with dead-code restarts."""
    L, K = cfg.n_layers, cfg.codebook_size
    N = latents.shape[0]
    books: list[KMeansEMA] = []
    r = latents
    for l in range(L):
        init = r[torch.randint(N, (K,), generator=gen)]
        km = KMeansEMA(init, cfg.ema_decay)
        books.append(km)
        r = r - km.codes[km.assign(r)]
    bs = cfg.batch_frames
    for epoch in range(cfg.vq_epochs):
        order = torch.randperm(N, generator=gen)
        last_pool = [latents[:0]] * L
        for start in range(0, N, bs):
            r = latents[order[start : start + bs]]
            for l, km in enumerate(books):
                idx = km.assign(r)
                km.update(r, idx)
                last_pool[l] = r
                r = r - km.codes[idx]
        dead = [km.reinit_dead(last_pool[l], cfg.dead_threshold, gen) for l, km in enumerate(books)]
        log.debug("vq epoch %d dead codes reset %s", epoch, dead)
    return torch.stack([km.codes for km in books])


def _clips(manifest: audio.Manifest, data: DataConfig) -> list[_Clip]:
    clips = []
    for e in sorted(manifest.entries, key=lambda e: e.utterance_id):
        w = audio.load_wav(manifest.resolve(e))
        if len(w) < data.win:
            continue
        mel = audio.log_mel(w, data.win, data.hop, data.n_mels, data.mel_floor)
        clips.append(_Clip(torch.from_numpy(w.samples).float(), torch.from_numpy(mel.frames).float()))
    return clips


def _batch_loss(codec: ToyCodec, clips, gen, quantized: bool, crop: int, data: DataConfig, mel_w: float):
    loss = 0.0
    pick = torch.randint(len(clips), (4,), generator=gen).tolist()
    for i in pick:
        c = clips[i]
        T = c.mel.shape[0]
        n = min(crop, T)
        s = int(torch.randint(T - n + 1, (1,), generator=gen))
        z = latent_encode(c.mel[s : s + n], codec)
        if quantized:
            with torch.no_grad():
                q = embed_sum(rvq_encode(z, codec.codebooks).tokens, codec.codebooks, codec.n_layers)
            z = q
        y = decode_tensor(z, codec)
        ref = c.wave[s * data.hop : s * data.hop + n * data.hop]
        # the first hop only receives half a synthesis window
        y, ref = y[data.hop :], ref[data.hop :]
        wave_loss = F.l1_loss(y, ref)
        mel_loss = F.l1_loss(
            torch_log_mel(y, data.win, data.hop, data.n_mels, 1e-5),
            torch_log_mel(ref, data.win, data.hop, data.n_mels, 1e-5),
        )
        loss = loss + wave_loss + mel_w * 0.01 * mel_loss
    return loss / len(pick)


def train_codec(manifest: audio.Manifest, cfg: CodecConfig, data: DataConfig | None = None) -> ToyCodec:
    """Autoencoder stage, EMA k-means stage, then decoder fine-tuning on fully quantized latents."""
    data = data or DataConfig()
    if not manifest.entries:
        raise CodecError("empty corpus")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    codec = ToyCodec(data.n_mels, cfg.dim, cfg.n_layers, cfg.codebook_size, cfg.hidden, data.win, data.hop)
    clips = _clips(manifest, data)
    if not clips:
        raise CodecError("corpus has no usable audio")
    all_mel = torch.cat([c.mel for c in clips])
    codec.mel_mean.copy_(all_mel.mean(0))
    codec.mel_std.copy_(all_mel.std(0).clamp_min(1e-3))
    crop = 48

    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    for step in range(cfg.ae_steps):
        loss = _batch_loss(codec, clips, gen, False, crop, data, cfg.mel_loss_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 200 == 0:
            log.info("codec ae step %d loss %.4f", step, float(loss.detach()))

    with torch.no_grad():
        latents = latent_encode(all_mel, codec)
        codec.codebooks.copy_(fit_rvq(latents, cfg, gen))

    codec.encoder.requires_grad_(False)
    opt = torch.optim.Adam(codec.decoder.parameters(), lr=cfg.lr * 0.5)
    for step in range(cfg.ft_steps):
        loss = _batch_loss(codec, clips, gen, True, crop, data, cfg.mel_loss_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 200 == 0:
            log.info("codec ft step %d loss %.4f", step, float(loss.detach()))
    return codec.freeze()


# ---------------------------------------------------------------- checkpoint


def save_codec(codec: ToyCodec, path: str | Path) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in codec.state_dict().items()}
    return write_archive(path, codec.header(), arrays)


def load_codec(path: str | Path) -> ToyCodec:
    header, arrays, _ = read_archive(path)
    if header.get("kind") != "codec":
        raise CodecError(f"{path} is not a codec checkpoint")
    if int(header["format_version"]) != FORMAT_VERSION:
        raise CodecError(f"unsupported codec format_version {header['format_version']}")
    codec = ToyCodec(
        n_mels=int(header["F"]),
        dim=int(header["d"]),
        n_layers=int(header["L"]),
        codebook_size=int(header["K"]),
        hidden=int(header["hidden"]),
        win=int(header["win"]),
        hop=int(header["hop"]),
    )
    codec.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return codec.freeze()
