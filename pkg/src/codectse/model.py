"""The extraction model (adapter + AR decoder + refiner) bound to a frozen codec."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import audio
from .adapter import ConformerAdapter
from .codec import ToyCodec, decode_tensor, embed_sum, latent_encode, rvq_encode
from .config import RunConfig
from .decoder import ARDecoder, DecodeConfig, build_sequence, coarse_to_embedding, ce_loss, generate, with_eos
from .layers import count
from .refiner import Refiner, regression_loss


@dataclass
class Features:
    ref_mel: torch.Tensor  # (T_r, F)
    mix_mel: torch.Tensor  # (T_m, F)
    target_tokens: torch.Tensor  # (T_s, L)
    target_fine: torch.Tensor  # (T_s, d): sum of all codebook layers
    ref_tokens: torch.Tensor  # (T_r, L)
    mix_tokens: torch.Tensor  # (T_m, L)


def mixture_mel(w: audio.Waveform, cfg: RunConfig) -> audio.MelFrames:
    """Mixture analysis; causal framing when the adapter runs chunk-causally."""
    d = cfg.data
    if cfg.adapter.causal_mode == "chunk_causal":
        w = audio.causal_pad(w, d.win, d.hop)
    return audio.log_mel(w, d.win, d.hop, d.n_mels, d.mel_floor)


def reference_mel(w: audio.Waveform, cfg: RunConfig) -> audio.MelFrames:
    d = cfg.data
    return audio.log_mel(w, d.win, d.hop, d.n_mels, d.mel_floor)


def _mel_tensor(m: audio.MelFrames) -> torch.Tensor:
    return torch.from_numpy(m.frames).float()


@torch.no_grad()
def codec_tokens(mel: torch.Tensor, codec: ToyCodec) -> torch.Tensor:
    return rvq_encode(latent_encode(mel, codec), codec.codebooks).tokens


@torch.no_grad()
def extract_features(ex: audio.TrainingExample, codec: ToyCodec, cfg: RunConfig) -> Features:
    ref_mel = _mel_tensor(reference_mel(ex.reference, cfg))
    mix_mel = _mel_tensor(mixture_mel(ex.mixture, cfg))
    tgt_mel = _mel_tensor(reference_mel(ex.target, cfg))
    tgt_tokens = codec_tokens(tgt_mel, codec)
    return Features(
        ref_mel=ref_mel,
        mix_mel=mix_mel,
        target_tokens=tgt_tokens,
        target_fine=embed_sum(tgt_tokens, codec.codebooks, codec.n_layers),
        ref_tokens=codec_tokens(ref_mel, codec),
        mix_tokens=codec_tokens(mix_mel, codec),
    )


def ste_embedding(logits: torch.Tensor, codebooks: torch.Tensor) -> torch.Tensor:
    """Straight-through coarse embedding from (T, n, K+1) logits.

    Forward value is the summed codewords of the argmax tokens; the gradient
    is that of the softmax-weighted codeword mixture. The eos class maps to
    the zero vector.
    """
    n = logits.shape[1]
    K = codebooks.shape[1]
    probs = torch.softmax(logits, dim=-1)[..., :K]
    soft = sum(probs[:, l] @ codebooks[l] for l in range(n))
    ext = torch.cat([codebooks[:n], codebooks.new_zeros(n, 1, codebooks.shape[2])], dim=1)
    idx = logits.argmax(-1)
    hard = sum(ext[l][idx[:, l]] for l in range(n))
    return hard + (soft - soft.detach())


class TSEModel(nn.Module):
    def __init__(self, cfg: RunConfig, codec: ToyCodec):
        super().__init__()
        self.cfg = cfg
        # the codec is frozen and shared; kept out of the module tree so it is
        # neither trained nor saved with this model
        object.__setattr__(self, "codec", codec)
        causal = cfg.adapter.causal_mode == "chunk_causal"
        chunk = cfg.adapter.chunk_frames if causal else None
        if causal and cfg.decoder.output_mode == "ref_output":
            raise ValueError("ref_output decoding is not defined for chunk-causal streaming")
        self.adapter = ConformerAdapter(cfg.data.n_mels, cfg.adapter)
        dim = cfg.decoder.dim
        self.in_proj = nn.Linear(cfg.adapter.dim, dim) if cfg.adapter.dim != dim else nn.Identity()
        self.decoder = ARDecoder(cfg.decoder, codec.dim, codec.codebook_size, chunk)
        self.refiner = Refiner(cfg.refiner, dim, codec.dim)
        if cfg.decoder.io_mode == "discrete":
            self.disc_emb = nn.ModuleList(nn.Embedding(codec.codebook_size, dim) for _ in range(2))
        else:
            self.disc_emb = None

    @property
    def n_ar(self) -> int:
        return self.cfg.decoder.n_ar

    @property
    def codebooks(self) -> torch.Tensor:
        return self.codec.codebooks

    def embed_discrete(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.disc_emb[0](tokens[:, 0]) + self.disc_emb[1](tokens[:, 1])

    def encode_reference(self, mel: torch.Tensor) -> torch.Tensor:
        if self.disc_emb is not None:
            return self.embed_discrete(codec_tokens(mel, self.codec))
        return self.in_proj(self.adapter(mel))

    def encode_mixture(self, mel: torch.Tensor) -> torch.Tensor:
        return self.encode_reference(mel)

    def encode_inputs(self, f: Features) -> tuple[torch.Tensor, torch.Tensor]:
        if self.disc_emb is not None:
            return self.embed_discrete(f.ref_tokens), self.embed_discrete(f.mix_tokens)
        return self.in_proj(self.adapter(f.ref_mel)), self.in_proj(self.adapter(f.mix_mel))

    def ar_targets(self, f: Features) -> tuple[torch.Tensor, int]:
        """Teacher-forcing target grid (with eos row) and the row where target speech starts."""
        n = self.n_ar
        if self.cfg.decoder.output_mode == "ref_output":
            grid = torch.cat([f.ref_tokens[:, :n], f.target_tokens[:, :n]])
            return with_eos(grid, n, self.decoder.eos_id), len(f.ref_tokens)
        return with_eos(f.target_tokens, n, self.decoder.eos_id), 0

    def teacher_forced(self, f: Features, E_r=None, E_m=None):
        if E_r is None:
            E_r, E_m = self.encode_inputs(f)
        target, offset = self.ar_targets(f)
        coarse_in = embed_sum(target[:-1], self.codebooks, self.n_ar)
        seq, layout = build_sequence(E_r, E_m, self.decoder.embed_coarse(coarse_in), self.decoder.specials, self.decoder.with_sep)
        logits = self.decoder.forward_teacher_forced(seq, layout)
        return logits, target, offset

    def losses(self, f: Features, mode: str, E_r=None, E_m=None) -> dict[str, torch.Tensor]:
        """CE on the AR branch plus L1+L2 on the refiner branch, wired per training mode.

        ``E_r``/``E_m`` override the encoded inputs (used for gradient checks).
        """
        if E_r is None:
            E_r, E_m = self.encode_inputs(f)
        logits, target, offset = self.teacher_forced(f, E_r, E_m)
        ce = ce_loss(logits, target)
        T_s = len(f.target_tokens)
        if mode == "joint":
            coarse = ste_embedding(logits[offset : offset + T_s], self.codebooks)
        elif mode == "split":
            coarse = embed_sum(f.target_tokens, self.codebooks, self.n_ar)
        else:
            raise ValueError(f"unknown training mode {mode!r}")
        fine = self.refiner(E_r, E_m, coarse)
        reg = regression_loss(fine, f.target_fine)
        total = self.cfg.train.ce_weight * ce + self.cfg.train.reg_weight * reg
        return {"ce": ce, "reg": reg, "total": total, "logits": logits, "target": target}


# -------------------------------------------------------------- inference


@dataclass
class Extraction:
    tokens: torch.Tensor  # (T_s, n_ar)
    coarse: torch.Tensor  # (T_s, d)
    fine: torch.Tensor | None  # (T_s, d)
    waveform: audio.Waveform


@torch.no_grad()
def extract(
    model: TSEModel,
    mixture: audio.Waveform,
    reference: audio.Waveform,
    decode: DecodeConfig | None = None,
    use_refiner: bool = True,
) -> Extraction:
    model.eval()
    cfg = model.cfg
    E_r = model.encode_reference(_mel_tensor(reference_mel(reference, cfg)))
    E_m = model.encode_mixture(_mel_tensor(mixture_mel(mixture, cfg)))
    tokens = generate(model.decoder, E_r, E_m, model.codebooks, decode)
    if cfg.decoder.output_mode == "ref_output":
        tokens = tokens[len(E_r) :]
    coarse = coarse_to_embedding(tokens, model.codebooks)
    fine = None
    out = coarse
    if use_refiner and len(tokens):
        fine = model.refiner(E_r, E_m, coarse)
        out = fine
    wave = decode_tensor(out, model.codec) if len(out) else torch.zeros(0)
    return Extraction(tokens, coarse, fine, audio.Waveform(wave.double().numpy()))


def count_params(model: TSEModel) -> dict[str, int]:
    adapter = count(model.adapter)
    decoder = count(model.decoder)
    refiner = count(model.refiner)
    total = count(model)
    return {"adapter": adapter, "decoder": decoder, "refiner": refiner, "other": total - adapter - decoder - refiner, "total": total}
