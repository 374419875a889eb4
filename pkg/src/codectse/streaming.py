"""Chunked streaming extraction.

Per chunk: analyse the new samples, encode them with the chunk-causal
adapter, append them to the accumulated mixture embedding, continue the AR
decoder from all previously generated frames (never beyond the number of
mixture frames consumed so far), refine with the accumulated context and
synthesize only the newly generated frames.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import audio
from .codec import decode_tensor
from .config import StreamConfig
from .decoder import DecodeConfig, DecodingSession, coarse_to_embedding, default_max_frames
from .model import TSEModel, reference_mel


class StreamError(RuntimeError):
    pass


@dataclass
class StreamState:
    model: TSEModel
    cfg: StreamConfig
    E_r: torch.Tensor
    session: DecodingSession
    mix_mel: torch.Tensor
    E_m_accum: torch.Tensor
    residual_samples: np.ndarray
    t: int = 0
    closed: bool = False
    report: list[dict] = field(default_factory=list)

    @property
    def generated(self) -> torch.Tensor:
        return self.session.tokens()

    @property
    def chunk_samples(self) -> int:
        return int(round(self.cfg.chunk_seconds * self.model.cfg.data.sample_rate))


def decode_config(cfg: StreamConfig) -> DecodeConfig:
    return DecodeConfig(mode=cfg.decode_mode, k=cfg.top_k, temperature=cfg.temperature, seed=cfg.seed)


def check_stream_config(model: TSEModel, cfg: StreamConfig) -> int:
    d, a = model.cfg.data, model.cfg.adapter
    samples = cfg.chunk_seconds * d.sample_rate
    if abs(samples - round(samples)) > 1e-9 or int(round(samples)) % d.hop:
        raise StreamError(f"chunk of {samples} samples is not a multiple of hop {d.hop}")
    frames = int(round(samples)) // d.hop
    if a.causal_mode != "chunk_causal" or a.chunk_frames != frames:
        raise StreamError(
            f"streaming needs adapter.causal_mode=chunk_causal with chunk_frames={frames} "
            f"(got {a.causal_mode}, {a.chunk_frames})"
        )
    if model.cfg.decoder.output_mode == "ref_output":
        raise StreamError("ref_output models cannot stream")
    return frames


@torch.no_grad()
def open_stream(reference: audio.Waveform, model: TSEModel, cfg: StreamConfig | None = None) -> StreamState:
    cfg = cfg or StreamConfig()
    check_stream_config(model, cfg)
    d = model.cfg.data
    if len(reference) < d.win:
        raise StreamError(f"reference of {len(reference)} samples is shorter than one window")
    model.eval()
    E_r = model.encode_reference(torch.from_numpy(reference_mel(reference, model.cfg).frames).float())
    session = DecodingSession(model.decoder, model.codebooks, decode_config(cfg))
    session.open(E_r)
    return StreamState(
        model=model,
        cfg=cfg,
        E_r=E_r,
        session=session,
        mix_mel=torch.zeros(0, d.n_mels),
        E_m_accum=torch.zeros(0, model.decoder.dim),
        residual_samples=np.zeros(d.win - d.hop),  # causal framing pad
    )


def _consume(state: StreamState, samples: np.ndarray) -> int:
    """Analyse every complete window in the sample buffer and extend the mixture embedding."""
    d = state.model.cfg.data
    buf = np.concatenate([state.residual_samples, samples])
    n = audio.num_frames(len(buf), d.win, d.hop)
    if n == 0:
        state.residual_samples = buf
        return 0
    mel = audio.log_mel(audio.Waveform(buf[: (n - 1) * d.hop + d.win]), d.win, d.hop, d.n_mels, d.mel_floor)
    state.residual_samples = buf[n * d.hop :]
    state.mix_mel = torch.cat([state.mix_mel, torch.from_numpy(mel.frames).float()])
    # chunk-causal adapter: re-encoding the whole prefix leaves earlier frames unchanged
    E_m = state.model.encode_mixture(state.mix_mel)
    new = E_m[len(state.E_m_accum) :]
    state.E_m_accum = E_m
    state.session.add_mix(new)
    return n


def _emit(state: StreamState, new_tokens: list[torch.Tensor]) -> audio.Waveform:
    if not new_tokens:
        return audio.Waveform(np.zeros(0))
    model = state.model
    coarse = coarse_to_embedding(state.generated, model.codebooks)
    fine = model.refiner(state.E_r, state.E_m_accum, coarse)[-len(new_tokens) :]
    return audio.Waveform(decode_tensor(fine, model.codec).double().numpy())


def _record(state: StreamState, t0: float, n_samples: int, frames_in: int, frames_out: int) -> None:
    state.report.append(
        {
            "t": state.t,
            "chunk_ms": 1000.0 * n_samples / state.model.cfg.data.sample_rate,
            "frames_in": frames_in,
            "frames_out": frames_out,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
    )


@torch.no_grad()
def push_chunk(state: StreamState, chunk: audio.Waveform) -> audio.Waveform:
    if state.closed:
        raise StreamError("stream is closed")
    if len(chunk) != state.chunk_samples:
        raise StreamError(f"chunk has {len(chunk)} samples, expected {state.chunk_samples}")
    t0 = time.perf_counter()
    frames_in = _consume(state, chunk.samples)
    new = state.session.run(limit=state.session.n_mix)
    _record(state, t0, len(chunk), frames_in, len(new))
    state.t += 1
    return _emit(state, new)


@torch.no_grad()
def close_stream(state: StreamState, trailing: audio.Waveform | None = None) -> audio.Waveform:
    if state.closed:
        raise StreamError("stream already closed")
    t0 = time.perf_counter()
    n = 0 if trailing is None else len(trailing)
    if n > state.chunk_samples:
        raise StreamError("trailing audio longer than one chunk")
    frames_in = _consume(state, trailing.samples) if n else 0
    limit = default_max_frames(state.model.decoder, len(state.E_r), state.session.n_mix)
    new = state.session.run(limit=limit)
    state.closed = True
    _record(state, t0, n, frames_in, len(new))
    state.t += 1
    return _emit(state, new)


def stream_waveform(
    model: TSEModel, mixture: audio.Waveform, reference: audio.Waveform, cfg: StreamConfig | None = None
) -> tuple[audio.Waveform, StreamState, list[audio.Waveform]]:
    """Feed a whole mixture through the streaming engine chunk by chunk."""
    state = open_stream(reference, model, cfg)
    step = state.chunk_samples
    x = mixture.samples
    n_full = len(x) // step
    segments = [push_chunk(state, audio.Waveform(x[i * step : (i + 1) * step])) for i in range(n_full)]
    segments.append(close_stream(state, audio.Waveform(x[n_full * step :])))
    out = np.concatenate([s.samples for s in segments]) if segments else np.zeros(0)
    return audio.Waveform(out), state, segments


def write_report(path: str | Path, report: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report:
            fh.write(json.dumps(rec) + "\n")
