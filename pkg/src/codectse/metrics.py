"""Desk-scale metrics and oracle decoding paths.

Token accuracy stands in for an ASR-based intelligibility score, log-mel L2
and SI-SNR for perceptual quality, and a toy speaker classifier for speaker
similarity. SI-SNR is meaningful only because the toy codec is
frame-synchronous, so generated audio stays time-aligned with the target.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import audio
from .archive import read_archive, write_archive
from .codec import ToyCodec, codec_decode, embed_sum, round_trip
from .decoder import DecodeConfig, coarse_to_embedding, generate
from .model import TSEModel


class MetricError(ValueError):
    pass


def token_accuracy(pred: torch.Tensor, truth: torch.Tensor, n: int) -> np.ndarray:
    if n > pred.shape[1] or n > truth.shape[1]:
        raise MetricError(f"n={n} exceeds grid layers ({pred.shape[1]}, {truth.shape[1]})")
    T = min(len(pred), len(truth))
    if T == 0:
        raise MetricError("empty overlap between token grids")
    return (pred[:T, :n] == truth[:T, :n]).double().mean(0).numpy()


def si_snr(est: np.ndarray, ref: np.ndarray, eps: float = 1e-12) -> float:
    est = getattr(est, "samples", est)
    ref = getattr(ref, "samples", ref)
    T = min(len(est), len(ref))
    if T == 0:
        raise MetricError("empty signal")
    est = est[:T] - est[:T].mean()
    ref = ref[:T] - ref[:T].mean()
    s = (est @ ref) / (ref @ ref + eps) * ref
    e = est - s
    return float(10 * np.log10((s @ s + eps) / (e @ e + eps)))


def latent_mse(pred: torch.Tensor, truth: torch.Tensor) -> float:
    T = min(len(pred), len(truth))
    if T == 0:
        raise MetricError("empty overlap between latent sequences")
    return float(((pred[:T] - truth[:T]) ** 2).mean())


def logmel_l2(est: audio.Waveform, ref: audio.Waveform, win: int = 512, hop: int = 256, n_mels: int = 80) -> float:
    """Root mean square difference of log-mel frames over the aligned span."""
    a = audio.log_mel(est, win, hop, n_mels).frames
    b = audio.log_mel(ref, win, hop, n_mels).frames
    T = min(len(a), len(b))
    return float(np.sqrt(((a[:T] - b[:T]) ** 2).mean()))


# ----------------------------------------------------------------- oracles


def target_n_oracle(target: audio.Waveform, codec: ToyCodec, n: int) -> audio.Waveform:
    """Clean target reconstructed from its first n codec layers."""
    return round_trip(target, codec, n)


@torch.no_grad()
def no_encoder_decode(E_r: torch.Tensor, E_m: torch.Tensor, model: TSEModel, decode: DecodeConfig | None = None):
    """Coarse tokens straight to the codec decoder, refiner bypassed. Returns (waveform, tokens)."""
    tokens = generate(model.decoder, E_r, E_m, model.codebooks, decode)
    if model.cfg.decoder.output_mode == "ref_output":
        tokens = tokens[len(E_r) :]
    if len(tokens) == 0:
        return audio.Waveform(np.zeros(0)), tokens
    return codec_decode(coarse_to_embedding(tokens, model.codebooks), model.codec), tokens


# --------------------------------------------------------- speaker embedder

MIN_SPK_SECONDS = 1.0


def _stats(mel: np.ndarray) -> np.ndarray:
    return np.concatenate([mel.mean(0), mel.std(0)])


class SpeakerEmbedder(nn.Module):
    """Utterance embedding from mean and std of log-mel frames, trained as a speaker classifier."""

    def __init__(self, n_mels: int = 80, dim: int = 64, n_speakers: int = 4):
        super().__init__()
        self.register_buffer("mu", torch.zeros(2 * n_mels))
        self.register_buffer("sd", torch.ones(2 * n_mels))
        self.net = nn.Sequential(nn.Linear(2 * n_mels, 128), nn.ReLU(), nn.Linear(128, dim))
        self.cls = nn.Linear(dim, n_speakers)
        self.n_mels = n_mels

    def forward(self, stats: torch.Tensor) -> torch.Tensor:
        return self.net((stats - self.mu) / self.sd)

    @torch.no_grad()
    def embed(self, w: audio.Waveform) -> np.ndarray:
        if w.seconds < MIN_SPK_SECONDS:
            raise MetricError(f"speaker embedding needs >= {MIN_SPK_SECONDS} s, got {w.seconds:.3f} s")
        mel = audio.log_mel(w, n_mels=self.n_mels).frames
        return self(torch.from_numpy(_stats(mel)).float()[None])[0].double().numpy()


def spk_cos(a: audio.Waveform, b: audio.Waveform, embedder: SpeakerEmbedder) -> float:
    ea, eb = embedder.embed(a), embedder.embed(b)
    return float(ea @ eb / (np.linalg.norm(ea) * np.linalg.norm(eb) + 1e-12))


def train_speaker_embedder(
    manifest: audio.Manifest, steps: int = 300, seed: int = 0, crop_frames: tuple[int, int] = (62, 187)
) -> SpeakerEmbedder:
    """Classifier on random 1-3 s crops of every utterance in the manifest."""
    groups = manifest.by_speaker()
    speakers = sorted(groups)
    mels, labels = [], []
    for s, spk in enumerate(speakers):
        for e in groups[spk]:
            mels.append(audio.log_mel(audio.load_wav_cached(manifest.resolve(e))).frames)
            labels.append(s)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)

    def crop(m):
        n = min(len(m), int(rng.integers(*crop_frames)))
        start = int(rng.integers(0, len(m) - n + 1))
        return _stats(m[start : start + n])

    model = SpeakerEmbedder(mels[0].shape[1], n_speakers=len(speakers))
    allstats = np.stack([_stats(m) for m in mels])
    model.mu.copy_(torch.from_numpy(allstats.mean(0)).float())
    model.sd.copy_(torch.from_numpy(allstats.std(0) + 1e-3).float())
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    for _ in range(steps):
        pick = rng.integers(0, len(mels), 32)
        x = torch.from_numpy(np.stack([crop(mels[i]) for i in pick])).float()
        y = torch.tensor([labels[i] for i in pick])
        loss = nn.functional.cross_entropy(model.cls(model(x)), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def save_embedder(model: SpeakerEmbedder, path: str | Path) -> Path:
    header = {"format_version": 1, "kind": "speaker_embedder", "n_mels": model.n_mels, "n_speakers": model.cls.out_features}
    arrays = {k: v.numpy() for k, v in model.state_dict().items()}
    return write_archive(path, header, arrays)


def load_embedder(path: str | Path) -> SpeakerEmbedder:
    header, arrays, _ = read_archive(path)
    if header.get("kind") != "speaker_embedder":
        raise MetricError(f"{path} is not a speaker embedder")
    model = SpeakerEmbedder(int(header["n_mels"]), n_speakers=int(header["n_speakers"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return model


# ------------------------------------------------------- external metrics


@dataclass
class ExternalMetric:
    """Run ``command + [estimate.wav, reference.wav]`` and parse a JSON object of scores from stdout."""

    command: list[str]
    timeout: float = 600.0

    def __call__(self, est: audio.Waveform, ref: audio.Waveform) -> dict[str, float]:
        with tempfile.TemporaryDirectory() as tmp:
            pe, pr = Path(tmp) / "estimate.wav", Path(tmp) / "reference.wav"
            audio.save_wav(pe, est)
            audio.save_wav(pr, ref)
            proc = subprocess.run(
                [*self.command, str(pe), str(pr)], capture_output=True, text=True, timeout=self.timeout
            )
        if proc.returncode != 0:
            raise MetricError(f"external metric failed ({proc.returncode}): {proc.stderr.strip()[:200]}")
        try:
            scores = json.loads(proc.stdout)
        except json.JSONDecodeError as e:
            raise MetricError(f"external metric did not print JSON: {e}") from None
        if not isinstance(scores, dict):
            raise MetricError("external metric must print a JSON object")
        return {k: float(v) for k, v in scores.items()}
