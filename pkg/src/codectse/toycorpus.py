"""Deterministic multi-speaker toy corpus.

Voiced syllables are harmonic with every partial at a multiple of
sample_rate / hop (62.5 Hz at 16 kHz, hop 256), starting at phase zero at
sample 0, so each hop-aligned frame sees the same phase pattern for the same
pitch. That makes a per-frame codec decoder able to resynthesize the waveform
from magnitude features. Unvoiced syllables are formant-shaped noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, ManifestEntry, Waveform, save_wav, write_manifest

HOP = 256
F0_STEP = SAMPLE_RATE / HOP  # 62.5 Hz

VOWELS = np.array(
    [
        [730.0, 1090.0, 2440.0],
        [270.0, 2290.0, 3010.0],
        [530.0, 1840.0, 2480.0],
        [570.0, 840.0, 2410.0],
        [300.0, 870.0, 2240.0],
    ]
)


@dataclass
class Voice:
    f0_steps: int  # base pitch in units of F0_STEP
    formant_scale: float
    tilt: float
    fricative_hz: float
    breath: float


def speaker_voice(index: int, rng: np.random.Generator) -> Voice:
    return Voice(
        f0_steps=2 + index % 3,
        formant_scale=float(0.8 + 0.45 * ((index * 0.618) % 1.0) + rng.uniform(-0.03, 0.03)),
        tilt=float(rng.uniform(0.6, 1.4)),
        fricative_hz=float(rng.uniform(2500.0, 6000.0)),
        breath=float(rng.uniform(0.005, 0.02)),
    )


def _envelope(n: int) -> np.ndarray:
    ramp = min(n // 4, 384)
    env = np.ones(n)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp :] = r[::-1]
    return env


def _formant_gain(freqs: np.ndarray, formants: np.ndarray) -> np.ndarray:
    g = np.zeros_like(freqs)
    for i, fc in enumerate(formants):
        bw = 80.0 + 0.06 * fc
        g += (0.9**i) * np.exp(-0.5 * ((freqs - fc) / bw) ** 2)
    return g + 0.02


def _voiced(n: int, f0: float, voice: Voice, formants: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    k = np.arange(1, int(7800.0 // f0) + 1)
    amps = _formant_gain(k * f0, formants) * (1.0 / k) ** (0.5 * voice.tilt)
    sig = np.sin(2.0 * np.pi * f0 * np.outer(t, k)) @ amps
    sig /= np.max(np.abs(sig)) + 1e-12
    noise = _shaped_noise(n, formants, rng) * voice.breath
    return sig + noise


def _shaped_noise(n: int, formants: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    out = np.fft.irfft(spec * _formant_gain(freqs, formants), n)
    return out / (np.std(out) + 1e-12)


def synth_utterance(voice: Voice, seconds: float, rng: np.random.Generator) -> np.ndarray:
    total = int(seconds * SAMPLE_RATE) // HOP * HOP
    out = np.zeros(total)
    pos = int(rng.integers(0, 3)) * HOP
    while pos < total:
        n = min(int(rng.integers(6, 19)) * HOP, total - pos)
        if rng.random() < 0.15:
            formants = np.array([voice.fricative_hz, voice.fricative_hz * 1.3])
            seg = 0.15 * _shaped_noise(n, formants, rng)
        else:
            formants = VOWELS[int(rng.integers(len(VOWELS)))] * voice.formant_scale
            f0 = F0_STEP * (voice.f0_steps + int(rng.integers(0, 2)))
            seg = _voiced(n, f0, voice, formants, rng)
        out[pos : pos + n] = seg * _envelope(n) * rng.uniform(0.5, 1.0)
        pos += n + int(rng.integers(0, 4)) * HOP
    return 0.5 * out / (np.max(np.abs(out)) + 1e-12)


def make_toy_corpus(
    out_dir: str | Path,
    speakers: int = 4,
    utts: int = 8,
    seed: int = 1,
    min_seconds: float = 2.0,
    max_seconds: float = 4.0,
) -> Path:
    """Write ``speakers * utts`` WAVs plus ``manifest.tsv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for s in range(speakers):
        voice = speaker_voice(s, rng)
        spk = f"spk{s:02d}"
        for u in range(utts):
            seconds = float(rng.uniform(min_seconds, max_seconds))
            samples = synth_utterance(voice, seconds, rng)
            utt = f"{spk}_u{u:02d}"
            rel = f"wav/{utt}.wav"
            save_wav(out_dir / rel, Waveform(samples))
            entries.append(ManifestEntry(utt, spk, rel, len(samples) / SAMPLE_RATE))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
