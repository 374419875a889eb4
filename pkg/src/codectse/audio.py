"""Waveform I/O, log-mel analysis, SNR-controlled mixing and on-the-fly
training-example assembly from a corpus manifest."""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000


class AudioFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def seconds(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class MelFrames:
    frames: np.ndarray  # T x F, log power
    hop: int
    win: int

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class TrainingExample:
    mixture: Waveform
    reference: Waveform
    target: Waveform
    snr_db: float
    target_speaker_id: str
    target_utt: str = ""
    reference_utt: str = ""
    interferer_utt: str = ""
    interferer_speaker_id: str = ""


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    path: str
    duration: float


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def by_speaker(self) -> dict[str, list[ManifestEntry]]:
        # sorted so that seeded draws do not depend on line order
        groups: dict[str, list[ManifestEntry]] = {}
        for e in sorted(self.entries, key=lambda e: (e.speaker_id, e.utterance_id)):
            groups.setdefault(e.speaker_id, []).append(e)
        return groups


# --------------------------------------------------------------------- wav io


def load_wav(path: str | Path) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with wave.open(str(path), "rb") as wf:
        channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
        if channels != 1:
            raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
        if width != 2:
            raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
        if rate != SAMPLE_RATE:
            raise AudioFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
        raw = wf.readframes(wf.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data, rate)


def save_wav(path: str | Path, w: Waveform) -> None:
    if w.sample_rate != SAMPLE_RATE:
        raise AudioFormatError(f"refusing to write {w.sample_rate} Hz audio")
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())


@functools.lru_cache(maxsize=4096)
def _load_cached(path: str, mtime: float) -> Waveform:
    return load_wav(path)


def load_wav_cached(path: str | Path) -> Waveform:
    p = Path(path)
    return _load_cached(str(p), p.stat().st_mtime)


# ---------------------------------------------------------------------- mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-mel filters spanning 0..Nyquist, shape (n_mels, n_fft//2+1), peak height 1."""
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    bins_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, center, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    up = (bins_hz[None, :] - lo) / (center - lo)
    down = (hi - bins_hz[None, :]) / (hi - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_centers(n_mels: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


@functools.lru_cache(maxsize=8)
def hann(win: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    w.setflags(write=False)
    return w


def num_frames(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    T = num_frames(len(x), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    return x[idx]


def log_mel(w: Waveform, win: int = 512, hop: int = 256, n_mels: int = 80, floor: float = 1e-10) -> MelFrames:
    """Log-mel power frames without padding: T = (len - win) // hop + 1."""
    if len(w) < win:
        raise AudioFormatError(f"waveform of {len(w)} samples is shorter than one window ({win})")
    frames = frame_signal(w.samples, win, hop) * hann(win)
    power = np.abs(np.fft.rfft(frames, n=win, axis=1)) ** 2
    mel = power @ mel_filterbank(n_mels, win, w.sample_rate).T
    return MelFrames(np.log(np.maximum(mel, floor)), hop=hop, win=win)


def causal_pad(w: Waveform, win: int = 512, hop: int = 256) -> Waveform:
    """Prepend win - hop zeros so frame t ends at sample (t + 1) * hop: no lookahead past a hop boundary."""
    return Waveform(np.concatenate([np.zeros(win - hop), w.samples]), w.sample_rate)


# -------------------------------------------------------------------- mixing


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * np.log10(power(signal) / power(noise))


def mix_at_snr(target: Waveform, interferer: Waveform, snr: float) -> tuple[Waveform, Waveform]:
    if len(target) != len(interferer):
        raise ValueError(f"length mismatch: target {len(target)} vs interferer {len(interferer)}")
    p_t, p_i = power(target.samples), power(interferer.samples)
    if p_t <= 0.0 or p_i <= 0.0:
        raise ValueError("mix_at_snr needs non-zero power in both signals")
    gain = np.sqrt(p_t / (p_i * 10.0 ** (snr / 10.0)))
    scaled = interferer.samples * gain
    return Waveform(target.samples + scaled, target.sample_rate), Waveform(scaled, target.sample_rate)


def fit_length(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop when longer than n, tile when shorter."""
    if len(x) > n:
        start = int(rng.integers(0, len(x) - n + 1))
        return x[start : start + n]
    if len(x) < n:
        return np.resize(x, n)
    return x


# ------------------------------------------------------------------ manifest


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields")
        utt, spk, rel, dur = parts
        try:
            duration = float(dur)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: bad duration {dur!r}") from None
        if duration <= 0:
            raise ManifestError(f"{path}:{lineno}: duration must be positive")
        entries.append(ManifestEntry(utt, spk, rel, duration))
    manifest = Manifest(entries, path.parent)
    for e in entries:
        if not manifest.resolve(e).exists():
            raise ManifestError(f"{path}: missing audio {e.path}")
    return manifest


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    lines = [f"{e.utterance_id}\t{e.speaker_id}\t{e.path}\t{e.duration:.4f}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ examples


def make_example(
    manifest: Manifest,
    rng: np.random.Generator,
    snr_lo: float = 0.0,
    snr_hi: float = 5.0,
    ref_seconds: float = 5.0,
) -> TrainingExample:
    groups = manifest.by_speaker()
    speakers = list(groups)
    if len(speakers) < 2:
        raise ManifestError("need at least two speakers to build a mixture")
    if not any(len(v) >= 2 for v in groups.values()):
        raise ManifestError("no speaker has two utterances for a reference")
    while True:
        tgt_spk = speakers[int(rng.integers(len(speakers)))]
        if len(groups[tgt_spk]) >= 2:
            break
    utts = groups[tgt_spk]
    t_idx = int(rng.integers(len(utts)))
    others = [u for i, u in enumerate(utts) if i != t_idx]
    ref_entry = others[int(rng.integers(len(others)))]
    tgt_entry = utts[t_idx]
    int_spks = [s for s in speakers if s != tgt_spk]
    int_spk = int_spks[int(rng.integers(len(int_spks)))]
    int_entry = groups[int_spk][int(rng.integers(len(groups[int_spk])))]

    target = load_wav_cached(manifest.resolve(tgt_entry))
    reference = load_wav_cached(manifest.resolve(ref_entry))
    interferer = load_wav_cached(manifest.resolve(int_entry))

    ref_len = int(round(ref_seconds * reference.sample_rate))
    ref = reference.samples
    if len(ref) > ref_len:
        start = int(rng.integers(0, len(ref) - ref_len + 1))
        ref = ref[start : start + ref_len]
    interf = fit_length(interferer.samples, len(target), rng)
    snr = float(rng.uniform(snr_lo, snr_hi))
    mixture, _ = mix_at_snr(target, Waveform(interf), snr)
    return TrainingExample(
        mixture=mixture,
        reference=Waveform(ref.copy()),
        target=Waveform(target.samples.copy()),
        snr_db=snr,
        target_speaker_id=tgt_spk,
        target_utt=tgt_entry.utterance_id,
        reference_utt=ref_entry.utterance_id,
        interferer_utt=int_entry.utterance_id,
        interferer_speaker_id=int_spk,
    )


def example_at(manifest: Manifest, seed: int, index: int, **kw) -> TrainingExample:
    """Deterministic per (seed, index), independent of call order across workers."""
    return make_example(manifest, np.random.default_rng([seed, index]), **kw)
