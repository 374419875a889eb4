"""Ablation matrix: train each row on the same toy corpus and seed, evaluate, write CSV."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import audio
from .codec import ToyCodec, codec_decode, embed_sum
from .config import RunConfig
from .metrics import (
    MIN_SPK_SECONDS,
    SpeakerEmbedder,
    latent_mse,
    logmel_l2,
    no_encoder_decode,
    si_snr,
    spk_cos,
    token_accuracy,
)
from .model import TSEModel, codec_tokens, extract, extract_features, mixture_mel, reference_mel
from .trainer import Trainer

log = logging.getLogger(__name__)


class AblationError(ValueError):
    pass


# row -> (config overrides, evaluation kind)
ROWS: dict[str, tuple[dict[str, object], str]] = {
    "base_n2": ({"decoder.n_ar": 2}, "model"),
    "n1": ({"decoder.n_ar": 1}, "model"),
    "n3": ({"decoder.n_ar": 3}, "model"),
    "ref_output": ({"decoder.output_mode": "ref_output"}, "model"),
    "discrete_io": ({"decoder.io_mode": "discrete"}, "model"),
    "encoder_all": ({"refiner.input_mode": "all"}, "model"),
    "encoder_mix": ({"refiner.input_mode": "mix_only"}, "model"),
    "encoder_ref": ({"refiner.input_mode": "ref_only"}, "model"),
    "no_encoder": ({}, "no_encoder"),
    "target_n": ({}, "oracle"),
    "joint": ({"train.mode": "joint"}, "model"),
    "split": ({"train.mode": "split"}, "model"),
}

METRICS = ["token_acc_l1", "token_acc", "latent_mse", "latent_mse_tf", "logmel_l2", "si_snr_db", "spk_cos"]


def row_config(name: str, base: RunConfig) -> RunConfig:
    if name not in ROWS:
        raise AblationError(f"unknown ablation row {name!r}; choose from {sorted(ROWS)}")
    overrides, _ = ROWS[name]
    cfg = copy.deepcopy(base)
    for key, value in overrides.items():
        section, attr = key.split(".")
        setattr(getattr(cfg, section), attr, value)
    if cfg.decoder.output_mode == "ref_output" and cfg.adapter.causal_mode == "chunk_causal":
        cfg.adapter.causal_mode = "full"
    return cfg.validate()


@dataclass
class MetricReport:
    config: str
    seed: int
    per_utt: list[dict[str, float]] = field(default_factory=list)

    @property
    def means(self) -> dict[str, float]:
        out = {}
        for m in METRICS:
            vals = [u[m] for u in self.per_utt if m in u]
            out[m] = float(np.mean(vals)) if vals else math.nan
        return out


def _target_fine(target: audio.Waveform, codec: ToyCodec, cfg: RunConfig):
    mel = torch.from_numpy(reference_mel(target, cfg).frames).float()
    tokens = codec_tokens(mel, codec)
    return tokens, embed_sum(tokens, codec.codebooks, codec.n_layers)


def _audio_metrics(row: dict, wave: audio.Waveform, ex: audio.TrainingExample, embedder, cfg: RunConfig) -> None:
    d = cfg.data
    if len(wave) >= d.win:
        row["logmel_l2"] = logmel_l2(wave, ex.target, d.win, d.hop, d.n_mels)
        row["si_snr_db"] = si_snr(wave.samples, ex.target.samples)
    else:
        row["logmel_l2"] = row["si_snr_db"] = math.nan
    if embedder is not None:
        ok = wave.seconds >= MIN_SPK_SECONDS and ex.reference.seconds >= MIN_SPK_SECONDS
        row["spk_cos"] = spk_cos(wave, ex.reference, embedder) if ok else math.nan


@torch.no_grad()
def teacher_forced_latent_mse(model: TSEModel, f) -> float:
    """Refiner error with ground-truth coarse input, isolating the refiner's context."""
    E_r, E_m = model.encode_inputs(f)
    coarse = embed_sum(f.target_tokens, model.codebooks, model.n_ar)
    return latent_mse(model.refiner(E_r, E_m, coarse), f.target_fine)


@torch.no_grad()
def evaluate_row(
    name: str,
    model: TSEModel | None,
    codec: ToyCodec,
    cfg: RunConfig,
    examples: list[audio.TrainingExample],
    embedder: SpeakerEmbedder | None,
    seed: int,
) -> MetricReport:
    kind = ROWS[name][1] if name in ROWS else "model"
    n = cfg.decoder.n_ar
    report = MetricReport(name, seed)
    for i, ex in enumerate(examples):
        tgt_tokens, tgt_fine = _target_fine(ex.target, codec, cfg)
        row: dict[str, float] = {"utt": i}
        if kind == "oracle":
            tokens = tgt_tokens[:, :n]
            pred = embed_sum(tgt_tokens, codec.codebooks, n)
            wave = codec_decode(pred, codec)
            row["latent_mse_tf"] = latent_mse(pred, tgt_fine)
        elif kind == "no_encoder":
            model.eval()
            E_r = model.encode_reference(torch.from_numpy(reference_mel(ex.reference, cfg).frames).float())
            E_m = model.encode_mixture(torch.from_numpy(mixture_mel(ex.mixture, cfg).frames).float())
            wave, tokens = no_encoder_decode(E_r, E_m, model)
            pred = embed_sum(tokens, codec.codebooks, n) if len(tokens) else torch.zeros(0, codec.dim)
            row["latent_mse_tf"] = latent_mse(embed_sum(tgt_tokens, codec.codebooks, n), tgt_fine)
        else:
            out = extract(model, ex.mixture, ex.reference)
            tokens, wave = out.tokens, out.waveform
            pred = out.fine if out.fine is not None else out.coarse
            row["latent_mse_tf"] = teacher_forced_latent_mse(model, extract_features(ex, codec, cfg))
        if len(tokens):
            acc = token_accuracy(tokens, tgt_tokens, n)
            row["token_acc_l1"] = float(acc[0])
            row["token_acc"] = float(acc.mean())
            row["latent_mse"] = latent_mse(pred, tgt_fine)
        else:
            row["token_acc_l1"] = row["token_acc"] = 0.0
            row["latent_mse"] = math.nan
        _audio_metrics(row, wave, ex, embedder, cfg)
        report.per_utt.append(row)
    return report


def eval_examples(manifest: audio.Manifest, cfg: RunConfig, n: int, seed: int) -> list[audio.TrainingExample]:
    d = cfg.data
    return [
        audio.example_at(manifest, seed, i, snr_lo=d.snr_lo, snr_hi=d.snr_hi, ref_seconds=d.ref_seconds)
        for i in range(n)
    ]


def _model_key(cfg: RunConfig) -> str:
    return cfg.dump()


def run_ablation(
    rows: list[str],
    manifest: audio.Manifest,
    codec: ToyCodec,
    base: RunConfig,
    seed: int,
    steps: int,
    embedder: SpeakerEmbedder | None = None,
    examples: list[audio.TrainingExample] | None = None,
) -> list[MetricReport]:
    """Train (or reuse) one model per distinct row config and evaluate every row.

    The training pool is the evaluation set: ``base.train.train_pool`` examples
    drawn with ``seed``. Rows whose resolved configs coincide share one model.
    """
    for r in rows:
        if r not in ROWS:
            raise AblationError(f"unknown ablation row {r!r}; choose from {sorted(ROWS)}")
    base = copy.deepcopy(base)
    base.train.seed = seed
    if base.train.train_pool <= 0:
        base.train.train_pool = base.eval.n_examples
    if examples is None:
        examples = eval_examples(manifest, base, base.train.train_pool, seed)
    trained: dict[str, TSEModel] = {}
    reports = []
    for r in rows:
        cfg = row_config(r, base)
        model = None
        if ROWS[r][1] != "oracle":
            key = _model_key(cfg)
            if key not in trained:
                log.info("training row %s for %d steps", r, steps)
                tr = Trainer(cfg, codec, manifest)
                tr.fit(epochs=math.ceil(steps / cfg.train.steps_per_epoch), max_steps=steps)
                trained[key] = tr.model
            model = trained[key]
        reports.append(evaluate_row(r, model, codec, cfg, examples, embedder, seed))
    return reports


# ----------------------------------------------------------------- reports


def write_csv(path: str | Path, reports: list[MetricReport]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "seed", "n_utts", *METRICS])
        for rep in reports:
            m = rep.means
            w.writerow([rep.config, rep.seed, len(rep.per_utt), *(f"{m[k]:.6g}" for k in METRICS)])
    return path


def write_per_utt_csv(path: str | Path, reports: list[MetricReport]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "utt", *METRICS])
        for rep in reports:
            for u in rep.per_utt:
                w.writerow([rep.config, u["utt"], *(f"{u.get(k, math.nan):.6g}" for k in METRICS)])
    return path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class Check:
    name: str
    status: str  # MET | UNMET | INCONCLUSIVE | SKIPPED
    detail: str


def directional_checks(
    reports: list[MetricReport], margin: float = 0.10, refiner_frac: float = 0.8, full_row: str | None = None
) -> list[Check]:
    by = {r.config: r for r in reports}
    checks = []
    full_row = full_row or ("base_n2" if "base_n2" in by else "encoder_all")
    if "no_encoder" in by and full_row in by:
        full = by[full_row]
        a = [u["latent_mse"] for u in full.per_utt]
        b = [u["latent_mse"] for u in by["no_encoder"].per_utt]
        frac = float(np.mean([x < y for x, y in zip(a, b)]))
        status = "MET" if frac >= refiner_frac else "UNMET"
        checks.append(Check("refiner_beats_no_encoder", status, f"fraction={frac:.3f} threshold={refiner_frac}"))
    else:
        checks.append(Check("refiner_beats_no_encoder", "SKIPPED", "rows missing"))
    if "encoder_all" in by:
        base = by["encoder_all"].means["latent_mse_tf"]
        if "encoder_ref" in by:
            ratio = by["encoder_ref"].means["latent_mse_tf"] / base
            status = "MET" if ratio >= 1 + margin else "INCONCLUSIVE"
            checks.append(Check("encoder_ref_degrades", status, f"ratio={ratio:.4f} required>={1 + margin:.2f}"))
        if "encoder_mix" in by:
            ratio = by["encoder_mix"].means["latent_mse_tf"] / base
            status = "MET" if abs(ratio - 1) <= margin else "INCONCLUSIVE"
            checks.append(Check("encoder_mix_matches_all", status, f"ratio={ratio:.4f} required within {margin:.2f}"))
    return checks


def write_checks(path: str | Path, checks: list[Check]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "status", "detail"])
        for c in checks:
            w.writerow([c.name, c.status, c.detail])
    return path
