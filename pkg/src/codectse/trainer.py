"""Training orchestration: warm-up / plateau-halving schedule, joint (STE) and
split updates, JSON-lines logging and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import audio
from .archive import read_archive, sha256, write_archive
from .codec import ToyCodec, embed_sum, load_codec
from .config import RunConfig, TrainConfig, from_dict
from .model import Features, TSEModel, extract_features

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def halvings(epoch_history: list[float], patience: int) -> int:
    """Count plateaus: each run of ``patience`` epochs without a new best halves the rate once."""
    best = float("inf")
    bad = 0
    count = 0
    for loss in epoch_history:
        if loss < best:
            best, bad = loss, 0
        else:
            bad += 1
            if bad >= patience:
                count += 1
                bad = 0
    return count


def lr_at(step: int, epoch_history: list[float], cfg: TrainConfig) -> float:
    ramp = min(1.0, step / cfg.warmup_steps)
    return cfg.lr0 * ramp * cfg.halving_factor ** halvings(epoch_history, cfg.plateau_patience_epochs)


def training_losses(model: TSEModel, f: Features, mode: str) -> dict[str, torch.Tensor]:
    return model.losses(f, mode)


def step_joint(model: TSEModel, f: Features) -> dict[str, torch.Tensor]:
    return model.losses(f, "joint")


def step_split(model: TSEModel, f: Features) -> dict[str, torch.Tensor]:
    return model.losses(f, "split")


def check_ground_truth(f: Features, codec: ToyCodec) -> None:
    """Refiner targets must be the full-depth codeword sum of the target tokens."""
    expect = embed_sum(f.target_tokens, codec.codebooks, codec.n_layers)
    if not torch.equal(expect, f.target_fine):
        raise AssertionError("refiner target differs from embed_sum(rvq_encode(target), L)")


def teacher_forced_accuracy(model: TSEModel, feats: list[Features]) -> np.ndarray:
    """Per-layer argmax accuracy under teacher forcing (target frames only, eos row excluded)."""
    hits = np.zeros(model.n_ar)
    total = 0
    model.eval()
    with torch.no_grad():
        for f in feats:
            logits, target, offset = model.teacher_forced(f)
            T = len(f.target_tokens)
            pred = logits[offset : offset + T].argmax(-1)
            hits += (pred == target[offset : offset + T]).sum(0).numpy()
            total += T
    return hits / max(total, 1)


@dataclass
class Trainer:
    cfg: RunConfig
    codec: ToyCodec
    manifest: audio.Manifest
    model: TSEModel | None = None
    log_path: str | Path | None = None
    step: int = 0
    epoch: int = 0
    val_history: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        tc = self.cfg.train
        torch.manual_seed(tc.seed)
        if self.model is None:
            self.model = TSEModel(self.cfg, self.codec)
        params = [p for p in self.model.parameters() if p.requires_grad]
        self.opt = torch.optim.Adam(params, lr=0.0, betas=(0.9, 0.999), eps=1e-8)
        self._drawn = 0
        self.pool = [self._features(tc.seed, i) for i in range(tc.train_pool)] if tc.train_pool else None
        self.val = [self._features(tc.seed + 7919, i) for i in range(tc.val_pool)]
        self._order: list[int] = []
        self._rng = np.random.default_rng(tc.seed)

    def _features(self, seed: int, index: int) -> Features:
        d = self.cfg.data
        ex = audio.example_at(self.manifest, seed, index, snr_lo=d.snr_lo, snr_hi=d.snr_hi, ref_seconds=d.ref_seconds)
        f = extract_features(ex, self.codec, self.cfg)
        check_ground_truth(f, self.codec)
        return f

    def next_batch(self) -> list[Features]:
        bs = self.cfg.train.batch_size
        if self.pool is None:
            batch = [self._features(self.cfg.train.seed, self._drawn + i) for i in range(bs)]
            self._drawn += bs
            return batch
        out = []
        for _ in range(bs):
            if not self._order:
                self._order = list(self._rng.permutation(len(self.pool)))
            out.append(self.pool[self._order.pop()])
        return out

    def train_step(self, batch: list[Features] | None = None) -> dict[str, float]:
        t0 = time.perf_counter()
        batch = batch or self.next_batch()
        self.model.train()
        lr = lr_at(self.step, self.val_history, self.cfg.train)
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.zero_grad()
        sums = {"ce": 0.0, "reg": 0.0, "total": 0.0}
        for f in batch:
            out = self.model.losses(f, self.cfg.train.mode)
            (out["total"] / len(batch)).backward()
            for k in sums:
                sums[k] += float(out[k].detach()) / len(batch)
        if self.cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
        self.opt.step()
        self.step += 1
        rec = {"step": self.step, "epoch": self.epoch, **sums, "lr": lr, "wall_ms": (time.perf_counter() - t0) * 1e3}
        self.history.append(rec)
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        return rec

    @torch.no_grad()
    def validation_loss(self) -> float:
        feats = self.val or (self.pool or [])[:4]
        if not feats:
            return float("nan")
        self.model.eval()
        return float(np.mean([float(self.model.losses(f, self.cfg.train.mode)["total"]) for f in feats]))

    def end_epoch(self) -> float:
        loss = self.validation_loss()
        self.val_history.append(loss)
        self.epoch += 1
        return loss

    def fit(self, epochs: int | None = None, max_steps: int | None = None, until=None) -> list[dict]:
        """Run epochs of ``steps_per_epoch`` updates. ``until(trainer)`` is polled after each epoch."""
        tc = self.cfg.train
        epochs = epochs if epochs is not None else tc.epochs
        for _ in range(epochs):
            for _ in range(tc.steps_per_epoch):
                if max_steps is not None and self.step >= max_steps:
                    return self.history
                self.train_step()
            val = self.end_epoch()
            last = self.history[-1]
            log.info("epoch %d step %d ce %.4f reg %.4f val %.4f lr %.2e", self.epoch, self.step, last["ce"], last["reg"], val, last["lr"])
            if until is not None and until(self):
                break
        return self.history


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: TSEModel, codec_path: str | Path, trainer: Trainer | None = None) -> Path:
    path = Path(path)
    codec_path = Path(codec_path)
    try:
        codec_ref = str(codec_path.resolve().relative_to(path.resolve().parent))
    except ValueError:
        codec_ref = str(codec_path.resolve())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "tse",
        "codec_path": codec_ref,
        "codec_sha256": sha256(codec_path),
        "step": trainer.step if trainer else 0,
        "epoch": trainer.epoch if trainer else 0,
    }
    arrays = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    state = {"val_history": trainer.val_history if trainer else []}
    texts = {"config.yaml": model.cfg.dump(), "state.json": json.dumps(state)}
    return write_archive(path, header, arrays, texts)


def load_checkpoint(path: str | Path, codec: ToyCodec | None = None) -> tuple[TSEModel, dict[str, str]]:
    import yaml

    path = Path(path)
    header, arrays, texts = read_archive(path)
    if header.get("kind") != "tse":
        raise CheckpointError(f"{path} is not a TSE checkpoint")
    if int(header["format_version"]) != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {header['format_version']}")
    cfg: RunConfig = from_dict(yaml.safe_load(texts["config.yaml"]))
    if codec is None:
        cpath = Path(header["codec_path"])
        if not cpath.is_absolute():
            cpath = path.parent / cpath
        if not cpath.exists():
            raise FileNotFoundError(f"codec checkpoint {cpath} referenced by {path} is missing")
        if sha256(cpath) != header["codec_sha256"]:
            raise CheckpointError(f"codec checkpoint {cpath} does not match the recorded hash")
        codec = load_codec(cpath)
    model = TSEModel(cfg, codec)
    state = {k[len("model.") :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model.")}
    model.load_state_dict(state)
    model.eval()
    return model, header
