"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing
checkpoint, 4 invalid configuration. Failures print one line,
``ErrorClass: message``, to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import audio, config

CHECKPOINT_ENV = "CODECTSE_CHECKPOINT_DIR"

EXIT_RUNTIME, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG = 1, 2, 3, 4


class MissingCheckpoint(FileNotFoundError):
    pass


def resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    root = os.environ.get(CHECKPOINT_ENV)
    if root and not p.is_absolute() and (Path(root) / p).exists():
        return Path(root) / p
    raise MissingCheckpoint(f"checkpoint {path} not found (also searched ${CHECKPOINT_ENV})")


def output_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(CHECKPOINT_ENV)
    if root and not p.is_absolute() and p.parent == Path("."):
        p = Path(root) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise config.ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def run_config(args) -> config.RunConfig:
    overrides = _overrides(args.set)
    if args.config:
        return config.load(args.config, overrides, args.preset)
    cfg = config.preset(args.preset or "desk")
    config.apply_overrides(cfg, overrides)
    return cfg.validate()


def _manifest(args, cfg: config.RunConfig) -> audio.Manifest:
    path = args.manifest or cfg.data.manifest
    if not path:
        raise config.ConfigError("no manifest given (--manifest or data.manifest)")
    return audio.load_manifest(path)


# ----------------------------------------------------------------- commands


def cmd_make_toy_corpus(args) -> int:
    from .toycorpus import make_toy_corpus

    path = make_toy_corpus(args.out, speakers=args.speakers, utts=args.utts, seed=args.seed)
    print(path)
    return 0


def cmd_count_params(args) -> int:
    from .codec import ToyCodec
    from .model import TSEModel, count_params

    cfg = run_config(args)
    c = cfg.codec
    codec = ToyCodec(cfg.data.n_mels, c.dim, c.n_layers, c.codebook_size, c.hidden, cfg.data.win, cfg.data.hop)
    counts = count_params(TSEModel(cfg, codec))
    for k, v in counts.items():
        print(f"{k}\t{v}\t{v / 1e6:.2f}M")
    return 0


def cmd_train_codec(args) -> int:
    from .codec import save_codec, train_codec

    cfg = run_config(args)
    torch.manual_seed(cfg.codec.seed)
    codec = train_codec(_manifest(args, cfg), cfg.codec, cfg.data)
    print(save_codec(codec, output_path(args.out)))
    return 0


def cmd_train_tse(args) -> int:
    from .codec import load_codec
    from .plotting import plot_training
    from .trainer import Trainer, save_checkpoint

    cfg = run_config(args)
    codec_path = resolve_checkpoint(args.codec)
    out = output_path(args.out)
    log_path = out.with_suffix(".log.jsonl")
    log_path.unlink(missing_ok=True)
    tr = Trainer(cfg, load_codec(codec_path), _manifest(args, cfg), log_path=log_path)
    tr.fit(epochs=args.epochs, max_steps=args.steps)
    save_checkpoint(out, tr.model, codec_path, tr)
    plot_training(tr.history, out.with_suffix(".loss.png"))
    print(out)
    return 0


def _load_model(args):
    from .trainer import load_checkpoint

    model, _ = load_checkpoint(resolve_checkpoint(args.checkpoint))
    return model


def cmd_infer(args) -> int:
    from .model import extract

    model = _load_model(args)
    out = extract(model, audio.load_wav(args.mixture), audio.load_wav(args.reference))
    if len(out.waveform) == 0:
        raise RuntimeError("model produced no frames")
    path = output_path(args.out)
    audio.save_wav(path, out.waveform)
    print(path)
    return 0


def cmd_stream(args) -> int:
    from .plotting import plot_stream
    from .streaming import stream_waveform, write_report

    model = _load_model(args)
    cfg = run_config(args)
    scfg = cfg.stream
    if args.chunk_seconds is not None:
        scfg.chunk_seconds = args.chunk_seconds
    wav, state, _ = stream_waveform(model, audio.load_wav(args.mixture), audio.load_wav(args.reference), scfg)
    path = output_path(args.out)
    audio.save_wav(path, wav)
    write_report(path.with_suffix(".timing.jsonl"), state.report)
    plot_stream(state.report, path.with_suffix(".timing.png"))
    print(path)
    return 0


def _embedder(args, cfg, manifest, out_dir: Path):
    from .metrics import load_embedder, save_embedder, train_speaker_embedder

    path = Path(args.embedder) if args.embedder else out_dir / "speaker_embedder.zip"
    if path.exists():
        return load_embedder(path)
    emb = train_speaker_embedder(manifest, steps=cfg.eval.spk_steps, seed=cfg.eval.seed)
    save_embedder(emb, path)
    return emb


def cmd_evaluate(args) -> int:
    from .ablation import directional_checks, eval_examples, evaluate_row, write_csv, write_per_utt_csv
    from .plotting import plot_ablation

    model = _load_model(args)
    cfg = model.cfg
    config.apply_overrides(cfg, _overrides(args.set))
    manifest = _manifest(args, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    embedder = _embedder(args, cfg, manifest, out_dir)
    seed = cfg.train.seed if args.train_pool else cfg.eval.seed
    examples = eval_examples(manifest, cfg, cfg.eval.n_examples, seed)
    name = Path(args.checkpoint).stem
    reports = [evaluate_row(name, model, model.codec, cfg, examples, embedder, seed)]
    if args.no_encoder:
        reports.append(evaluate_row("no_encoder", model, model.codec, cfg, examples, embedder, seed))
    write_csv(out_dir / "metrics.csv", reports)
    write_per_utt_csv(out_dir / "metrics_per_utt.csv", reports)
    if args.no_encoder:
        for c in directional_checks(reports, full_row=name):
            print(f"{c.name}\t{c.status}\t{c.detail}")
    plot_ablation(reports, out_dir)
    print(out_dir / "metrics.csv")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import directional_checks, run_ablation, write_checks, write_csv, write_per_utt_csv
    from .codec import load_codec
    from .plotting import plot_ablation

    cfg = run_config(args)
    manifest = _manifest(args, cfg)
    rows = [r.strip() for r in args.rows.split(",")] if args.rows else list(cfg.eval.rows)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    codec = load_codec(resolve_checkpoint(args.codec))
    embedder = _embedder(args, cfg, manifest, out_dir)
    seed = args.seed if args.seed is not None else cfg.train.seed
    reports = run_ablation(rows, manifest, codec, cfg, seed, args.steps, embedder)
    write_csv(out_dir / "ablation.csv", reports)
    write_per_utt_csv(out_dir / "ablation_per_utt.csv", reports)
    checks = directional_checks(reports)
    write_checks(out_dir / "checks.csv", checks)
    plot_ablation(reports, out_dir)
    for c in checks:
        print(f"{c.name}\t{c.status}\t{c.detail}")
    print(out_dir / "ablation.csv")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--preset", choices=["desk", "paper"])
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="codectse", description="Codec-token target speaker extraction")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-toy-corpus", parents=[common])
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=4)
    s.add_argument("--utts", type=int, default=8)
    s.add_argument("--seed", type=int, default=1)
    s.set_defaults(func=cmd_make_toy_corpus)

    s = sub.add_parser("count-params", parents=[common])
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("train-codec", parents=[common])
    s.add_argument("--manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_codec)

    s = sub.add_parser("train-tse", parents=[common])
    s.add_argument("--manifest")
    s.add_argument("--codec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_tse)

    for name, func in (("infer", cmd_infer), ("stream", cmd_stream)):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--mixture", required=True)
        s.add_argument("--reference", required=True)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out", required=True)
        if name == "stream":
            s.add_argument("--chunk-seconds", type=float)
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", parents=[common])
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--embedder")
    s.add_argument("--train-pool", action="store_true", help="evaluate on the training pool draws")
    s.add_argument("--no-encoder", action="store_true", help="also report the refiner-bypass path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common])
    s.add_argument("--manifest")
    s.add_argument("--codec", required=True)
    s.add_argument("--rows", help="comma-separated row names")
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--embedder")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MissingCheckpoint as e:
        code = EXIT_MISSING
        err = e
    except config.ConfigError as e:
        code = EXIT_CONFIG
        err = e
    except FileNotFoundError as e:
        # a checkpoint that references a missing codec file
        code = EXIT_MISSING if "checkpoint" in str(e) else EXIT_RUNTIME
        err = e
    except (ValueError, RuntimeError, OSError, json.JSONDecodeError) as e:
        code = EXIT_RUNTIME
        err = e
    msg = str(err).splitlines()[0] if str(err) else ""
    print(f"{type(err).__name__}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
