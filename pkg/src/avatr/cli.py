"""Command-line interface: corpus synthesis, training, evaluation,
single-file extraction, and avatar export.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.  All outputs (WAV, CSV, checkpoints, logs) are byte-reproducible
from the same config file and seed.
"""

import argparse
import os
import sys

import numpy as np

from .audio import CorpusManifest, Waveform, read_wav, synth_corpus_generate, write_wav
from .config import model_config_from, resolve_config, train_config_from
from .errors import AvatrError, ConfigError, DataError, NumericalError
from .models import read_checkpoint
from .training import evaluate, run_training
from .validation import as_manifest


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser():
    parser = _Parser(prog="avatr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus + manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--clips", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=int, default=16000, help="sample rate in Hz")
    p.add_argument("--clip-seconds", type=float, default=3.0)
    p.add_argument("--regime", choices=("open", "closed"), default="closed")
    p.add_argument("--noise-per-class", type=int, default=3)
    p.add_argument("--force", action="store_true",
                   help="write into an existing non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model per a config file")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", nargs="+", metavar="KEY=VALUE", default=[],
                   help="config overrides applied after the file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on test episodes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--regime", choices=("open", "closed"), required=True)
    p.add_argument("--mixture", choices=("s+s", "s+n", "s+a"), required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--out", required=True, help="per-episode CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ref-seconds", type=float, default=2.0)
    p.add_argument("--clip-seconds", type=float, default=None,
                   help="crop length; default evaluates full-length clips")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract", help="extract one speaker from one mixture WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mix", required=True, help="mixture WAV")
    p.add_argument("--ref", required=True, help="reference speech WAV")
    p.add_argument("--out", required=True, help="output WAV")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("export-avatars", help="dump avatar vectors per (speaker, clip)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--ref-seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_export_avatars)
    return parser


def cmd_synth(args):
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise DataError(f"output directory {out!r} is not empty (use --force to reuse)")
    corpus = synth_corpus_generate(
        out, args.speakers, args.clips, seed=args.seed, sample_rate=args.rate,
        clip_seconds=args.clip_seconds, regime=args.regime,
        noise_per_class=args.noise_per_class)
    n_speech = sum(len(corpus.manifest.clips(s))
                   for s in {sp for split in ("train", "val", "test")
                             for sp in corpus.manifest.speakers(split)})
    n_noise = sum(len(v) for v in corpus.manifest.noise.values())
    print(f"wrote {n_speech} speech clips, {n_noise} noise clips")
    print(f"manifest: {corpus.manifest_path}")


def cmd_train(args):
    cfg = resolve_config("train", args.config, args.overrides)
    echo = cfg.echo_lines()
    for line in echo:
        print(line)
    manifest_path = cfg.values["data.manifest"]
    if not manifest_path:
        raise ConfigError("data.manifest must point at a corpus manifest")
    manifest = CorpusManifest.load(manifest_path)
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg)

    def on_epoch(epoch, train_loss, val_loss, lr):
        print(f"epoch {epoch} train_loss {train_loss:.4f} "
              f"val_loss {val_loss:.4f} lr {lr:.3e}")

    result = run_training(manifest, model_cfg, train_cfg,
                          checkpoint_path=cfg.values["train.checkpoint"],
                          log_path=cfg.values["train.log"],
                          log_header=echo, on_epoch=on_epoch)
    print(f"best epoch {result.best_epoch} val_loss {result.best_val_loss:.4f}")
    print(f"checkpoint: {cfg.values['train.checkpoint']}")
    print(f"log: {cfg.values['train.log']}")


def _hist_path(out_path):
    root, ext = os.path.splitext(out_path)
    return f"{root}_hist{ext or '.csv'}"


def cmd_eval(args):
    model = read_checkpoint(args.ckpt)
    manifest = as_manifest(args.manifest)
    report = evaluate(manifest, model, args.regime, args.mixture, args.episodes,
                      seed=args.seed, ref_seconds=args.ref_seconds,
                      clip_seconds=args.clip_seconds)
    report.write_episodes_csv(args.out)
    report.write_histogram_csv(_hist_path(args.out))
    print(f"regime={args.regime} mixture={args.mixture} " + report.summary_line()
          + " (spread is standard error of the mean)")
    print(f"episodes csv: {args.out}")
    print(f"histogram csv: {_hist_path(args.out)}")


def cmd_extract(args):
    model = read_checkpoint(args.ckpt)
    rate = model.config.sample_rate
    mixture = read_wav(args.mix, expect_rate=rate)
    reference = read_wav(args.ref, expect_rate=rate)
    estimate = model.extract(mixture.samples, reference.samples)
    write_wav(args.out, Waveform(np.asarray(estimate, dtype=np.float64), rate))
    print(f"wrote {args.out} ({estimate.size} samples at {rate} Hz)")


def cmd_export_avatars(args):
    model = read_checkpoint(args.ckpt)
    rate = model.config.sample_rate
    need = int(round(args.ref_seconds * rate))
    manifest = as_manifest(args.manifest)
    speakers = sorted({sp for split in ("train", "val", "test")
                       for sp in manifest.speakers(split)})
    width = model.config.hidden
    rows = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("speaker_id," + ",".join(f"a{i}" for i in range(width)) + "\n")
        for speaker in speakers:
            for clip in manifest.clips(speaker):
                wave = read_wav(clip, expect_rate=rate)
                crop = wave.samples[:need] if len(wave) > need else wave.samples
                avatar = model.compute_avatar(crop).data
                fh.write(speaker + "," + ",".join(repr(float(v)) for v in avatar) + "\n")
                rows += 1
    print(f"wrote {rows} avatar rows to {args.out}")


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except AvatrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
