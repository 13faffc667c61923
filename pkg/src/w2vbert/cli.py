"""Command-line entry point: ``w2vbert VERB [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import audio
from .config import ConfigKeyError, TrainConfig, load_config

log = logging.getLogger("w2vbert")

VERBS = ("datagen", "pretrain", "diagnose", "ablate", "probe", "gradcheck", "featurize")

SYNOPSIS = """\
usage: w2vbert VERB [--config PATH] [--set KEY=VALUE ...] [--out DIR] [--seed N] [--plots]

verbs:
  datagen     write the synthetic corpus (wav, labels, manifest.tsv)
  featurize   compute log-mel features for a manifest or wav files
  pretrain    joint pretraining; metrics.csv and checkpoints
  diagnose    collapse experiment (diagnose collapse --alpha A)
  ablate      contrastive/masked layer-split ablation with probes
  probe       linear probe of a checkpoint against a random-init encoder
  gradcheck   finite-difference checks of every primitive and a micro model
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable; beats the file)")
    p.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N (applied before --set)")
    p.add_argument("--plots", action="store_true", help="also write SVG plots")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="w2vbert", description="Joint contrastive / masked-prediction speech pretraining")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)

    p = sub.add_parser("datagen", help="write the synthetic corpus")
    _common(p, "runs/corpus")

    p = sub.add_parser("featurize", help="log-mel features as .npy files")
    _common(p, "runs/features")
    p.add_argument("inputs", nargs="+", type=Path, help="manifest.tsv or .wav files")

    p = sub.add_parser("pretrain", help="joint pretraining")
    _common(p, "runs/pretrain")
    p.add_argument("--corpus", type=Path, help="manifest.tsv; default: synthetic corpus from the config")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")

    p = sub.add_parser("diagnose", help="collapse experiment")
    _common(p, "runs/collapse")
    p.add_argument("experiment", choices=["collapse"])
    p.add_argument("--alpha", type=float, action="append", help="diversity weight (repeatable; default 0.5)")
    p.add_argument("--steps", type=int, help="steps per variant (default: total_steps)")
    p.add_argument("--no-removal", action="store_true", help="skip the layer-removal variants")

    p = sub.add_parser("ablate", help="layer-split ablation")
    _common(p, "runs/ablate")
    p.add_argument("--total-layers", type=int, default=4)
    p.add_argument("--splits", default="1,2,3", help="comma-separated contrastive depths")

    p = sub.add_parser("probe", help="linear probe")
    _common(p, "runs/probe")
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks")
    _common(p, "runs/gradcheck")
    return parser


def resolve_config(args) -> TrainConfig:
    if args.config is not None and not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    overrides = ([f"seed = {args.seed}"] if args.seed is not None else []) + list(args.overrides)
    try:
        return load_config(args.config, overrides)
    except ConfigKeyError as exc:
        raise UsageError(str(exc.args[0] if exc.args else exc)) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _prepare_out(args, cfg: TrainConfig) -> Path:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return out


# -------------------------------------------------------------------- verbs

def cmd_datagen(args, cfg: TrainConfig) -> int:
    from .trainer import synthetic_corpus
    out = _prepare_out(args, cfg)
    manifest = audio.write_corpus(synthetic_corpus(cfg), out)
    print(f"wrote {cfg.corpus_utts} utterances, manifest {manifest}")
    return 0


def _wav_inputs(paths) -> list[tuple[str, Path]]:
    items = []
    for p in paths:
        if p.suffix == ".tsv":
            for line in p.read_text().splitlines():
                if line.strip():
                    uid, wav, _ = line.split("\t")
                    items.append((uid, p.parent / wav))
        else:
            items.append((p.stem, p))
    return items


def cmd_featurize(args, cfg: TrainConfig) -> int:
    items = _wav_inputs(args.inputs)
    out = _prepare_out(args, cfg)
    lines = []
    for uid, wav in items:
        feats = audio.compute_logmel(audio.load_wav(wav), cfg.n_mels).frames
        np.save(out / f"{uid}.npy", feats)
        lines.append(f"{uid}\t{uid}.npy\t{feats.shape[0]}\n")
    (out / "features.tsv").write_text("".join(lines))
    print(f"wrote features for {len(items)} utterances to {out}")
    return 0


def cmd_pretrain(args, cfg: TrainConfig) -> int:
    from .trainer import corpus_features, run_pretraining, save_checkpoint, synthetic_corpus
    utts = audio.read_corpus(args.corpus) if args.corpus else synthetic_corpus(cfg)
    out = _prepare_out(args, cfg)

    def show(r):
        log.info("step %d l_p %.4f l_w %.4f l_d %.4f l_m %.4f acc %.3f ppl %.2f",
                 r.step, r.l_p, r.l_w, r.l_d, r.l_m, r.mlm_acc, r.codebook_perplexity)

    state, rows = run_pretraining(cfg, corpus_features(utts), out, resume_from=args.resume, on_row=show)
    save_checkpoint(state, out / "final.ckpt")
    last = rows[-1] if rows else None
    if last:
        print(f"step {last.step}: l_p {last.l_p:.4f}, mlm_acc {last.mlm_acc:.3f}, "
              f"perplexity {last.codebook_perplexity:.2f}")
    print(f"metrics: {out / 'metrics.csv'}  checkpoint: {out / 'final.ckpt'}")
    return 0


def cmd_diagnose(args, cfg: TrainConfig) -> int:
    from .diagnostics import run_collapse_experiment
    from .trainer import synthetic_corpus
    alphas = args.alpha or [0.5]
    steps = args.steps or cfg.total_steps
    out = _prepare_out(args, cfg)
    rep = run_collapse_experiment(cfg, alphas, steps, synthetic_corpus(cfg),
                                  include_removal=not args.no_removal, out_dir=out, plots=args.plots)
    print(rep.to_text(), end="")
    return 0


def cmd_ablate(args, cfg: TrainConfig) -> int:
    from .diagnostics import ablation_splits, run_layer_ablation
    from .trainer import probe_corpus, synthetic_corpus
    try:
        splits = ablation_splits(args.total_layers, [int(s) for s in args.splits.split(",") if s.strip()])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _prepare_out(args, cfg)
    rep = run_layer_ablation(args.total_layers, splits, cfg, synthetic_corpus(cfg), probe_corpus(cfg),
                             out_dir=out, plots=args.plots)
    print(rep.to_text(), end="")
    return 0


def cmd_probe(args, cfg: TrainConfig) -> int:
    from .probe import train_probe
    from .trainer import load_checkpoint, probe_corpus
    state = load_checkpoint(args.checkpoint, cfg)
    out = _prepare_out(args, cfg)
    res = train_probe(state.model, probe_corpus(cfg), cfg.seed)
    (out / "probe.csv").write_text(
        "frame_accuracy,baseline_accuracy,n_train_frames,n_eval_frames\n"
        f"{res.frame_accuracy!r},{res.baseline_accuracy!r},{res.n_train_frames},{res.n_eval_frames}\n")
    print(f"probe accuracy {res.frame_accuracy:.4f}, random-init {res.baseline_accuracy:.4f}, "
          f"gain {res.gain:+.4f} ({res.n_eval_frames} held-out frames)")
    return 0


def cmd_gradcheck(args, cfg: TrainConfig) -> int:
    from .verify import run_gradcheck
    out = _prepare_out(args, cfg)
    rep = run_gradcheck(cfg.seed)
    text = "\n".join(rep.lines()) + f"\n{'passed' if rep.passed else 'FAILED'} in {rep.seconds:.1f} s\n"
    (out / "gradcheck.txt").write_text(text)
    print(text, end="")
    return 0 if rep.passed else 2


COMMANDS = {
    "datagen": cmd_datagen,
    "featurize": cmd_featurize,
    "pretrain": cmd_pretrain,
    "diagnose": cmd_diagnose,
    "ablate": cmd_ablate,
    "probe": cmd_probe,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError("missing verb")
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"error: {exc}\n\n{SYNOPSIS}", file=sys.stderr, end="")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}\n\n{SYNOPSIS}", file=sys.stderr, end="")
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
