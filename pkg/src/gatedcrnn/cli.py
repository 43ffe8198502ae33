"""Command-line entry point: ``gatedcrnn <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
Any subcommand accepts ``--config FILE`` holding ``key=value`` lines whose
keys are flag names; explicit flags on the command line take precedence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import features as fx
from .autodiff import TrainingError
from .dataset import CorpusError, LabelMap, label_matrix, load_corpus
from .evaluation import (ClipSetMismatch, ConfigError, extract_events, format_report,
                         read_events, read_posteriors, score_sed, score_tagging, tag_clip,
                         write_curves, write_events, write_posteriors)
from .model import CheckpointError, ModelRuntimeError, load_checkpoint
from .synth import make_corpus
from .trainer import (FusionError, TrainConfig, checkpoint_posteriors, fuse_epochs, fuse_systems,
                      load_chunks, stack, tagging_scores, train)

log = logging.getLogger("gatedcrnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flags whose default is fixed by the reference architecture and training setup
REFERENCE_DEFAULTS = {"feature", "mode", "pool", "balance", "lr", "filters", "hidden", "blocks"}


class _HelpFormatter(argparse.HelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, max_help_position=32)

    def _get_help_string(self, action):
        text = (action.help or "").replace(" (default: %(default)s)", "")
        if action.default is argparse.SUPPRESS or not action.option_strings:
            return text
        if action.required:
            return f"{text} (required)".strip()
        tag = "reference default" if action.dest in REFERENCE_DEFAULTS else "default"
        return f"{text} ({tag}: %(default)s)".strip()


_fmt = _HelpFormatter


# ------------------------------------------------------------------ commands

def cmd_extract(args) -> int:
    wav_dir, out_dir = Path(args.wav_dir), Path(args.out_dir)
    wavs = sorted(wav_dir.glob("*.wav")) if wav_dir.is_dir() else []
    if not wavs:
        raise DataError(f"no input files in {wav_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    chunks = []
    for wav in wavs:
        try:
            chunk = fx.extract(fx.load_wav(wav), args.feature)
        except (fx.FormatError, OSError) as exc:
            log.warning("skipping %s: %s", wav, exc)
            continue
        fx.save_features(out_dir / f"{wav.stem}.feat", chunk)
        chunks.append(chunk)
    if not chunks:
        raise DataError(f"all {len(wavs)} input files failed to decode")
    fx.save_stats(out_dir / "stats.feat", fx.compute_stats(chunks), args.feature)
    print(f"extracted {len(chunks)} of {len(wavs)} files into {out_dir}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr=args.lr,
                       seed=args.seed, task_mode=args.mode, pool=args.pool,
                       checkpoint_every=args.checkpoint_every, balance=args.balance,
                       val_fraction=args.val_fraction, filters=args.filters,
                       hidden=args.hidden, n_blocks=args.blocks, theta=args.theta)


def cmd_train(args) -> int:
    records = load_corpus(args.manifest, LabelMap.load(args.labels))
    try:
        config = _train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    result = train(records, config, out_dir=out)
    normed, _ = fx.normalize(load_chunks(result.train_records), result.stats, mode="eval")
    scores = tagging_scores(result.params, stack(normed), label_matrix(result.train_records),
                            args.theta)
    (out / "report.txt").write_text(format_report(scores))
    print(f"trained {config.epochs} epochs on {len(result.train_records)} clips; "
          f"{len(result.log.checkpoints)} checkpoints in {out}; train f1={scores.f1:.2f}")
    return EXIT_OK


def _manifest_chunks(manifest, labels):
    label_map = LabelMap.load(labels)
    records = load_corpus(manifest, label_map)
    return label_map, records, load_chunks(records)


def cmd_tag(args) -> int:
    label_map, records, chunks = _manifest_chunks(args.manifest, args.labels)
    if len(args.checkpoints) > 1 and not args.fuse:
        raise UsageError("several checkpoints given; pass --fuse to average them")
    if args.fuse:
        clip = fuse_epochs(args.checkpoints, chunks, k=args.fuse_k, pool=args.pool)
    else:
        clip = checkpoint_posteriors(load_checkpoint(args.checkpoints[0]), chunks,
                                     args.pool).clip.data
    if clip.shape[1] != len(label_map):
        raise DataError(f"model has {clip.shape[1]} classes, label map has {len(label_map)}")
    posts = {r.clip_id: p for r, p in zip(records, clip)}
    write_posteriors(args.out, posts)
    if args.reference:
        refs = {r.clip_id: r.labels for r in load_corpus(args.reference, label_map,
                                                         check_files=False)}
        preds = {k: tag_clip(p, args.theta).tags for k, p in posts.items()}
        scores_path = Path(args.scores or f"{args.out}.scores.txt")
        scores_path.write_text(format_report(score_tagging(preds, refs)))
    print(f"wrote posteriors for {len(posts)} clips to {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    label_map, records, chunks = _manifest_chunks(args.manifest, args.labels)
    ck = load_checkpoint(args.checkpoint)
    post = checkpoint_posteriors(ck, chunks)
    cfg = ck.params.config
    if cfg.n_classes != len(label_map):
        raise DataError(f"model has {cfg.n_classes} classes, label map has {len(label_map)}")
    hop = fx.FRAME_HOP_SECONDS * cfg.n_frames / cfg.out_frames
    duration = float(fx.CLIP_SECONDS)
    track = post.o.data if args.track == "O" else post.o_prime.data
    events = []
    for n, rec in enumerate(records):
        events += extract_events(track[n], hop, theta=args.theta, median_win=args.median,
                                 min_dur_s=args.min_dur, merge_gap_s=args.merge_gap,
                                 clip_duration=duration, clip_id=rec.clip_id)
        if args.emit_curves:
            curves = Path(args.emit_curves)
            curves.mkdir(parents=True, exist_ok=True)
            write_curves(curves / f"{rec.clip_id}.csv", post.o.data[n], post.z_loc.data[n],
                         label_map.names)
    write_events(args.out, events, label_map.names)
    print(f"wrote {len(events)} events for {len(records)} clips to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    label_map = LabelMap.load(args.labels)
    if args.task == "tagging":
        posts = read_posteriors(args.pred)
        refs = {r.clip_id: r.labels for r in load_corpus(args.ref, label_map, check_files=False)}
        preds = {k: tag_clip(p, args.theta).tags for k, p in posts.items()}
        scores = score_tagging(preds, refs)
    else:
        try:
            pred, ref = read_events(args.pred, label_map.names), read_events(args.ref,
                                                                             label_map.names)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        clips = {e.clip_id for e in ref}
        scores = score_sed(pred, ref, segment_s=args.segment,
                           durations={c: args.duration for c in clips})
    report = format_report(scores)
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_fuse(args) -> int:
    fused = fuse_systems([read_posteriors(p) for p in args.posteriors])
    write_posteriors(args.out, fused)
    print(f"fused {len(args.posteriors)} systems over {len(fused)} clips into {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.clips < 1 or args.classes < 1:
        raise UsageError("--clips and --classes must be positive")
    corpus = make_corpus(args.out_dir, n_clips=args.clips, n_classes=args.classes,
                         seed=args.seed)
    print(f"wrote {args.clips} clips, {args.classes} classes, "
          f"{len(corpus.reference)} events to {corpus.root}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gatedcrnn", description="Gated CRNN audio tagging and weakly "
                "supervised sound event detection.", formatter_class=_fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=_fmt)
        sp.add_argument("--config", help="key=value file of flag defaults (flags win)")
        sp.set_defaults(func=func)
        return sp

    sp = add("extract", cmd_extract, "compute log-mel or MFCC features for every WAV in a folder")
    sp.add_argument("wav_dir")
    sp.add_argument("out_dir")
    sp.add_argument("--feature", choices=fx.FEATURE_KINDS, default="log_mel",
                    help="feature type; 240 frames x 64 mel bands, MFCC keeps "
                         f"{fx.N_MFCC} coefficients")

    sp = add("train", cmd_train, "train a gated CRNN from clip-level labels")
    sp.add_argument("manifest")
    sp.add_argument("labels")
    sp.add_argument("--out", default="run", help="directory for checkpoints and the run log")
    sp.add_argument("--mode", choices=["tagging", "sed"], default="tagging",
                    help="tagging pools 2x2 (T'=30), sed pools 1x2 (T'=240)")
    sp.add_argument("--pool", choices=["attention", "mean"], default="attention",
                    help="clip pooling of frame posteriors")
    sp.add_argument("--balance", action=argparse.BooleanOptionalAction, default=True,
                    help="class-balanced mini-batches")
    sp.add_argument("--epochs", type=int, default=10, help="training epochs")
    sp.add_argument("--seed", type=int, default=0, help="seed for init and sampling")
    sp.add_argument("--batch-size", type=int, default=16, help="clips per mini-batch")
    sp.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    sp.add_argument("--filters", type=int, default=64,
                    help="filters per gated conv block")
    sp.add_argument("--hidden", type=int, default=128,
                    help="GRU units per direction")
    sp.add_argument("--blocks", type=int, default=3, help="gated conv blocks")
    sp.add_argument("--checkpoint-every", type=int, default=1, help="epochs between checkpoints")
    sp.add_argument("--val-fraction", type=float, default=0.1,
                    help="share of clips held out by id hash")
    sp.add_argument("--theta", type=float, default=0.5, help="tagging threshold for reports")

    sp = add("tag", cmd_tag, "write clip posteriors for a manifest")
    sp.add_argument("checkpoints", nargs="+")
    sp.add_argument("--manifest", required=True, help="clips to tag")
    sp.add_argument("--labels", required=True, help="label map, one class per line")
    sp.add_argument("--out", default="posteriors.csv", help="posterior CSV to write")
    sp.add_argument("--pool", choices=["attention", "mean"], default=None,
                    help="override the checkpoint's clip pooling")
    sp.add_argument("--fuse", action="store_true",
                    help="average the posteriors of the given checkpoints")
    sp.add_argument("--fuse-k", type=int, default=5,
                    help="number of trailing checkpoints averaged by --fuse")
    sp.add_argument("--theta", type=float, default=0.5, help="tagging threshold")
    sp.add_argument("--reference", help="manifest holding reference labels for scoring")
    sp.add_argument("--scores", help="score report path; None means <out>.scores.txt")

    sp = add("detect", cmd_detect, "extract event intervals from frame posteriors")
    sp.add_argument("checkpoint")
    sp.add_argument("--manifest", required=True, help="clips to analyse")
    sp.add_argument("--labels", required=True, help="label map, one class per line")
    sp.add_argument("--out", default="events.tsv", help="event list to write")
    sp.add_argument("--theta", type=float, default=0.5, help="frame activity threshold")
    sp.add_argument("--median", type=int, default=11, help="median filter window in frames")
    sp.add_argument("--min-dur", type=float, default=0.2, help="shortest kept event, seconds")
    sp.add_argument("--merge-gap", type=float, default=0.2,
                    help="gaps shorter than this are bridged, seconds")
    sp.add_argument("--track", choices=["O", "Oprime"], default="Oprime",
                    help="frame track to threshold: O, or O' = O * Z_loc")
    sp.add_argument("--emit-curves", metavar="DIR",
                    help="also write per-clip frame,class_name,O,Z_loc,O_prime CSVs")

    sp = add("evaluate", cmd_evaluate, "score predictions against references")
    sp.add_argument("pred", help="posterior CSV (tagging) or event TSV (sed)")
    sp.add_argument("ref", help="manifest (tagging) or event TSV (sed)")
    sp.add_argument("--labels", required=True, help="label map, one class per line")
    sp.add_argument("--task", choices=["tagging", "sed"], default="tagging",
                    help="which sub-task to score")
    sp.add_argument("--theta", type=float, default=0.5, help="tagging threshold")
    sp.add_argument("--segment", type=float, default=1.0, help="segment length, seconds")
    sp.add_argument("--duration", type=float, default=10.0, help="clip duration, seconds")
    sp.add_argument("--out", help="also write the report here")

    sp = add("fuse", cmd_fuse, "average clip posteriors of several systems")
    sp.add_argument("posteriors", nargs="+")
    sp.add_argument("--out", default="fused.csv", help="fused posterior CSV to write")

    sp = add("synth", cmd_synth, "generate a synthetic weakly labelled tone corpus")
    sp.add_argument("out_dir")
    sp.add_argument("--clips", type=int, default=40, help="number of 10 s clips")
    sp.add_argument("--classes", type=int, default=4, help="number of tone classes")
    sp.add_argument("--seed", type=int, default=0, help="generator seed")
    return p


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise UsageError(f"unknown command {command}")


def read_config(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"config key '{key}' is not a flag of this command")
        if isinstance(action, argparse.BooleanOptionalAction) or \
                isinstance(action.default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key '{key}' needs a boolean, got '{raw}'")
            value = raw.lower() in ("true", "1", "yes")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise UsageError(f"config key '{key}': {exc}") from exc
            if action.choices and value not in action.choices:
                raise UsageError(f"config key '{key}' must be one of {list(action.choices)}")
        defaults[key] = value
        action.required = False if action.option_strings else action.required
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if known.config and command is not None:
        sub = _subparser(parser, command)
        try:
            _apply_config(sub, read_config(known.config))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"gatedcrnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"gatedcrnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, fx.FormatError, CheckpointError, FusionError,
            ClipSetMismatch, FileNotFoundError) as exc:
        print(f"gatedcrnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, ModelRuntimeError, OSError) as exc:
        print(f"gatedcrnn: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
