"""Command-line entry point: ``wavesep <command> [options]``.

Option precedence, lowest first: desk-scale defaults, ``--full-scale``
defaults, the ``--config`` file (flat ``key=value`` lines, keys spelled like
the long flags with dashes or underscores), explicit flags. Every artifact
records the effective configuration.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio import (SOURCES, SourceSet, TrackDataset, Waveform, convert, list_track_dirs, load_track_dir,
                    random_silence_plan, read_wav, resample, synth_corpus, write_wav)
from .errors import NumericError, WavesepError
from .windows import HOP_S

log = logging.getLogger("wavesep")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# full-scale values, applied by --full-scale below the config file and flags
FULL_SCALE_DEFAULTS = {
    "depth": 6, "channels": 48, "sample_rate": 44100, "mono": False,
    "batch_size": 64, "width": 128,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{number}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _parse_bool(text: str) -> bool:
    lowered = str(text).lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _apply_defaults(sub: argparse.ArgumentParser, values: dict, strict: bool) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help",)}
    updates = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None:
            if strict:
                raise UsageError(f"unknown config key {key!r} for this command")
            continue
        if isinstance(action, argparse.BooleanOptionalAction):
            value = value if isinstance(value, bool) else _parse_bool(value)
        elif isinstance(value, str) and action.type is not None:
            try:
                value = action.type(value)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {value!r}") from exc
        updates[key] = value
    sub.set_defaults(**updates)


def effective_config(args) -> dict[str, object]:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
            if k not in ("func", "config") and v is not None}


def config_lines(args, prefix: str = "") -> str:
    return "".join(f"{prefix}{k}={v}\n" for k, v in effective_config(args).items())


def write_config(path: Path, args) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_lines(args))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    plan = None
    if args.silences:
        plan = random_silence_plan(args.seed, args.tracks, args.duration, per_track=args.silences_per_track,
                                   min_s=args.silence_min, max_s=args.silence_max)
    out = Path(args.out)
    synth_corpus(args.seed, args.tracks, args.duration, args.sample_rate, plan, out,
                 channels=1 if args.mono else 2, stems=not args.unlabeled)
    if plan is not None:
        rows = [f"track{k:03d}\t{SOURCES[src]}\t{start}\t{end}\n"
                for k in sorted(plan) for src, start, end in plan[k]]
        (out / "silences.tsv").write_text("track\tsource\tstart_s\tend_s\n" + "".join(rows))
    write_config(out / "config.txt", args)
    return EXIT_OK


def _model_config(args):
    from .model import ModelConfig
    return ModelConfig(depth=args.depth, input_channels=1 if args.mono else 2,
                       initial_channels=args.channels, use_glu=args.glu, use_bilstm=args.bilstm,
                       rescale_reference=args.rescale_reference if args.rescale else 0.0,
                       sample_rate=args.sample_rate)


def _run_training(args, remix: bool) -> int:
    from .extraction import load_unlabeled_sets
    from .model import load_model, new_model
    from .training import TrainConfig, UnlabeledSets, train

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = TrackDataset.open(args.data, args.sample_rate, args.segment, args.stride, args.mono)
    if len(dataset) == 0:
        raise WavesepError(f"{args.data}: no labelled tracks")
    if args.init:
        model = load_model(args.init)
        if model.config.input_channels != (1 if args.mono else 2):
            raise WavesepError("initial checkpoint channel count does not match --mono/--no-mono")
    else:
        model = new_model(_model_config(args), seed=args.seed)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, loss=args.loss,
                         augment=args.augment, remix_enabled=remix, seed=args.seed,
                         remix_probability=getattr(args, "remix_probability", 0.25),
                         remix_lambda=getattr(args, "remix_lambda", 1e-6))
    unlabeled = None
    if remix:
        sets = load_unlabeled_sets(args.unlabeled)
        unlabeled = UnlabeledSets.prepare(sets, args.sample_rate, args.mono)
        if not unlabeled.available():
            log.warning("no unlabelled excerpts under %s; remix steps will be skipped", args.unlabeled)

    log_path = out / "train.log"
    with open(log_path, "w") as handle:
        handle.write(config_lines(args, "# "))

        def emit(line):
            handle.write(line + "\n")
            handle.flush()
            if args.verbose:
                print(line, file=sys.stderr)

        def checkpoint(stats):
            if args.checkpoint_every and (stats.epoch + 1) % args.checkpoint_every == 0:
                (out / "checkpoints").mkdir(exist_ok=True)
                model.save(out / "checkpoints" / f"epoch_{stats.epoch + 1:04d}.ckpt")

        train(model, dataset, config, unlabeled, log=emit, on_epoch=checkpoint)
    model.save(out / "model.ckpt")
    write_config(out / "config.txt", args)
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, remix=False)


def cmd_remix_train(args) -> int:
    return _run_training(args, remix=True)


def cmd_separate(args) -> int:
    from .model import load_model, separate

    model = load_model(args.checkpoint)
    wave = read_wav(args.input)
    cfg = model.config
    work = convert(wave, cfg.sample_rate, mono=cfg.input_channels == 1)
    if work.channels != cfg.input_channels:
        # mono input to a stereo model: duplicate the channel
        work = Waveform(np.repeat(work.samples, cfg.input_channels, axis=0), work.sample_rate)
    est = separate(model, work)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(SOURCES):
        stem = est.source(i)
        if stem.sample_rate != wave.sample_rate:
            stem = resample(stem, wave.sample_rate)
        samples = stem.samples[:, :wave.frames]
        if samples.shape[1] < wave.frames:
            samples = np.pad(samples, ((0, 0), (0, wave.frames - samples.shape[1])))
        write_wav(out / f"{name}.wav", Waveform(samples, wave.sample_rate))
    write_config(out / "config.txt", args)
    return EXIT_OK


def _load_estimate(path: Path, reference: SourceSet) -> SourceSet:
    stems = []
    for name in SOURCES:
        wave = read_wav(path / f"{name}.wav")
        if wave.sample_rate != reference.sample_rate:
            wave = resample(wave, reference.sample_rate)
        samples = wave.samples[:, :reference.frames]
        if samples.shape[1] < reference.frames:
            samples = np.pad(samples, ((0, 0), (0, reference.frames - samples.shape[1])))
        stems.append(samples)
    return SourceSet(np.stack(stems), reference.sample_rate, name=reference.name)


def cmd_evaluate(args) -> int:
    from .metrics import aggregate, evaluate_track

    est_root, ref_root = Path(args.estimates), Path(args.references)
    track_dirs = list_track_dirs(ref_root)
    if not track_dirs:
        raise WavesepError(f"{ref_root}: no reference tracks")
    reports = []
    for track_dir in track_dirs:
        ref = load_track_dir(track_dir)
        est_dir = est_root / track_dir.name
        if not est_dir.is_dir():
            raise WavesepError(f"{est_dir}: missing estimate directory")
        est = _load_estimate(est_dir, ref)
        reports.append(evaluate_track(est, ref, args.frame, name=track_dir.name))
    text = aggregate(reports).to_json(config=effective_config(args))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train_detector(args) -> int:
    from .detector import DetectorConfig, DetectorTrainConfig, label_windows, new_detector, track_features, train_detector

    tracks = list_track_dirs(args.data)
    if not tracks:
        raise WavesepError(f"{args.data}: no labelled tracks")
    features, labels = [], []
    for track_dir in tracks:
        track = load_track_dir(track_dir)
        features.append(track_features(track.mixture_wave()))
        labels.append(label_windows(track, args.label_threshold))
    model = new_detector(DetectorConfig(width=args.width), seed=args.seed)
    config = DetectorTrainConfig(epochs=args.epochs, batch=args.batch_size, lr=args.lr, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.log", "w") as handle:
        handle.write(config_lines(args, "# "))
        train_detector(features, labels, config, model, log=lambda line: handle.write(line + "\n"))
    model.save(out / "detector.ckpt")
    write_config(out / "config.txt", args)
    return EXIT_OK


def cmd_detect(args) -> int:
    from .detector import load_detector, track_features, window_probabilities

    detector = load_detector(args.checkpoint)
    feats = track_features(read_wav(args.input))
    probs = window_probabilities(detector, feats)
    lines = [config_lines(args, "# "), "window\tstart_s\t" + "\t".join(SOURCES) + "\n"]
    for t in range(probs.shape[1]):
        cells = "\t".join(f"{p:.6f}" for p in probs[:, t])
        lines.append(f"{t}\t{t * HOP_S:.3f}\t{cells}\n")
    text = "".join(lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .detector import load_detector
    from .extraction import calibrate_thresholds

    detector = load_detector(args.checkpoint)
    tracks = [load_track_dir(p) for p in list_track_dirs(args.data)]
    if not tracks:
        raise WavesepError(f"{args.data}: no labelled tracks")
    cal = calibrate_thresholds(detector, tracks, target=args.precision, quiet_db=args.quiet_db,
                               min_selected=args.min_selected)
    cal.settings["config"] = effective_config(args)
    Path(args.out).write_text(cal.to_json())
    return EXIT_OK


def cmd_extract(args) -> int:
    from .detector import load_detector
    from .extraction import ThresholdCalibration, build_unlabeled_sets

    detector = load_detector(args.checkpoint)
    try:
        calibration = ThresholdCalibration.from_json(Path(args.thresholds).read_text())
    except OSError as exc:
        raise WavesepError(f"cannot read {args.thresholds}: {exc}") from exc
    out = Path(args.out)
    manifests = build_unlabeled_sets(detector, calibration, args.corpus, out, workers=args.workers)
    write_config(out / "config.txt", args)
    for name in SOURCES:
        log.info("%s: %d excerpts", name, len(manifests[name]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _training_flags(p):
    p.add_argument("--data", required=True, help="labelled track directories")
    p.add_argument("--out", required=True, help="output directory for log and checkpoints")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--loss", choices=("l1", "mse"), default="l1")
    p.add_argument("--segment", type=float, default=5.0, help="segment length in seconds")
    p.add_argument("--stride", type=float, default=0.5, help="segment hop in seconds")
    p.add_argument("--sample-rate", type=int, default=22050)
    p.add_argument("--mono", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--channels", type=int, default=4, help="channels of the first encoder layer")
    p.add_argument("--glu", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--bilstm", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--rescale", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--rescale-reference", type=float, default=0.1)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--checkpoint-every", type=int, default=0, help="0 keeps only the final checkpoint")
    p.add_argument("--verbose", action="store_true", help="also print epoch lines to stderr")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="flat key=value file; flags override it")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--full-scale", action="store_true",
                        help="full-scale defaults (depth 6, 48 channels, 44.1 kHz stereo, detector width 128)")

    parser = _Parser(prog="wavesep", description="Waveform music source separation toolkit.")
    parser.add_argument("--version", action="version", version=f"wavesep {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic 4-source corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--tracks", type=int, default=4)
    p.add_argument("--duration", type=float, default=30.0)
    p.add_argument("--sample-rate", type=int, default=22050)
    p.add_argument("--mono", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--silences", action="store_true", help="plant silent intervals (listed in silences.tsv)")
    p.add_argument("--silences-per-track", type=int, default=2)
    p.add_argument("--silence-min", type=float, default=6.0)
    p.add_argument("--silence-max", type=float, default=10.0)
    p.add_argument("--unlabeled", action="store_true", help="write mixtures only")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="supervised training")
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("remix-train", parents=[common], help="training with the remix step enabled")
    _training_flags(p)
    p.add_argument("--unlabeled", required=True, help="root holding the D_<source> directories")
    p.add_argument("--remix-probability", type=float, default=0.25)
    p.add_argument("--remix-lambda", type=float, default=1e-6)
    p.set_defaults(func=cmd_remix_train)

    p = sub.add_parser("separate", parents=[common], help="separate one mixture into four WAVs")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", parents=[common], help="SDR/SIR/SAR report for estimate directories")
    p.add_argument("estimates", help="root with one <track>/<source>.wav directory per reference track")
    p.add_argument("references", help="root of reference track directories")
    p.add_argument("--frame", type=float, default=1.0, help="frame length in seconds")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-detector", parents=[common], help="train the silent-source detector")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--label-threshold", type=float, default=-13.0)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("detect", parents=[common], help="per-window silence probabilities")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--out", help="write the table here instead of stdout")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("calibrate", parents=[common], help="per-source detection thresholds")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="labelled calibration tracks")
    p.add_argument("--out", required=True)
    p.add_argument("--precision", type=float, default=0.95)
    p.add_argument("--quiet-db", type=float, default=-20.0)
    p.add_argument("--min-selected", type=int, default=50)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("extract", parents=[common], help="harvest excerpts with a silent source")
    p.add_argument("checkpoint")
    p.add_argument("thresholds")
    p.add_argument("corpus", help="root of track directories holding mixture.wav")
    p.add_argument("out")
    p.set_defaults(func=cmd_extract)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    first = parser.parse_args(argv)
    if not first.full_scale and not first.config:
        return first
    sub = parser._subparsers._group_actions[0].choices[first.command]
    if first.full_scale:
        _apply_defaults(sub, FULL_SCALE_DEFAULTS, strict=False)
    if first.config:
        _apply_defaults(sub, read_config_file(first.config), strict=True)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"wavesep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"wavesep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"wavesep: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WavesepError, OSError) as exc:
        print(f"wavesep: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
