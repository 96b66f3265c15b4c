"""Command-line entry point.

Exit codes: 0 on success, 1 for usage problems (bad flags, malformed
config), 2 for runtime failures. All diagnostics go to stderr; every
command that writes an output directory drops a resolved_config.json
snapshot of the settings it actually ran with.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import frontend as fe
from . import synthdata as sd
from . import training as tr
from .inference import RequestError, SynthesisRequest, batch_synthesize
from .model import ConfigError, ModelConfig

log = logging.getLogger("stutter_tts")

RUNTIME_ERRORS = (tr.ConfigurationError, tr.TrainingError, sd.FormatError,
                  sd.UnintelligibleError, fe.ParseError, RequestError,
                  ConfigError, OSError, KeyError, ValueError)


class UsageExit(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageExit(1)


# ---------------------------------------------------------------------------
# config files: strict key=value lines

def parse_config_file(path, known: dict[str, type]) -> dict:
    """Read `key = value` lines ('#' comments); unknown keys and bad
    values are errors."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise tr.ConfigurationError(
                    f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise tr.ConfigurationError(
                    f"{path}:{lineno}: unknown key {key!r}")
            typ = known[key]
            try:
                if typ is bool:
                    if value not in ("true", "false"):
                        raise ValueError(value)
                    out[key] = value == "true"
                elif typ is list:
                    out[key] = [int(v) for v in value.split(",") if v]
                else:
                    out[key] = typ(value)
            except ValueError as e:
                raise tr.ConfigurationError(
                    f"{path}:{lineno}: bad value for {key!r}: {value!r}") from e
    return out


def _field_types(cls):
    kinds = {}
    for f in dataclasses.fields(cls):
        if f.type in ("int", int):
            kinds[f.name] = int
        elif f.type in ("float", float):
            kinds[f.name] = float
        elif f.type in ("str", str):
            kinds[f.name] = str
        elif "list" in str(f.type):
            kinds[f.name] = list
        else:
            kinds[f.name] = str
    return kinds


def _write_snapshot(out_dir, payload):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1, default=str)
        fh.write("\n")


def _default_reference(corpus_dir):
    """Longest fluent utterance of the lexicographically first speaker."""
    corpus_dir = Path(corpus_dir)
    manifest = sd.read_manifest(corpus_dir / "manifest.jsonl")
    speakers = sd.load_speakers(corpus_dir)
    sid = sorted(speakers)[0]
    pool = [e for e in manifest if e.speaker_id == sid and not e.events]
    if not pool:
        raise tr.ConfigurationError("corpus has no fluent utterance to use "
                                    "as a reference")
    entry = max(pool, key=lambda e: e.n_frames)
    return sd.read_features(corpus_dir / entry.feature_path), speakers[sid]


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    cfg = sd.CorpusConfig(
        n_speakers=args.speakers, utts_per_speaker=args.utts_per_speaker,
        stutter_fraction=args.stutter_fraction, seed=args.seed,
        sentence_len_min=args.sentence_len_min,
        sentence_len_max=args.sentence_len_max,
        duration_min=args.duration_min, duration_max=args.duration_max,
        block_min=args.block_min, block_max=args.block_max,
        word_list=(fe.short_word_list(args.word_max_phonemes)
                   if args.word_max_phonemes else None))
    entries = sd.generate_corpus(cfg, args.out)
    _write_snapshot(args.out, {"command": "gen-data",
                               **dataclasses.asdict(cfg)})
    log.info("wrote %d utterances under %s", len(entries), args.out)
    return 0


def _train_config_from(args):
    overrides = {}
    if args.config:
        overrides = parse_config_file(args.config, _field_types(tr.TrainConfig))
    if args.ratio:
        f, s = ev.parse_ratio(args.ratio)
        overrides["ratio_fluent"], overrides["ratio_stuttered"] = f, s
    for flag, key in (("seed", "seed"), ("epochs", "epochs"),
                      ("steps_per_epoch", "steps_per_epoch"),
                      ("learning_rate", "learning_rate")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return tr.TrainConfig(**overrides)


def cmd_train(args):
    cfg = _train_config_from(args)
    model_cfg = None
    if args.model_config:
        fields = parse_config_file(args.model_config,
                                   _field_types(ModelConfig))
        model_cfg = ModelConfig(**fields)
    _write_snapshot(args.out, {
        "command": "train", "corpus": str(args.corpus),
        "train": dataclasses.asdict(cfg),
        "model": dataclasses.asdict(model_cfg) if model_cfg else "auto",
        "resume_from": str(args.resume) if args.resume else None})
    _, rows = tr.train(cfg, model_cfg, args.corpus, args.out,
                       resume_from=args.resume)
    log.info("trained %d steps; metrics in %s/metrics.csv", len(rows),
             args.out)
    return 0


def _load_transcripts(args):
    lines = []
    if args.transcript:
        lines.extend(args.transcript)
    if args.transcripts:
        with open(args.transcripts, encoding="utf-8") as fh:
            lines.extend(line.strip() for line in fh if line.strip())
    if not lines:
        raise tr.ConfigurationError("no transcripts given (use --transcript "
                                    "or --transcripts)")
    return lines


def cmd_synth(args):
    model, _, _, _, _ = tr.load_checkpoint(args.checkpoint)
    corpus = Path(args.corpus)
    lexicon = fe.Lexicon.load(corpus / "lexicon.tsv")
    inventory = fe.PhonemeInventory.load(corpus / "inventory.txt")
    if args.reference:
        reference = sd.read_features(args.reference)
    else:
        reference, _ = _default_reference(corpus)
    transcripts = _load_transcripts(args)
    requests = [SynthesisRequest(
        utt_id=f"synth{i:05d}", transcript=text, reference=reference,
        stop_threshold=args.stop_threshold,
        max_decode_frames=args.max_frames, seed=args.seed * 100_000 + i)
        for i, text in enumerate(transcripts)]
    _write_snapshot(args.out, {
        "command": "synth", "checkpoint": str(args.checkpoint),
        "corpus": str(args.corpus), "n_requests": len(requests),
        "stop_threshold": args.stop_threshold,
        "max_frames": args.max_frames, "seed": args.seed})
    entries = batch_synthesize(model, requests, inventory, lexicon, args.out)
    failed = sum(not e.ok for e in entries)
    log.info("synthesized %d utterances (%d failed) under %s",
             len(entries) - failed, failed, args.out)
    return 0


def cmd_eval_f1(args):
    corpus = Path(args.corpus)
    synth_dir = Path(args.synth_dir)
    lexicon = fe.Lexicon.load(corpus / "lexicon.tsv")
    speakers = sd.load_speakers(corpus)
    sid = args.speaker or sorted(speakers)[0]
    if sid not in speakers:
        raise tr.ConfigurationError(f"unknown speaker {sid!r}")
    rules = ev._corpus_rules(corpus)
    scored = []
    for entry in sd.read_manifest(synth_dir / "manifest.jsonl"):
        if not entry.ok:
            scored.append(ev.ScoredUtterance([], None, 0))
            continue
        text = fe.parse_transcript(entry.transcript)
        feats = sd.read_features(synth_dir / entry.feature_path)
        try:
            detected = sd.detect_stutter_events(feats, speakers[sid],
                                                text.words, lexicon, rules)
        except sd.UnintelligibleError:
            detected = None
        scored.append(ev.ScoredUtterance(list(text.events), detected,
                                         len(text.words)))
    report = ev.score_events(scored)
    print("category,precision,recall,f1,support")
    for c in ev.CATEGORIES:
        s = report.categories[c]
        print(f"{c},{s.precision:.4f},{s.recall:.4f},{s.f1:.4f},{s.support}")
    print(f"# excluded: {report.excluded}")
    return 0


def cmd_ratio_sweep(args):
    cfg = _train_config_from(args)
    model_cfg = None
    if args.model_config:
        fields = parse_config_file(args.model_config,
                                   _field_types(ModelConfig))
        model_cfg = ModelConfig(**fields)
    ratios = [r.strip() for r in args.ratios.split(",") if r.strip()]
    for r in ratios:
        ev.parse_ratio(r)
    sweep = ev.SweepConfig(ratios=ratios, probe_utts=args.probe_utts,
                           probe_seed=args.seed if args.seed is not None
                           else 0,
                           max_decode_frames=args.max_frames)
    _write_snapshot(args.out, {
        "command": "ratio-sweep", "corpus": str(args.corpus),
        "train": dataclasses.asdict(cfg), "sweep": dataclasses.asdict(sweep),
        "model": dataclasses.asdict(model_cfg) if model_cfg else "auto"})
    results = ev.run_ratio_sweep(args.corpus, args.out, sweep, cfg, model_cfg)
    for ratio, (report, _) in results.items():
        line = ",".join(f"{report.f1(c):.4f}" for c in ev.CATEGORIES)
        print(f"{ratio},{line}")
    return 0


def cmd_wilcoxon(args):
    def parse_sample(text):
        try:
            return [float(v) for v in text.split(",") if v.strip()]
        except ValueError as e:
            raise tr.ConfigurationError(f"bad sample {text!r}") from e

    x, y = parse_sample(args.x), parse_sample(args.y)
    w, p = ev.wilcoxon_rank_sum(x, y)
    print(f"W={w:g} p={p:.6g}")
    return 0


def cmd_export_spec(args):
    feats = sd.read_features(args.features)
    fmt = "pgm" if args.out.endswith(".pgm") else "csv"
    sd.export_spectrogram(feats, args.out, format=fmt)
    log.info("wrote %s (%s, %d frames)", args.out, fmt, feats.n_frames)
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def _add_train_flags(p):
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--model-config", help="key=value model config file")
    p.add_argument("--ratio", help="fluent:stuttered sampling ratio, "
                                   "e.g. 90:10")
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--epochs", type=int, default=None, help="epoch count")
    p.add_argument("--steps-per-epoch", type=int, default=None,
                   help="optimizer steps per epoch")
    p.add_argument("--learning-rate", type=float, default=None,
                   help="optimizer learning rate")


def build_parser():
    parser = _Parser(prog="stutter-tts",
                     description="Controllable stutter synthesis pipeline "
                                 "on synthetic feature data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="render a synthetic "
                       "corpus")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--speakers", type=int, default=4, help="speaker count")
    p.add_argument("--utts-per-speaker", type=int, default=50,
                   help="utterances per speaker")
    p.add_argument("--stutter-fraction", type=float, default=0.5,
                   help="fraction of utterances given a stutter event")
    p.add_argument("--sentence-len-min", type=int, default=4,
                   help="minimum words per sentence")
    p.add_argument("--sentence-len-max", type=int, default=12,
                   help="maximum words per sentence")
    p.add_argument("--duration-min", type=int, default=None,
                   help="minimum frames per phoneme (default from rules)")
    p.add_argument("--duration-max", type=int, default=None,
                   help="maximum frames per phoneme (default from rules)")
    p.add_argument("--block-min", type=int, default=None,
                   help="minimum silence frames for a block event")
    p.add_argument("--block-max", type=int, default=None,
                   help="maximum silence frames for a block event")
    p.add_argument("--word-max-phonemes", type=int, default=None,
                   help="restrict the vocabulary to words with at most "
                   "this many phonemes")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a rendered corpus")
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize features from transcripts")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--corpus", required=True,
                   help="corpus directory (lexicon, inventory, reference)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--transcript", action="append",
                   help="transcript to synthesize (repeatable)")
    p.add_argument("--transcripts", help="file with one transcript per line")
    p.add_argument("--reference", help="feature file for the reference "
                                       "speaker (default: from the corpus)")
    p.add_argument("--stop-threshold", type=float, default=0.5,
                   help="stop-head probability threshold")
    p.add_argument("--max-frames", type=int, default=None,
                   help="hard cap on decoded frames")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval-f1", help="detect events in synthesized output "
                       "and report per-type F1")
    p.add_argument("--synth-dir", required=True,
                   help="directory written by synth")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--speaker", help="speaker whose offset to remove "
                                     "(default: first)")
    p.set_defaults(func=cmd_eval_f1)

    p = sub.add_parser("ratio-sweep", help="train and probe across "
                       "fluent:stuttered ratios")
    _add_train_flags(p)
    p.add_argument("--ratios", default="100:0,90:10",
                   help="comma-separated list of F:S ratios")
    p.add_argument("--probe-utts", type=int, default=100,
                   help="probe utterances per ratio")
    p.add_argument("--max-frames", type=int, default=None,
                   help="hard cap on decoded frames per probe")
    p.set_defaults(func=cmd_ratio_sweep)

    p = sub.add_parser("wilcoxon", help="two-sided rank-sum test on two "
                       "comma-separated samples")
    p.add_argument("--x", required=True, help="first sample, e.g. 1,2,3")
    p.add_argument("--y", required=True, help="second sample")
    p.set_defaults(func=cmd_wilcoxon)

    p = sub.add_parser("export-spec", help="convert a feature file to PGM "
                       "or CSV")
    p.add_argument("--features", required=True, help="input .stft file")
    p.add_argument("--out", required=True,
                   help="output path (.pgm or .csv)")
    p.set_defaults(func=cmd_export_spec)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageExit as e:
        return int(e.code)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except tr.ConfigurationError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except RUNTIME_ERRORS as e:
        sys.stderr.write(f"error: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
