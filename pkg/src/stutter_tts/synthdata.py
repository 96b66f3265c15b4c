"""Synthetic "speech" oracle: template renderer, corpus generator, detector.

Phonemes are rendered as runs of fixed per-phoneme template vectors plus a
speaker offset and Gaussian noise. Stutter events change the realization:

- repetition: 2-3 short onset bursts of the word's first phoneme, each
  followed by a short silence gap, before the word itself
- phonation: the word's first phoneme is stretched (3x a clamped base
  duration, so stretched runs always clear the detector threshold)
- block: a long silence inserted immediately before the word

The detector inverts this: frames are classified against the templates,
collapsed into runs, and aligned to the expected fluent phoneme string by
dynamic programming; inserted bursts, overlong first-phoneme runs and long
silences become detected events. On oracle-rendered audio this recovers
the annotated events exactly, which is what makes detector scores on model
output meaningful.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import frontend as fe

FEATURE_MAGIC = b"STFT"
FEATURE_VERSION = 1


class FormatError(ValueError):
    pass


class UnintelligibleError(ValueError):
    """Frames could not be aligned to the transcript."""


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # T x D, float32
    frame_rate: float = 80.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise FormatError(f"feature matrix needs T>=1 rows, got "
                              f"{self.frames.shape}")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class SpeakerProfile:
    speaker_id: str
    offset: np.ndarray  # R^D, bounded |.|inf <= 0.5
    duration_scale: float = 1.0

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float32)
        if np.abs(self.offset).max(initial=0.0) > 0.5:
            raise FormatError("speaker offset exceeds the 0.5 bound")


@dataclass
class RenderRules:
    feature_dim: int = 16
    frame_rate: float = 80.0  # 12.5 ms hop
    template_seed: int = 20260823
    duration_min: int = 5
    duration_max: int = 15
    # phonation stretches 3x a base clamped to >= 10 frames, so a stretched
    # run is always >= 2 * duration_max and fluent runs never are
    phonation_stretch: int = 3
    phonation_min_base: int = 10
    repetition_min: int = 2
    repetition_max: int = 3
    repetition_gap: int = 2
    burst_frames: int = 3
    block_min: int = 8
    block_max: int = 20
    wb_frames: int = 3
    edge_silence_frames: int = 5
    noise_sigma: float = 0.05
    align_cost_fraction: float = 0.25
    min_run_frames: int = 2

    def __post_init__(self):
        self._templates: dict[str, np.ndarray] = {}

    def template(self, symbol: str) -> np.ndarray:
        """Deterministic per-phoneme template; silence symbols are zero."""
        if symbol not in self._templates:
            if symbol in (fe.SILENCE, fe.WORD_BOUNDARY):
                t = np.zeros(self.feature_dim, dtype=np.float32)
            else:
                digest = hashlib.sha256(symbol.encode()).digest()
                sub = int.from_bytes(digest[:8], "little")
                rng = np.random.default_rng([self.template_seed, sub])
                t = rng.normal(size=self.feature_dim).astype(np.float32)
            self._templates[symbol] = t
        return self._templates[symbol]

    def check_separation(self, symbols):
        """Templates must be far enough apart for frame classification."""
        limit = 4.0 * self.noise_sigma * np.sqrt(self.feature_dim)
        temps = [self.template(s) for s in symbols]
        for i in range(len(temps)):
            for j in range(i + 1, len(temps)):
                if symbols[i] in (fe.SILENCE, fe.WORD_BOUNDARY) and \
                        symbols[j] in (fe.SILENCE, fe.WORD_BOUNDARY):
                    continue
                d = float(np.linalg.norm(temps[i] - temps[j]))
                if d <= limit:
                    raise FormatError(
                        f"templates {symbols[i]!r}/{symbols[j]!r} too close "
                        f"({d:.3f} <= {limit:.3f})")

    def phonation_threshold(self, scale: float) -> int:
        return 2 * int(round(self.duration_max * scale))


def render(t: fe.AnnotatedText, sp: SpeakerProfile, lexicon: fe.Lexicon,
           rules: RenderRules, rng: np.random.Generator):
    """Render annotated text to feature frames; returns (features, word
    frame spans)."""
    segments = []  # (symbol, n_frames, word_index or None)

    def base_duration():
        d = int(rng.integers(rules.duration_min, rules.duration_max + 1))
        return max(1, int(round(d * sp.duration_scale)))

    segments.append((fe.SILENCE, rules.edge_silence_frames, None))
    for i, word in enumerate(t.words):
        if i > 0:
            segments.append((fe.WORD_BOUNDARY, rules.wb_frames, None))
        ev = t.event_at(i)
        phonemes = lexicon.phonemes(word)
        if ev is not None and ev.type is fe.StutterType.BLOCK:
            n = int(rng.integers(rules.block_min, rules.block_max + 1))
            segments.append((fe.SILENCE, n, i))
        if ev is not None and ev.type is fe.StutterType.REPETITION:
            k = int(rng.integers(rules.repetition_min, rules.repetition_max + 1))
            for _ in range(k):
                segments.append((phonemes[0], rules.burst_frames, i))
                segments.append((fe.SILENCE, rules.repetition_gap, i))
        for j, ph in enumerate(phonemes):
            if j == 0 and ev is not None and ev.type is fe.StutterType.PHONATION:
                draw = int(rng.integers(rules.duration_min,
                                        rules.duration_max + 1))
                base = max(draw, rules.phonation_min_base)
                dur = rules.phonation_stretch * max(
                    1, int(round(base * sp.duration_scale)))
            else:
                dur = base_duration()
            segments.append((ph, dur, i))
    segments.append((fe.SILENCE, rules.edge_silence_frames, None))

    total = sum(n for _, n, _ in segments)
    mean = np.empty((total, rules.feature_dim), dtype=np.float32)
    spans = [[None, None] for _ in t.words]
    pos = 0
    for sym, n, wi in segments:
        mean[pos:pos + n] = rules.template(sym) + sp.offset
        if wi is not None:
            if spans[wi][0] is None:
                spans[wi][0] = pos
            spans[wi][1] = pos + n
        pos += n
    noise = rng.normal(scale=rules.noise_sigma,
                       size=mean.shape).astype(np.float32)
    feats = FeatureMatrix(mean + noise, frame_rate=rules.frame_rate)
    return feats, [tuple(s) for s in spans]


# ---------------------------------------------------------------------------
# feature file and spectrogram export

def write_features(path, f: FeatureMatrix):
    path = Path(path)
    arr = np.ascontiguousarray(f.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, arr.shape[0],
                             arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path, frame_rate: float = 80.0) -> FeatureMatrix:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError(f"{path}: truncated header")
        version, t, d = struct.unpack("<III", header)
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = fh.read(4 * t * d)
        if len(payload) != 4 * t * d:
            raise FormatError(f"{path}: truncated payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, d)
    return FeatureMatrix(frames.copy(), frame_rate=frame_rate)


def export_spectrogram(f: FeatureMatrix, path, format: str = "pgm"):
    """Write the feature matrix as a P5 PGM (time = columns) or CSV."""
    path = Path(path)
    if format == "pgm":
        lo = float(f.frames.min())
        hi = float(f.frames.max())
        if hi > lo:
            scaled = np.round((f.frames - lo) / (hi - lo) * 255)
        else:
            scaled = np.full_like(f.frames, 128.0)
        img = scaled.astype(np.uint8).T  # rows = feature bins, cols = time
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
            fh.write(img.tobytes())
    elif format == "csv":
        with open(path, "w", encoding="utf-8") as fh:
            for row in f.frames:
                fh.write(",".join(f"{v:.8e}" for v in row) + "\n")
    else:
        raise FormatError(f"unknown spectrogram format {format!r}")


def read_spectrogram_csv(path, frame_rate: float = 80.0) -> FeatureMatrix:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return FeatureMatrix(np.asarray(rows, dtype=np.float32),
                         frame_rate=frame_rate)


# ---------------------------------------------------------------------------
# manifest

@dataclass
class ManifestEntry:
    utt_id: str
    transcript: str
    speaker_id: str
    feature_path: str
    events: list[fe.StutterEvent] = field(default_factory=list)
    word_alignment: list[tuple] = field(default_factory=list)
    n_frames: int = 0
    ok: bool = True
    error: str | None = None

    def to_json(self) -> str:
        obj = {
            "utt_id": self.utt_id,
            "transcript": self.transcript,
            "speaker_id": self.speaker_id,
            "feature_path": self.feature_path,
            "events": [{"type": ev.type.value, "word_index": ev.word_index}
                       for ev in self.events],
            "word_alignment": [list(s) if s[0] is not None else None
                               for s in self.word_alignment],
            "n_frames": self.n_frames,
            "ok": self.ok,
            "error": self.error,
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        obj = json.loads(line)
        events = [fe.StutterEvent(fe.StutterType(e["type"]), e["word_index"])
                  for e in obj["events"]]
        return cls(obj["utt_id"], obj["transcript"], obj["speaker_id"],
                   obj["feature_path"], events,
                   [tuple(s) if s is not None else (None, None)
                    for s in obj["word_alignment"]],
                   obj["n_frames"], obj.get("ok", True), obj.get("error"))


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            if e.transcript:
                parsed = fe.parse_transcript(e.transcript)
                if parsed.events != sorted(e.events, key=lambda v: v.word_index):
                    raise FormatError(
                        f"{e.utt_id}: manifest events disagree with transcript")
            fh.write(e.to_json() + "\n")


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(ManifestEntry.from_json(line))
    return entries


# ---------------------------------------------------------------------------
# corpus generation

@dataclass
class CorpusConfig:
    n_speakers: int = 4
    utts_per_speaker: int = 50
    stutter_fraction: float = 0.5
    type_weights: dict | None = None  # StutterType -> weight
    seed: int = 0
    feature_dim: int = 16
    sentence_len_min: int = 4
    sentence_len_max: int = 12
    word_list: list[str] | None = None
    # optional overrides of the per-phoneme duration range and block
    # silence range; a narrow duration range makes timing predictable for
    # small free-running models, and a raised block floor keeps real
    # blocks clearly longer than one-phoneme hesitations (None keeps the
    # RenderRules default)
    duration_min: int | None = None
    duration_max: int | None = None
    block_min: int | None = None
    block_max: int | None = None


def make_speaker(seed: int, index: int, feature_dim: int) -> SpeakerProfile:
    rng = np.random.default_rng([seed, 2, index])
    offset = rng.uniform(-0.4, 0.4, size=feature_dim)
    return SpeakerProfile(f"spk{index}", offset, duration_scale=1.0)


def generate_corpus(cfg: CorpusConfig, out_dir) -> list[ManifestEntry]:
    """Render a deterministic synthetic corpus under out_dir.

    Writes features/, manifest.jsonl, speakers.json, inventory.txt and
    lexicon.tsv. Each utterance derives its RNG stream from (seed, index)
    only, so generation order and worker count cannot change the output.
    """
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    lexicon = fe.default_lexicon()
    inventory = fe.PhonemeInventory.build(lexicon)
    rules = RenderRules(feature_dim=cfg.feature_dim)
    if cfg.duration_min is not None:
        rules.duration_min = cfg.duration_min
    if cfg.duration_max is not None:
        rules.duration_max = cfg.duration_max
    if cfg.block_min is not None:
        rules.block_min = cfg.block_min
    if cfg.block_max is not None:
        rules.block_max = cfg.block_max
    rules.check_separation(inventory.symbols)
    words_pool = cfg.word_list or fe.default_word_list()
    weights = cfg.type_weights

    speakers = [make_speaker(cfg.seed, i, cfg.feature_dim)
                for i in range(cfg.n_speakers)]
    entries = []
    utt_index = 0
    for sp in speakers:
        for _ in range(cfg.utts_per_speaker):
            rng = np.random.default_rng([cfg.seed, 3, utt_index])
            n_words = int(rng.integers(cfg.sentence_len_min,
                                       cfg.sentence_len_max + 1))
            words = [words_pool[int(rng.integers(len(words_pool)))]
                     for _ in range(n_words)]
            if rng.random() < cfg.stutter_fraction:
                text = fe.insert_random_stutter(words, weights, rng)
            else:
                text = fe.AnnotatedText(words)
            feats, spans = render(text, sp, lexicon, rules, rng)
            utt_id = f"{sp.speaker_id}_{utt_index:06d}"
            rel = f"features/{utt_id}.stft"
            try:
                write_features(out_dir / rel, feats)
            except OSError as e:
                raise OSError(f"writing {out_dir / rel}: {e}") from e
            entries.append(ManifestEntry(
                utt_id=utt_id,
                transcript=fe.render_transcript(text),
                speaker_id=sp.speaker_id,
                feature_path=rel,
                events=list(text.events),
                word_alignment=spans,
                n_frames=feats.n_frames,
            ))
            utt_index += 1

    write_manifest(out_dir / "manifest.jsonl", entries)
    with open(out_dir / "speakers.json", "w", encoding="utf-8") as fh:
        json.dump({sp.speaker_id: {"offset": [float(v) for v in sp.offset],
                                   "duration_scale": sp.duration_scale}
                   for sp in speakers}, fh, sort_keys=True, indent=1)
    inventory.save(out_dir / "inventory.txt")
    lexicon.save(out_dir / "lexicon.tsv")
    with open(out_dir / "corpus_config.json", "w", encoding="utf-8") as fh:
        json.dump({k: v for k, v in dataclasses.asdict(cfg).items()
                   if k != "type_weights"}, fh, sort_keys=True, indent=1,
                  default=str)
    return entries


def load_speakers(corpus_dir) -> dict[str, SpeakerProfile]:
    with open(Path(corpus_dir) / "speakers.json", encoding="utf-8") as fh:
        raw = json.load(fh)
    return {sid: SpeakerProfile(sid, np.asarray(v["offset"]),
                                v["duration_scale"])
            for sid, v in raw.items()}


# ---------------------------------------------------------------------------
# detection

def _classify_frames(frames, sp, rules, symbols):
    """Nearest-template label per frame, with the speaker offset removed."""
    x = frames - sp.offset
    temps = np.stack([rules.template(s) for s in symbols])
    d2 = ((x[:, None, :] - temps[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _runs(labels, symbols, min_run):
    """Collapse frame labels into (symbol, length) runs, absorbing runs
    shorter than min_run into their left neighbor."""
    runs = []
    for lab in labels:
        sym = symbols[lab]
        if runs and runs[-1][0] == sym:
            runs[-1][1] += 1
        else:
            runs.append([sym, 1])
    changed = True
    while changed:
        changed = False
        for i, (sym, n) in enumerate(runs):
            if n < min_run and len(runs) > 1:
                del runs[i]
                if i > 0:
                    runs[i - 1][1] += n
                    if i < len(runs) and runs[i][0] == runs[i - 1][0]:
                        runs[i - 1][1] += runs[i][1]
                        del runs[i]
                else:
                    runs[0][1] += n
                changed = True
                break
    return [(s, n) for s, n in runs]


def _align(runs, expected, full_run: int = 0):
    """Edit-distance DP between run symbols and expected symbols.

    Returns (substitutions + deletions, match) where match[j] is the run
    index matched to expected[j] (None when deleted). Run insertions are
    nearly free; they are where stutter realizations land. Matching a
    phoneme run shorter than full_run frames costs slightly more than
    inserting it, so expected symbols anchor to real duration runs and
    short onset bursts stay insertions — even when a dropped neighbour
    phoneme would otherwise make the burst the cheaper anchor.
    """
    n, m = len(runs), len(expected)
    INS, SUB, DEL = 0.1, 1.0, 1.0
    SHORT = INS + 0.01

    def match_cost(i, j):
        if runs[i][0] != expected[j]:
            return SUB
        if runs[i][0] != fe.SILENCE and runs[i][1] < full_run:
            return SHORT
        return 0.0

    cost = np.full((n + 1, m + 1), np.inf)
    cost[0, 0] = 0.0
    for i in range(n + 1):
        for j in range(m + 1):
            c = cost[i, j]
            if not np.isfinite(c):
                continue
            if i < n and j < m:
                step = c + match_cost(i, j)
                if step < cost[i + 1, j + 1]:
                    cost[i + 1, j + 1] = step
            if i < n and c + INS < cost[i + 1, j]:
                cost[i + 1, j] = c + INS
            if j < m and c + DEL < cost[i, j + 1]:
                cost[i, j + 1] = c + DEL
    # backtrack, preferring matches; only substitutions and deletions
    # count toward the intelligibility cost
    match = [None] * m
    hard_cost = 0.0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            step = match_cost(i - 1, j - 1)
            if np.isclose(cost[i, j], cost[i - 1, j - 1] + step):
                match[j - 1] = i - 1
                hard_cost += step if step == SUB else 0.0
                i, j = i - 1, j - 1
                continue
        if i > 0 and np.isclose(cost[i, j], cost[i - 1, j] + INS):
            i -= 1
            continue
        hard_cost += DEL
        j -= 1
    return hard_cost, match


def detect_stutter_events(f: FeatureMatrix, sp: SpeakerProfile, words,
                          lexicon: fe.Lexicon, rules: RenderRules):
    """Recover stutter events from feature frames for a known transcript.

    Raises UnintelligibleError when the frames cannot be aligned to the
    expected fluent phoneme sequence.
    """
    fluent = fe.AnnotatedText(list(words))
    expected_syms = fe.g2p_symbols(fluent, lexicon, with_events=False)
    # silence and word-boundary share the zero template; fold them
    expected = [fe.SILENCE if s == fe.WORD_BOUNDARY else s
                for s in expected_syms]
    # expected index of each word's first phoneme
    word_first = []
    pos = 1
    for i, word in enumerate(fluent.words):
        if i > 0:
            pos += 1  # boundary silence
        word_first.append(pos)
        pos += len(lexicon.phonemes(word))

    class_syms = sorted({fe.SILENCE, *[s for s in expected
                                       if s != fe.SILENCE]})
    labels = _classify_frames(f.frames, sp, rules, class_syms)
    runs = _runs(labels, class_syms, rules.min_run_frames)

    hard_cost, match = _align(runs, expected, full_run=rules.duration_min)
    if hard_cost > rules.align_cost_fraction * len(expected):
        raise UnintelligibleError(
            f"alignment cost {hard_cost:.1f} over threshold for "
            f"{len(expected)} expected symbols")

    phon_thresh = rules.phonation_threshold(sp.duration_scale)
    events = []
    for wi, j in enumerate(word_first):
        ri = match[j]
        first_ph = expected[j]
        if ri is None:
            # onset missing from the alignment: anchor the search region
            # to the word's earliest aligned phoneme instead
            jn = j + 1
            while jn < len(expected) and expected[jn] != fe.SILENCE:
                if match[jn] is not None:
                    ri = match[jn]
                    break
                jn += 1
            if ri is None:
                continue
        # region: every run between the previous word's last matched
        # phoneme run and this word's matched first-phoneme run; bursts,
        # gaps and block silences all land here
        rprev = -1
        for jp in range(j - 1, -1, -1):
            if expected[jp] != fe.SILENCE and match[jp] is not None:
                rprev = match[jp]
                break
        region = runs[rprev + 1:ri]

        has_burst = any(sym == first_ph and n >= rules.min_run_frames
                        for sym, n in region)
        max_sil = max((n for sym, n in region if sym == fe.SILENCE),
                      default=0)
        if has_burst:
            events.append(fe.StutterEvent(fe.StutterType.REPETITION, wi))
        elif runs[ri][1] >= phon_thresh and runs[ri][0] == first_ph:
            events.append(fe.StutterEvent(fe.StutterType.PHONATION, wi))
        elif max_sil >= rules.block_min:
            events.append(fe.StutterEvent(fe.StutterType.BLOCK, wi))
    return events
